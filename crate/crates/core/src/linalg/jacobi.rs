//! One-sided (Hestenes) Jacobi SVD.
//!
//! Slow and simple. Kept as a reference implementation for differential
//! tests against [`super::svd`]; nothing on the hot path calls it.

use super::Matrix;

/// Result of [`jacobi_svd`]: `M = u · diag(sigma) · vt`, sigma descending.
#[derive(Debug, Clone)]
pub struct JacobiSvd {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub vt: Matrix,
    pub sweeps: usize,
}

const MAX_SWEEPS: usize = 100;

/// Thin SVD by cyclic one-sided Jacobi rotations.
///
/// For a wide matrix the decomposition of the transpose is computed and the
/// factors swapped.
pub fn jacobi_svd(m: &Matrix) -> JacobiSvd {
    if m.rows() < m.cols() {
        let t = jacobi_svd(&m.transpose());
        return JacobiSvd {
            u: t.vt.transpose(),
            sigma: t.sigma,
            vt: t.u.transpose(),
            sweeps: t.sweeps,
        };
    }

    let (rows, cols) = m.shape();
    // Work on columns: w[j] is column j of M·V.
    let mut w: Vec<Vec<f64>> = (0..cols).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut sweeps = 0;
    loop {
        sweeps += 1;
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha: f64 = w[p].iter().map(|x| x * x).sum();
                let beta: f64 = w[q].iter().map(|x| x * x).sum();
                let gamma: f64 = w[p].iter().zip(&w[q]).map(|(a, b)| a * b).sum();
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let (a, b) = (w[p][i], w[q][i]);
                    w[p][i] = c * a - s * b;
                    w[q][i] = s * a + c * b;
                }
                for i in 0..cols {
                    let (a, b) = (v[p][i], v[q][i]);
                    v[p][i] = c * a - s * b;
                    v[q][i] = s * a + c * b;
                }
            }
        }
        if !rotated || sweeps >= MAX_SWEEPS {
            break;
        }
    }

    let norms: Vec<f64> = w
        .iter()
        .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let mut u = Matrix::zeros(rows, cols);
    let mut vt = Matrix::zeros(cols, cols);
    let mut sigma = Vec::with_capacity(cols);
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        sigma.push(s);
        if s > 0.0 {
            for i in 0..rows {
                u[(i, dst)] = w[src][i] / s;
            }
        }
        for i in 0..cols {
            vt[(dst, i)] = v[src][i];
        }
    }
    JacobiSvd {
        u,
        sigma,
        vt,
        sweeps,
    }
}
