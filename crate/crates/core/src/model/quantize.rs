//! Simulated low-precision weights via per-row quantize-dequantize.

use crate::linalg::Matrix;

/// Rounds every row onto the grid `{-qmax..qmax}·scale` with
/// `scale = max|row| / qmax` and maps it back to floats. All-zero rows are
/// left as they are.
pub fn quantize_rows(m: &Matrix, qmax: f64) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let scale = row.iter().fold(0.0f64, |acc, v| acc.max(v.abs())) / qmax;
        if scale == 0.0 {
            continue;
        }
        for v in row.iter_mut() {
            *v = (*v / scale).round().clamp(-qmax, qmax) * scale;
        }
    }
    out
}
