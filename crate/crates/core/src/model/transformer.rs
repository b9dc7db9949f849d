//! Decoder-only transformer: pre-norm blocks with causal multi-head
//! attention and a ReLU MLP. Normalisation is RMS without a learned gain.
//!
//! Projections follow `y = W·x` with `W` stored `out × in`, so adapter
//! deltas `B·A` add directly to the stored matrix.

use super::vocab::{Token, VOCAB_SIZE};
use super::{ModelError, WeightSpec};
use crate::linalg::{dot, Matrix};

pub(crate) const EMBED: usize = 0;
pub(crate) const POS: usize = 1;
pub(crate) const UNEMBED: usize = 2;
const FIRST_LAYER: usize = 3;
const PER_LAYER: usize = 6;
const PARTS: [&str; PER_LAYER] = ["q", "k", "v", "o", "mlp_in", "mlp_out"];
const Q: usize = 0;
const K: usize = 1;
const V: usize = 2;
const O: usize = 3;
const MLP_IN: usize = 4;
const MLP_OUT: usize = 5;

const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerShape {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
}

fn idx(layer: usize, part: usize) -> usize {
    FIRST_LAYER + PER_LAYER * layer + part
}

impl TransformerShape {
    pub(crate) fn validate(&self) -> Result<(), ModelError> {
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 || self.d_ff == 0 {
            return Err(ModelError::InvalidConfig("transformer sizes must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.max_seq < 2 {
            return Err(ModelError::InvalidConfig("max_seq must be at least 2".into()));
        }
        Ok(())
    }

    pub(crate) fn weight_specs(&self) -> Vec<WeightSpec> {
        let d = self.d_model;
        let mut specs = vec![
            WeightSpec::new("embed", VOCAB_SIZE, d),
            WeightSpec::new("pos", self.max_seq, d),
            WeightSpec::new("unembed", VOCAB_SIZE, d),
        ];
        for l in 0..self.layers {
            for (p, part) in PARTS.iter().enumerate() {
                let (rows, cols) = match p {
                    MLP_IN => (self.d_ff, d),
                    MLP_OUT => (d, self.d_ff),
                    _ => (d, d),
                };
                specs.push(WeightSpec::new(format!("layer{l}.{part}"), rows, cols));
            }
        }
        specs
    }

    /// Weight indices of the Q, K, V and O projections.
    pub(crate) fn adapter_targets(&self) -> Vec<usize> {
        (0..self.layers)
            .flat_map(|l| [Q, K, V, O].map(|p| idx(l, p)))
            .collect()
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

fn rms_norm(x: &[f64]) -> (Vec<f64>, f64) {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + NORM_EPS).sqrt();
    (x.iter().map(|v| v * inv).collect(), inv)
}

/// Gradient through `y = x·inv(x)` given the normalised output `y`.
fn rms_norm_back(y: &[f64], inv: f64, dy: &[f64]) -> Vec<f64> {
    let mean = dot(dy, y) / y.len() as f64;
    dy.iter().zip(y).map(|(g, v)| inv * (g - v * mean)).collect()
}

fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        total += *s;
    }
    for s in scores.iter_mut() {
        *s /= total;
    }
}

fn add_in_place(x: &mut [f64], y: &[f64]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

/// Per-layer key/value rows for incremental decoding.
pub(crate) struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl KvCache {
    pub(crate) fn new(shape: &TransformerShape) -> Self {
        let cap = shape.max_seq * shape.d_model;
        Self {
            keys: (0..shape.layers).map(|_| Vec::with_capacity(cap)).collect(),
            values: (0..shape.layers).map(|_| Vec::with_capacity(cap)).collect(),
            len: 0,
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.len
    }
}

/// Feeds one token at the next position and returns the logits it produces.
pub(crate) fn step(shape: &TransformerShape, w: &[&Matrix], cache: &mut KvCache, token: Token) -> Vec<f64> {
    let pos = cache.len;
    let dh = shape.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut x: Vec<f64> = w[EMBED]
        .row(token as usize)
        .iter()
        .zip(w[POS].row(pos))
        .map(|(e, p)| e + p)
        .collect();
    let mut scores = vec![0.0; pos + 1];
    for l in 0..shape.layers {
        let (h, _) = rms_norm(&x);
        let q = w[idx(l, Q)].mul_vec(&h);
        cache.keys[l].extend(w[idx(l, K)].mul_vec(&h));
        cache.values[l].extend(w[idx(l, V)].mul_vec(&h));
        let (keys, values) = (&cache.keys[l], &cache.values[l]);
        let d = shape.d_model;
        let mut ctx = vec![0.0; d];
        for head in 0..shape.heads {
            let cols = head * dh..(head + 1) * dh;
            for (s, score) in scores.iter_mut().enumerate() {
                *score = dot(&q[cols.clone()], &keys[s * d..][cols.clone()]) * scale;
            }
            softmax_in_place(&mut scores);
            for (s, p) in scores.iter().enumerate() {
                for (c, v) in ctx[cols.clone()].iter_mut().zip(&values[s * d..][cols.clone()]) {
                    *c += p * v;
                }
            }
        }
        add_in_place(&mut x, &w[idx(l, O)].mul_vec(&ctx));
        let (h2, _) = rms_norm(&x);
        let mut u = w[idx(l, MLP_IN)].mul_vec(&h2);
        u.iter_mut().for_each(|v| *v = v.max(0.0));
        add_in_place(&mut x, &w[idx(l, MLP_OUT)].mul_vec(&u));
    }
    cache.len += 1;
    w[UNEMBED].mul_vec(&rms_norm(&x).0)
}

struct LayerTrace {
    h1: Matrix,
    inv1: Vec<f64>,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Attention weights per head, `T×T`, zero above the diagonal.
    probs: Vec<Matrix>,
    ctx: Matrix,
    h2: Matrix,
    inv2: Vec<f64>,
    pre_act: Matrix,
    act: Matrix,
}

/// Activations kept from a full-sequence forward pass for backprop.
pub(crate) struct Trace {
    layers: Vec<LayerTrace>,
    hf: Matrix,
    invf: Vec<f64>,
}

fn mm(a: &Matrix, b: &Matrix) -> Matrix {
    a.matmul(b).expect("internal shapes agree")
}

fn mm_t(a: &Matrix, b: &Matrix) -> Matrix {
    a.matmul_t(b).expect("internal shapes agree")
}

fn t_mm(a: &Matrix, b: &Matrix) -> Matrix {
    a.t_matmul(b).expect("internal shapes agree")
}

fn norm_rows(x: &Matrix) -> (Matrix, Vec<f64>) {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut invs = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let (y, inv) = rms_norm(x.row(r));
        out.row_mut(r).copy_from_slice(&y);
        invs.push(inv);
    }
    (out, invs)
}

fn norm_rows_back(y: &Matrix, invs: &[f64], dy: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        out.row_mut(r)
            .copy_from_slice(&rms_norm_back(y.row(r), invs[r], dy.row(r)));
    }
    out
}

/// Full-sequence forward pass. Returns `T×V` logits and the trace.
pub(crate) fn forward_trace(shape: &TransformerShape, w: &[&Matrix], tokens: &[Token]) -> (Matrix, Trace) {
    let t_len = tokens.len();
    let d = shape.d_model;
    let dh = shape.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut x = Matrix::from_fn(t_len, d, |t, c| {
        w[EMBED][(tokens[t] as usize, c)] + w[POS][(t, c)]
    });
    let mut layers = Vec::with_capacity(shape.layers);
    for l in 0..shape.layers {
        let (h1, inv1) = norm_rows(&x);
        let q = mm_t(&h1, w[idx(l, Q)]);
        let k = mm_t(&h1, w[idx(l, K)]);
        let v = mm_t(&h1, w[idx(l, V)]);
        let mut ctx = Matrix::zeros(t_len, d);
        let mut probs = Vec::with_capacity(shape.heads);
        for head in 0..shape.heads {
            let cols = head * dh..(head + 1) * dh;
            let mut p = Matrix::zeros(t_len, t_len);
            for t in 0..t_len {
                let row = &mut p.row_mut(t)[..=t];
                for (s, score) in row.iter_mut().enumerate() {
                    *score = dot(&q.row(t)[cols.clone()], &k.row(s)[cols.clone()]) * scale;
                }
                softmax_in_place(row);
                for s in 0..=t {
                    let ps = p[(t, s)];
                    for c in cols.clone() {
                        ctx[(t, c)] += ps * v[(s, c)];
                    }
                }
            }
            probs.push(p);
        }
        x = x.add(&mm_t(&ctx, w[idx(l, O)])).expect("same shape");
        let (h2, inv2) = norm_rows(&x);
        let pre_act = mm_t(&h2, w[idx(l, MLP_IN)]);
        let mut act = pre_act.clone();
        act.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        x = x.add(&mm_t(&act, w[idx(l, MLP_OUT)])).expect("same shape");
        layers.push(LayerTrace {
            h1,
            inv1,
            q,
            k,
            v,
            probs,
            ctx,
            h2,
            inv2,
            pre_act,
            act,
        });
    }
    let (hf, invf) = norm_rows(&x);
    let logits = mm_t(&hf, w[UNEMBED]);
    (logits, Trace { layers, hf, invf })
}

/// Backpropagates `dlogits` and returns weight gradients for the indices in
/// `wanted` (in the same order). Embedding tables are never differentiated.
pub(crate) fn backward(
    shape: &TransformerShape,
    w: &[&Matrix],
    trace: &Trace,
    dlogits: &Matrix,
    wanted: &[usize],
) -> Vec<Matrix> {
    let mut grads: Vec<Option<Matrix>> = vec![None; w.len()];
    let want = |i: usize| wanted.contains(&i);
    let dh = shape.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let t_len = dlogits.rows();

    let mut dx = norm_rows_back(&trace.hf, &trace.invf, &mm(dlogits, w[UNEMBED]));
    for l in (0..shape.layers).rev() {
        let lt = &trace.layers[l];
        // MLP block.
        if want(idx(l, MLP_OUT)) {
            grads[idx(l, MLP_OUT)] = Some(t_mm(&dx, &lt.act));
        }
        let mut du = mm(&dx, w[idx(l, MLP_OUT)]);
        for (g, u) in du.as_mut_slice().iter_mut().zip(lt.pre_act.as_slice()) {
            if *u <= 0.0 {
                *g = 0.0;
            }
        }
        if want(idx(l, MLP_IN)) {
            grads[idx(l, MLP_IN)] = Some(t_mm(&du, &lt.h2));
        }
        let dh2 = mm(&du, w[idx(l, MLP_IN)]);
        dx = dx.add(&norm_rows_back(&lt.h2, &lt.inv2, &dh2)).expect("same shape");

        // Attention block.
        if want(idx(l, O)) {
            grads[idx(l, O)] = Some(t_mm(&dx, &lt.ctx));
        }
        let dctx = mm(&dx, w[idx(l, O)]);
        let d = shape.d_model;
        let mut dq = Matrix::zeros(t_len, d);
        let mut dk = Matrix::zeros(t_len, d);
        let mut dv = Matrix::zeros(t_len, d);
        for head in 0..shape.heads {
            let cols = head * dh..(head + 1) * dh;
            let p = &lt.probs[head];
            let mut dp = vec![0.0; t_len];
            for t in 0..t_len {
                let g = &dctx.row(t)[cols.clone()];
                for s in 0..=t {
                    dp[s] = dot(g, &lt.v.row(s)[cols.clone()]);
                    let pts = p[(t, s)];
                    for (c, gc) in cols.clone().zip(g) {
                        dv[(s, c)] += pts * gc;
                    }
                }
                let mean: f64 = (0..=t).map(|s| p[(t, s)] * dp[s]).sum();
                for s in 0..=t {
                    let ds = p[(t, s)] * (dp[s] - mean) * scale;
                    for c in cols.clone() {
                        dq[(t, c)] += ds * lt.k[(s, c)];
                        dk[(s, c)] += ds * lt.q[(t, c)];
                    }
                }
            }
        }
        for (part, g) in [(Q, &dq), (K, &dk), (V, &dv)] {
            if want(idx(l, part)) {
                grads[idx(l, part)] = Some(t_mm(g, &lt.h1));
            }
        }
        if l > 0 {
            let dh1 = mm(&dq, w[idx(l, Q)])
                .add(&mm(&dk, w[idx(l, K)]))
                .and_then(|m| m.add(&mm(&dv, w[idx(l, V)])))
                .expect("same shape");
            dx = dx.add(&norm_rows_back(&lt.h1, &lt.inv1, &dh1)).expect("same shape");
        }
    }
    wanted
        .iter()
        .map(|&i| grads[i].take().expect("only layer projections can be differentiated"))
        .collect()
}
