//! Fixed-context MLP language model: the embeddings of the last `context`
//! tokens (left-padded with BOS) are concatenated and fed through two ReLU
//! layers before the unembedding.

use super::vocab::{Token, BOS, VOCAB_SIZE};
use super::{ModelError, WeightSpec};
use crate::linalg::Matrix;

const EMBED: usize = 0;
const FC1: usize = 1;
const FC2: usize = 2;
const UNEMBED: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpShape {
    pub context: usize,
    pub d_embed: usize,
    pub hidden: usize,
}

impl MlpShape {
    pub(crate) fn validate(&self) -> Result<(), ModelError> {
        if self.context == 0 || self.d_embed == 0 || self.hidden == 0 {
            return Err(ModelError::InvalidConfig("MLP sizes must be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn weight_specs(&self) -> Vec<WeightSpec> {
        vec![
            WeightSpec::new("embed", VOCAB_SIZE, self.d_embed),
            WeightSpec::new("fc1", self.hidden, self.context * self.d_embed),
            WeightSpec::new("fc2", self.hidden, self.hidden),
            WeightSpec::new("unembed", VOCAB_SIZE, self.hidden),
        ]
    }

    pub(crate) fn adapter_targets(&self) -> Vec<usize> {
        vec![FC1, FC2]
    }

    fn features(&self, w: &[&Matrix], tokens: &[Token], end: usize) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.context * self.d_embed);
        for back in (0..self.context).rev() {
            let token = if back <= end { tokens[end - back] } else { BOS };
            x.extend_from_slice(w[EMBED].row(token as usize));
        }
        x
    }
}

fn relu(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

/// Logits for the token following `tokens`.
pub(crate) fn next_logits(shape: &MlpShape, w: &[&Matrix], tokens: &[Token]) -> Vec<f64> {
    let x = shape.features(w, tokens, tokens.len() - 1);
    let mut h1 = w[FC1].mul_vec(&x);
    relu(&mut h1);
    let mut h2 = w[FC2].mul_vec(&h1);
    relu(&mut h2);
    w[UNEMBED].mul_vec(&h2)
}

pub(crate) struct Trace {
    x: Matrix,
    h1: Matrix,
    h2: Matrix,
}

fn mm_t(a: &Matrix, b: &Matrix) -> Matrix {
    a.matmul_t(b).expect("internal shapes agree")
}

/// Logits at every position of `tokens` plus the activations for backprop.
pub(crate) fn forward_trace(shape: &MlpShape, w: &[&Matrix], tokens: &[Token]) -> (Matrix, Trace) {
    let width = shape.context * shape.d_embed;
    let mut x = Matrix::zeros(tokens.len(), width);
    for t in 0..tokens.len() {
        x.row_mut(t).copy_from_slice(&shape.features(w, tokens, t));
    }
    let mut h1 = mm_t(&x, w[FC1]);
    relu(h1.as_mut_slice());
    let mut h2 = mm_t(&h1, w[FC2]);
    relu(h2.as_mut_slice());
    let logits = mm_t(&h2, w[UNEMBED]);
    (logits, Trace { x, h1, h2 })
}

pub(crate) fn backward(w: &[&Matrix], trace: &Trace, dlogits: &Matrix, wanted: &[usize]) -> Vec<Matrix> {
    let gate = |g: &mut Matrix, act: &Matrix| {
        for (d, a) in g.as_mut_slice().iter_mut().zip(act.as_slice()) {
            if *a <= 0.0 {
                *d = 0.0;
            }
        }
    };
    let mut du2 = dlogits.matmul(w[UNEMBED]).expect("shapes agree");
    gate(&mut du2, &trace.h2);
    let d_fc2 = du2.t_matmul(&trace.h1).expect("shapes agree");
    let mut du1 = du2.matmul(w[FC2]).expect("shapes agree");
    gate(&mut du1, &trace.h1);
    let d_fc1 = du1.t_matmul(&trace.x).expect("shapes agree");
    wanted
        .iter()
        .map(|&i| match i {
            FC1 => d_fc1.clone(),
            FC2 => d_fc2.clone(),
            _ => panic!("only fc1 and fc2 can be differentiated"),
        })
        .collect()
}
