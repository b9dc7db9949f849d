//! Supervised warm start for the adapters: full-batch SGD on the
//! cross-entropy of answer tokens (and the closing EOS).

use super::{mlp, transformer, Architecture, ModelError, PolicyModel, TaskExample};
use crate::linalg::Matrix;
use crate::lowrank::{FactorPair, LowRankAdapter};

/// A factor whose largest singular value is at or below this is degenerate.
pub const DEGENERATE_SIGMA: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SftConfig {
    pub steps: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Loss before each update.
    pub losses: Vec<f64>,
    /// Smallest and largest singular value across all factors.
    pub min_singular: f64,
    pub max_singular: f64,
    /// Smallest top singular value over all factors.
    pub min_top_singular: f64,
}

impl SftReport {
    /// Some factor has collapsed entirely (for example `B = 0`).
    pub fn is_degenerate(&self) -> bool {
        self.min_top_singular <= DEGENERATE_SIGMA
    }
}

/// Mean cross-entropy per answer token over `data`, with its gradient
/// with respect to every adapter's `B` and `A`.
pub fn loss_and_gradients(
    model: &PolicyModel,
    adapters: &[LowRankAdapter],
    data: &[TaskExample],
) -> Result<(f64, Vec<FactorPair>), ModelError> {
    if data.is_empty() {
        return Err(ModelError::InvalidData("SFT data is empty".into()));
    }
    let bound = model.bind_adapters(adapters)?;
    let w = bound.views();
    let wanted: Vec<usize> = model.slots.iter().map(|s| s.weight).collect();

    let sequences: Vec<(Vec<u16>, usize)> = data
        .iter()
        .map(|e| {
            let mut tokens = e.prompt_tokens();
            let first_target = tokens.len() - 1;
            tokens.extend(e.answer_tokens());
            (tokens, first_target)
        })
        .collect();
    let total_targets: usize = sequences.iter().map(|(t, f)| t.len() - 1 - f).sum();
    let norm = 1.0 / total_targets as f64;

    let mut loss = 0.0;
    let mut grads: Vec<Matrix> = wanted
        .iter()
        .map(|&i| Matrix::zeros(model.weights[i].rows(), model.weights[i].cols()))
        .collect();
    for (tokens, first_target) in &sequences {
        let input = &tokens[..tokens.len() - 1];
        if let Some(max) = model.arch.max_seq() {
            if input.len() > max {
                return Err(ModelError::SequenceTooLong { len: input.len(), max });
            }
        }
        let (logits, grad_fn): (Matrix, Box<dyn Fn(&Matrix) -> Vec<Matrix>>) = match &model.arch {
            Architecture::Transformer(shape) => {
                let (logits, trace) = transformer::forward_trace(shape, &w, input);
                let (w, wanted) = (&w, &wanted);
                (
                    logits,
                    Box::new(move |d: &Matrix| transformer::backward(shape, w, &trace, d, wanted)),
                )
            }
            Architecture::Mlp(shape) => {
                let (logits, trace) = mlp::forward_trace(shape, &w, input);
                let (w, wanted) = (&w, &wanted);
                (logits, Box::new(move |d: &Matrix| mlp::backward(w, &trace, d, wanted)))
            }
        };
        let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
        for t in *first_target..input.len() {
            let target = tokens[t + 1] as usize;
            let row = logits.row(t);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_total = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss -= (row[target] - log_total) * norm;
            let d = dlogits.row_mut(t);
            for (g, v) in d.iter_mut().zip(row) {
                *g = (v - log_total).exp() * norm;
            }
            d[target] -= norm;
        }
        for (acc, g) in grads.iter_mut().zip(grad_fn(&dlogits)) {
            acc.axpy(1.0, &g);
        }
    }

    let factor_grads = adapters
        .iter()
        .zip(&grads)
        .map(|(adapter, dw)| FactorPair {
            b: dw.matmul_t(&adapter.a).expect("shapes agree"),
            a: adapter.b.t_matmul(dw).expect("shapes agree"),
        })
        .collect();
    Ok((loss, factor_grads))
}

/// Trains `adapters` for `config.steps` full-batch SGD steps and returns
/// them decomposed, with a report on the loss and singular values.
pub fn sft_train(
    model: &PolicyModel,
    adapters: &[LowRankAdapter],
    data: &[TaskExample],
    config: SftConfig,
) -> Result<(Vec<LowRankAdapter>, SftReport), ModelError> {
    if !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
        return Err(ModelError::InvalidConfig(format!(
            "learning rate {} must be positive",
            config.learning_rate
        )));
    }
    let mut current: Vec<LowRankAdapter> = adapters.to_vec();
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (loss, grads) = loss_and_gradients(model, &current, data)?;
        if !loss.is_finite() {
            return Err(ModelError::TrainingDiverged(format!("loss {loss} at step {step}")));
        }
        losses.push(loss);
        for (adapter, g) in current.iter_mut().zip(&grads) {
            adapter.b.axpy(-config.learning_rate, &g.b);
            adapter.a.axpy(-config.learning_rate, &g.a);
        }
        log::debug!("sft step {step}: loss {loss:.6}");
    }
    let final_loss = loss_and_gradients(model, &current, data)?.0;
    if !final_loss.is_finite() {
        return Err(ModelError::TrainingDiverged(format!("final loss {final_loss}")));
    }
    let initial_loss = losses.first().copied().unwrap_or(final_loss);

    let trained = current
        .iter()
        .map(|a| LowRankAdapter::new(a.name.clone(), a.b.clone(), a.a.clone())?.decompose())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ModelError::TrainingDiverged(e.to_string()))?;
    let min_singular = trained
        .iter()
        .filter_map(|a| a.min_singular_value())
        .fold(f64::INFINITY, f64::min);
    let max_singular = trained
        .iter()
        .filter_map(|a| a.max_singular_value())
        .fold(0.0, f64::max);
    let min_top_singular = trained
        .iter()
        .flat_map(|a| [a.svd_a(), a.svd_b()])
        .filter_map(|svd| svd.and_then(|s| s.sigma.first().copied()))
        .fold(f64::INFINITY, f64::min);
    if min_top_singular <= DEGENERATE_SIGMA {
        log::warn!("adapter factors are degenerate: a top singular value is {min_top_singular:e}");
    }
    Ok((
        trained,
        SftReport {
            initial_loss,
            final_loss,
            losses,
            min_singular,
            max_singular,
            min_top_singular,
        },
    ))
}
