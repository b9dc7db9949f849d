//! Small frozen-base policy models with low-rank adapters.
//!
//! A [`PolicyModel`] owns the frozen base weights. Adapters live outside
//! the model and are attached per call through [`PolicyModel::bind`], which
//! forms `W′ = W + B′A′` for every adapted projection. Decoding is greedy,
//! so answers are a pure function of the model, the adapters and the prompt.

mod checkpoint;
mod mlp;
mod quantize;
mod sft;
pub mod task;
mod transformer;
pub mod vocab;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::DecodeError;
use crate::linalg::Matrix;
use crate::lowrank::{FactorPair, LowRankAdapter, LowRankError};
use crate::rng::{self, Domain};

pub use checkpoint::{MODEL_MAGIC, MODEL_VERSION};
pub use mlp::MlpShape;
pub use quantize::quantize_rows;
pub use sft::{loss_and_gradients, sft_train, SftConfig, SftReport, DEGENERATE_SIGMA};
pub use task::TaskExample;
pub use transformer::TransformerShape;
pub use vocab::{Token, VOCAB_SIZE};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("adapter mismatch: {0}")]
    AdapterMismatch(String),
    #[error("training diverged: {0}")]
    TrainingDiverged(String),
    #[error("base weights are already quantized")]
    AlreadyQuantized,
    #[error("character {0:?} is not in the vocabulary")]
    UnknownToken(char),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("prompt {0:?} appears in both the SFT and alignment splits")]
    SplitOverlap(String),
    #[error("sequence of {len} tokens exceeds the context of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error(transparent)]
    LowRank(#[from] LowRankError),
    #[error("model checkpoint: {0}")]
    Checkpoint(#[from] DecodeError),
}

/// Numeric treatment of the base weights.
///
/// Computation always runs in `f64`; the integer modes only round the base
/// matrices onto a per-row symmetric grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    F32,
    SimInt8,
    SimInt4,
}

impl Precision {
    /// Largest grid level, `None` for unquantized weights.
    pub fn qmax(self) -> Option<f64> {
        match self {
            Precision::F32 => None,
            Precision::SimInt8 => Some(127.0),
            Precision::SimInt4 => Some(7.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::SimInt8 => "int8",
            Precision::SimInt4 => "int4",
        }
    }

    pub fn from_name(name: &str) -> Option<Precision> {
        match name {
            "f32" => Some(Precision::F32),
            "int8" => Some(Precision::SimInt8),
            "int4" => Some(Precision::SimInt4),
            _ => None,
        }
    }

    fn tag(self) -> u8 {
        match self {
            Precision::F32 => 0,
            Precision::SimInt8 => 1,
            Precision::SimInt4 => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Precision> {
        [Precision::F32, Precision::SimInt8, Precision::SimInt4]
            .into_iter()
            .find(|p| p.tag() == tag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Transformer(TransformerShape),
    Mlp(MlpShape),
}

impl Architecture {
    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            Architecture::Transformer(s) => s.validate(),
            Architecture::Mlp(s) => s.validate(),
        }
    }

    fn weight_specs(&self) -> Vec<WeightSpec> {
        match self {
            Architecture::Transformer(s) => s.weight_specs(),
            Architecture::Mlp(s) => s.weight_specs(),
        }
    }

    fn adapter_targets(&self) -> Vec<usize> {
        match self {
            Architecture::Transformer(s) => s.adapter_targets(),
            Architecture::Mlp(s) => s.adapter_targets(),
        }
    }

    /// Largest LoRA rank every adapted weight admits, `min(m, n)` over the
    /// targets.
    pub fn max_adapter_rank(&self) -> usize {
        let specs = self.weight_specs();
        self.adapter_targets()
            .into_iter()
            .map(|i| specs[i].rows.min(specs[i].cols))
            .min()
            .unwrap_or(0)
    }

    /// Longest token sequence the model accepts, if bounded.
    pub fn max_seq(&self) -> Option<usize> {
        match self {
            Architecture::Transformer(s) => Some(s.max_seq),
            Architecture::Mlp(_) => None,
        }
    }

    pub fn vocab(&self) -> usize {
        VOCAB_SIZE
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct WeightSpec {
    name: String,
    rows: usize,
    cols: usize,
}

impl WeightSpec {
    fn new(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
        }
    }
}

/// A projection that carries an adapter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdapterSlot {
    pub name: String,
    /// `(m, n)` of the frozen weight.
    pub shape: (usize, usize),
    weight: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    arch: Architecture,
    precision: Precision,
    names: Vec<String>,
    weights: Vec<Matrix>,
    /// Sorted by name, the order adapters are expected in.
    slots: Vec<AdapterSlot>,
    max_new_tokens: usize,
}

/// Default cap on generated answer tokens.
pub const DEFAULT_MAX_NEW_TOKENS: usize = 6;

impl PolicyModel {
    /// Random base weights: embeddings `N(0, 1)`, projections `N(0, 1/in)`.
    pub fn new(arch: Architecture, seed: u64) -> Result<PolicyModel, ModelError> {
        arch.validate()?;
        let specs = arch.weight_specs();
        let weights = specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let std = if s.name == "embed" || s.name == "pos" {
                    1.0
                } else {
                    1.0 / (s.cols as f64).sqrt()
                };
                let values = rng::normals(&mut rng::keyed(seed, Domain::ModelInit, i as u64, 0), s.rows * s.cols);
                Matrix::from_vec(s.rows, s.cols, values.into_iter().map(|v| v * std).collect())
                    .expect("length matches")
            })
            .collect();
        Self::from_weights(arch, Precision::F32, weights, DEFAULT_MAX_NEW_TOKENS)
    }

    fn from_weights(
        arch: Architecture,
        precision: Precision,
        weights: Vec<Matrix>,
        max_new_tokens: usize,
    ) -> Result<PolicyModel, ModelError> {
        let specs = arch.weight_specs();
        if specs.len() != weights.len() {
            return Err(ModelError::InvalidConfig(format!(
                "{} weight matrices for an architecture with {}",
                weights.len(),
                specs.len()
            )));
        }
        for (s, w) in specs.iter().zip(&weights) {
            if w.shape() != (s.rows, s.cols) {
                return Err(ModelError::InvalidConfig(format!(
                    "{} is {:?}, expected {:?}",
                    s.name,
                    w.shape(),
                    (s.rows, s.cols)
                )));
            }
            if !w.is_finite() {
                return Err(ModelError::InvalidConfig(format!("{} has non-finite entries", s.name)));
            }
        }
        let mut slots: Vec<AdapterSlot> = arch
            .adapter_targets()
            .into_iter()
            .map(|i| AdapterSlot {
                name: specs[i].name.clone(),
                shape: (specs[i].rows, specs[i].cols),
                weight: i,
            })
            .collect();
        slots.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(PolicyModel {
            arch,
            precision,
            names: specs.into_iter().map(|s| s.name).collect(),
            weights,
            slots,
            max_new_tokens,
        })
    }

    pub fn with_max_new_tokens(mut self, max_new_tokens: usize) -> Self {
        self.max_new_tokens = max_new_tokens.max(1);
        self
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn max_new_tokens(&self) -> usize {
        self.max_new_tokens
    }

    pub fn adapter_slots(&self) -> &[AdapterSlot] {
        &self.slots
    }

    /// Base weight by name.
    pub fn weight(&self, name: &str) -> Option<&Matrix> {
        self.names.iter().position(|n| n == name).map(|i| &self.weights[i])
    }

    pub fn weight_names(&self) -> &[String] {
        &self.names
    }

    /// SHA-256 of the checkpoint encoding.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }

    /// Fresh adapters for every slot: `A ~ N(0, 1/n)`, `B = 0`.
    pub fn init_adapters(&self, rank: usize, seed: u64) -> Result<Vec<LowRankAdapter>, ModelError> {
        self.slots
            .iter()
            .enumerate()
            .map(|(i, slot)| {
                let (m, n) = slot.shape;
                if rank == 0 || rank > m.min(n) {
                    return Err(ModelError::InvalidConfig(format!(
                        "rank {rank} does not fit {} ({m}×{n})",
                        slot.name
                    )));
                }
                let std = 1.0 / (n as f64).sqrt();
                let values = rng::normals(&mut rng::keyed(seed, Domain::AdapterInit, i as u64, 0), rank * n);
                let a = Matrix::from_vec(rank, n, values.into_iter().map(|v| v * std).collect())
                    .expect("length matches");
                Ok(LowRankAdapter::new(slot.name.clone(), Matrix::zeros(m, rank), a)?)
            })
            .collect()
    }

    /// Quantize-dequantize every base matrix onto a symmetric per-row grid.
    pub fn quantize_base(&self, mode: Precision) -> Result<PolicyModel, ModelError> {
        if self.precision != Precision::F32 {
            return Err(ModelError::AlreadyQuantized);
        }
        let Some(qmax) = mode.qmax() else {
            return Err(ModelError::InvalidConfig("quantization mode must be int8 or int4".into()));
        };
        let mut out = self.clone();
        out.precision = mode;
        out.weights = self.weights.iter().map(|w| quantize_rows(w, qmax)).collect();
        Ok(out)
    }

    /// Base model without adapters.
    pub fn base(&self) -> BoundModel<'_> {
        BoundModel {
            model: self,
            effective: vec![None; self.weights.len()],
        }
    }

    /// Attaches reconstructed factors, one pair per adapter slot in slot order.
    pub fn bind(&self, overrides: &[FactorPair]) -> Result<BoundModel<'_>, ModelError> {
        if overrides.len() != self.slots.len() {
            return Err(ModelError::AdapterMismatch(format!(
                "{} factor pairs for {} adapter slots",
                overrides.len(),
                self.slots.len()
            )));
        }
        let mut effective = vec![None; self.weights.len()];
        for (slot, pair) in self.slots.iter().zip(overrides) {
            let (m, n) = slot.shape;
            if pair.b.rows() != m || pair.a.cols() != n || pair.b.cols() != pair.a.rows() {
                return Err(ModelError::AdapterMismatch(format!(
                    "{}: factors {:?}·{:?} do not produce {m}×{n}",
                    slot.name,
                    pair.b.shape(),
                    pair.a.shape()
                )));
            }
            let delta = pair.delta_weight()?;
            effective[slot.weight] = Some(self.weights[slot.weight].add(&delta).expect("shape checked"));
        }
        Ok(BoundModel {
            model: self,
            effective,
        })
    }

    /// Attaches stored adapters, checking that names match the slots.
    pub fn bind_adapters(&self, adapters: &[LowRankAdapter]) -> Result<BoundModel<'_>, ModelError> {
        self.check_adapter_names(adapters)?;
        let pairs: Vec<FactorPair> = adapters
            .iter()
            .map(|a| FactorPair {
                b: a.b.clone(),
                a: a.a.clone(),
            })
            .collect();
        self.bind(&pairs)
    }

    pub fn check_adapter_names(&self, adapters: &[LowRankAdapter]) -> Result<(), ModelError> {
        if adapters.len() != self.slots.len()
            || adapters.iter().zip(&self.slots).any(|(a, s)| a.name != s.name)
        {
            return Err(ModelError::AdapterMismatch(format!(
                "adapters [{}] do not match slots [{}]",
                adapters.iter().map(|a| a.name.as_str()).collect::<Vec<_>>().join(", "),
                self.slots.iter().map(|s| s.name.as_str()).collect::<Vec<_>>().join(", ")
            )));
        }
        Ok(())
    }

    /// Greedy answer to `prompt` under the given adapter factors.
    pub fn forward(&self, overrides: &[FactorPair], prompt: &str) -> Result<String, ModelError> {
        self.bind(overrides)?.answer_prompt(prompt)
    }
}

/// A model with adapter deltas folded into its effective weights.
pub struct BoundModel<'m> {
    model: &'m PolicyModel,
    effective: Vec<Option<Matrix>>,
}

impl<'m> BoundModel<'m> {
    pub fn model(&self) -> &'m PolicyModel {
        self.model
    }

    fn views(&self) -> Vec<&Matrix> {
        self.effective
            .iter()
            .zip(&self.model.weights)
            .map(|(e, base)| e.as_ref().unwrap_or(base))
            .collect()
    }

    /// Greedy continuation of `prompt` (which should start with BOS), up to
    /// EOS or the token cap. The returned tokens exclude EOS.
    pub fn generate(&self, prompt: &[Token]) -> Result<Vec<Token>, ModelError> {
        if prompt.is_empty() {
            return Err(ModelError::InvalidData("empty prompt".into()));
        }
        let w = self.views();
        let cap = self.model.max_new_tokens;
        let mut out = Vec::with_capacity(cap);
        match &self.model.arch {
            Architecture::Transformer(shape) => {
                if prompt.len() > shape.max_seq {
                    return Err(ModelError::SequenceTooLong {
                        len: prompt.len(),
                        max: shape.max_seq,
                    });
                }
                let mut cache = transformer::KvCache::new(shape);
                let mut logits = Vec::new();
                for &t in prompt {
                    logits = transformer::step(shape, &w, &mut cache, t);
                }
                while out.len() < cap {
                    let next = argmax(&logits);
                    if next == vocab::EOS {
                        break;
                    }
                    out.push(next);
                    if cache.len() == shape.max_seq {
                        break;
                    }
                    logits = transformer::step(shape, &w, &mut cache, next);
                }
            }
            Architecture::Mlp(shape) => {
                let mut tokens = prompt.to_vec();
                while out.len() < cap {
                    let next = argmax(&mlp::next_logits(shape, &w, &tokens));
                    if next == vocab::EOS {
                        break;
                    }
                    out.push(next);
                    tokens.push(next);
                }
            }
        }
        Ok(out)
    }

    pub fn answer_prompt(&self, prompt: &str) -> Result<String, ModelError> {
        let mut tokens = vec![vocab::BOS];
        tokens.extend(vocab::encode(prompt)?);
        Ok(vocab::decode(&self.generate(&tokens)?))
    }

    pub fn answer(&self, example: &TaskExample) -> Result<String, ModelError> {
        Ok(vocab::decode(&self.generate(&example.prompt_tokens())?))
    }

    /// Exact match after normalisation.
    pub fn is_correct(&self, example: &TaskExample) -> Result<bool, ModelError> {
        Ok(vocab::normalize_answer(&self.answer(example)?) == vocab::normalize_answer(&example.answer))
    }

    /// Fraction of `examples` answered correctly (0 for an empty slice).
    pub fn accuracy<'e>(&self, examples: impl IntoIterator<Item = &'e TaskExample>) -> Result<f64, ModelError> {
        let (mut hits, mut total) = (0usize, 0usize);
        for e in examples {
            total += 1;
            hits += usize::from(self.is_correct(e)?);
        }
        Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
    }

    /// Logits at every position of `tokens`, from the full-sequence path.
    pub fn sequence_logits(&self, tokens: &[Token]) -> Result<Matrix, ModelError> {
        let w = self.views();
        Ok(match &self.model.arch {
            Architecture::Transformer(shape) => {
                if tokens.len() > shape.max_seq {
                    return Err(ModelError::SequenceTooLong {
                        len: tokens.len(),
                        max: shape.max_seq,
                    });
                }
                transformer::forward_trace(shape, &w, tokens).0
            }
            Architecture::Mlp(shape) => mlp::forward_trace(shape, &w, tokens).0,
        })
    }
}

/// Index of the largest logit; ties go to the lowest token id.
fn argmax(logits: &[f64]) -> Token {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as Token
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lowrank::{apply_candidate, build_layout};

    pub(crate) fn tiny_transformer(layers: usize) -> PolicyModel {
        PolicyModel::new(
            Architecture::Transformer(TransformerShape {
                layers,
                d_model: 8,
                heads: 2,
                d_ff: 16,
                max_seq: 16,
            }),
            11,
        )
        .unwrap()
    }

    #[test]
    fn slots_are_sorted_attention_projections() {
        let model = tiny_transformer(2);
        let names: Vec<&str> = model.adapter_slots().iter().map(|s| s.name.as_str()).collect();
        assert_eq!(
            names,
            ["layer0.k", "layer0.o", "layer0.q", "layer0.v", "layer1.k", "layer1.o", "layer1.q", "layer1.v"]
        );
        let mlp = PolicyModel::new(
            Architecture::Mlp(MlpShape {
                context: 3,
                d_embed: 4,
                hidden: 10,
            }),
            1,
        )
        .unwrap();
        assert_eq!(mlp.adapter_slots()[0].shape, (10, 12));
    }

    #[test]
    fn zero_adapters_match_base() {
        let model = tiny_transformer(1);
        let adapters = model.init_adapters(2, 3).unwrap();
        let bound = model.bind_adapters(&adapters).unwrap();
        for prompt in ["1+2=", "9+9=", "0+0="] {
            assert_eq!(bound.answer_prompt(prompt).unwrap(), model.base().answer_prompt(prompt).unwrap());
        }
    }

    #[test]
    fn zero_candidate_matches_stored_adapters() {
        let model = tiny_transformer(1);
        let mut adapters = model.init_adapters(2, 3).unwrap();
        for (k, a) in adapters.iter_mut().enumerate() {
            a.b = Matrix::from_fn(8, 2, |r, c| ((r * 3 + c + k) % 5) as f64 * 0.3 - 0.6);
        }
        let adapters: Vec<_> = adapters.iter().map(|a| a.decompose().unwrap()).collect();
        let layout = build_layout(&adapters, 50.0).unwrap();
        let pairs = apply_candidate(&adapters, &layout, &vec![0.0; layout.dim()]).unwrap();
        let stored = model.bind_adapters(&adapters).unwrap();
        for prompt in ["3+4=", "12+7=", "5+5="] {
            assert_eq!(model.forward(&pairs, prompt).unwrap(), stored.answer_prompt(prompt).unwrap());
        }
    }

    #[test]
    fn equal_overrides_are_deterministic() {
        let model = tiny_transformer(2);
        let adapters = model.init_adapters(4, 5).unwrap();
        let a = model.bind_adapters(&adapters).unwrap().sequence_logits(&[0, 3, 14, 4, 17 - 2]).unwrap();
        let b = model.bind_adapters(&adapters).unwrap().sequence_logits(&[0, 3, 14, 4, 17 - 2]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn incremental_decoding_matches_full_sequence() {
        let model = tiny_transformer(2);
        let tokens = [0u16, 5, 14, 7, 16, 3];
        let shape = match model.architecture() {
            Architecture::Transformer(s) => *s,
            _ => unreachable!(),
        };
        let bound = model.base();
        let full = bound.sequence_logits(&tokens).unwrap();
        let w = bound.views();
        let mut cache = transformer::KvCache::new(&shape);
        for (t, &tok) in tokens.iter().enumerate() {
            let step = transformer::step(&shape, &w, &mut cache, tok);
            let diff = step.iter().zip(full.row(t)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "position {t}: {diff}");
        }
    }

    #[test]
    fn mismatched_overrides_are_rejected() {
        let model = tiny_transformer(1);
        assert!(matches!(model.bind(&[]), Err(ModelError::AdapterMismatch(_))));
        let mut adapters = model.init_adapters(2, 0).unwrap();
        adapters.swap(0, 1);
        assert!(matches!(model.bind_adapters(&adapters), Err(ModelError::AdapterMismatch(_))));
        let bad: Vec<FactorPair> = model
            .adapter_slots()
            .iter()
            .map(|_| FactorPair {
                b: Matrix::zeros(7, 2),
                a: Matrix::zeros(2, 8),
            })
            .collect();
        assert!(matches!(model.bind(&bad), Err(ModelError::AdapterMismatch(_))));
    }

    #[test]
    fn generation_respects_token_cap_and_context() {
        let model = tiny_transformer(1).with_max_new_tokens(3);
        let out = model.base().generate(&[0, 2, 3]).unwrap();
        assert!(out.len() <= 3);
        let long = vec![2u16; 17];
        assert!(matches!(
            model.base().generate(&long),
            Err(ModelError::SequenceTooLong { len: 17, max: 16 })
        ));
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }

    #[test]
    fn digest_tracks_weights() {
        let a = tiny_transformer(1);
        let b = a.quantize_base(Precision::SimInt8).unwrap();
        assert_eq!(a.digest(), tiny_transformer(1).digest());
        assert_ne!(a.digest(), b.digest());
    }
}
