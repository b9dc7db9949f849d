//! Candidate scoring as seen by workers.

use std::time::Duration;

use sha2::{Digest, Sha256};

use crate::fitness::{subset_hash, AlignmentObjective, BenchmarkFn};
use crate::lowrank::write_adapters;

/// Scores candidate vectors. Implementations must be deterministic in
/// `(generation, index, x)`.
pub trait CandidateEvaluator: Send + Sync {
    fn evaluate(&self, generation: u64, index: usize, x: &[f64]) -> Result<f64, String>;

    /// Digest of everything that influences rewards.
    fn digest(&self) -> [u8; 32];

    /// Hash of the data subset scored in `generation`, empty if none.
    fn subset_hash(&self, _generation: u64) -> String {
        String::new()
    }
}

impl CandidateEvaluator for AlignmentObjective {
    fn evaluate(&self, generation: u64, index: usize, x: &[f64]) -> Result<f64, String> {
        self.score(generation, index, x).map_err(|e| e.to_string())
    }

    fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"alignment");
        h.update(self.model.digest());
        let adapters = write_adapters(&self.adapters).expect("objective adapters are decomposed");
        h.update(Sha256::digest(adapters));
        h.update(self.fitness.encode());
        h.update(self.layout.encode());
        h.finalize().into()
    }

    fn subset_hash(&self, generation: u64) -> String {
        match self.fitness.generation_subset(generation) {
            Ok(Some(indices)) => subset_hash(&indices),
            _ => String::new(),
        }
    }
}

/// Negated benchmark function of the raw candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchmarkObjective(pub BenchmarkFn);

impl CandidateEvaluator for BenchmarkObjective {
    fn evaluate(&self, _generation: u64, _index: usize, x: &[f64]) -> Result<f64, String> {
        Ok(self.0.reward(x))
    }

    fn digest(&self) -> [u8; 32] {
        Sha256::digest(format!("benchmark:{}", self.0.name())).into()
    }
}

/// Adds a fixed sleep before each evaluation, standing in for expensive
/// inference in scaling experiments.
pub struct Delayed<E> {
    pub inner: E,
    pub delay: Duration,
}

impl<E: CandidateEvaluator> CandidateEvaluator for Delayed<E> {
    fn evaluate(&self, generation: u64, index: usize, x: &[f64]) -> Result<f64, String> {
        std::thread::sleep(self.delay);
        self.inner.evaluate(generation, index, x)
    }

    fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.inner.digest());
        h.update((self.delay.as_nanos() as u64).to_le_bytes());
        h.finalize().into()
    }

    fn subset_hash(&self, generation: u64) -> String {
        self.inner.subset_hash(generation)
    }
}
