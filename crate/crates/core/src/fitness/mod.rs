//! Rewards for candidates: exact-match accuracy on a dataset subset, or a
//! negated benchmark function of the raw candidate vector.

mod benchmark;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lowrank::{apply_candidate, FactorPair, LowRankAdapter, LowRankError, PerturbationLayout};
use crate::model::{ModelError, PolicyModel, TaskExample};
use crate::rng::{self, Domain};

pub use benchmark::{run_case, standard_suite, BenchmarkCase, BenchmarkFn, BenchmarkOutcome};

#[derive(Debug, Error)]
pub enum FitnessError {
    #[error("invalid fitness configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    LowRank(#[from] LowRankError),
}

/// How the evaluation subset is drawn from the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SubsetPolicy {
    /// The first `size` indices of a fixed seed-0 permutation.
    Fixed { size: usize },
    /// The first `size` indices of a permutation keyed by
    /// `(seed, generation)`.
    Dynamic { size: usize, seed: u64 },
}

impl SubsetPolicy {
    pub fn size(&self) -> usize {
        match *self {
            SubsetPolicy::Fixed { size } | SubsetPolicy::Dynamic { size, .. } => size,
        }
    }
}

fn permutation_prefix(n: usize, size: usize, seed: u64, a: u64, b: u64) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..n).collect();
    rng::shuffle(&mut rng::keyed(seed, Domain::Subset, a, b), &mut indices);
    indices.truncate(size);
    indices
}

fn check_size(size: usize, dataset_size: usize) -> Result<(), FitnessError> {
    if size == 0 {
        return Err(FitnessError::InvalidConfig("subset size is zero".into()));
    }
    if size > dataset_size {
        return Err(FitnessError::InvalidConfig(format!(
            "subset of {size} requested from {dataset_size} examples"
        )));
    }
    Ok(())
}

/// Dataset indices scored in `generation`.
///
/// The permutation is the Fisher–Yates shuffle of [`rng::shuffle`] driven by
/// the subset stream keyed `(seed, generation, 0)`; fixed subsets use seed 0
/// and generation 0.
pub fn subset_select(
    policy: SubsetPolicy,
    dataset_size: usize,
    generation: u64,
) -> Result<Vec<usize>, FitnessError> {
    check_size(policy.size(), dataset_size)?;
    Ok(match policy {
        SubsetPolicy::Fixed { size } => permutation_prefix(dataset_size, size, 0, 0, 0),
        SubsetPolicy::Dynamic { size, seed } => permutation_prefix(dataset_size, size, seed, generation, 0),
    })
}

/// Hex SHA-256 of the indices as little-endian `u32`s.
pub fn subset_hash(indices: &[usize]) -> String {
    let mut h = Sha256::new();
    for &i in indices {
        h.update((i as u32).to_le_bytes());
    }
    hex_digest(&h.finalize())
}

/// Lowercase hex rendering of a digest.
pub fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum FitnessSpec {
    Accuracy {
        dataset: Vec<TaskExample>,
        policy: SubsetPolicy,
        /// Draw a separate subset for every candidate (ablation only; it
        /// breaks rank comparability within a generation).
        per_candidate: bool,
    },
    Benchmark(BenchmarkFn),
}

impl FitnessSpec {
    pub fn accuracy(dataset: Vec<TaskExample>, policy: SubsetPolicy) -> Result<FitnessSpec, FitnessError> {
        check_size(policy.size(), dataset.len())?;
        Ok(FitnessSpec::Accuracy {
            dataset,
            policy,
            per_candidate: false,
        })
    }

    pub fn with_per_candidate_resampling(mut self, enabled: bool) -> FitnessSpec {
        if let FitnessSpec::Accuracy { per_candidate, .. } = &mut self {
            *per_candidate = enabled;
        }
        self
    }

    /// Subset shared by all candidates of `generation` (`None` for
    /// benchmarks).
    pub fn generation_subset(&self, generation: u64) -> Result<Option<Vec<usize>>, FitnessError> {
        match self {
            FitnessSpec::Accuracy { dataset, policy, .. } => {
                subset_select(*policy, dataset.len(), generation).map(Some)
            }
            FitnessSpec::Benchmark(_) => Ok(None),
        }
    }

    /// Subset scored for one candidate; equal to the generation subset
    /// unless per-candidate resampling is on.
    pub fn candidate_subset(&self, generation: u64, index: usize) -> Result<Option<Vec<usize>>, FitnessError> {
        match self {
            FitnessSpec::Accuracy {
                dataset,
                policy: SubsetPolicy::Dynamic { size, seed },
                per_candidate: true,
            } => {
                check_size(*size, dataset.len())?;
                Ok(Some(permutation_prefix(dataset.len(), *size, *seed, generation, index as u64 + 1)))
            }
            _ => self.generation_subset(generation),
        }
    }

    /// Accuracy of `model` with `overrides` on the candidate's subset: the
    /// number of exact matches divided by the subset size.
    pub fn evaluate(
        &self,
        model: &PolicyModel,
        overrides: &[FactorPair],
        generation: u64,
        index: usize,
    ) -> Result<f64, FitnessError> {
        let FitnessSpec::Accuracy { dataset, .. } = self else {
            return Err(FitnessError::InvalidConfig(
                "benchmark fitness scores raw vectors, not adapters".into(),
            ));
        };
        let subset = self.candidate_subset(generation, index)?.expect("accuracy has a subset");
        let bound = model.bind(overrides)?;
        Ok(bound.accuracy(subset.iter().map(|&i| &dataset[i]))?)
    }

    /// Stable encoding for configuration digests.
    pub fn encode(&self) -> Vec<u8> {
        let mut h = Sha256::new();
        match self {
            FitnessSpec::Accuracy {
                dataset,
                policy,
                per_candidate,
            } => {
                h.update(b"accuracy");
                match *policy {
                    SubsetPolicy::Fixed { size } => {
                        h.update([0u8]);
                        h.update((size as u64).to_le_bytes());
                    }
                    SubsetPolicy::Dynamic { size, seed } => {
                        h.update([1u8]);
                        h.update((size as u64).to_le_bytes());
                        h.update(seed.to_le_bytes());
                    }
                }
                h.update([u8::from(*per_candidate)]);
                for e in dataset {
                    h.update(e.prompt.as_bytes());
                    h.update(b"\t");
                    h.update(e.answer.as_bytes());
                    h.update(b"\n");
                }
            }
            FitnessSpec::Benchmark(f) => {
                h.update(b"benchmark:");
                h.update(f.name().as_bytes());
            }
        }
        h.finalize().to_vec()
    }
}

/// Everything needed to score a candidate vector of singular-value deltas.
#[derive(Debug, Clone)]
pub struct AlignmentObjective {
    pub model: PolicyModel,
    pub adapters: Vec<LowRankAdapter>,
    pub layout: PerturbationLayout,
    pub fitness: FitnessSpec,
}

impl AlignmentObjective {
    pub fn new(
        model: PolicyModel,
        adapters: Vec<LowRankAdapter>,
        layout: PerturbationLayout,
        fitness: FitnessSpec,
    ) -> Result<AlignmentObjective, FitnessError> {
        model.check_adapter_names(&adapters)?;
        if !matches!(fitness, FitnessSpec::Accuracy { .. }) {
            return Err(FitnessError::InvalidConfig("alignment needs an accuracy fitness".into()));
        }
        Ok(AlignmentObjective {
            model,
            adapters,
            layout,
            fitness,
        })
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn factors(&self, x: &[f64]) -> Result<Vec<FactorPair>, FitnessError> {
        Ok(apply_candidate(&self.adapters, &self.layout, x)?)
    }

    pub fn score(&self, generation: u64, index: usize, x: &[f64]) -> Result<f64, FitnessError> {
        let pairs = self.factors(x)?;
        self.fitness.evaluate(&self.model, &pairs, generation, index)
    }

    /// Accuracy of candidate `x` on the whole dataset.
    pub fn full_accuracy(&self, x: &[f64]) -> Result<f64, FitnessError> {
        let FitnessSpec::Accuracy { dataset, .. } = &self.fitness else {
            unreachable!("checked at construction");
        };
        let pairs = self.factors(x)?;
        Ok(self.model.bind(&pairs)?.accuracy(dataset)?)
    }
}
