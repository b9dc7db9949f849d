//! Distributed generation loop.
//!
//! The coordinator owns the authoritative [`CmaState`]. Each generation it
//! asks for λ candidates, hands worker `n` the contiguous index block
//! `n·k .. n·k + k` (`k = λ / N`) as [`wire::EvalJob`]s carrying only the
//! candidate seed, gathers one reward per candidate and tells the state.
//!
//! Workers never receive candidate vectors. Each keeps a replica of the
//! search state, regenerates candidates from their seeds, and applies the
//! same update once the coordinator broadcasts the generation's rewards.
//! Per-generation traffic is therefore a fixed number of scalars per
//! candidate, independent of the adapter dimension.

mod coordinator;
mod evaluator;
mod scaling;
pub mod transport;
pub mod wire;
mod worker;

use std::ops::Range;
use std::time::Duration;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cmaes::{CmaError, CmaState};

pub use coordinator::{run, run_in_process};
pub use evaluator::{BenchmarkObjective, CandidateEvaluator, Delayed};
pub use scaling::{measure_scaling, scaling_csv, ScalingRow};
pub use wire::ConfigHash;
pub use worker::{worker_serve, WorkerReport};

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("invalid cluster: {0}")]
    InvalidCluster(String),
    #[error("generation {generation} failed: {reason}")]
    GenerationFailed { generation: u64, reason: String },
    #[error("configuration hash mismatch between coordinator and worker")]
    ConfigMismatch,
    #[error("worker replica out of sync: {0}")]
    Desync(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error(transparent)]
    Cma(#[from] CmaError),
    #[error("run observer: {0}")]
    Observer(String),
    #[error("cannot resume: {0}")]
    Resume(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    InProcess,
    Socket,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    /// Population size `P` (= λ).
    pub population: usize,
    /// Worker count `N`.
    pub workers: usize,
    /// Total generations `E`, counted from generation 0.
    pub generations: u64,
    pub transport: TransportKind,
    /// How long the coordinator waits for outstanding jobs before it
    /// declares their workers dead.
    pub job_timeout: Duration,
}

impl ClusterConfig {
    pub fn new(population: usize, workers: usize, generations: u64) -> ClusterConfig {
        ClusterConfig {
            population,
            workers,
            generations,
            transport: TransportKind::InProcess,
            job_timeout: Duration::from_secs(60),
        }
    }

    pub fn validate(&self) -> Result<(), SchedulerError> {
        if self.population < 2 || self.workers == 0 || self.generations == 0 {
            return Err(SchedulerError::InvalidCluster(format!(
                "need P ≥ 2, N ≥ 1, E ≥ 1 (got P={}, N={}, E={})",
                self.population, self.workers, self.generations
            )));
        }
        if !self.population.is_multiple_of(self.workers) {
            return Err(SchedulerError::InvalidCluster(format!(
                "population {} is not divisible by {} workers",
                self.population, self.workers
            )));
        }
        Ok(())
    }

    /// `k = P / N`.
    pub fn jobs_per_worker(&self) -> usize {
        self.population / self.workers
    }
}

/// Contiguous blocks of `0..population` for `workers` workers. Block sizes
/// differ by at most one, larger blocks first.
pub fn partition(population: usize, workers: usize) -> Vec<Range<usize>> {
    let base = population / workers;
    let extra = population % workers;
    let mut start = 0;
    (0..workers)
        .map(|n| {
            let len = base + usize::from(n < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Parameters from which every replica builds the initial search state.
#[derive(Debug, Clone, PartialEq)]
pub struct CmaInit {
    pub sigma0: f64,
    pub population: usize,
    pub seed: u64,
    pub mean: Vec<f64>,
}

impl CmaInit {
    pub fn zero_mean(dim: usize, sigma0: f64, population: usize, seed: u64) -> CmaInit {
        CmaInit {
            sigma0,
            population,
            seed,
            mean: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn state(&self) -> Result<CmaState, CmaError> {
        CmaState::new(self.dim(), self.sigma0, self.population, self.seed)?.with_mean(self.mean.clone())
    }

    /// Initial state advanced through recorded reward vectors.
    pub fn replay(&self, history: &[Vec<f64>]) -> Result<CmaState, CmaError> {
        let mut state = self.state()?;
        for rewards in history {
            state.tell_rewards(rewards)?;
        }
        Ok(state)
    }

    fn encode(&self) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&self.sigma0.to_le_bytes());
        v.extend_from_slice(&(self.population as u64).to_le_bytes());
        v.extend_from_slice(&self.seed.to_le_bytes());
        v.extend_from_slice(&(self.mean.len() as u64).to_le_bytes());
        for m in &self.mean {
            v.extend_from_slice(&m.to_le_bytes());
        }
        v
    }
}

/// Digest shared by coordinator and workers: evaluator digest (model,
/// adapters, fitness, layout) plus the initial search state.
pub fn config_hash(evaluator: &dyn CandidateEvaluator, init: &CmaInit) -> ConfigHash {
    let mut h = Sha256::new();
    h.update(evaluator.digest());
    h.update(init.encode());
    h.finalize().into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationMetrics {
    pub generation: u64,
    /// Rewards consumed so far, including this generation.
    pub evaluations: u64,
    pub best: f64,
    pub mean: f64,
    pub worst: f64,
    pub wall_millis: u64,
    pub subset_hash: String,
    /// Sum of worker-reported evaluation times.
    pub eval_millis: u64,
    /// Traffic of this generation in both directions, excluding handshakes.
    pub payload_bytes: u64,
    pub frame_bytes: u64,
}

/// Highest-reward candidate observed so far. Ties keep the earlier one.
#[derive(Debug, Clone, PartialEq)]
pub struct BestSeen {
    pub reward: f64,
    pub generation: u64,
    pub index: usize,
    pub candidate: Vec<f64>,
}

/// Where a run starts: a fresh state, or a restored one together with the
/// reward vectors of every generation before it.
#[derive(Debug, Clone)]
pub struct RunStart {
    pub state: CmaState,
    pub history: Vec<Vec<f64>>,
    pub best: Option<BestSeen>,
}

impl RunStart {
    pub fn fresh(init: &CmaInit) -> Result<RunStart, SchedulerError> {
        Ok(RunStart {
            state: init.state()?,
            history: Vec::new(),
            best: None,
        })
    }

    /// Rebuilds a run from a search-state checkpoint and the reward vectors
    /// of the generations before it. Extra trailing history (written after
    /// the checkpoint) is dropped. Replaying the history must reproduce the
    /// checkpoint exactly; the best-seen candidate is recovered on the way.
    pub fn resume(init: &CmaInit, checkpoint: &[u8], mut history: Vec<Vec<f64>>) -> Result<RunStart, SchedulerError> {
        let state = CmaState::restore(checkpoint)?;
        let generations = state.generation() as usize;
        if history.len() < generations {
            return Err(SchedulerError::Resume(format!(
                "checkpoint is at generation {generations} but only {} reward vectors were recorded",
                history.len()
            )));
        }
        history.truncate(generations);
        let mut replay = init.state()?;
        let mut best: Option<BestSeen> = None;
        for (generation, rewards) in history.iter().enumerate() {
            if rewards.len() != init.population || rewards.iter().any(|r| !r.is_finite()) {
                return Err(SchedulerError::Resume(format!(
                    "reward vector of generation {generation} is malformed"
                )));
            }
            for (index, &reward) in rewards.iter().enumerate() {
                if best.as_ref().is_none_or(|b| reward > b.reward) {
                    best = Some(BestSeen {
                        reward,
                        generation: generation as u64,
                        index,
                        candidate: replay.candidate(index),
                    });
                }
            }
            replay.tell_rewards(rewards)?;
        }
        if replay.checkpoint() != state.checkpoint() {
            return Err(SchedulerError::Resume(
                "the reward history does not reproduce the checkpoint".into(),
            ));
        }
        Ok(RunStart { state, history, best })
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub metrics: Vec<GenerationMetrics>,
    pub best: Option<BestSeen>,
    pub final_state: CmaState,
    /// Reward vector of every generation from 0, indexed by candidate.
    pub history: Vec<Vec<f64>>,
    pub stopped_early: bool,
}

/// Per-generation view handed to a [`RunObserver`].
pub struct Progress<'a> {
    pub state: &'a CmaState,
    pub metrics: &'a GenerationMetrics,
    pub rewards: &'a [f64],
    pub best: &'a BestSeen,
    pub history: &'a [Vec<f64>],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Called after every told generation, e.g. to persist checkpoints.
pub trait RunObserver {
    fn on_generation(&mut self, progress: &Progress<'_>) -> Result<Control, String>;
}

impl RunObserver for () {
    fn on_generation(&mut self, _: &Progress<'_>) -> Result<Control, String> {
        Ok(Control::Continue)
    }
}

impl<F: FnMut(&Progress<'_>) -> Result<Control, String>> RunObserver for F {
    fn on_generation(&mut self, progress: &Progress<'_>) -> Result<Control, String> {
        self(progress)
    }
}
