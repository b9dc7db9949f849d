//! CMA-ES with an ask/tell interface, in the standard tutorial form:
//! log-linear positive recombination weights, cumulative step-size
//! adaptation, and rank-one plus rank-μ covariance updates.
//!
//! Rewards are **maximised**. Candidates are drawn from counter-based
//! streams keyed by `(seed, generation, index)`, so a replica holding the
//! same state regenerates every candidate bit for bit; a replica that
//! replays the same reward history reaches the same state.

mod checkpoint;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use thiserror::Error;

use crate::linalg::{self, Matrix};
use crate::rng::{self, Domain};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CmaError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),
    #[error("incomplete generation: {0}")]
    IncompleteGeneration(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
}

/// Strategy parameters, fixed at initialisation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CmaHyper {
    pub lambda: usize,
    pub mu: usize,
    pub c_m: f64,
    pub c_sigma: f64,
    pub d_sigma: f64,
    pub c_c: f64,
    pub c_1: f64,
    pub c_mu: f64,
    pub mu_eff: f64,
    /// `E‖N(0, I)‖`.
    pub chi_n: f64,
}

impl CmaHyper {
    /// Tutorial defaults for dimension `dim` and population `lambda`.
    /// Returns the positive weights alongside.
    pub fn defaults(dim: usize, lambda: usize) -> (CmaHyper, Vec<f64>) {
        let n = dim as f64;
        let mu = lambda / 2;
        let raw: Vec<f64> = (1..=mu)
            .map(|i| (mu as f64 + 0.5).ln() - (i as f64).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

        let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        let d_sigma =
            1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
        let c_1 = 2.0 / ((n + 1.3).powi(2) + mu_eff);
        let c_mu = (1.0 - c_1)
            .min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0).powi(2) + mu_eff));
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));
        (
            CmaHyper {
                lambda,
                mu,
                c_m: 1.0,
                c_sigma,
                d_sigma,
                c_c,
                c_1,
                c_mu,
                mu_eff,
                chi_n,
            },
            weights,
        )
    }
}

/// One population: candidates, their seeds, and rewards as they arrive.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    id: u64,
    seeds: Vec<u64>,
    steps: Vec<Vec<f64>>,
    candidates: Vec<Vec<f64>>,
    rewards: Vec<Option<f64>>,
}

impl Generation {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn candidates(&self) -> &[Vec<f64>] {
        &self.candidates
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn rewards(&self) -> &[Option<f64>] {
        &self.rewards
    }

    pub fn set_reward(&mut self, index: usize, reward: f64) {
        self.rewards[index] = Some(reward);
    }

    pub fn is_complete(&self) -> bool {
        self.rewards.iter().all(|r| r.is_some_and(f64::is_finite))
    }
}

/// Full optimizer state.
#[derive(Debug, Clone)]
pub struct CmaState {
    dim: usize,
    seed: u64,
    generation: u64,
    step_size: f64,
    mean: Vec<f64>,
    covariance: Matrix,
    path_sigma: Vec<f64>,
    path_c: Vec<f64>,
    weights: Vec<f64>,
    hyper: CmaHyper,
    // Eigendecomposition of `covariance`: C = B·diag(D²)·Bᵀ.
    basis: Matrix,
    scales: Vec<f64>,
    outstanding: bool,
}

/// Two states are equal when their checkpoints are byte-identical.
impl PartialEq for CmaState {
    fn eq(&self, other: &Self) -> bool {
        self.checkpoint() == other.checkpoint()
    }
}

/// Early-stop threshold on `σ · max(D)`.
pub const STALL_THRESHOLD: f64 = 1e-12;

impl CmaState {
    /// Fresh state with mean 0 and `C = I`.
    pub fn new(dim: usize, sigma0: f64, lambda: usize, seed: u64) -> Result<CmaState, CmaError> {
        if dim == 0 {
            return Err(CmaError::InvalidConfig("dimension must be at least 1".into()));
        }
        if !(sigma0.is_finite() && sigma0 > 0.0) {
            return Err(CmaError::InvalidConfig(format!("sigma0 = {sigma0} must be positive")));
        }
        if lambda < 2 {
            return Err(CmaError::InvalidConfig(format!("lambda = {lambda} must be at least 2")));
        }
        let (hyper, weights) = CmaHyper::defaults(dim, lambda);
        Ok(CmaState {
            dim,
            seed,
            generation: 0,
            step_size: sigma0,
            mean: vec![0.0; dim],
            covariance: Matrix::identity(dim),
            path_sigma: vec![0.0; dim],
            path_c: vec![0.0; dim],
            weights,
            hyper,
            basis: Matrix::identity(dim),
            scales: vec![1.0; dim],
            outstanding: false,
        })
    }

    /// Replaces the initial mean.
    pub fn with_mean(mut self, mean: Vec<f64>) -> Result<CmaState, CmaError> {
        if mean.len() != self.dim || mean.iter().any(|v| !v.is_finite()) {
            return Err(CmaError::InvalidConfig("initial mean has wrong length or non-finite values".into()));
        }
        self.mean = mean;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn step_size(&self) -> f64 {
        self.step_size
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &Matrix {
        &self.covariance
    }

    pub fn path_sigma(&self) -> &[f64] {
        &self.path_sigma
    }

    pub fn path_c(&self) -> &[f64] {
        &self.path_c
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn hyper(&self) -> &CmaHyper {
        &self.hyper
    }

    pub fn population(&self) -> usize {
        self.hyper.lambda
    }

    /// Sampling scales `D` (square roots of the eigenvalues of `C`).
    pub fn axis_scales(&self) -> &[f64] {
        &self.scales
    }

    /// True once `σ · max(D)` drops below [`STALL_THRESHOLD`].
    pub fn is_stalled(&self) -> bool {
        let max_d = self.scales.iter().copied().fold(0.0, f64::max);
        self.step_size * max_d < STALL_THRESHOLD
    }

    /// Seed of candidate `index` in the current generation.
    pub fn candidate_seed(&self, index: usize) -> u64 {
        candidate_seed(self.seed, self.generation, index)
    }

    /// `y = B·(D ⊙ z)` with `z ~ N(0, I)` drawn from the candidate's stream.
    fn step(&self, index: usize) -> Vec<f64> {
        let mut stream = rng::keyed(self.candidate_seed(index), Domain::CandidateNormal, 0, 0);
        let z = rng::normals(&mut stream, self.dim);
        let scaled: Vec<f64> = z.iter().zip(&self.scales).map(|(z, d)| z * d).collect();
        self.basis.mul_vec(&scaled)
    }

    /// Candidate `index` of the current generation, `m + σ·y`.
    pub fn candidate(&self, index: usize) -> Vec<f64> {
        self.mean
            .iter()
            .zip(self.step(index))
            .map(|(m, y)| m + self.step_size * y)
            .collect()
    }

    /// Samples the current generation. Must alternate with [`tell`](Self::tell).
    pub fn ask(&mut self) -> Result<Generation, CmaError> {
        if self.outstanding {
            return Err(CmaError::ProtocolViolation(format!(
                "generation {} was asked but never told",
                self.generation
            )));
        }
        let lambda = self.hyper.lambda;
        let seeds: Vec<u64> = (0..lambda).map(|i| self.candidate_seed(i)).collect();
        let steps: Vec<Vec<f64>> = (0..lambda).map(|i| self.step(i)).collect();
        let candidates = steps
            .iter()
            .map(|y| {
                self.mean
                    .iter()
                    .zip(y)
                    .map(|(m, y)| m + self.step_size * y)
                    .collect()
            })
            .collect();
        self.outstanding = true;
        Ok(Generation {
            id: self.generation,
            seeds,
            steps,
            candidates,
            rewards: vec![None; lambda],
        })
    }

    /// Updates the distribution from a fully rewarded generation.
    ///
    /// On error the state is left exactly as it was.
    pub fn tell(&mut self, generation: &Generation) -> Result<(), CmaError> {
        if !self.outstanding || generation.id != self.generation {
            return Err(CmaError::ProtocolViolation(format!(
                "told generation {} while state is at {} (outstanding: {})",
                generation.id, self.generation, self.outstanding
            )));
        }
        let rewards = complete_rewards(&generation.rewards)?;
        self.update(&rewards, &generation.steps)?;
        self.outstanding = false;
        Ok(())
    }

    /// Replica-side update: regenerates the population from seeds and applies
    /// `rewards` for the current generation.
    pub fn tell_rewards(&mut self, rewards: &[f64]) -> Result<(), CmaError> {
        if rewards.len() != self.hyper.lambda {
            return Err(CmaError::IncompleteGeneration(format!(
                "{} rewards for population {}",
                rewards.len(),
                self.hyper.lambda
            )));
        }
        let rewards = complete_rewards(&rewards.iter().map(|r| Some(*r)).collect::<Vec<_>>())?;
        let steps: Vec<Vec<f64>> = (0..self.hyper.lambda).map(|i| self.step(i)).collect();
        self.update(&rewards, &steps)?;
        self.outstanding = false;
        Ok(())
    }

    fn update(&mut self, rewards: &[f64], steps: &[Vec<f64>]) -> Result<(), CmaError> {
        let n = self.dim;
        let h = self.hyper;
        let order = rank_descending(rewards);

        let mut y_w = vec![0.0; n];
        for (w, &i) in self.weights.iter().zip(&order) {
            for (acc, y) in y_w.iter_mut().zip(&steps[i]) {
                *acc += w * y;
            }
        }

        let mean: Vec<f64> = self
            .mean
            .iter()
            .zip(&y_w)
            .map(|(m, y)| m + h.c_m * self.step_size * y)
            .collect();

        // C^{-1/2}·y_w = B·D⁻¹·Bᵀ·y_w
        let mut projected: Vec<f64> = (0..n)
            .map(|j| (0..n).map(|i| self.basis[(i, j)] * y_w[i]).sum::<f64>())
            .collect();
        for (p, d) in projected.iter_mut().zip(&self.scales) {
            *p /= d;
        }
        let whitened = self.basis.mul_vec(&projected);

        let cs = h.c_sigma;
        let ps_coeff = (cs * (2.0 - cs) * h.mu_eff).sqrt();
        let path_sigma: Vec<f64> = self
            .path_sigma
            .iter()
            .zip(&whitened)
            .map(|(p, w)| (1.0 - cs) * p + ps_coeff * w)
            .collect();
        let ps_norm = path_sigma.iter().map(|v| v * v).sum::<f64>().sqrt();

        let decay = 1.0 - (1.0 - cs).powf(2.0 * (self.generation as f64 + 1.0));
        let h_sigma = ps_norm / decay.sqrt() / h.chi_n < 1.4 + 2.0 / (n as f64 + 1.0);
        let h_sigma = if h_sigma { 1.0 } else { 0.0 };

        let cc = h.c_c;
        let pc_coeff = h_sigma * (cc * (2.0 - cc) * h.mu_eff).sqrt();
        let path_c: Vec<f64> = self
            .path_c
            .iter()
            .zip(&y_w)
            .map(|(p, y)| (1.0 - cc) * p + pc_coeff * y)
            .collect();

        let delta_h = (1.0 - h_sigma) * cc * (2.0 - cc);
        let keep = 1.0 - h.c_1 - h.c_mu * self.weights.iter().sum::<f64>() + h.c_1 * delta_h;
        let mut covariance = self.covariance.scale(keep);
        for r in 0..n {
            for c in 0..=r {
                let mut rank_mu = 0.0;
                for (w, &i) in self.weights.iter().zip(&order) {
                    rank_mu += w * steps[i][r] * steps[i][c];
                }
                let v = covariance[(r, c)] + h.c_1 * path_c[r] * path_c[c] + h.c_mu * rank_mu;
                covariance[(r, c)] = v;
                covariance[(c, r)] = v;
            }
        }

        let step_size = self.step_size * ((cs / h.d_sigma) * (ps_norm / h.chi_n - 1.0)).exp();
        if !(step_size.is_finite() && step_size > 0.0) {
            return Err(CmaError::NumericalBreakdown(format!("step size became {step_size}")));
        }
        let (basis, scales) = factorize(&covariance)?;

        self.mean = mean;
        self.path_sigma = path_sigma;
        self.path_c = path_c;
        self.covariance = covariance;
        self.step_size = step_size;
        self.basis = basis;
        self.scales = scales;
        self.generation += 1;
        Ok(())
    }

    /// Human-readable dump, one `key = value` per line.
    pub fn diagnostic_dump(&self) -> String {
        let h = &self.hyper;
        let vec = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:e}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        line("dim", self.dim.to_string());
        line("seed", self.seed.to_string());
        line("generation", self.generation.to_string());
        line("lambda", h.lambda.to_string());
        line("mu", h.mu.to_string());
        line("mu_eff", format!("{:e}", h.mu_eff));
        line("c_m", format!("{:e}", h.c_m));
        line("c_sigma", format!("{:e}", h.c_sigma));
        line("d_sigma", format!("{:e}", h.d_sigma));
        line("c_c", format!("{:e}", h.c_c));
        line("c_1", format!("{:e}", h.c_1));
        line("c_mu", format!("{:e}", h.c_mu));
        line("chi_n", format!("{:e}", h.chi_n));
        line("step_size", format!("{:e}", self.step_size));
        line("mean", vec(&self.mean));
        line("path_sigma", vec(&self.path_sigma));
        line("path_c", vec(&self.path_c));
        line("weights", vec(&self.weights));
        line("axis_scales", vec(&self.scales));
        line("covariance", vec(self.covariance.as_slice()));
        out
    }
}

/// Seed of candidate `index` in `generation` under master seed `seed`.
pub fn candidate_seed(seed: u64, generation: u64, index: usize) -> u64 {
    rng::derive_seed(seed, Domain::CandidateSeed, generation, index as u64)
}

/// Indices sorted by reward, best first; equal rewards keep index order.
pub fn rank_descending(rewards: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rewards.len()).collect();
    order.sort_by(|&a, &b| rewards[b].total_cmp(&rewards[a]).then(a.cmp(&b)));
    order
}

fn complete_rewards(rewards: &[Option<f64>]) -> Result<Vec<f64>, CmaError> {
    rewards
        .iter()
        .enumerate()
        .map(|(i, r)| match r {
            Some(v) if v.is_finite() => Ok(*v),
            Some(v) => Err(CmaError::IncompleteGeneration(format!("reward {i} is {v}"))),
            None => Err(CmaError::IncompleteGeneration(format!("reward {i} is missing"))),
        })
        .collect()
}

fn factorize(covariance: &Matrix) -> Result<(Matrix, Vec<f64>), CmaError> {
    let (basis, values) = linalg::symmetric_eigen(covariance)
        .ok_or_else(|| CmaError::NumericalBreakdown("eigendecomposition failed".into()))?;
    if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(CmaError::NumericalBreakdown(format!(
            "covariance is not positive definite (min eigenvalue {:e})",
            values.iter().copied().fold(f64::INFINITY, f64::min)
        )));
    }
    Ok((basis, values.iter().map(|v| v.sqrt()).collect()))
}
