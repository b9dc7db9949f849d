//! Low-rank adapters `ΔW = B·A` and their singular-value parameterisation.
//!
//! Each factor is decomposed separately, `A = U_A Σ_A V_Aᵀ` and
//! `B = U_B Σ_B V_Bᵀ`. A candidate vector adds deltas to the top `p%` of
//! `Σ_A` and `Σ_B` for every adapter; the factors are then rebuilt from the
//! frozen singular vectors. Nothing here mutates an adapter after
//! decomposition, so shared adapter state can be read from any number of
//! threads.

mod checkpoint;

pub use checkpoint::{read_adapters, write_adapters, ADAPTER_MAGIC, ADAPTER_VERSION};

use thiserror::Error;

use crate::codec::DecodeError;
use crate::linalg::{self, LinalgError, Matrix, SvdFactors};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LowRankError {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),
    #[error("SVD failed for adapter {0}")]
    DecompositionFailed(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("adapter {0} has not been decomposed")]
    NotDecomposed(String),
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("invalid candidate: {0}")]
    InvalidCandidate(String),
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("corrupt adapter checkpoint: {0}")]
    Checkpoint(#[from] DecodeError),
}

/// Which factor of `ΔW = B·A` a singular value belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FactorTag {
    A,
    B,
}

/// One LoRA adapter: `B` is `m×r`, `A` is `r×n`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    pub name: String,
    pub b: Matrix,
    pub a: Matrix,
    svd_a: Option<SvdFactors>,
    svd_b: Option<SvdFactors>,
}

impl LowRankAdapter {
    pub fn new(name: impl Into<String>, b: Matrix, a: Matrix) -> Result<Self, LowRankError> {
        let name = name.into();
        let (m, r) = b.shape();
        let (r2, n) = a.shape();
        if r != r2 {
            return Err(LowRankError::ShapeError(format!(
                "{name}: B is {m}x{r} but A is {r2}x{n}"
            )));
        }
        if r == 0 || r > m.min(n) {
            return Err(LowRankError::InvalidConfig(format!(
                "{name}: rank {r} must be in 1..={}",
                m.min(n)
            )));
        }
        if !a.is_finite() || !b.is_finite() {
            return Err(LowRankError::InvalidMatrix(format!("{name}: non-finite entries")));
        }
        Ok(Self {
            name,
            b,
            a,
            svd_a: None,
            svd_b: None,
        })
    }

    /// Rebuilds a decomposed adapter from stored factors (checkpoint load).
    pub(crate) fn from_parts(
        name: String,
        b: Matrix,
        a: Matrix,
        svd_a: SvdFactors,
        svd_b: SvdFactors,
    ) -> Result<Self, LowRankError> {
        let mut adapter = Self::new(name, b, a)?;
        let r = adapter.rank();
        let ok_a = svd_a.u.shape() == (r, r)
            && svd_a.sigma.len() == r
            && svd_a.vt.shape() == (r, adapter.a.cols());
        let ok_b = svd_b.u.shape() == (adapter.b.rows(), r)
            && svd_b.sigma.len() == r
            && svd_b.vt.shape() == (r, r);
        if !ok_a || !ok_b {
            return Err(LowRankError::ShapeError(format!(
                "{}: SVD factor shapes do not match the adapter",
                adapter.name
            )));
        }
        adapter.svd_a = Some(svd_a);
        adapter.svd_b = Some(svd_b);
        Ok(adapter)
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// `(m, n)` of the weight this adapter updates.
    pub fn target_shape(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }

    pub fn svd_a(&self) -> Option<&SvdFactors> {
        self.svd_a.as_ref()
    }

    pub fn svd_b(&self) -> Option<&SvdFactors> {
        self.svd_b.as_ref()
    }

    pub fn svd(&self, factor: FactorTag) -> Option<&SvdFactors> {
        match factor {
            FactorTag::A => self.svd_a.as_ref(),
            FactorTag::B => self.svd_b.as_ref(),
        }
    }

    pub fn is_decomposed(&self) -> bool {
        self.svd_a.is_some() && self.svd_b.is_some()
    }

    /// `B·A`.
    pub fn delta_weight(&self) -> Matrix {
        self.b.matmul(&self.a).expect("adapter shapes checked at construction")
    }

    /// Returns a copy with `svd_a` and `svd_b` populated.
    pub fn decompose(&self) -> Result<LowRankAdapter, LowRankError> {
        let factor_svd = |m: &Matrix| {
            linalg::svd(m).map_err(|e| match e {
                LinalgError::NonFinite => LowRankError::InvalidMatrix(self.name.clone()),
                _ => LowRankError::DecompositionFailed(self.name.clone()),
            })
        };
        Ok(LowRankAdapter {
            svd_a: Some(factor_svd(&self.a)?),
            svd_b: Some(factor_svd(&self.b)?),
            ..self.clone()
        })
    }

    /// Smallest singular value across both factors.
    pub fn min_singular_value(&self) -> Option<f64> {
        let a = self.svd_a.as_ref()?.sigma.iter().copied();
        let b = self.svd_b.as_ref()?.sigma.iter().copied();
        a.chain(b).reduce(f64::min)
    }

    pub fn max_singular_value(&self) -> Option<f64> {
        let a = self.svd_a.as_ref()?.sigma.iter().copied();
        let b = self.svd_b.as_ref()?.sigma.iter().copied();
        a.chain(b).reduce(f64::max)
    }
}

/// Free-function form of [`LowRankAdapter::decompose`].
pub fn decompose(adapter: &LowRankAdapter) -> Result<LowRankAdapter, LowRankError> {
    adapter.decompose()
}

/// Number of singular values selected per factor: `ceil(p/100 · r)`, at
/// least 1.
pub fn top_count(rank: usize, top_percent: f64) -> usize {
    let k = (top_percent / 100.0 * rank as f64).ceil() as usize;
    k.clamp(1, rank)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    /// Position of the adapter in the slice the layout was built from.
    pub adapter: usize,
    pub name: String,
    pub factor: FactorTag,
    pub index: usize,
}

/// Maps candidate-vector coordinates to singular-value slots.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationLayout {
    entries: Vec<LayoutEntry>,
    top_percent: f64,
}

impl PerturbationLayout {
    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn top_percent(&self) -> f64 {
        self.top_percent
    }

    /// Stable byte encoding, used in configuration digests.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = crate::codec::Writer::new();
        w.f64(self.top_percent);
        w.u64(self.entries.len() as u64);
        for e in &self.entries {
            w.str16(&e.name);
            w.u8(match e.factor {
                FactorTag::A => 0,
                FactorTag::B => 1,
            });
            w.u32(e.index as u32);
        }
        w.finish()
    }
}

/// Builds the candidate layout over the top `p%` singular values of every
/// adapter factor.
///
/// Entries are ordered by adapter name, then factor (A before B), then
/// singular index.
pub fn build_layout(
    adapters: &[LowRankAdapter],
    top_percent: f64,
) -> Result<PerturbationLayout, LowRankError> {
    if !(top_percent > 0.0 && top_percent <= 100.0) {
        return Err(LowRankError::InvalidConfig(format!(
            "top percent {top_percent} outside (0, 100]"
        )));
    }
    let mut order: Vec<usize> = (0..adapters.len()).collect();
    order.sort_by(|&i, &j| adapters[i].name.cmp(&adapters[j].name));
    if order
        .windows(2)
        .any(|w| adapters[w[0]].name == adapters[w[1]].name)
    {
        return Err(LowRankError::InvalidConfig("duplicate adapter names".into()));
    }

    let mut entries = Vec::new();
    for &i in &order {
        let adapter = &adapters[i];
        if !adapter.is_decomposed() {
            return Err(LowRankError::NotDecomposed(adapter.name.clone()));
        }
        let count = top_count(adapter.rank(), top_percent);
        for factor in [FactorTag::A, FactorTag::B] {
            for index in 0..count {
                entries.push(LayoutEntry {
                    adapter: i,
                    name: adapter.name.clone(),
                    factor,
                    index,
                });
            }
        }
    }
    Ok(PerturbationLayout {
        entries,
        top_percent,
    })
}

/// Reconstructed factors for one adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    pub b: Matrix,
    pub a: Matrix,
}

impl FactorPair {
    pub fn delta_weight(&self) -> Result<Matrix, LowRankError> {
        delta_weight(&self.b, &self.a)
    }
}

/// Applies the singular-value deltas in `x` and rebuilds every adapter's
/// factors, in the order of `adapters`.
///
/// `σ′ = σ + x` on the layout's slots; all other singular values are kept.
/// Perturbed values are not clamped, a negative `σ′` flips the sign of its
/// rank-one component.
pub fn apply_candidate(
    adapters: &[LowRankAdapter],
    layout: &PerturbationLayout,
    x: &[f64],
) -> Result<Vec<FactorPair>, LowRankError> {
    if x.len() != layout.dim() {
        return Err(LowRankError::LayoutMismatch(format!(
            "candidate has {} values, layout expects {}",
            x.len(),
            layout.dim()
        )));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(LowRankError::InvalidCandidate(format!(
            "coordinate {i} is not finite"
        )));
    }

    let mut sigmas: Vec<[Vec<f64>; 2]> = Vec::with_capacity(adapters.len());
    for adapter in adapters {
        let (Some(sa), Some(sb)) = (adapter.svd_a(), adapter.svd_b()) else {
            return Err(LowRankError::NotDecomposed(adapter.name.clone()));
        };
        sigmas.push([sa.sigma.clone(), sb.sigma.clone()]);
    }
    for (entry, delta) in layout.entries().iter().zip(x) {
        let adapter = adapters.get(entry.adapter).filter(|a| a.name == entry.name);
        let Some(adapter) = adapter else {
            return Err(LowRankError::LayoutMismatch(format!(
                "layout slot for {} does not match the adapter list",
                entry.name
            )));
        };
        if entry.index >= adapter.rank() {
            return Err(LowRankError::LayoutMismatch(format!(
                "index {} out of range for rank {}",
                entry.index,
                adapter.rank()
            )));
        }
        let slot = match entry.factor {
            FactorTag::A => 0,
            FactorTag::B => 1,
        };
        sigmas[entry.adapter][slot][entry.index] += delta;
    }

    Ok(adapters
        .iter()
        .zip(sigmas)
        .map(|(adapter, [sigma_a, sigma_b])| {
            let sa = adapter.svd_a().expect("checked above");
            let sb = adapter.svd_b().expect("checked above");
            FactorPair {
                a: linalg::reconstruct(&sa.u, &sigma_a, &sa.vt),
                b: linalg::reconstruct(&sb.u, &sigma_b, &sb.vt),
            }
        })
        .collect())
}

/// `B′·A′`, the update added to the frozen weight.
pub fn delta_weight(b: &Matrix, a: &Matrix) -> Result<Matrix, LowRankError> {
    b.matmul(a).map_err(|e| LowRankError::ShapeError(e.to_string()))
}

/// Builds new adapters from reconstructed factors and decomposes them again.
pub fn adapters_from_pairs(
    template: &[LowRankAdapter],
    pairs: &[FactorPair],
) -> Result<Vec<LowRankAdapter>, LowRankError> {
    if template.len() != pairs.len() {
        return Err(LowRankError::LayoutMismatch(format!(
            "{} factor pairs for {} adapters",
            pairs.len(),
            template.len()
        )));
    }
    template
        .iter()
        .zip(pairs)
        .map(|(t, p)| LowRankAdapter::new(t.name.clone(), p.b.clone(), p.a.clone())?.decompose())
        .collect()
}
