//! Binary checkpoint of [`CmaState`].
//!
//! ```text
//! "ESCK" | version u32 | dim u64 | lambda u64 | generation u64 | seed u64 |
//! mean[dim] | C[dim·dim] (row-major) | p_σ[dim] | p_c[dim] | weights[μ] |
//! σ | c_m | c_σ | d_σ | c_c | c_1 | c_μ | μ_eff | χ_n          (f64 LE)
//! crc32 u32 over everything before it
//! ```
//! The eigendecomposition is recomputed on restore; it is a deterministic
//! function of `C`, so restored states resume bit-identical streams.

use super::{factorize, CmaError, CmaHyper, CmaState};
use crate::codec::{Reader, Writer};
use crate::linalg::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ESCK";
pub const CHECKPOINT_VERSION: u32 = 1;

impl CmaState {
    pub fn checkpoint(&self) -> Vec<u8> {
        let h = &self.hyper;
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u64(self.dim as u64);
        w.u64(h.lambda as u64);
        w.u64(self.generation);
        w.u64(self.seed);
        w.f64s(&self.mean);
        w.f64s(self.covariance.as_slice());
        w.f64s(&self.path_sigma);
        w.f64s(&self.path_c);
        w.f64s(&self.weights);
        w.f64s(&[
            self.step_size,
            h.c_m,
            h.c_sigma,
            h.d_sigma,
            h.c_c,
            h.c_1,
            h.c_mu,
            h.mu_eff,
            h.chi_n,
        ]);
        let mut bytes = w.finish();
        let crc = crc32fast::hash(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        bytes
    }

    pub fn restore(bytes: &[u8]) -> Result<CmaState, CmaError> {
        let corrupt = |e: crate::codec::DecodeError| CmaError::CorruptCheckpoint(e.to_string());
        if bytes.len() < 4 {
            return Err(CmaError::CorruptCheckpoint("truncated".into()));
        }
        let (body, crc) = bytes.split_at(bytes.len() - 4);
        let mut r = Reader::new(body);
        r.magic(CHECKPOINT_MAGIC).map_err(corrupt)?;
        let version = r.u32().map_err(corrupt)?;
        if version != CHECKPOINT_VERSION {
            return Err(CmaError::CorruptCheckpoint(format!("unsupported version {version}")));
        }
        if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
            return Err(CmaError::CorruptCheckpoint("checksum mismatch".into()));
        }
        let dim = r.u64().map_err(corrupt)? as usize;
        let lambda = r.u64().map_err(corrupt)? as usize;
        let generation = r.u64().map_err(corrupt)?;
        let seed = r.u64().map_err(corrupt)?;
        if dim == 0 || lambda < 2 || dim > (1 << 16) {
            return Err(CmaError::CorruptCheckpoint(format!("bad sizes dim={dim} lambda={lambda}")));
        }
        let mu = lambda / 2;
        let mean = r.f64s(dim).map_err(corrupt)?;
        let covariance = Matrix::from_vec(dim, dim, r.f64s(dim * dim).map_err(corrupt)?)
            .expect("length matches");
        let path_sigma = r.f64s(dim).map_err(corrupt)?;
        let path_c = r.f64s(dim).map_err(corrupt)?;
        let weights = r.f64s(mu).map_err(corrupt)?;
        let s = r.f64s(9).map_err(corrupt)?;
        r.expect_end().map_err(corrupt)?;

        let hyper = CmaHyper {
            lambda,
            mu,
            c_m: s[1],
            c_sigma: s[2],
            d_sigma: s[3],
            c_c: s[4],
            c_1: s[5],
            c_mu: s[6],
            mu_eff: s[7],
            chi_n: s[8],
        };
        let (basis, scales) = factorize(&covariance)
            .map_err(|e| CmaError::CorruptCheckpoint(e.to_string()))?;
        Ok(CmaState {
            dim,
            seed,
            generation,
            step_size: s[0],
            mean,
            covariance,
            path_sigma,
            path_c,
            weights,
            hyper,
            basis,
            scales,
            outstanding: false,
        })
    }
}
