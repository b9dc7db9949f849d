//! Adapter checkpoint container.
//!
//! ```text
//! "ESSA" | version u32 | count u32 |
//!   per adapter: name (u16 len + UTF-8) | m u32 | r u32 | n u32 |
//!                B, A, U_A, σ_A, Vt_A, U_B, σ_B, Vt_B   (row-major f32)
//! ```
//! All integers and floats are little-endian.

use super::{LowRankAdapter, LowRankError};
use crate::codec::{DecodeError, Reader, Writer};
use crate::linalg::{Matrix, SvdFactors};

pub const ADAPTER_MAGIC: &[u8; 4] = b"ESSA";
pub const ADAPTER_VERSION: u32 = 1;

/// Serialises decomposed adapters. Values are stored as `f32`.
pub fn write_adapters(adapters: &[LowRankAdapter]) -> Result<Vec<u8>, LowRankError> {
    let mut w = Writer::new();
    w.bytes(ADAPTER_MAGIC);
    w.u32(ADAPTER_VERSION);
    w.u32(adapters.len() as u32);
    for adapter in adapters {
        let (Some(sa), Some(sb)) = (adapter.svd_a(), adapter.svd_b()) else {
            return Err(LowRankError::NotDecomposed(adapter.name.clone()));
        };
        let (m, n) = adapter.target_shape();
        w.str16(&adapter.name);
        w.u32(m as u32);
        w.u32(adapter.rank() as u32);
        w.u32(n as u32);
        for values in [
            adapter.b.as_slice(),
            adapter.a.as_slice(),
            sa.u.as_slice(),
            &sa.sigma,
            sa.vt.as_slice(),
            sb.u.as_slice(),
            &sb.sigma,
            sb.vt.as_slice(),
        ] {
            w.f32s(values);
        }
    }
    Ok(w.finish())
}

pub fn read_adapters(bytes: &[u8]) -> Result<Vec<LowRankAdapter>, LowRankError> {
    let mut r = Reader::new(bytes);
    r.magic(ADAPTER_MAGIC)?;
    let version = r.u32()?;
    if version != ADAPTER_VERSION {
        return Err(DecodeError::Version(version).into());
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = r.str16()?;
        let m = r.u32()? as usize;
        let rank = r.u32()? as usize;
        let n = r.u32()? as usize;
        let mut matrix = |rows: usize, cols: usize| -> Result<Matrix, LowRankError> {
            let data = r.f32s(rows * cols)?;
            Ok(Matrix::from_vec(rows, cols, data).expect("length matches"))
        };
        let b = matrix(m, rank)?;
        let a = matrix(rank, n)?;
        let u_a = matrix(rank, rank)?;
        let sigma_a = matrix(1, rank)?.into_vec();
        let vt_a = matrix(rank, n)?;
        let u_b = matrix(m, rank)?;
        let sigma_b = matrix(1, rank)?.into_vec();
        let vt_b = matrix(rank, rank)?;
        out.push(LowRankAdapter::from_parts(
            name,
            b,
            a,
            SvdFactors {
                u: u_a,
                sigma: sigma_a,
                vt: vt_a,
            },
            SvdFactors {
                u: u_b,
                sigma: sigma_b,
                vt: vt_b,
            },
        )?);
    }
    r.expect_end()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<LowRankAdapter> {
        let b = Matrix::from_fn(3, 2, |r, c| (r as f64 + 1.0) * 0.5 - c as f64);
        let a = Matrix::from_fn(2, 4, |r, c| (c as f64 - r as f64) * 0.25);
        vec![LowRankAdapter::new("layer0.q", b, a).unwrap().decompose().unwrap()]
    }

    #[test]
    fn layout_is_little_endian_and_sized() {
        let bytes = write_adapters(&sample()).unwrap();
        assert_eq!(&bytes[0..4], b"ESSA");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        let name_len = 8;
        let floats = 3 * 2 + 2 * 4 + 2 * 2 + 2 + 2 * 4 + 3 * 2 + 2 + 2 * 2;
        assert_eq!(bytes.len(), 12 + 2 + name_len + 12 + 4 * floats);
    }

    #[test]
    fn round_trip_within_f32() {
        let adapters = sample();
        let back = read_adapters(&write_adapters(&adapters).unwrap()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].name, "layer0.q");
        assert!(back[0].a.max_abs_diff(&adapters[0].a) < 1e-6);
        assert!(back[0].svd_b().unwrap().reconstruct().max_abs_diff(&adapters[0].b) < 1e-6);
        // f32 values survive a second round trip exactly.
        let again = write_adapters(&back).unwrap();
        assert_eq!(again, write_adapters(&adapters).unwrap());
    }

    #[test]
    fn truncated_and_bad_magic() {
        let bytes = write_adapters(&sample()).unwrap();
        assert!(read_adapters(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_adapters(&bad),
            Err(LowRankError::Checkpoint(DecodeError::BadMagic(_)))
        ));
    }

    #[test]
    fn refuses_undecomposed() {
        let raw = LowRankAdapter::new("x", Matrix::identity(2), Matrix::identity(2)).unwrap();
        assert!(write_adapters(&[raw]).is_err());
    }
}
