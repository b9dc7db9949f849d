//! Model checkpoint container.
//!
//! ```text
//! "ESSM" | version u32 | arch u8 (1 transformer, 2 mlp) | shape u32[5] |
//! precision u8 | max_new_tokens u32 | count u32 |
//!   per weight: name (u16 len + UTF-8) | rows u32 | cols u32 | f64 row-major
//! ```
//! Transformer shape fields are layers, d_model, heads, d_ff, max_seq; the
//! MLP uses context, d_embed, hidden followed by two zeros.

use super::{Architecture, MlpShape, ModelError, PolicyModel, Precision, TransformerShape};
use crate::codec::{DecodeError, Reader, Writer};
use crate::linalg::Matrix;

pub const MODEL_MAGIC: &[u8; 4] = b"ESSM";
pub const MODEL_VERSION: u32 = 1;

impl PolicyModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MODEL_MAGIC);
        w.u32(MODEL_VERSION);
        let (tag, fields) = match self.arch {
            Architecture::Transformer(s) => (1u8, [s.layers, s.d_model, s.heads, s.d_ff, s.max_seq]),
            Architecture::Mlp(s) => (2u8, [s.context, s.d_embed, s.hidden, 0, 0]),
        };
        w.u8(tag);
        for f in fields {
            w.u32(f as u32);
        }
        w.u8(self.precision.tag());
        w.u32(self.max_new_tokens as u32);
        w.u32(self.weights.len() as u32);
        for (name, m) in self.names.iter().zip(&self.weights) {
            w.str16(name);
            w.u32(m.rows() as u32);
            w.u32(m.cols() as u32);
            w.f64s(m.as_slice());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<PolicyModel, ModelError> {
        let mut r = Reader::new(bytes);
        r.magic(MODEL_MAGIC)?;
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(DecodeError::Version(version).into());
        }
        let tag = r.u8()?;
        let mut f = [0usize; 5];
        for v in f.iter_mut() {
            *v = r.u32()? as usize;
        }
        let arch = match tag {
            1 => Architecture::Transformer(TransformerShape {
                layers: f[0],
                d_model: f[1],
                heads: f[2],
                d_ff: f[3],
                max_seq: f[4],
            }),
            2 => Architecture::Mlp(MlpShape {
                context: f[0],
                d_embed: f[1],
                hidden: f[2],
            }),
            other => return Err(DecodeError::Invalid(format!("architecture tag {other}")).into()),
        };
        arch.validate()?;
        let precision = Precision::from_tag(r.u8()?)
            .ok_or_else(|| DecodeError::Invalid("precision tag".into()))?;
        let max_new_tokens = r.u32()? as usize;
        let specs = arch.weight_specs();
        let count = r.u32()? as usize;
        if count != specs.len() {
            return Err(DecodeError::Invalid(format!("{count} weights, architecture has {}", specs.len())).into());
        }
        let mut weights = Vec::with_capacity(count);
        for spec in &specs {
            let name = r.str16()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            if name != spec.name || (rows, cols) != (spec.rows, spec.cols) {
                return Err(DecodeError::Invalid(format!(
                    "weight {name} {rows}×{cols} where {} {}×{} was expected",
                    spec.name, spec.rows, spec.cols
                ))
                .into());
            }
            weights.push(Matrix::from_vec(rows, cols, r.f64s(rows * cols)?).expect("length matches"));
        }
        r.expect_end()?;
        Self::from_weights(arch, precision, weights, max_new_tokens.max(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        for arch in [
            Architecture::Transformer(TransformerShape {
                layers: 2,
                d_model: 8,
                heads: 2,
                d_ff: 8,
                max_seq: 10,
            }),
            Architecture::Mlp(MlpShape {
                context: 2,
                d_embed: 3,
                hidden: 5,
            }),
        ] {
            let model = PolicyModel::new(arch, 3).unwrap().quantize_base(Precision::SimInt4).unwrap();
            let bytes = model.to_bytes();
            assert_eq!(&bytes[..4], b"ESSM");
            let back = PolicyModel::from_bytes(&bytes).unwrap();
            assert_eq!(back, model);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let model = PolicyModel::new(
            Architecture::Mlp(MlpShape {
                context: 2,
                d_embed: 3,
                hidden: 5,
            }),
            1,
        )
        .unwrap();
        let bytes = model.to_bytes();
        assert!(PolicyModel::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[8] = 7;
        assert!(PolicyModel::from_bytes(&bad).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(PolicyModel::from_bytes(&extra).is_err());
    }
}
