//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CVTX1"
//! u32 manifest length, manifest bytes (UTF-8 `key = value` text)
//! u32 record count
//! per record: u32 name length, name, u8 rank (4), rank × u32 dims, raw scalars
//! ```
//!
//! Scalars are 32-bit unless the manifest says `scalar_bits = 64`. Optimizer
//! moments, when present, are stored as records named `optim.m/<param>` and
//! `optim.v/<param>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub const MAGIC: &[u8; 5] = b"CVTX1";

const M_PREFIX: &str = "optim.m/";
const V_PREFIX: &str = "optim.v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    scalar_bits: u32,
    step: u64,
    seed: u64,
    model: ModelConfig,
}

/// Adam first and second moments, keyed like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: ModelConfig,
    pub step: u64,
    pub seed: u64,
    pub params: ParamStore<T>,
    pub moments: Option<Moments<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            scalar_bits: T::BITS,
            step: self.step,
            seed: self.seed,
            model: self.model.clone(),
        };
        let text = toml::to_string(&manifest)
            .map_err(|e| Error::Checkpoint(format!("cannot encode manifest: {e}")))?;

        let mut records: Vec<(String, &Tensor<T>)> =
            self.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
        if let Some(mo) = &self.moments {
            records.extend(mo.m.iter().map(|(n, t)| (format!("{M_PREFIX}{n}"), t)));
            records.extend(mo.v.iter().map(|(n, t)| (format!("{V_PREFIX}{n}"), t)));
        }

        let payload: usize = records.iter().map(|(_, t)| t.numel()).sum();
        let mut out = Vec::with_capacity(64 + text.len() + payload * (T::BITS as usize / 8));
        out.extend_from_slice(MAGIC);
        push_u32(&mut out, text.len())?;
        out.extend_from_slice(text.as_bytes());
        push_u32(&mut out, records.len())?;
        for (name, t) in records {
            push_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            out.push(4);
            for d in t.shape().dims() {
                push_u32(&mut out, d)?;
            }
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
        Ok(out)
    }

    /// Decodes a checkpoint. Stored scalars of the other width are converted.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic (not a CVTX1 checkpoint)".into()));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;
        let manifest: Manifest = toml::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
        if manifest.scalar_bits != 32 && manifest.scalar_bits != 64 {
            return Err(Error::Checkpoint(format!(
                "unsupported scalar_bits {}",
                manifest.scalar_bits
            )));
        }
        let width = manifest.scalar_bits as usize / 8;

        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0];
            if rank != 4 {
                return Err(Error::Checkpoint(format!("record `{name}` has rank {rank}, expected 4")));
            }
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = r.u32()? as usize;
            }
            let shape = Shape::from_dims(dims);
            let raw = r.take(shape.numel() * width).map_err(|_| {
                Error::Checkpoint(format!("record `{name}` is truncated"))
            })?;
            let data: Vec<T> = if width * 8 == T::BITS as usize {
                raw.chunks_exact(width).map(T::read_le).collect()
            } else if width == 4 {
                raw.chunks_exact(4)
                    .map(|c| T::from_f64(f32::read_le(c) as f64))
                    .collect()
            } else {
                raw.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c))).collect()
            };
            let t = Tensor::from_vec(shape, data)?;
            let dup = |e: Error| Error::Checkpoint(e.to_string());
            if let Some(rest) = name.strip_prefix(M_PREFIX) {
                m.insert(rest, t).map_err(dup)?;
            } else if let Some(rest) = name.strip_prefix(V_PREFIX) {
                v.insert(rest, t).map_err(dup)?;
            } else {
                params.insert(name, t).map_err(dup)?;
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last record",
                bytes.len() - r.pos
            )));
        }
        let moments = match (m.is_empty(), v.is_empty()) {
            (true, true) => None,
            (false, false) => Some(Moments { m, v }),
            _ => return Err(Error::Checkpoint("only one of the two optimizer moments is present".into())),
        };
        Ok(Checkpoint {
            model: manifest.model,
            step: manifest.step,
            seed: manifest.seed,
            params,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes)
            .map_err(|e| Error::io(format!("writing checkpoint {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }
}

fn push_u32(out: &mut Vec<u8>, x: usize) -> Result<()> {
    let x = u32::try_from(x).map_err(|_| Error::Checkpoint(format!("{x} does not fit in u32")))?;
    out.extend_from_slice(&x.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "unexpected end of file at byte {} (wanted {n} more)",
                self.pos
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConvTransformer;

    fn sample<T: Scalar>(with_moments: bool) -> Checkpoint<T> {
        let model = ConvTransformer::new(ModelConfig::micro()).unwrap();
        let params: ParamStore<T> = model.init_params(7);
        let moments = with_moments.then(|| Moments {
            m: params.clone(),
            v: model.init_params(8),
        });
        Checkpoint {
            model: ModelConfig::micro(),
            step: 12,
            seed: 7,
            params,
            moments,
        }
    }

    #[test]
    fn round_trip_is_bitwise_f32() {
        let c = sample::<f32>(true);
        let back = Checkpoint::<f32>::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn round_trip_is_bitwise_f64() {
        let c = sample::<f64>(false);
        let back = Checkpoint::<f64>::from_bytes(&c.to_bytes().unwrap()).unwrap();
        for ((_, a), (_, b)) in c.params.iter().zip(back.params.iter()) {
            assert!(a.bitwise_eq(b));
        }
        assert!(back.moments.is_none());
    }

    #[test]
    fn starts_with_magic() {
        let bytes = sample::<f32>(false).to_bytes().unwrap();
        assert_eq!(&bytes[..5], b"CVTX1");
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = sample::<f32>(false).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&bad).is_err());
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::<f32>::from_bytes(&long).is_err());
    }

    #[test]
    fn widening_load_preserves_values() {
        let c = sample::<f32>(false);
        let wide = Checkpoint::<f64>::from_bytes(&c.to_bytes().unwrap()).unwrap();
        for ((_, a), (_, b)) in c.params.iter().zip(wide.params.iter()) {
            assert_eq!(a.cast::<f64>(), *b);
        }
    }
}
