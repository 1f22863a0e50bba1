//! Binary checkpoint container.
//!
//! ```text
//! "SOMNI"                      5 bytes magic
//! version                      u32 LE
//! meta length, meta            u32 LE, JSON (model config, stage, seed)
//! tensor count                 u32 LE
//! per tensor: name length u16, name, rank u8, extents u32 each
//! payload                      f32 LE, tensors in directory order
//! crc32                        u32 LE over every preceding byte
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{OmniError, Result};
use crate::model::{ModelConfig, ModelParams, OmniModel};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 5] = b"SOMNI";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    /// Last training stage completed (0 = initialization).
    pub stage: u8,
    pub seed: u64,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub fn encode<T: Scalar>(meta: &CheckpointMeta, params: &ModelParams<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let m = serde_json::to_vec(meta)?;
    out.extend_from_slice(&(m.len() as u32).to_le_bytes());
    out.extend_from_slice(&m);
    let named = params.named();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in &named {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
    }
    for (_, t) in &named {
        for v in t.data() {
            out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(OmniError::Checkpoint("unexpected end of data".into()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses a container. The checksum is verified before anything else is read.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(OmniError::Checkpoint("bad magic".into()));
    }
    if bytes.len() < MAGIC.len() + 8 {
        return Err(OmniError::Checkpoint("checksum mismatch (file truncated)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    if crc32fast::hash(body) != stored {
        return Err(OmniError::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader {
        buf: body,
        at: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(OmniError::Checkpoint(format!("unsupported version {version}")));
    }
    let mlen = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(mlen)?)?;
    let count = r.u32()? as usize;
    let mut dir = Vec::with_capacity(count);
    for _ in 0..count {
        let nb = r.take(2)?;
        let nlen = u16::from_le_bytes([nb[0], nb[1]]) as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| OmniError::Checkpoint("tensor name is not utf-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        dir.push((name, shape));
    }
    let mut tensors = Vec::with_capacity(count);
    for (name, shape) in dir {
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.at != body.len() {
        return Err(OmniError::Checkpoint(format!("{} trailing bytes", body.len() - r.at)));
    }
    Ok(Checkpoint { meta, tensors })
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &OmniModel<T>, stage: u8, seed: u64) -> Result<()> {
    let meta = CheckpointMeta {
        config: model.config().clone(),
        stage,
        seed,
    };
    std::fs::write(path, encode(&meta, &model.params)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| OmniError::Checkpoint(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

impl Checkpoint {
    /// Builds a model with the stored configuration.
    pub fn into_model<T: Scalar>(self) -> Result<(OmniModel<T>, CheckpointMeta)> {
        let config = self.meta.config.clone();
        self.into_model_with(config)
    }

    /// Builds a model for `config`; tensors must match its parameter set exactly.
    pub fn into_model_with<T: Scalar>(self, config: ModelConfig) -> Result<(OmniModel<T>, CheckpointMeta)> {
        let mut params = ModelParams::<T>::init(&config, 0)?;
        params
            .assign(self.tensors.into_iter().map(|(n, t)| (n, t.cast())).collect())
            .map_err(|e| OmniError::Checkpoint(format!("does not fit the configuration: {e}")))?;
        Ok((OmniModel::from_parts(config, params)?, self.meta))
    }
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(OmniModel<T>, CheckpointMeta)> {
    read_checkpoint(path)?.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_core_layers: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = OmniModel::<f32>::new(small(), 3).unwrap();
        let meta = CheckpointMeta {
            config: small(),
            stage: 2,
            seed: 3,
        };
        let bytes = encode(&meta, &m.params).unwrap();
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.meta, meta);
        let (back, _) = ck.into_model::<f32>().unwrap();
        for ((na, a), (nb, b)) in m.params.named().iter().zip(back.params.named()) {
            assert_eq!(na, &nb);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(encode(&meta, &back.params).unwrap(), bytes);
    }

    #[test]
    fn corruption_and_truncation_are_detected() {
        let m = OmniModel::<f32>::new(small(), 4).unwrap();
        let meta = CheckpointMeta {
            config: small(),
            stage: 1,
            seed: 4,
        };
        let bytes = encode(&meta, &m.params).unwrap();
        for cut in [bytes.len() - 1, bytes.len() / 2, 9] {
            let e = decode(&bytes[..cut]).err().unwrap().to_string();
            assert!(e.contains("checksum"), "{e}");
        }
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(decode(&flipped).err().unwrap().to_string().contains("checksum"));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(decode(&magic).err().unwrap().to_string().contains("magic"));
    }

    #[test]
    fn layer_count_mismatch_is_rejected() {
        let two = ModelConfig {
            n_core_layers: 2,
            ..small()
        };
        let four = ModelConfig {
            n_core_layers: 4,
            ..small()
        };
        let m = OmniModel::<f32>::new(two.clone(), 5).unwrap();
        let meta = CheckpointMeta {
            config: two,
            stage: 0,
            seed: 5,
        };
        let ck = decode(&encode(&meta, &m.params).unwrap()).unwrap();
        assert!(ck.into_model_with::<f32>(four).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = OmniModel::<f64>::new(small(), 6).unwrap();
        save_checkpoint(&p, &m, 3, 6).unwrap();
        let (back, meta) = load_checkpoint::<f64>(&p).unwrap();
        assert_eq!(meta.stage, 3);
        // 64-bit parameters survive at 32-bit precision
        let a: Tensor<f64> = m.params.text_head.cast::<f32>().cast();
        assert_eq!(a.data(), back.params.text_head.data());
    }
}
