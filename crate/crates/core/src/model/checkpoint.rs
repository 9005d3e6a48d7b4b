//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "BDAE"  u32 version
//! u32 len, arch config JSON        [u8; 32] SHA-256 of that JSON
//! u32 epoch                        [u8; 32] training-config digest
//! u32 tensor count, then per tensor:
//!   u32 len, name   u8 dtype (1 = f32, 2 = f64)   u8 rank   u32 dims[rank]   raw values
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::arch::ArchConfig;
use crate::model::graph::ModelGraph;
use crate::tensor::{DType, Element, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"BDAE";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelGraph<f32>,
    pub epoch: u32,
    /// Digest of whatever training configuration produced the weights.
    pub config_hash: [u8; 32],
}

impl Checkpoint {
    pub fn new(model: ModelGraph<f32>, epoch: u32, config_json: &[u8]) -> Self {
        Checkpoint {
            model,
            epoch,
            config_hash: Sha256::digest(config_json).into(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let arch = serde_json::to_vec(self.model.arch()).expect("arch config serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_bytes(&mut out, &arch);
        out.extend_from_slice(&Sha256::digest(&arch));
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        let tensors = self.model.named_tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            put_bytes(&mut out, name.as_bytes());
            out.push(f32::DTYPE.code());
            out.push(t.dims().len() as u8);
            for &d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::CorruptCheckpoint("missing BDAE magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let arch_len = r.u32()? as usize;
        let arch_json = r.take(arch_len)?;
        let stored_hash = r.take(32)?;
        if Sha256::digest(arch_json).as_slice() != stored_hash {
            return Err(Error::CorruptCheckpoint(
                "architecture digest does not match its JSON".into(),
            ));
        }
        let arch: ArchConfig = serde_json::from_slice(arch_json)
            .map_err(|e| Error::CorruptCheckpoint(format!("architecture JSON: {e}")))?;
        let epoch = r.u32()?;
        let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let mut model = ModelGraph::<f32>::new(arch, 0)?;
        let count = r.u32()? as usize;
        let mut slots = model.named_tensors_mut();
        if count != slots.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{count} tensors stored, architecture has {}",
                slots.len()
            )));
        }
        for (expected_name, slot) in slots.iter_mut() {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?;
            if name != expected_name {
                return Err(Error::CorruptCheckpoint(format!(
                    "expected tensor {expected_name}, found {name}"
                )));
            }
            let dtype =
                DType::from_code(r.u8()?).ok_or_else(|| Error::CorruptCheckpoint(format!("{name}: unknown dtype")))?;
            let rank = r.u8()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if dims != slot.dims() {
                return Err(Error::CorruptCheckpoint(format!(
                    "{name}: stored shape {dims:?}, expected {:?}",
                    slot.dims()
                )));
            }
            let n: usize = dims.iter().product();
            let raw = r.take(n * dtype.size())?;
            let data: Vec<f32> = match dtype {
                DType::F32 => raw.chunks_exact(4).map(f32::read_le).collect(),
                DType::F64 => raw.chunks_exact(8).map(|c| f64::read_le(c) as f32).collect(),
            };
            **slot = Tensor::from_vec(&dims, data)?;
        }
        drop(slots);
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            model,
            epoch,
            config_hash,
        })
    }
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::CorruptCheckpoint(format!(
                    "needed {n} bytes at offset {}, file ends at {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint.to_bytes()).map_err(Error::at_path(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(Error::at_path(path))?;
    Checkpoint::from_bytes(&bytes)
}

/// Load, insisting the stored architecture equals `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ArchConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    let found = ckpt.model.arch().hash();
    if found != expected.hash() {
        return Err(Error::HashMismatch {
            expected: expected.hash(),
            found,
        });
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;

    fn sample() -> Checkpoint {
        Checkpoint::new(ModelGraph::new(ArchConfig::tiny(1), 9).unwrap(), 4, b"{}")
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
        let x = Tensor::uniform(&[1, 16, 16, 16, 1], 0.0, 1.0, 2).unwrap();
        let a = ckpt.model.forward(&x, Mode::Infer, 0).unwrap();
        let b = back.model.forward(&x, Mode::Infer, 0).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn every_truncation_is_reported() {
        let bytes = sample().to_bytes();
        for cut in [0, 3, 7, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::CorruptCheckpoint(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn version_is_checked() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::VersionMismatch { expected: 1, found: 9 })
        ));
    }

    #[test]
    fn flipped_arch_byte_is_caught() {
        let mut bytes = sample().to_bytes();
        bytes[14] ^= 1;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn wrong_architecture_is_a_hash_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bdae");
        save_checkpoint(&sample(), &path).unwrap();
        assert!(load_checkpoint_for(&path, &ArchConfig::tiny(1)).is_ok());
        let other = ArchConfig::tiny(1).with_regularization(false, true);
        assert!(matches!(
            load_checkpoint_for(&path, &other),
            Err(Error::HashMismatch { .. })
        ));
    }
}
