//! Checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"RGFSCKPT"          magic, 8 bytes
//! u32                  format version
//! u64                  header length in bytes
//! header               JSON: architecture, optional training state, tensor names + shapes
//! f64 * N              parameter values, tensor by tensor, row-major
//! f64 * N, f64 * N     optimiser first/second moments (only with training state)
//! [u8; 32]             SHA-256 of everything above
//! ```
//!
//! Loading verifies the digest before parsing anything, so a truncated or
//! corrupted file never yields partial state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, RgfsError};
use crate::network::{ArchitectureConfig, Network, ParamStore};
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"RGFSCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSnapshot {
    pub config: TrainConfig,
    /// Number of completed episodes.
    pub episode_index: usize,
    pub adam_step: u64,
    pub first_moment: ParamStore,
    pub second_moment: ParamStore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchitectureConfig,
    pub params: ParamStore,
    pub training: Option<TrainingSnapshot>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct TrainingHeader {
    config: TrainConfig,
    episode_index: usize,
    adam_step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchitectureConfig,
    tensors: Vec<TensorEntry>,
    training: Option<TrainingHeader>,
}

impl Checkpoint {
    pub fn network(&self) -> Result<Network> {
        Network::from_params(self.arch.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            arch: self.arch.clone(),
            tensors: self
                .params
                .iter()
                .map(|t| TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
            training: self.training.as_ref().map(|t| TrainingHeader {
                config: t.config.clone(),
                episode_index: t.episode_index,
                adam_step: t.adam_step,
            }),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut put = |store: &ParamStore| {
            for t in store.iter() {
                for v in &t.values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        };
        put(&self.params);
        if let Some(t) = &self.training {
            put(&t.first_moment);
            put(&t.second_moment);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| RgfsError::Checkpoint(format!("corrupt checkpoint: {what}"));
        if bytes.len() < 8 + 4 + 8 + 32 || &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic or truncated file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(RgfsError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| corrupt("header length"))?;
        let header: Header =
            serde_json::from_slice(&body[20..header_end]).map_err(|e| corrupt(&format!("header: {e}")))?;

        let mut cursor = header_end;
        let mut take = |entries: &[TensorEntry]| -> Result<ParamStore> {
            let mut store = ParamStore::new();
            for e in entries {
                let n: usize = e.shape.iter().product();
                let end = cursor + n * 8;
                if end > body.len() {
                    return Err(corrupt("payload truncated"));
                }
                let values = body[cursor..end]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                cursor = end;
                store.push(e.name.clone(), e.shape.clone(), values);
            }
            Ok(store)
        };
        let params = take(&header.tensors)?;
        let training = match header.training {
            Some(t) => Some(TrainingSnapshot {
                config: t.config,
                episode_index: t.episode_index,
                adam_step: t.adam_step,
                first_moment: take(&header.tensors)?,
                second_moment: take(&header.tensors)?,
            }),
            None => None,
        };
        if cursor != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        // validates every name and shape against the architecture
        Network::from_params(header.arch.clone(), params.clone())?;
        Ok(Checkpoint {
            arch: header.arch,
            params,
            training,
        })
    }

    /// Writes via a temporary file and rename, so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| RgfsError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| RgfsError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| RgfsError::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageShape;

    fn tiny() -> Checkpoint {
        let arch = ArchitectureConfig {
            input: ImageShape::new(8, 8, 1),
            stage_channels: vec![2, 2],
            bottleneck_channels: 2,
            embedding_dim: 3,
            norm_groups: 1,
            dropblock: Default::default(),
            dropblock_stages: 1,
        };
        let net = Network::new(arch.clone(), 5).unwrap();
        Checkpoint {
            arch,
            params: net.into_params(),
            training: None,
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = tiny();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = tiny().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("corrupt"), "{err}");
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn version_mismatch_names_both() {
        let mut bytes = tiny().to_bytes();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('7') && msg.contains(&FORMAT_VERSION.to_string()), "{msg}");
    }

    #[test]
    fn shape_validation_on_load() {
        let mut c = tiny();
        c.arch.embedding_dim = 4;
        let err = Checkpoint::from_bytes(&c.to_bytes()).unwrap_err();
        assert!(err.to_string().contains("head.fc.weight"), "{err}");
    }
}
