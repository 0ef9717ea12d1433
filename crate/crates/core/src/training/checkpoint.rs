//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u32` format version, little-endian
//! `u64` header length, a JSON header of that length, then every tensor's
//! values as little-endian `f64` in header order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::ClusterMeans;
use crate::model::{EquiVae, ModelConfig};
use crate::nn::ParamGroup;
use crate::objectives::ClassPrior;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"EQVAECKP";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported checkpoint version {found} (this build reads {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint header: {0}")]
    CorruptHeader(String),
    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_config: ModelConfig,
    run_config: serde_json::Value,
    class_prior: Option<ClassPrior>,
    cluster_means: Option<ClusterMeans>,
    tensors: Vec<TensorRecord>,
}

/// Trained model plus everything needed to evaluate it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: EquiVae,
    /// Opaque snapshot of the run configuration that produced the model.
    pub run_config: serde_json::Value,
    pub class_prior: Option<ClassPrior>,
    pub cluster_means: Option<ClusterMeans>,
}

fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>, CheckpointError> {
    let store = &ckpt.model.params;
    let header = Header {
        model_config: ckpt.model.config().clone(),
        run_config: ckpt.run_config.clone(),
        class_prior: ckpt.class_prior.clone(),
        cluster_means: ckpt.cluster_means.clone(),
        tensors: store
            .ids()
            .map(|id| TensorRecord {
                name: store.name(id).to_string(),
                group: store.group(id),
                shape: store.get(id).shape().to_vec(),
            })
            .collect(),
    };
    let json =
        serde_json::to_vec(&header).map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + 8 * store.scalar_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for id in store.ids() {
        for v in store.get(id).data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::CorruptHeader("bad magic bytes".into()));
    }
    if bytes.len() < PREAMBLE {
        return Err(CheckpointError::Truncated {
            expected: PREAMBLE,
            found: bytes.len(),
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = PREAMBLE
        .checked_add(header_len)
        .ok_or_else(|| CheckpointError::CorruptHeader("header length overflows".into()))?;
    if bytes.len() < body {
        return Err(CheckpointError::Truncated {
            expected: body,
            found: bytes.len(),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..body])
        .map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
    let payload: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    let expected = body + 8 * payload;
    if bytes.len() != expected {
        if bytes.len() < expected {
            return Err(CheckpointError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        return Err(CheckpointError::CorruptHeader(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }

    // weights are overwritten below, so the init stream choice is irrelevant
    let mut model = EquiVae::new(&header.model_config, &mut rng::stream(0, Stream::Init))
        .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
    if model.params.len() != header.tensors.len() {
        return Err(CheckpointError::Mismatch(format!(
            "header lists {} tensors, architecture has {}",
            header.tensors.len(),
            model.params.len()
        )));
    }
    let mut offset = body;
    for record in &header.tensors {
        let id = model
            .params
            .id_of(&record.name)
            .ok_or_else(|| CheckpointError::Mismatch(format!("unknown tensor {}", record.name)))?;
        let n: usize = record.shape.iter().product();
        let values: Vec<f64> = bytes[offset..offset + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += 8 * n;
        let tensor = Tensor::new(record.shape.clone(), values)
            .map_err(|e| CheckpointError::CorruptHeader(format!("{}: {e}", record.name)))?;
        model
            .params
            .set(id, tensor)
            .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
    }
    Ok(Checkpoint {
        model,
        run_config: header.run_config,
        class_prior: header.class_prior,
        cluster_means: header.cluster_means,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let bytes = encode(ckpt)?;
    fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        decode(bytes)
    }
}
