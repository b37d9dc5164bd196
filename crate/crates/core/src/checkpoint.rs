//! Binary checkpoints.
//!
//! Layout: `b"FTCK"`, `u8` version, `u32` little-endian metadata length,
//! UTF-8 JSON metadata, then every parameter tensor as a tensor container
//! in declaration order (`enc1.w`, `enc1.b`, ..., `dec5.b`).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_error, Error, Result};
use crate::model::{ArchConfig, Layer, ModelParams};
use crate::optim::Param;
use crate::residual::ResidualConfig;
use crate::tensor::{Cursor, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FTCK";
pub const CHECKPOINT_VERSION: u8 = 1;

/// JSON header stored ahead of the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: ArchConfig,
    pub gamma: f32,
    /// Preprocessing the model was trained with.
    pub residual: ResidualConfig,
    /// Free-form description of how the parameters were produced. Kept
    /// free of timestamps so identical runs give identical files.
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

impl CheckpointMeta {
    pub fn new(arch: ArchConfig, gamma: f32, residual: ResidualConfig) -> Self {
        Self {
            arch,
            gamma,
            residual,
            provenance: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.provenance.insert(key.to_string(), value.to_string());
        self
    }
}

pub fn checkpoint_bytes(model: &ModelParams, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    model.ensure_arch(&meta.arch)?;
    let json = serde_json::to_vec(meta)?;
    let mut out = Vec::with_capacity(9 + json.len() + 4 * model.num_parameters() + 64 * 20);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params() {
        p.value.write_container(&mut out);
    }
    Ok(out)
}

/// Parses a checkpoint; nothing is returned unless every byte is accounted for.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<(ModelParams, CheckpointMeta)> {
    let mut cursor = Cursor { bytes, pos: 0 };
    let magic = cursor.take(4, "checkpoint magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad checkpoint magic {magic:?}"),
        });
    }
    let version = cursor.u8("checkpoint version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let len = cursor.u32("metadata length")? as usize;
    let json_at = cursor.pos;
    let json = cursor.take(len, "metadata")?;
    let meta: CheckpointMeta = serde_json::from_slice(json).map_err(|e| Error::Format {
        offset: json_at,
        message: format!("invalid metadata: {e}"),
    })?;
    meta.arch.validate()?;

    let mut offset = cursor.pos;
    let mut layers = Vec::new();
    for (name, cout, cin, stride) in meta.arch.layer_plan() {
        let mut read = |expected: Vec<usize>| -> Result<Param> {
            let at = offset;
            let t = Tensor::read_container(bytes, &mut offset)?;
            if t.shape() != expected.as_slice() {
                return Err(Error::Format {
                    offset: at,
                    message: format!(
                        "{name}: tensor shape {:?}, expected {expected:?}",
                        t.shape()
                    ),
                });
            }
            Ok(Param::new(t))
        };
        let weight = read(vec![cout, cin, 3, 3])?;
        let bias = read(vec![cout])?;
        layers.push(Layer {
            name,
            weight,
            bias,
            stride,
        });
    }
    if offset != bytes.len() {
        return Err(Error::Format {
            offset,
            message: format!("{} trailing bytes", bytes.len() - offset),
        });
    }
    let model = ModelParams {
        arch: meta.arch.clone(),
        layers,
    };
    Ok((model, meta))
}

pub fn save_checkpoint(model: &ModelParams, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(model, meta)?;
    std::fs::write(path, bytes).map_err(io_error(path))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(io_error(path))?;
    parse_checkpoint(&bytes)
}

/// Loads a checkpoint and fails unless it matches `expected`.
pub fn load_checkpoint_for(
    path: &Path,
    expected: &ArchConfig,
) -> Result<(ModelParams, CheckpointMeta)> {
    let (model, meta) = load_checkpoint(path)?;
    model.ensure_arch(expected)?;
    Ok((model, meta))
}
