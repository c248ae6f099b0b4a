//! Model checkpoints.
//!
//! Layout: the 8-byte magic `EEXCKPT1`, a little-endian `u64` header length,
//! a JSON header, then every listed array as raw little-endian `f64`s in
//! header order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, MultiExitModel};
use crate::optim::OptimizerState;
use crate::tensor::Tensor;
use crate::training::{TrainConfig, TrainProgress, TrainState};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"EEXCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    arrays: Vec<ArrayEntry>,
    #[serde(default)]
    train_config: Option<TrainConfig>,
    #[serde(default)]
    progress: Option<TrainProgress>,
    #[serde(default)]
    optimizer_step: Option<u64>,
}

/// Optional training context stored next to the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointExtras {
    pub train_config: Option<TrainConfig>,
    pub state: Option<TrainState>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

/// Serializes `model` and `extras` to bytes.
pub fn encode(model: &MultiExitModel, extras: &CheckpointExtras) -> Result<Vec<u8>> {
    let mut arrays: Vec<(String, &Tensor)> = model.named_params();
    if let Some(state) = &extras.state {
        let names: Vec<String> = arrays.iter().map(|(n, _)| n.clone()).collect();
        for (n, t) in names.iter().zip(&state.optimizer.first) {
            arrays.push((format!("optim.first.{n}"), t));
        }
        for (n, t) in names.iter().zip(&state.optimizer.second) {
            arrays.push((format!("optim.second.{n}"), t));
        }
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        model: model.config().clone(),
        arrays: arrays
            .iter()
            .map(|(name, t)| ArrayEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        train_config: extras.train_config.clone(),
        progress: extras.state.as_ref().map(|s| s.progress.clone()),
        optimizer_step: extras.state.as_ref().map(|s| s.optimizer.step),
    };
    let json = serde_json::to_vec(&header)?;
    let body: usize = arrays.iter().map(|(_, t)| t.numel() * 8).sum();
    let mut out = Vec::with_capacity(16 + json.len() + body);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &arrays {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses bytes produced by [`encode`]. Nothing is returned unless the whole
/// container is valid.
pub fn decode(bytes: &[u8]) -> Result<(MultiExitModel, CheckpointExtras)> {
    if bytes.len() < 16 {
        return Err(corrupt("file shorter than the fixed preamble"));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(16..16usize.saturating_add(len))
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| corrupt(format!("header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion(header.version));
    }
    header.model.validate()?;

    let mut body = &bytes[16 + len..];
    let mut tensors = Vec::with_capacity(header.arrays.len());
    for entry in &header.arrays {
        let numel: usize = entry.shape.iter().product();
        let size = numel
            .checked_mul(8)
            .filter(|&s| s <= body.len())
            .ok_or_else(|| corrupt(format!("truncated array {}", entry.name)))?;
        let data = body[..size]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        body = &body[size..];
        tensors.push(Tensor::new(entry.shape.clone(), data)?);
    }
    if !body.is_empty() {
        return Err(corrupt(format!("{} trailing bytes", body.len())));
    }

    let template = MultiExitModel::init(header.model.clone())?;
    let expected: Vec<String> = template.named_params().into_iter().map(|(n, _)| n).collect();
    let p = expected.len();
    let names: Vec<&str> = header.arrays.iter().map(|a| a.name.as_str()).collect();
    if names.len() < p || names[..p] != expected.iter().map(String::as_str).collect::<Vec<_>>()[..] {
        return Err(corrupt("parameter names do not match the model config"));
    }
    let mut rest = tensors.split_off(p);
    let model = MultiExitModel::from_params(header.model, tensors)?;

    let state = match (header.progress, header.optimizer_step) {
        (Some(progress), Some(step)) => {
            if rest.len() != 2 * p {
                return Err(corrupt("optimizer state incomplete"));
            }
            let second = rest.split_off(p);
            let first = rest;
            let shapes_match = model
                .named_params()
                .iter()
                .zip(first.iter().zip(&second))
                .all(|((_, t), (a, b))| t.shape() == a.shape() && t.shape() == b.shape());
            if !shapes_match {
                return Err(corrupt("optimizer state shapes do not match parameters"));
            }
            Some(TrainState {
                progress,
                optimizer: OptimizerState {
                    first,
                    second,
                    step,
                },
            })
        }
        (None, None) if rest.is_empty() => None,
        _ => return Err(corrupt("inconsistent training state")),
    };
    Ok((
        model,
        CheckpointExtras {
            train_config: header.train_config,
            state,
        },
    ))
}

pub fn save_checkpoint(path: &Path, model: &MultiExitModel, extras: &CheckpointExtras) -> Result<()> {
    let bytes = encode(model, extras)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(MultiExitModel, CheckpointExtras)> {
    decode(&std::fs::read(path)?)
}
