use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{Adam, Plateau};
use super::{EpochRecord, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::network::{ModelConfig, ModelParams};
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ACKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrayGroup {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub group: ArrayGroup,
    pub shape: [usize; 2],
    /// Offset into the blob, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub lr: f64,
    pub adam_step: u64,
    pub scheduler: Plateau,
    pub best_val_loss: Option<f64>,
    pub lr_history: Vec<f64>,
    pub history: Vec<EpochRecord>,
    pub arrays: Vec<ArrayEntry>,
}

/// Model configuration, training configuration and state restored from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub state: TrainState,
}

/// Layout: magic, `u32` version, `u64` metadata length, JSON metadata, then
/// every array as `f32` little-endian in index order.
pub fn encode_checkpoint(
    model: &ModelConfig,
    train: &TrainConfig,
    state: &TrainState,
) -> Result<Vec<u8>> {
    let mut arrays = Vec::new();
    let mut blob: Vec<&Matrix> = Vec::new();
    let mut offset = 0;
    let groups = [
        (ArrayGroup::Param, &state.params.values),
        (ArrayGroup::AdamM, &state.adam.m),
        (ArrayGroup::AdamV, &state.adam.v),
    ];
    for (group, values) in groups {
        for (name, m) in state.params.names.iter().zip(values.iter()) {
            if !m.all_finite() {
                return Err(Error::NonFinite(format!("checkpoint array {name}")));
            }
            arrays.push(ArrayEntry {
                name: name.clone(),
                group,
                shape: [m.rows, m.cols],
                offset,
            });
            offset += m.len();
            blob.push(m);
        }
    }
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        model: model.clone(),
        train: TrainConfig {
            checkpoint_dir: None,
            ..train.clone()
        },
        epoch: state.epoch,
        lr: state.lr,
        adam_step: state.adam.step,
        scheduler: state.scheduler.clone(),
        best_val_loss: state.best_val_loss,
        lr_history: state.lr_history.clone(),
        history: state.history.clone(),
        arrays,
    };
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(16 + json.len() + offset * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for m in blob {
        for &v in &m.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json_end = 16usize
        .checked_add(json_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated metadata".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[16..json_end])?;
    let blob = &bytes[json_end..];
    let total: usize = meta.arrays.iter().map(|a| a.shape[0] * a.shape[1]).sum();
    if blob.len() != total * 4 {
        return Err(bad(format!(
            "blob holds {} bytes, index needs {}",
            blob.len(),
            total * 4
        )));
    }
    let mut names = Vec::new();
    let (mut params, mut m, mut v) = (Vec::new(), Vec::new(), Vec::new());
    for a in &meta.arrays {
        let len = a.shape[0] * a.shape[1];
        if a.offset + len > total {
            return Err(bad(format!("array {} out of range", a.name)));
        }
        let data = blob[a.offset * 4..(a.offset + len) * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let mat = Matrix::from_vec(a.shape[0], a.shape[1], data);
        match a.group {
            ArrayGroup::Param => {
                names.push(a.name.clone());
                params.push(mat);
            }
            ArrayGroup::AdamM => m.push(mat),
            ArrayGroup::AdamV => v.push(mat),
        }
    }
    let params = ModelParams {
        names,
        values: params,
    };
    params.check_against(&meta.model)?;
    let shapes_match = |ms: &[Matrix]| {
        ms.len() == params.values.len()
            && ms
                .iter()
                .zip(&params.values)
                .all(|(a, b)| a.shape() == b.shape())
    };
    if !shapes_match(&m) || !shapes_match(&v) {
        return Err(bad("optimizer moments do not match parameters".into()));
    }
    let mut adam = Adam::new(&params.values);
    adam.step = meta.adam_step;
    adam.m = m;
    adam.v = v;
    Ok(Checkpoint {
        model: meta.model,
        train: meta.train,
        state: TrainState {
            params,
            adam,
            epoch: meta.epoch,
            lr: meta.lr,
            scheduler: meta.scheduler,
            best_val_loss: meta.best_val_loss,
            lr_history: meta.lr_history,
            history: meta.history,
        },
    })
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &ModelConfig,
    train: &TrainConfig,
    state: &TrainState,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(model, train, state)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads a checkpoint and checks it was written for `model`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, model: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if &ckpt.model != model {
        return Err(Error::Checkpoint(
            "checkpoint was written for a different model configuration".into(),
        ));
    }
    Ok(ckpt)
}
