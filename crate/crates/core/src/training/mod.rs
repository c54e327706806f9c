//! Time-weighted loss, regularization, Adam with a plateau schedule and the
//! epoch loop with checkpoints.

mod checkpoint;
mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::PROB_FLOOR;
use crate::data::{read_bundle, DatasetManifest, Label, VideoSample};
use crate::error::{Error, Result};
use crate::network::{forward_loss, ClipInputs, LossTarget, ModelConfig, ModelParams};
use crate::tensor::Matrix;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint,
    ArrayEntry, ArrayGroup, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use optim::{round_to_f32, Adam, Plateau};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub l1_coeff: f64,
    pub l2_coeff: f64,
    /// Share of training videos held out to drive the scheduler.
    pub val_fraction: f64,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 10,
            lr: 1e-4,
            plateau_factor: 0.5,
            plateau_patience: 3,
            l1_coeff: 1e-3,
            l2_coeff: 1e-4,
            val_fraction: 0.1,
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    /// Desk-scale run: the reference schedule with a larger step size.
    pub fn desk() -> Self {
        TrainConfig {
            lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("train config: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0) || !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return bad("lr must be > 0 and plateau_factor in (0, 1]");
        }
        if !(self.l1_coeff >= 0.0 && self.l2_coeff >= 0.0) {
            return bad("regularization coefficients must be >= 0");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must be in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub lr: f64,
    pub scheduler: Plateau,
    pub best_val_loss: Option<f64>,
    /// Learning rate used in each completed epoch.
    pub lr_history: Vec<f64>,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    /// Fresh state; parameters are rounded to `f32` so checkpoints are exact.
    pub fn new(model: &ModelConfig, train: &TrainConfig) -> Result<Self> {
        let mut params = ModelParams::init(model)?;
        round_to_f32(&mut params.values);
        let adam = Adam::new(&params.values);
        Ok(TrainState {
            params,
            adam,
            epoch: 0,
            lr: train.lr,
            scheduler: Plateau::new(train.plateau_factor, train.plateau_patience),
            best_val_loss: None,
            lr_history: Vec::new(),
            history: Vec::new(),
        })
    }
}

/// Multiplicative loss factor for frame `t`.
pub fn frame_weight(label: Label, toa: i64, fps: u32, t: usize) -> f64 {
    let t = t as i64;
    if label.is_positive() && t < toa {
        1.0 + (-((toa - t - 1) as f64) / f64::from(fps)).exp()
    } else {
        1.0
    }
}

/// Per-frame targets and weights for a clip of `num_frames` frames.
pub fn loss_target(sample: &VideoSample, num_frames: usize) -> LossTarget {
    let class = usize::from(sample.label.is_positive());
    LossTarget {
        targets: vec![class; num_frames],
        weights: (0..num_frames)
            .map(|t| frame_weight(sample.label, sample.toa, sample.fps, t))
            .collect(),
    }
}

/// Mean time-weighted cross entropy of `[T, 2]` class probabilities.
pub fn frame_loss(probs: &Matrix, sample: &VideoSample) -> Result<f64> {
    if probs.cols != 2 || probs.rows == 0 {
        return Err(Error::Shape(format!(
            "expected [T, 2] probabilities, got {:?}",
            probs.shape()
        )));
    }
    if !probs.all_finite() {
        return Err(Error::NonFinite("frame probabilities".into()));
    }
    let target = loss_target(sample, probs.rows);
    let total: f64 = (0..probs.rows)
        .map(|t| -target.weights[t] * probs.get(t, target.targets[t]).max(PROB_FLOOR).ln())
        .sum();
    Ok(total / probs.rows as f64)
}

/// `l1 * sum|theta| + l2 * sum theta^2` over every array.
pub fn regularizer(params: &[Matrix], l1: f64, l2: f64) -> f64 {
    params
        .iter()
        .flat_map(|m| &m.data)
        .map(|&v| l1 * v.abs() + l2 * v * v)
        .sum()
}

pub fn regularized_loss(data_loss: f64, params: &[Matrix], l1: f64, l2: f64) -> f64 {
    data_loss + regularizer(params, l1, l2)
}

/// Gradient of [`regularizer`]; the L1 subgradient at 0 is 0.
pub fn regularizer_grad(params: &[Matrix], l1: f64, l2: f64) -> Vec<Matrix> {
    params
        .iter()
        .map(|m| {
            m.map(|v| {
                let sign = if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                l1 * sign + 2.0 * l2 * v
            })
        })
        .collect()
}

/// One preprocessed clip with its loss target.
#[derive(Debug, Clone)]
pub struct TrainClip {
    pub id: String,
    pub inputs: ClipInputs,
    pub target: LossTarget,
}

/// Loads every clip of `split` from a manifest on disk.
pub fn load_clips(
    manifest_path: &Path,
    split: &str,
    model: &ModelConfig,
) -> Result<Vec<TrainClip>> {
    let manifest = DatasetManifest::load(manifest_path)?;
    manifest
        .split(split)?
        .into_iter()
        .map(|s| {
            let bundle = read_bundle(DatasetManifest::bundle_path(manifest_path, s))?;
            if bundle.num_frames != s.num_frames {
                return Err(Error::Shape(format!(
                    "{}: manifest says {} frames, bundle has {}",
                    s.id, s.num_frames, bundle.num_frames
                )));
            }
            Ok(TrainClip {
                id: s.id.clone(),
                inputs: ClipInputs::from_bundle(&bundle, model)?,
                target: loss_target(s, bundle.num_frames),
            })
        })
        .collect()
}

/// Seeded train/validation partition of clip indices.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_val = if n >= 2 && fraction > 0.0 {
        ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val = idx.split_off(n - n_val);
    idx.sort_unstable();
    val.sort_unstable();
    (idx, val)
}

/// Mean data loss over clips (no regularizer).
pub fn mean_loss(clips: &[&TrainClip], params: &ModelParams, model: &ModelConfig) -> Result<f64> {
    let mut total = 0.0;
    for c in clips {
        total += forward_loss(&c.inputs, &c.target, params, model)?.0;
    }
    Ok(total / clips.len() as f64)
}

/// Batch objective (mean clip loss + regularizer) and its gradient.
pub fn batch_loss_grad(
    batch: &[&TrainClip],
    params: &ModelParams,
    model: &ModelConfig,
    train: &TrainConfig,
) -> Result<(f64, Vec<Matrix>)> {
    let mut grads = regularizer_grad(&params.values, train.l1_coeff, train.l2_coeff);
    let scale = 1.0 / batch.len() as f64;
    let mut data = 0.0;
    for clip in batch {
        let (loss, g) = forward_loss(&clip.inputs, &clip.target, params, model)?;
        data += loss * scale;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            for (a, b) in acc.data.iter_mut().zip(&gi.data) {
                *a += scale * b;
            }
        }
    }
    Ok((
        regularized_loss(data, &params.values, train.l1_coeff, train.l2_coeff),
        grads,
    ))
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Trains until `train.epochs` epochs are complete, continuing from `state`.
/// With a checkpoint directory, writes `epoch_NNN.ckpt` and `best.ckpt`
/// and appends to `train_log.jsonl`.
pub fn train_clips(
    clips: &[TrainClip],
    model: &ModelConfig,
    train: &TrainConfig,
    state: TrainState,
) -> Result<TrainState> {
    train_clips_with(clips, model, train, state, |_| {})
}

/// [`train_clips`] with a callback invoked after every completed epoch.
pub fn train_clips_with(
    clips: &[TrainClip],
    model: &ModelConfig,
    train: &TrainConfig,
    mut state: TrainState,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainState> {
    train.validate()?;
    state.params.check_against(model)?;
    if clips.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    let (fit_idx, val_idx) = holdout_split(clips.len(), train.val_fraction, train.seed);
    let val: Vec<&TrainClip> = val_idx.iter().map(|&i| &clips[i]).collect();
    if let Some(dir) = &train.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    while state.epoch < train.epochs {
        let mut order = fit_idx.clone();
        order.shuffle(&mut epoch_rng(train.seed, state.epoch));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(train.batch_size) {
            let batch: Vec<&TrainClip> = chunk.iter().map(|&i| &clips[i]).collect();
            let (loss, grads) = batch_loss_grad(&batch, &state.params, model, train)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::NonFinite(format!(
                    "loss diverged in epoch {}",
                    state.epoch + 1
                )));
            }
            epoch_loss += loss * chunk.len() as f64 / order.len() as f64;
            state
                .adam
                .update(&mut state.params.values, &grads, state.lr);
            round_to_f32(&mut state.params.values);
            round_to_f32(&mut state.adam.m);
            round_to_f32(&mut state.adam.v);
        }
        if !state.params.all_finite() {
            return Err(Error::NonFinite(format!(
                "parameters diverged in epoch {}",
                state.epoch + 1
            )));
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(mean_loss(&val, &state.params, model)?)
        };
        let record = EpochRecord {
            epoch: state.epoch + 1,
            train_loss: epoch_loss,
            val_loss,
            lr: state.lr,
        };
        state.lr_history.push(state.lr);
        state.lr = state
            .scheduler
            .step(val_loss.unwrap_or(epoch_loss), state.lr);
        state.epoch += 1;
        let monitored = val_loss.unwrap_or(epoch_loss);
        let improved = state.best_val_loss.is_none_or(|b| monitored < b);
        if improved {
            state.best_val_loss = Some(monitored);
        }
        state.history.push(record.clone());
        if let Some(dir) = &train.checkpoint_dir {
            save_checkpoint(
                dir.join(format!("epoch_{:03}.ckpt", state.epoch)),
                model,
                train,
                &state,
            )?;
            if improved {
                save_checkpoint(dir.join("best.ckpt"), model, train, &state)?;
            }
            let log = dir.join("train_log.jsonl");
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&log)
                .map_err(|e| Error::io(&log, e))?;
            writeln!(f, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(&log, e))?;
        }
        on_epoch(&record);
    }
    Ok(state)
}

/// Loads the `train` split of a manifest and trains from scratch.
pub fn train(manifest_path: &Path, model: &ModelConfig, train: &TrainConfig) -> Result<TrainState> {
    let clips = load_clips(manifest_path, "train", model)?;
    train_clips(&clips, model, train, TrainState::new(model, train)?)
}
