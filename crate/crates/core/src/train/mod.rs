//! In-context training: masked loss, warmup/cosine schedule, clipped AdamW
//! updates and checkpoints.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::f64::consts::PI;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{stream_seed, DataError, PromptSampler, PromptSequence};
use crate::model::{
    forward_on_tape, prompt_matrix, register_params, target_matrix, ModelConfig, ModelError, ModelParams, Vicon,
};
use crate::patching::{ChannelMask, Frame};
use crate::tensor::{Scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("prompt has {pairs} pairs but {min_context} are exempt from the loss")]
    TooFewPairs { pairs: usize, min_context: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error(
        "non-finite value at step {step}, batch row {row} (stride {stride}, condition frames {starts:?}): {detail}"
    )]
    NonFinite {
        step: u64,
        row: usize,
        stride: usize,
        starts: Vec<usize>,
        detail: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// Optimizer, schedule and batching hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Leading pairs of each prompt exempt from the loss (`I_min`).
    pub min_context: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Steps between log records.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            peak_lr: 3e-4,
            final_lr: 1e-6,
            warmup_steps: 500,
            total_steps: 5_000,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            batch_size: 16,
            seed: 0,
            min_context: 5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            log_every: 50,
        }
    }

    pub fn full_scale() -> Self {
        Self {
            peak_lr: 1e-4,
            final_lr: 1e-7,
            warmup_steps: 20_000,
            total_steps: 200_000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if self.warmup_steps >= self.total_steps {
            errs.push(format!(
                "warmup_steps ({}) must be smaller than total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.clip_norm > 0.0) {
            errs.push("clip_norm must be positive".into());
        }
        if !(self.peak_lr > 0.0) {
            errs.push("peak_lr must be positive".into());
        }
        if !(self.final_lr >= 0.0 && self.final_lr <= self.peak_lr) {
            errs.push("final_lr must lie in [0, peak_lr]".into());
        }
        if !(self.weight_decay >= 0.0) {
            errs.push("weight_decay must be non-negative".into());
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                errs.push(format!("{name} must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            errs.push("adam_eps must be positive".into());
        }
        if self.log_every == 0 {
            errs.push("log_every must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

/// Learning rate after `step` updates: linear ramp to the peak over the
/// warmup, then half-cosine down to the final rate at `total_steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if step <= cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps.max(1) as f64;
    }
    let span = (cfg.total_steps - cfg.warmup_steps).max(1) as f64;
    let progress = ((step - cfg.warmup_steps) as f64 / span).min(1.0);
    cfg.final_lr + (cfg.peak_lr - cfg.final_lr) * 0.5 * (1.0 + (PI * progress).cos())
}

/// Per-entry weights of the decoded `[pairs·Np, patch_len]` matrix: one for
/// loss-bearing channels of pairs after the first `min_context`, zero
/// elsewhere.
pub fn loss_weights<T: Scalar>(cfg: &ModelConfig, pairs: usize, min_context: usize, mask: ChannelMask) -> Result<Vec<T>> {
    if pairs <= min_context {
        return Err(TrainError::TooFewPairs { pairs, min_context });
    }
    let (np, pl) = (cfg.patches_per_frame(), cfg.patch_len());
    let row: Vec<T> = (0..pl)
        .map(|j| if mask.counts_in_loss(j % cfg.channels) { T::one() } else { T::zero() })
        .collect();
    let mut w = vec![T::zero(); min_context * np * pl];
    for _ in min_context * np..pairs * np {
        w.extend_from_slice(&row);
    }
    Ok(w)
}

/// MSE between decoded predictions and QoI patches over pairs `> I_min`
/// and loss-bearing channels.
pub fn masked_icl_loss<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    predictions: Var,
    targets: Var,
    pairs: usize,
    min_context: usize,
    mask: ChannelMask,
) -> Result<Var> {
    let w = loss_weights(cfg, pairs, min_context, mask)?;
    Ok(tape.mse(predictions, targets, Arc::new(w))?)
}

/// Loss of one normalized prompt recorded on `tape`.
pub fn prompt_loss<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &crate::model::ParamVars,
    cfg: &ModelConfig,
    pairs: &[(Frame, Frame)],
    min_context: usize,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    if pairs.len() <= min_context {
        return Err(TrainError::TooFewPairs {
            pairs: pairs.len(),
            min_context,
        });
    }
    let refs: Vec<(&Frame, &Frame)> = pairs.iter().map(|(c, q)| (c, q)).collect();
    let qois: Vec<&Frame> = pairs.iter().map(|(_, q)| q).collect();
    let input = tape.constant(prompt_matrix(cfg, &refs)?)?;
    let target = tape.constant(target_matrix(cfg, &qois)?)?;
    let out = forward_on_tape(tape, vars, cfg, input, dropout_rng)?;
    let mask = pairs[0].0.channel_mask;
    masked_icl_loss(tape, cfg, out, target, pairs.len(), min_context, mask)
}

/// Adam first and second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ModelParams<f32>,
    pub v: ModelParams<f32>,
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Vicon<f32>,
    pub adam: AdamState,
    /// Completed updates.
    pub step: u64,
}

impl TrainState {
    pub fn new(model: Vicon<f32>) -> Self {
        let zeros = model.params.zeros_like();
        Self {
            model,
            adam: AdamState {
                m: zeros.clone(),
                v: zeros,
            },
            step: 0,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Mean loss over batch rows and its gradient. Each row is normalized and
/// forwarded on its own, so rows may differ in operator, stride and length.
pub fn batch_loss_and_grads(
    model: &Vicon<f32>,
    batch: &[PromptSequence],
    min_context: usize,
    step: u64,
    seed: u64,
) -> Result<(f64, ModelParams<f32>)> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let cfg = &model.config;
    let mut tape = Tape::new();
    let vars = register_params(&mut tape, &model.params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed ^ 0x6472_6f70, step));
    let mut total: Option<Var> = None;
    for (row, prompt) in batch.iter().enumerate() {
        let diag = |detail: String| TrainError::NonFinite {
            step,
            row,
            stride: prompt.stride,
            starts: prompt.start_indices.clone(),
            detail,
        };
        let normalized = prompt.normalized();
        let dropout = (cfg.dropout > 0.0).then_some(&mut rng);
        let loss = match prompt_loss(&mut tape, &vars, cfg, &normalized.pairs, min_context, dropout) {
            Err(TrainError::Tensor(e @ TensorError::NonFinite { .. }))
            | Err(TrainError::Model(ModelError::Tensor(e @ TensorError::NonFinite { .. }))) => {
                return Err(diag(e.to_string()))
            }
            other => other?,
        };
        total = Some(match total {
            None => loss,
            Some(t) => tape.add(t, loss)?,
        });
    }
    let total = tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f32)?;
    let loss = tape.value(total)?.item() as f64;
    let mut grads = tape.backward(total)?;
    let g = vars.map(|_, v| grads.take(*v).unwrap_or_else(|| Tensor::zeros(tape.shape(*v).unwrap())));
    if !g.all_finite() {
        return Err(TrainError::NonFinite {
            step,
            row: 0,
            stride: batch[0].stride,
            starts: batch[0].start_indices.clone(),
            detail: "gradient".into(),
        });
    }
    Ok((loss, g))
}

/// Global L2 norm of all gradient entries.
pub fn global_norm(grads: &ModelParams<f32>) -> f64 {
    grads.leaves().iter().map(|t| t.sum_sq()).sum::<f64>().sqrt()
}

/// Rescales gradients in place so that their global norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ModelParams<f32>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for t in grads.leaves_mut() {
            t.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// AdamW update with decoupled weight decay on matrix-shaped parameters.
pub fn adamw_update(state: &mut TrainState, grads: &ModelParams<f32>, lr: f64, cfg: &TrainConfig) {
    let t = (state.step + 1) as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let params = state.model.params.leaves_mut();
    let ms = state.adam.m.leaves_mut();
    let vs = state.adam.v.leaves_mut();
    for (((p, m), v), g) in params.into_iter().zip(ms).zip(vs).zip(grads.leaves()) {
        let decay = if p.shape().len() == 2 { lr * cfg.weight_decay } else { 0.0 };
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, x) in p.data_mut().iter_mut().enumerate() {
            let gi = g.data()[i] as f64;
            let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.adam_eps);
            *x = ((*x as f64) * (1.0 - decay) - update) as f32;
        }
    }
}

/// One optimizer step on `batch`.
pub fn train_step(state: &mut TrainState, batch: &[PromptSequence], cfg: &TrainConfig) -> Result<StepOutcome> {
    let (loss, mut grads) = batch_loss_and_grads(&state.model, batch, cfg.min_context, state.step, cfg.seed)?;
    let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
    let lr = lr_at(state.step + 1, cfg);
    adamw_update(state, &grads, lr, cfg);
    state.step += 1;
    Ok(StepOutcome { loss, grad_norm, lr })
}

/// Trains until `state.step == until`, drawing batch `k` from the sampler
/// for update `k`. Calls `log` every `log_every` steps and on the last one.
pub fn train(
    state: &mut TrainState,
    sampler: &PromptSampler,
    cfg: &TrainConfig,
    until: u64,
    mut log: impl FnMut(&LogRecord),
) -> Result<Vec<LogRecord>> {
    cfg.validate().map_err(TrainError::Config)?;
    let mut records = Vec::new();
    let start = Instant::now();
    while state.step < until {
        let batch = sampler.batch(state.step, cfg.batch_size)?;
        let out = train_step(state, &batch, cfg)?;
        if state.step % cfg.log_every == 0 || state.step == until || state.step == 1 {
            let rec = LogRecord {
                step: state.step,
                lr: out.lr,
                loss: out.loss,
                grad_norm: out.grad_norm,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            };
            log(&rec);
            records.push(rec);
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests;
