//! Per-prompt channel-wise standardization.
//!
//! Statistics come from the condition frames of one prompt only and are
//! applied identically to conditions, QoIs and the question condition, so
//! the operator seen by the model is the same for every pair.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::patching::{ChannelMask, Frame, UNION_CHANNELS};

/// Lower bound on every standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NormError {
    #[error("cannot compute prompt statistics from zero condition frames")]
    NoConditions,
    #[error("condition frames disagree on grid size")]
    GridMismatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptStats {
    pub mu: [f64; UNION_CHANNELS],
    pub sigma: [f64; UNION_CHANNELS],
}

impl PromptStats {
    pub fn identity() -> Self {
        Self {
            mu: [0.0; UNION_CHANNELS],
            sigma: [1.0; UNION_CHANNELS],
        }
    }
}

/// Population mean and floored standard deviation per valid channel.
pub fn compute_stats(conds: &[&Frame]) -> Result<PromptStats, NormError> {
    let first = conds.first().ok_or(NormError::NoConditions)?;
    if conds.iter().any(|f| f.grid() != first.grid()) {
        return Err(NormError::GridMismatch);
    }
    let mask = conds.iter().fold(ChannelMask::default(), |m, f| m.union(&f.channel_mask));
    let mut stats = PromptStats::identity();
    let count = (conds.len() * first.nx() * first.ny()) as f64;
    for c in mask.valid_indices() {
        let mut sum = 0.0;
        for f in conds {
            sum += f.values().iter().skip(c).step_by(UNION_CHANNELS).map(|v| *v as f64).sum::<f64>();
        }
        let mu = sum / count;
        let mut ss = 0.0;
        for f in conds {
            ss += f
                .values()
                .iter()
                .skip(c)
                .step_by(UNION_CHANNELS)
                .map(|v| {
                    let d = *v as f64 - mu;
                    d * d
                })
                .sum::<f64>();
        }
        stats.mu[c] = mu;
        stats.sigma[c] = (ss / count).sqrt().max(SIGMA_FLOOR);
    }
    Ok(stats)
}

/// `(x − μ)/σ` on the frame's valid channels.
pub fn normalize_frame(frame: &Frame, stats: &PromptStats) -> Frame {
    let mask = frame.channel_mask;
    let mut out = frame.clone();
    for px in out.values_mut().chunks_exact_mut(UNION_CHANNELS) {
        for (c, v) in px.iter_mut().enumerate() {
            if mask.is_valid(c) {
                *v = ((*v as f64 - stats.mu[c]) / stats.sigma[c]) as f32;
            }
        }
    }
    out
}

/// `x·σ + μ` on the frame's valid channels.
pub fn denormalize_prediction(pred: &Frame, stats: &PromptStats) -> Frame {
    let mask = pred.channel_mask;
    let mut out = pred.clone();
    for px in out.values_mut().chunks_exact_mut(UNION_CHANNELS) {
        for (c, v) in px.iter_mut().enumerate() {
            if mask.is_valid(c) {
                *v = (*v as f64 * stats.sigma[c] + stats.mu[c]) as f32;
            }
        }
    }
    out
}

/// A prompt after normalization, ready for the model.
#[derive(Clone, Debug)]
pub struct NormalizedPrompt {
    pub pairs: Vec<(Frame, Frame)>,
    pub question: Option<Frame>,
    pub stats: PromptStats,
}

/// Computes statistics from the pair conditions and applies them to every
/// frame of the prompt, including the question condition.
pub fn normalize_prompt(pairs: &[(Frame, Frame)], question: Option<&Frame>) -> Result<NormalizedPrompt, NormError> {
    let conds: Vec<&Frame> = pairs.iter().map(|(c, _)| c).collect();
    let stats = match (conds.is_empty(), question) {
        (false, _) => compute_stats(&conds)?,
        // A bare question still needs a consistent scale.
        (true, Some(q)) => compute_stats(&[q])?,
        (true, None) => return Err(NormError::NoConditions),
    };
    Ok(normalize_with(pairs, question, stats))
}

pub fn normalize_with(pairs: &[(Frame, Frame)], question: Option<&Frame>, stats: PromptStats) -> NormalizedPrompt {
    NormalizedPrompt {
        pairs: pairs
            .iter()
            .map(|(c, q)| (normalize_frame(c, &stats), normalize_frame(q, &stats)))
            .collect(),
        question: question.map(|q| normalize_frame(q, &stats)),
        stats,
    }
}
