//! Rollout planning for complete and gappy initial frames, and
//! autoregressive execution of a plan with an in-context predictor.

mod plan;

pub use plan::{
    check_plan, gen_flexible_step, gen_flexible_with_drops, gen_single_step, gen_single_step_with_drops,
    get_available_pairs, PlanStep, RolloutPlan, Violation,
};

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{InContextPredictor, ModelError};
use crate::patching::Frame;
use crate::prompt_norm::{denormalize_prediction, normalize_prompt, NormError, PromptStats};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RolloutError {
    #[error("invalid planner input: {0}")]
    InvalidPlanInput(String),
    #[error("plan text line {line}: {message}")]
    PlanText { line: usize, message: String },
    #[error("step {step}: frame {index} is neither given nor predicted")]
    MissingFrame { step: usize, index: usize },
    #[error("step {step}: {source}")]
    Model {
        step: usize,
        #[source]
        source: ModelError,
    },
    #[error(transparent)]
    Norm(#[from] NormError),
}

/// Which planner to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Single,
    Flexible,
}

/// Plans a rollout over targets `< total` from the available initial frames,
/// with at most `demos` examples and stride at most `s_max` (flexible only).
/// Complete `0..R` sets use the gap-free planners, anything else the
/// drop-aware ones.
pub fn plan_rollout(
    strategy: Strategy,
    available: &[usize],
    demos: usize,
    s_max: usize,
    total: usize,
) -> Result<RolloutPlan, RolloutError> {
    let mut fa = available.to_vec();
    fa.sort_unstable();
    fa.dedup();
    let complete = !fa.is_empty() && fa.iter().enumerate().all(|(k, i)| k == *i);
    let r = fa.len();
    match strategy {
        Strategy::Single if complete && r > demos => gen_single_step(demos, r, total),
        Strategy::Flexible if complete && r > s_max => gen_flexible_step(demos, r, s_max, total),
        Strategy::Single => gen_single_step_with_drops(demos, 1, total, &fa),
        Strategy::Flexible => gen_flexible_with_drops(demos, s_max, total, &fa),
    }
}

/// What happened at one executed step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub question_in: usize,
    pub question_out: usize,
    pub stride: usize,
    pub context_pairs: usize,
    pub low_context: bool,
    pub stats: PromptStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutOutput {
    /// Predicted frames by time index.
    pub predictions: BTreeMap<usize, Frame>,
    pub records: Vec<StepRecord>,
}

/// Runs `plan` step by step. When a step lists more examples than the model
/// accepts, the ones with the latest input frames are kept. Each prompt is
/// normalized with statistics of its example conditions, answered by `model`
/// and denormalized; later steps may consume earlier predictions.
pub fn execute(
    plan: &RolloutPlan,
    initial: &BTreeMap<usize, Frame>,
    model: &dyn InContextPredictor,
) -> Result<RolloutOutput, RolloutError> {
    let mut predictions: BTreeMap<usize, Frame> = BTreeMap::new();
    let mut records = Vec::with_capacity(plan.steps.len());
    for (k, st) in plan.steps.iter().enumerate() {
        let step = k + 1;
        let frame = |index: usize| -> Result<Frame, RolloutError> {
            initial
                .get(&index)
                .or_else(|| predictions.get(&index))
                .cloned()
                .ok_or(RolloutError::MissingFrame { step, index })
        };
        let keep = model.max_context().unwrap_or(usize::MAX).min(st.example_pairs.len());
        let pairs = st.example_pairs[st.example_pairs.len() - keep..]
            .iter()
            .map(|&(a, b)| Ok((frame(a)?, frame(b)?)))
            .collect::<Result<Vec<_>, RolloutError>>()?;
        let question = frame(st.question_in)?;
        let norm = normalize_prompt(&pairs, Some(&question))?;
        let pred = model
            .predict_next(&norm.pairs, norm.question.as_ref().expect("question was given"))
            .map_err(|source| RolloutError::Model { step, source })?;
        let mut out = denormalize_prediction(&pred.frame, &norm.stats);
        out.time_index = st.question_out;
        out.dt_record = question.dt_record;
        records.push(StepRecord {
            step,
            question_in: st.question_in,
            question_out: st.question_out,
            stride: st.stride,
            context_pairs: pred.context_pairs,
            low_context: pred.low_context,
            stats: norm.stats,
        });
        predictions.insert(st.question_out, out);
    }
    Ok(RolloutOutput { predictions, records })
}

/// Which initial frames are missing before planning.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DropSpec {
    None,
    /// Keep even indices only.
    HalfRate,
    /// Remove this many indices drawn uniformly without replacement.
    Random(usize),
    /// Remove exactly these indices.
    Explicit(Vec<usize>),
}

impl std::str::FromStr for DropSpec {
    type Err = RolloutError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || RolloutError::InvalidPlanInput(format!(
            "drops spec {s:?}: expected none, half-rate, random-K or a comma-separated index list"
        ));
        match s.trim() {
            "none" | "" => Ok(DropSpec::None),
            "half-rate" => Ok(DropSpec::HalfRate),
            t if t.starts_with("random-") => t["random-".len()..].parse().map(DropSpec::Random).map_err(|_| bad()),
            t => t
                .split(',')
                .map(|p| p.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map(DropSpec::Explicit)
                .map_err(|_| bad()),
        }
    }
}

impl std::fmt::Display for DropSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DropSpec::None => write!(f, "none"),
            DropSpec::HalfRate => write!(f, "half-rate"),
            DropSpec::Random(k) => write!(f, "random-{k}"),
            DropSpec::Explicit(v) => {
                let parts: Vec<String> = v.iter().map(|i| i.to_string()).collect();
                write!(f, "{}", parts.join(","))
            }
        }
    }
}

impl TryFrom<String> for DropSpec {
    type Error = RolloutError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<DropSpec> for String {
    fn from(d: DropSpec) -> String {
        d.to_string()
    }
}

impl DropSpec {
    /// Frames of `0..initial` that remain; random drops are drawn from `seed`.
    pub fn available(&self, initial: usize, seed: u64) -> Result<Vec<usize>, RolloutError> {
        let all: Vec<usize> = (0..initial).collect();
        let kept: Vec<usize> = match self {
            DropSpec::None => all,
            DropSpec::HalfRate => all.into_iter().filter(|i| i % 2 == 0).collect(),
            DropSpec::Random(k) => {
                if *k >= initial {
                    return Err(RolloutError::InvalidPlanInput(format!(
                        "cannot drop {k} of {initial} initial frames"
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let gone: BTreeSet<usize> = rand::seq::index::sample(&mut rng, initial, *k).into_iter().collect();
                all.into_iter().filter(|i| !gone.contains(i)).collect()
            }
            DropSpec::Explicit(v) => {
                if let Some(bad) = v.iter().find(|&&i| i >= initial) {
                    return Err(RolloutError::InvalidPlanInput(format!(
                        "dropped frame {bad} is not among the {initial} initial frames"
                    )));
                }
                all.into_iter().filter(|i| !v.contains(i)).collect()
            }
        };
        if kept.is_empty() {
            return Err(RolloutError::InvalidPlanInput("every initial frame was dropped".into()));
        }
        Ok(kept)
    }
}

/// Returns the question condition unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityPredictor {
    pub min_context: usize,
}

impl InContextPredictor for IdentityPredictor {
    fn predict_next(&self, context: &[(Frame, Frame)], question: &Frame) -> crate::model::Result<crate::model::Prediction> {
        Ok(crate::model::Prediction {
            frame: question.clone(),
            context_pairs: context.len(),
            low_context: context.len() < self.min_context,
        })
    }
}

/// Exact predictor for whole-cell periodic transport: finds the roll that
/// maps the first example condition onto its QoI and applies it to the
/// question.
#[derive(Clone, Copy, Debug, Default)]
pub struct RollPredictor;

fn roll(frame: &Frame, sx: usize, sy: usize) -> Frame {
    let (nx, ny) = frame.grid();
    let mut out = frame.clone();
    let c = crate::patching::UNION_CHANNELS;
    for i in 0..nx {
        for j in 0..ny {
            let src = frame.offset(i, j, 0);
            let dst = out.offset((i + sx) % nx, (j + sy) % ny, 0);
            out.values_mut()[dst..dst + c].copy_from_slice(&frame.values()[src..src + c]);
        }
    }
    out
}

impl InContextPredictor for RollPredictor {
    fn predict_next(&self, context: &[(Frame, Frame)], question: &Frame) -> crate::model::Result<crate::model::Prediction> {
        let (nx, ny) = question.grid();
        let (sx, sy) = match context.first() {
            None => (0, 0),
            Some((c, q)) => (0..nx)
                .flat_map(|sx| (0..ny).map(move |sy| (sx, sy)))
                .map(|(sx, sy)| {
                    let err: f64 = roll(c, sx, sy)
                        .values()
                        .iter()
                        .zip(q.values())
                        .map(|(a, b)| ((a - b) as f64).powi(2))
                        .sum();
                    (err, sx, sy)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .map(|(_, sx, sy)| (sx, sy))
                .unwrap_or((0, 0)),
        };
        Ok(crate::model::Prediction {
            frame: roll(question, sx, sy),
            context_pairs: context.len(),
            low_context: false,
        })
    }
}
