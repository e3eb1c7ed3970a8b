//! Rollout error metrics: standardized and absolute RMS errors and the
//! turbulence-kinetic-energy error.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::patching::{Channel, ChannelMask, Frame, UNION_CHANNELS};
use crate::prompt_norm::SIGMA_FLOOR;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("prediction grid {pred:?} does not match ground truth {gt:?}")]
    ShapeMismatch { pred: (usize, usize), gt: (usize, usize) },
    #[error("no channel counts toward the error")]
    NoValidChannels,
    #[error("velocity channels are not valid in every frame")]
    MissingVelocity,
    #[error("series lengths differ or are empty: {pred} vs {gt}")]
    SeriesLength { pred: usize, gt: usize },
    #[error("nothing to evaluate from frame {start}")]
    NothingToEvaluate { start: usize },
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

fn channels(mask: ChannelMask) -> Result<Vec<usize>> {
    let cs: Vec<usize> = (0..UNION_CHANNELS).filter(|&c| mask.counts_in_loss(c)).collect();
    if cs.is_empty() {
        return Err(MetricsError::NoValidChannels);
    }
    Ok(cs)
}

fn scaled_rms(pred: &Frame, gt: &Frame, sigma: &[f64; UNION_CHANNELS], mask: ChannelMask) -> Result<f64> {
    if pred.grid() != gt.grid() {
        return Err(MetricsError::ShapeMismatch {
            pred: pred.grid(),
            gt: gt.grid(),
        });
    }
    let cs = channels(mask)?;
    let mut acc = 0.0;
    for (p, g) in pred.values().chunks_exact(UNION_CHANNELS).zip(gt.values().chunks_exact(UNION_CHANNELS)) {
        for &c in &cs {
            let d = (p[c] as f64 - g[c] as f64) / sigma[c];
            acc += d * d;
        }
    }
    Ok((acc / (cs.len() * pred.nx() * pred.ny()) as f64).sqrt())
}

/// RMS of `(pred − gt)/σ` over the loss-bearing channels of `mask` and all
/// grid points; the node-type channel never counts.
pub fn rel_l2(pred: &Frame, gt: &Frame, sigma: &[f64; UNION_CHANNELS], mask: ChannelMask) -> Result<f64> {
    scaled_rms(pred, gt, sigma, mask)
}

/// RMS of `pred − gt` over the same entries as [`rel_l2`].
pub fn abs_l2(pred: &Frame, gt: &Frame, mask: ChannelMask) -> Result<f64> {
    scaled_rms(pred, gt, &[1.0; UNION_CHANNELS], mask)
}

/// Population standard deviation per channel over `frames`, floored.
pub fn channel_sigma(frames: &[&Frame]) -> [f64; UNION_CHANNELS] {
    let mut sigma = [1.0; UNION_CHANNELS];
    let Some(first) = frames.first() else {
        return sigma;
    };
    let n = (frames.len() * first.nx() * first.ny()) as f64;
    for (c, s) in sigma.iter_mut().enumerate() {
        let vals = || frames.iter().flat_map(|f| f.values().iter().skip(c).step_by(UNION_CHANNELS)).map(|v| *v as f64);
        let mean = vals().sum::<f64>() / n;
        let var = vals().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        *s = var.sqrt().max(SIGMA_FLOOR);
    }
    sigma
}

fn tke_field(series: &[Frame]) -> Vec<f64> {
    let (nx, ny) = series[0].grid();
    let t = series.len() as f64;
    let (ux, uy) = (Channel::VelocityX.index(), Channel::VelocityY.index());
    let mut out = vec![0.0; nx * ny];
    for (p, o) in out.iter_mut().enumerate() {
        let comp = |c: usize| {
            let vals: Vec<f64> = series.iter().map(|f| f.values()[p * UNION_CHANNELS + c] as f64).collect();
            let mean = vals.iter().sum::<f64>() / t;
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t
        };
        *o = 0.5 * (comp(ux) + comp(uy));
    }
    out
}

/// Mean absolute difference between the TKE fields `½(⟨ũx²⟩ + ⟨ũy²⟩)` of two
/// velocity series, with fluctuations taken about each point's time mean.
pub fn tke_mae(pred: &[Frame], gt: &[Frame]) -> Result<f64> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(MetricsError::SeriesLength {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    let grid = gt[0].grid();
    for f in pred.iter().chain(gt) {
        if f.grid() != grid {
            return Err(MetricsError::ShapeMismatch { pred: f.grid(), gt: grid });
        }
        if !(f.channel_mask.is_valid(Channel::VelocityX.index()) && f.channel_mask.is_valid(Channel::VelocityY.index())) {
            return Err(MetricsError::MissingVelocity);
        }
    }
    let (a, b) = (tke_field(pred), tke_field(gt));
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// 1-based rollout step; step 1 is the first evaluated frame.
    pub step: usize,
    pub frame: usize,
    pub abs_l2: f64,
    pub rel_l2: f64,
}

/// Values at steps 1, 5 and 10, at the last step, and averaged over all steps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub step1: Option<f64>,
    pub step5: Option<f64>,
    pub step10: Option<f64>,
    pub last: Option<f64>,
    pub all_avg: Option<f64>,
}

impl AggregateRow {
    fn from_steps(steps: &[StepMetrics], f: impl Fn(&StepMetrics) -> f64) -> Self {
        let at = |k: usize| steps.iter().find(|s| s.step == k).map(&f);
        Self {
            step1: at(1),
            step5: at(5),
            step10: at(10),
            last: steps.last().map(&f),
            all_avg: (!steps.is_empty()).then(|| steps.iter().map(&f).sum::<f64>() / steps.len() as f64),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub rel_l2: AggregateRow,
    pub abs_l2: AggregateRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub start: usize,
    pub per_step: Vec<StepMetrics>,
    pub aggregates: Aggregates,
    /// Frames in the evaluation window without a prediction.
    pub missing: Vec<usize>,
    pub tke_mae: Option<f64>,
    /// Per-channel scale used for `rel_l2`.
    pub sigma: [f64; UNION_CHANNELS],
    #[serde(default)]
    pub config: serde_json::Value,
}

impl MetricsReport {
    pub fn recompute_aggregates(&self) -> Aggregates {
        Aggregates {
            rel_l2: AggregateRow::from_steps(&self.per_step, |s| s.rel_l2),
            abs_l2: AggregateRow::from_steps(&self.per_step, |s| s.abs_l2),
        }
    }
}

/// Scores predictions against `ground_truth[start..]`. The relative scale is
/// the ground-truth standard deviation over that window; the TKE error is
/// included when velocities are present and no frame is missing.
pub fn evaluate_rollout(
    predictions: &BTreeMap<usize, Frame>,
    ground_truth: &[Frame],
    start: usize,
) -> Result<MetricsReport> {
    let window: Vec<&Frame> = ground_truth.iter().skip(start).collect();
    if window.is_empty() {
        return Err(MetricsError::NothingToEvaluate { start });
    }
    let sigma = channel_sigma(&window);
    let mut per_step = Vec::new();
    let mut missing = Vec::new();
    for (k, gt) in window.iter().enumerate() {
        let frame = start + k;
        match predictions.get(&frame) {
            Some(pred) => per_step.push(StepMetrics {
                step: k + 1,
                frame,
                abs_l2: abs_l2(pred, gt, gt.channel_mask)?,
                rel_l2: rel_l2(pred, gt, &sigma, gt.channel_mask)?,
            }),
            None => missing.push(frame),
        }
    }
    let has_velocity = window.iter().all(|f| {
        f.channel_mask.is_valid(Channel::VelocityX.index()) && f.channel_mask.is_valid(Channel::VelocityY.index())
    });
    let tke = if has_velocity && missing.is_empty() {
        let preds: Vec<Frame> = (start..ground_truth.len()).map(|i| predictions[&i].clone()).collect();
        let gts: Vec<Frame> = window.iter().map(|f| (*f).clone()).collect();
        Some(tke_mae(&preds, &gts)?)
    } else {
        None
    };
    let mut report = MetricsReport {
        start,
        per_step,
        aggregates: Aggregates::default(),
        missing,
        tke_mae: tke,
        sigma,
        config: serde_json::Value::Null,
    };
    report.aggregates = report.recompute_aggregates();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_all() -> ChannelMask {
        ChannelMask([true; UNION_CHANNELS])
    }

    fn random_frame(rng: &mut ChaCha8Rng, n: usize, mask: ChannelMask) -> Frame {
        let vals = (0..n * n * UNION_CHANNELS).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        Frame::new(n, n, vals, mask).unwrap()
    }

    #[test]
    fn equal_frames_score_zero() {
        let f = random_frame(&mut ChaCha8Rng::seed_from_u64(0), 4, mask_all());
        assert_eq!(rel_l2(&f, &f, &[0.3; 7], mask_all()).unwrap(), 0.0);
        assert_eq!(abs_l2(&f, &f, mask_all()).unwrap(), 0.0);
    }

    #[test]
    fn one_sigma_offset_on_one_channel() {
        let mask = ChannelMask::from_channels(&[Channel::VelocityX, Channel::VelocityY, Channel::Scalar]);
        let gt = random_frame(&mut ChaCha8Rng::seed_from_u64(1), 4, mask);
        let sigma = [1.0, 0.5, 2.0, 1.0, 1.0, 0.25, 1.0];
        let mut pred = gt.clone();
        for x in 0..4 {
            for y in 0..4 {
                pred.set(x, y, 5, gt.get(x, y, 5) + 0.25);
            }
        }
        // One of three channels is off by exactly one sigma everywhere.
        let want = (1.0f64 / 3.0).sqrt();
        assert!((rel_l2(&pred, &gt, &sigma, mask).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn node_type_and_masked_channels_never_count() {
        let mask = ChannelMask::from_channels(&[Channel::Scalar, Channel::NodeType]);
        let gt = Frame::zeros(2, 2, mask);
        let mut pred = gt.clone();
        pred.set(0, 0, Channel::NodeType.index(), 1.0);
        assert_eq!(abs_l2(&pred, &gt, mask).unwrap(), 0.0);
        assert_eq!(
            abs_l2(&pred, &gt, ChannelMask::from_channels(&[Channel::NodeType])),
            Err(MetricsError::NoValidChannels)
        );
    }

    #[test]
    fn hand_two_by_two_abs() {
        let mask = ChannelMask::from_channels(&[Channel::Scalar]);
        let gt = Frame::zeros(2, 2, mask);
        let mut pred = gt.clone();
        for (k, v) in [1.0, -1.0, 3.0, 1.0].into_iter().enumerate() {
            pred.set(k / 2, k % 2, 5, v);
        }
        // sqrt((1 + 1 + 9 + 1) / 4)
        assert!((abs_l2(&pred, &gt, mask).unwrap() - 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Frame::zeros(2, 2, mask_all());
        let b = Frame::zeros(4, 2, mask_all());
        assert!(matches!(abs_l2(&a, &b, mask_all()), Err(MetricsError::ShapeMismatch { .. })));
    }

    fn velocity_series(values: &[(f32, f32)]) -> Vec<Frame> {
        let mask = ChannelMask::from_channels(&[Channel::VelocityX, Channel::VelocityY]);
        values
            .iter()
            .map(|(u, v)| {
                let mut f = Frame::zeros(2, 2, mask);
                for x in 0..2 {
                    for y in 0..2 {
                        f.set(x, y, 1, *u);
                        f.set(x, y, 2, *v);
                    }
                }
                f
            })
            .collect()
    }

    #[test]
    fn tke_hand_cases() {
        let flip = velocity_series(&[(-1.0, 0.0), (1.0, 0.0)]);
        let still = velocity_series(&[(0.3, 0.2), (0.3, 0.2)]);
        assert_eq!(tke_field(&flip), vec![0.5; 4]);
        assert_eq!(tke_mae(&flip, &still).unwrap(), 0.5);
        assert_eq!(tke_mae(&still, &still).unwrap(), 0.0);
        assert_eq!(tke_mae(&flip, &flip).unwrap(), 0.0);
        let scalar = vec![Frame::zeros(2, 2, ChannelMask::from_channels(&[Channel::Scalar]))];
        assert_eq!(tke_mae(&scalar, &scalar), Err(MetricsError::MissingVelocity));
        assert!(matches!(tke_mae(&flip, &still[..1]), Err(MetricsError::SeriesLength { .. })));
    }

    proptest! {
        #[test]
        fn unit_sigma_rel_equals_abs(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (random_frame(&mut rng, 4, mask_all()), random_frame(&mut rng, 4, mask_all()));
            prop_assert_eq!(rel_l2(&a, &b, &[1.0; 7], mask_all()).unwrap(), abs_l2(&a, &b, mask_all()).unwrap());
        }

        #[test]
        fn rel_l2_is_scale_invariant(seed in any::<u64>(), scale in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (random_frame(&mut rng, 4, mask_all()), random_frame(&mut rng, 4, mask_all()));
            let sigma = channel_sigma(&[&b]);
            let scaled = |f: &Frame| {
                let vals = f.values().iter().map(|v| (*v as f64 * scale) as f32).collect();
                Frame::new(4, 4, vals, mask_all()).unwrap()
            };
            let sigma2 = channel_sigma(&[&scaled(&b)]);
            let r1 = rel_l2(&a, &b, &sigma, mask_all()).unwrap();
            let r2 = rel_l2(&scaled(&a), &scaled(&b), &sigma2, mask_all()).unwrap();
            prop_assert!((r1 - r2).abs() <= 1e-5 * r1.max(1e-12));
        }
    }

    #[test]
    fn evaluation_window_and_aggregates() {
        let mask = ChannelMask::from_channels(&[Channel::Scalar]);
        let gt: Vec<Frame> = (0..21)
            .map(|t| {
                let mut f = Frame::zeros(2, 2, mask);
                f.set(0, 0, 5, t as f32);
                f.with_time(t, 0.1)
            })
            .collect();
        let preds: BTreeMap<usize, Frame> = (10..21)
            .map(|t| {
                let mut f = gt[t].clone();
                for x in 0..2 {
                    for y in 0..2 {
                        f.set(x, y, 5, f.get(x, y, 5) + 0.5);
                    }
                }
                (t, f)
            })
            .collect();
        let r = evaluate_rollout(&preds, &gt, 10).unwrap();
        assert_eq!(r.per_step.len(), 11);
        assert_eq!(r.per_step[0].frame, 10);
        for row in [&r.aggregates.abs_l2] {
            for v in [row.step1, row.step5, row.step10, row.last, row.all_avg] {
                assert!((v.unwrap() - 0.5).abs() < 1e-12);
            }
        }
        assert_eq!(r.aggregates, r.recompute_aggregates());
        assert!(r.tke_mae.is_none());
        let perfect: BTreeMap<usize, Frame> = (10..21).map(|t| (t, gt[t].clone())).collect();
        let p = evaluate_rollout(&perfect, &gt, 10).unwrap();
        assert!(p.per_step.iter().all(|s| s.abs_l2 == 0.0 && s.rel_l2 == 0.0));
        let mut gappy = perfect.clone();
        gappy.remove(&14);
        let g = evaluate_rollout(&gappy, &gt, 10).unwrap();
        assert_eq!(g.missing, vec![14]);
        assert_eq!(g.aggregates.rel_l2.step5, None);
        assert!(evaluate_rollout(&perfect, &gt, 21).is_err());
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<MetricsReport>(&json).unwrap(), r);
    }
}
