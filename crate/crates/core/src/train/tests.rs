use super::*;
use crate::dataio::{gen_advection, gen_heat, SamplerConfig, Trajectory};
use crate::patching::Channel;
use crate::tensor::gradcheck::rel_error;

fn toy_model() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ffn: 32,
        max_pairs: 4,
        min_context: 1,
        patch: [4, 4],
        grid: [8, 8],
        ..ModelConfig::desk()
    }
}

fn toy_train() -> TrainConfig {
    TrainConfig {
        peak_lr: 3e-3,
        final_lr: 1e-4,
        warmup_steps: 20,
        total_steps: 500,
        batch_size: 4,
        min_context: 1,
        log_every: 10,
        ..TrainConfig::desk()
    }
}

fn heat_set(n: u64) -> Vec<Trajectory> {
    (0..n).map(|k| gen_heat(8, 8, 0.05 + 0.02 * k as f64, 0.1, 8, k).unwrap()).collect()
}

fn sampler(trajs: &[Trajectory]) -> PromptSampler<'_> {
    PromptSampler::new(
        trajs,
        SamplerConfig {
            pairs: 4,
            s_max: 2,
            prompts_per_traj: 3,
            seed: 9,
        },
    )
    .unwrap()
}

fn fresh_state(seed: u64) -> TrainState {
    TrainState::new(Vicon::new(toy_model(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap())
}

#[test]
fn schedule_hits_published_anchor_points() {
    let cfg = TrainConfig::full_scale();
    assert_eq!(lr_at(0, &cfg), 0.0);
    assert!((lr_at(20_000, &cfg) - 1e-4).abs() < 1e-18);
    assert!((lr_at(200_000, &cfg) - 1e-7).abs() < 1e-18);
    assert!((lr_at(10_000, &cfg) - 0.5e-4).abs() < 1e-18);
    let mid = lr_at(110_000, &cfg);
    assert!((mid - (1e-7 + (1e-4 - 1e-7) * 0.5)).abs() < 1e-15);
    let mut prev = f64::INFINITY;
    for s in (20_000..=200_000).step_by(1000) {
        let lr = lr_at(s, &cfg);
        assert!(lr <= prev);
        prev = lr;
    }
}

#[test]
fn config_validation_lists_every_problem() {
    let cfg = TrainConfig {
        warmup_steps: 10,
        total_steps: 10,
        clip_norm: 0.0,
        batch_size: 0,
        ..TrainConfig::desk()
    };
    assert_eq!(cfg.validate().unwrap_err().len(), 3);
    TrainConfig::full_scale().validate().unwrap();
}

#[test]
fn exactly_pairs_after_min_context_carry_weight() {
    let cfg = ModelConfig::desk();
    let mask = ChannelMask::from_channels(&[Channel::Scalar, Channel::NodeType]);
    let w: Vec<f64> = loss_weights(&cfg, 10, 5, mask).unwrap();
    let (np, pl) = (cfg.patches_per_frame(), cfg.patch_len());
    assert_eq!(w.len(), 10 * np * pl);
    for (e, wi) in w.iter().enumerate() {
        let pair = e / (np * pl);
        let channel = (e % pl) % cfg.channels;
        let want = pair >= 5 && channel == Channel::Scalar.index();
        assert_eq!(*wi == 1.0, want, "entry {e}");
    }
    assert!(matches!(
        loss_weights::<f64>(&cfg, 5, 5, mask),
        Err(TrainError::TooFewPairs { pairs: 5, min_context: 5 })
    ));
}

fn loss_value(pred: &Tensor<f64>, target: &Tensor<f64>, pairs: usize, min_context: usize, mask: ChannelMask) -> f64 {
    let cfg = toy_model();
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone()).unwrap();
    let t = tape.constant(target.clone()).unwrap();
    let l = masked_icl_loss(&mut tape, &cfg, p, t, pairs, min_context, mask).unwrap();
    tape.value(l).unwrap().item()
}

#[test]
fn masked_loss_matches_loop_oracle() {
    let cfg = toy_model();
    let mask = ChannelMask::from_channels(&[Channel::Density, Channel::Scalar]);
    let (np, pl) = (cfg.patches_per_frame(), cfg.patch_len());
    let shape = [4 * np, pl];
    let target = Tensor::from_fn(&shape, |i| (i as f64 * 0.37).sin());
    assert_eq!(loss_value(&target, &target, 4, 1, mask), 0.0);

    // Error confined to the exempt first pair.
    let mut pred = target.clone();
    for i in 0..np * pl {
        pred.data_mut()[i] += 3.0;
    }
    assert_eq!(loss_value(&pred, &target, 4, 1, mask), 0.0);

    let pred = Tensor::from_fn(&shape, |i| (i as f64 * 0.11).cos());
    let (mut acc, mut n) = (0.0, 0.0);
    for r in np..4 * np {
        for j in 0..pl {
            if [Channel::Density.index(), Channel::Scalar.index()].contains(&(j % 7)) {
                let d = pred.data()[r * pl + j] - target.data()[r * pl + j];
                acc += d * d;
                n += 1.0;
            }
        }
    }
    assert!(rel_error(loss_value(&pred, &target, 4, 1, mask), acc / n) < 1e-12);
}

#[test]
fn exempt_targets_get_exactly_zero_gradient() {
    let cfg = toy_model();
    let mask = ChannelMask::from_channels(&[Channel::Scalar]);
    let (np, pl) = (cfg.patches_per_frame(), cfg.patch_len());
    let mut tape = Tape::<f64>::new();
    let pred = tape.param(Tensor::from_fn(&[4 * np, pl], |i| (i as f64).sin())).unwrap();
    let target = tape.param(Tensor::from_fn(&[4 * np, pl], |i| (i as f64).cos())).unwrap();
    let loss = masked_icl_loss(&mut tape, &cfg, pred, target, 4, 2, mask).unwrap();
    let g = tape.backward(loss).unwrap();
    let gt = g.get_or_zeros(target, &[4 * np, pl]);
    assert!(gt.data()[..2 * np * pl].iter().all(|v| *v == 0.0));
    assert!(gt.data()[2 * np * pl..].iter().any(|v| *v != 0.0));
}

#[test]
fn batch_loss_is_mean_of_row_losses() {
    let trajs = heat_set(3);
    let s = sampler(&trajs);
    let batch = s.batch(0, 3).unwrap();
    let state = fresh_state(1);
    let (whole, gw) = batch_loss_and_grads(&state.model, &batch, 1, 0, 0).unwrap();
    let mut rows = Vec::new();
    let mut gsum = state.model.params.zeros_like();
    for p in &batch {
        let (l, g) = batch_loss_and_grads(&state.model, std::slice::from_ref(p), 1, 0, 0).unwrap();
        rows.push(l);
        for (a, b) in gsum.leaves_mut().into_iter().zip(g.leaves()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y / 3.0;
            }
        }
    }
    let mean = rows.iter().sum::<f64>() / 3.0;
    assert!(rel_error(whole, mean) < 1e-6, "{whole} vs {mean}");
    for (a, b) in gw.leaves().into_iter().zip(gsum.leaves()) {
        assert!(a.max_abs_diff(b) < 1e-5);
    }
}

#[test]
fn clipping_rescales_to_the_limit() {
    let state = fresh_state(2);
    let mut g = state.model.params.map(|_, t| Tensor::from_fn(t.shape(), |i| ((i % 7) as f32 - 3.0) * 0.5));
    let before = clip_global_norm(&mut g, 1.0);
    assert!(before > 1.0);
    assert!((global_norm(&g) - 1.0).abs() < 1e-6);
    let mut small = g.map(|_, t| Tensor::from_fn(t.shape(), |i| t.data()[i] * 0.1));
    let copy = small.clone();
    clip_global_norm(&mut small, 1.0);
    assert_eq!(small, copy);
}

#[test]
fn adamw_first_step_moves_by_lr_times_sign() {
    let mut state = fresh_state(4);
    let before = state.model.params.clone();
    let g = before.map(|_, t| Tensor::from_fn(t.shape(), |i| if i % 2 == 0 { 0.5 } else { -2.0 }));
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::desk()
    };
    adamw_update(&mut state, &g, 1e-3, &cfg);
    for (a, b) in state.model.params.leaves().into_iter().zip(before.leaves()) {
        for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            let want = if i % 2 == 0 { -1e-3 } else { 1e-3 };
            assert!(((x - y) as f64 - want).abs() < 1e-6);
        }
    }
}

#[test]
fn steps_are_bit_reproducible() {
    let trajs = heat_set(2);
    let s = sampler(&trajs);
    let cfg = toy_train();
    let run = || {
        let mut st = fresh_state(7);
        let out: Vec<f64> = (0..3)
            .map(|k| train_step(&mut st, &s.batch(k, 4).unwrap(), &cfg).unwrap().loss)
            .collect();
        (out, st)
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(sa, sb);
}

#[test]
fn non_finite_input_is_reported_with_the_prompt() {
    let trajs = heat_set(1);
    let mut batch = sampler(&trajs).batch(0, 2).unwrap();
    batch[1].pairs[2].1.values_mut()[5] = 1e30;
    batch[1].pairs[3].1.values_mut()[5] = -1e30;
    let mut st = fresh_state(0);
    let err = train_step(&mut st, &batch, &toy_train()).unwrap_err();
    assert!(matches!(err, TrainError::NonFinite { step: 0, row: 1, .. }), "{err}");
    assert_eq!(st.step, 0);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let trajs = heat_set(2);
    let s = sampler(&trajs);
    let cfg = toy_train();
    let mut st = fresh_state(5);
    train(&mut st, &s, &cfg, 3, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &st, Some(&cfg)).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.state, st);
    assert_eq!(back.train_config.as_ref(), Some(&cfg));
    for (a, b) in back.state.adam.v.leaves().into_iter().zip(st.adam.v.leaves()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let trajs = heat_set(2);
    let s = sampler(&trajs);
    let cfg = toy_train();
    let mut straight = fresh_state(6);
    let full = train(&mut straight, &s, &cfg, 10, |_| {}).unwrap();

    let mut first = fresh_state(6);
    train(&mut first, &s, &cfg, 4, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    save_checkpoint(&path, &first, Some(&cfg)).unwrap();
    let mut resumed = load_checkpoint(&path).unwrap().state;
    let rest = train(&mut resumed, &s, &cfg, 10, |_| {}).unwrap();
    assert_eq!(resumed, straight);
    assert_eq!(full.last().unwrap().loss.to_bits(), rest.last().unwrap().loss.to_bits());
}

#[test]
fn checkpoint_rejects_other_versions_and_corruption() {
    let st = fresh_state(8);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    save_checkpoint(&path, &st, None).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let mut v2 = bytes.clone();
    v2[8..12].copy_from_slice(&2u32.to_le_bytes());
    std::fs::write(&path, &v2).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(TrainError::VersionMismatch { found: 2, expected: 1 })
    ));

    let mut flipped = bytes.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 0x40;
    std::fs::write(&path, &flipped).unwrap();
    assert!(load_checkpoint(&path).unwrap_err().to_string().contains("checksum"));

    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(TrainError::Checkpoint(_))));
}

#[test]
fn identity_operator_loss_drops_tenfold_in_500_steps() {
    let trajs: Vec<Trajectory> = (0..8).map(|k| gen_advection(8, 8, 0.0, 0.0, 0.1, 8, 100 + k).unwrap()).collect();
    let s = sampler(&trajs);
    let cfg = toy_train();
    let mut st = fresh_state(11);
    let log = train(&mut st, &s, &cfg, 500, |_| {}).unwrap();
    let (first, last) = (log.first().unwrap(), log.last().unwrap());
    assert_eq!(first.step, 1);
    assert_eq!(last.step, 500);
    assert!(
        last.loss * 10.0 <= first.loss,
        "loss went from {} to {}",
        first.loss,
        last.loss
    );
}
