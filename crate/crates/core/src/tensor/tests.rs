use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{self, check};
use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `sum(out ⊙ r)` for a fixed random `r`, so every output element matters.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out)?.to_vec();
    let r = random(&shape, &mut ChaCha8Rng::seed_from_u64(seed));
    let r = tape.constant(r)?;
    let prod = tape.mul(out, r)?;
    tape.sum(prod)
}

fn attention_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, mask: &AttentionMask) -> Vec<f64> {
    let (l, dh) = q.dims2().unwrap();
    let dv = v.dims2().unwrap().1;
    let mut out = vec![0.0; l * dv];
    for r in 0..l {
        let logits: Vec<f64> = (0..l)
            .map(|c| {
                if !mask.allowed(r, c) {
                    return f64::NEG_INFINITY;
                }
                let dot: f64 = (0..dh).map(|j| q.data()[r * dh + j] * k.data()[c * dh + j]).sum();
                dot / (dh as f64).sqrt()
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
        let z: f64 = w.iter().sum();
        for c in 0..l {
            for j in 0..dv {
                out[r * dv + j] += w[c] / z * v.data()[c * dv + j];
            }
        }
    }
    out
}

fn attend(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, mask: AttentionMask) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let (q, k, v) = (tape.constant(q.clone())?, tape.constant(k.clone())?, tape.constant(v.clone())?);
    let out = tape.masked_attention(q, k, v, &Arc::new(mask))?;
    Ok(tape.value(out)?.clone())
}

#[test]
fn attention_over_single_token_returns_value() {
    let q = Tensor::new(vec![1, 1], vec![0.7]).unwrap();
    let k = Tensor::new(vec![1, 1], vec![-2.0]).unwrap();
    let v = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
    let out = attend(&q, &k, &v, AttentionMask::full(1)).unwrap();
    assert_eq!(out.data(), &[3.0]);
}

#[test]
fn diagonal_mask_returns_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (q, k, v) = (random(&[3, 2], &mut rng), random(&[3, 2], &mut rng), random(&[3, 2], &mut rng));
    let out = attend(&q, &k, &v, AttentionMask::from_fn(3, |r, c| r == c)).unwrap();
    assert_eq!(out.data(), v.data());
}

#[test]
fn lower_triangular_attention_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (q, k, v) = (random(&[3, 4], &mut rng), random(&[3, 4], &mut rng), random(&[3, 4], &mut rng));
    let mask = AttentionMask::lower_triangular(3);
    let out = attend(&q, &k, &v, mask.clone()).unwrap();
    let want = attention_oracle(&q, &k, &v, &mask);
    for (a, b) in out.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn full_mask_matches_unmasked_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (q, k, v) = (random(&[6, 3], &mut rng), random(&[6, 3], &mut rng), random(&[6, 3], &mut rng));
    let mask = AttentionMask::full(6);
    let out = attend(&q, &k, &v, mask.clone()).unwrap();
    let want = attention_oracle(&q, &k, &v, &mask);
    for (a, b) in out.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn empty_attention_row_is_rejected() {
    let q = Tensor::<f64>::ones(&[2, 2]);
    let err = attend(&q, &q, &q, AttentionMask::from_fn(2, |r, c| r == 0 && c == 0)).unwrap_err();
    assert_eq!(err, TensorError::EmptyAttentionRow { row: 1 });
    assert!(err.to_string().contains("empty attention row"));
}

#[test]
fn disallowed_weights_are_exactly_zero() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::new(vec![2, 2], vec![1e3, 5.0, -1e3, 7.0]).unwrap()).unwrap();
    let s = tape.masked_softmax(a, &Arc::new(AttentionMask::lower_triangular(2))).unwrap();
    let w = tape.value(s).unwrap().data();
    assert_eq!(w[1], 0.0);
    assert_eq!(w[0], 1.0);
    assert!((w[2] + w[3] - 1.0).abs() < 1e-15);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::<f64>::new();
    let b = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
    let s = tape.masked_softmax(b, &Arc::new(AttentionMask::full(2))).unwrap();
    assert_eq!(tape.value(s).unwrap().data(), &[0.5, 0.5, 0.5, 0.5]);
}

fn block_prefix_mask(blocks: &[usize]) -> AttentionMask {
    let size: usize = blocks.iter().sum();
    let mut ends = Vec::new();
    let mut acc = 0;
    for b in blocks {
        acc += b;
        ends.extend(std::iter::repeat_n(acc, *b));
    }
    AttentionMask::from_fn(size, |r, c| c < ends[r])
}

#[test]
fn prefix_runs_group_rows() {
    let mask = block_prefix_mask(&[2, 1, 3]);
    assert_eq!(mask.prefix_runs(), Some(vec![(0, 2, 2), (2, 3, 3), (3, 6, 6)]));
    assert_eq!(
        AttentionMask::lower_triangular(3).prefix_runs(),
        Some(vec![(0, 1, 1), (1, 2, 2), (2, 3, 3)])
    );
    assert_eq!(AttentionMask::from_fn(3, |r, c| r == c).prefix_runs(), None);
}

fn multi_head(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    heads: usize,
    mask: &Arc<AttentionMask>,
    fused: bool,
) -> Tensor<f64> {
    let mut tape = Tape::new();
    let (q, k, v) = (
        tape.constant(q.clone()).unwrap(),
        tape.constant(k.clone()).unwrap(),
        tape.constant(v.clone()).unwrap(),
    );
    let out = if fused {
        tape.multi_head_attention(q, k, v, heads, mask).unwrap()
    } else {
        let dh = tape.shape(q).unwrap()[1] / heads;
        let parts: Vec<Var> = (0..heads)
            .map(|h| {
                let qh = tape.slice_cols(q, h * dh, dh).unwrap();
                let kh = tape.slice_cols(k, h * dh, dh).unwrap();
                let vh = tape.slice_cols(v, h * dh, dh).unwrap();
                tape.masked_attention(qh, kh, vh, mask).unwrap()
            })
            .collect();
        tape.concat_cols(&parts).unwrap()
    };
    tape.value(out).unwrap().clone()
}

#[test]
fn fused_attention_matches_per_head_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for mask in [
        block_prefix_mask(&[3, 2, 3, 2]),
        AttentionMask::lower_triangular(10),
        AttentionMask::from_fn(10, |r, c| (r + c) % 3 != 1 || r == c),
    ] {
        let mask = Arc::new(mask);
        let (q, k, v) = (random(&[10, 6], &mut rng), random(&[10, 6], &mut rng), random(&[10, 6], &mut rng));
        let fused = multi_head(&q, &k, &v, 3, &mask, true);
        let composed = multi_head(&q, &k, &v, 3, &mask, false);
        assert!(fused.max_abs_diff(&composed) < 1e-12);
    }
}

#[test]
fn fused_attention_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mask = Arc::new(block_prefix_mask(&[2, 1, 2, 1]));
    let inputs = [random(&[6, 4], &mut rng), random(&[6, 4], &mut rng), random(&[6, 4], &mut rng)];
    let report = check(&inputs, 1e-5, |t, x| {
        let out = t.multi_head_attention(x[0], x[1], x[2], 2, &mask)?;
        project(t, out, 70)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn gradient_of_sum_is_ones() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(random(&[3, 2, 4], &mut ChaCha8Rng::seed_from_u64(8))).unwrap();
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &Tensor::ones(&[3, 2, 4]));
}

#[test]
fn layer_norm_sum_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&[1, 8], &mut rng);
    let report = check(&[x], 1e-5, |t, v| {
        let g = t.constant(Tensor::ones(&[8]))?;
        let b = t.constant(Tensor::zeros(&[8]))?;
        let y = t.layer_norm(v[0], g, b, LAYER_NORM_EPS)?;
        let w = t.constant(Tensor::from_fn(&[1, 8], |i| (i as f64 * 0.37).sin()))?;
        let y = t.mul(y, w)?;
        t.sum(y)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

type Primitive = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Each primitive with the input shapes it is exercised on.
fn primitives(m: usize, n: usize) -> Vec<(&'static str, Vec<Vec<usize>>, Primitive)> {
    vec![
        ("matmul", vec![vec![m, n], vec![n, 3]], |t, x| t.matmul(x[0], x[1])),
        ("matmul_nt", vec![vec![m, n], vec![2, n]], |t, x| t.matmul_nt(x[0], x[1], 0.7)),
        ("add", vec![vec![m, n], vec![m, n]], |t, x| t.add(x[0], x[1])),
        ("mul", vec![vec![m, n], vec![m, n]], |t, x| t.mul(x[0], x[1])),
        ("add_row", vec![vec![m, n], vec![n]], |t, x| t.add_row(x[0], x[1])),
        ("scale", vec![vec![m, n]], |t, x| t.scale(x[0], -1.3)),
        ("gelu", vec![vec![m, n]], |t, x| t.gelu(x[0])),
        ("layer_norm", vec![vec![m, n], vec![n], vec![n]], |t, x| {
            t.layer_norm(x[0], x[1], x[2], LAYER_NORM_EPS)
        }),
        ("masked_softmax", vec![vec![m, m]], |t, x| {
            let size = t.shape(x[0])?[0];
            t.masked_softmax(x[0], &Arc::new(AttentionMask::lower_triangular(size)))
        }),
        ("masked_attention", vec![vec![m, n], vec![m, n], vec![m, n]], |t, x| {
            let size = t.shape(x[0])?[0];
            t.masked_attention(x[0], x[1], x[2], &Arc::new(AttentionMask::lower_triangular(size)))
        }),
        ("reshape", vec![vec![m, n]], |t, x| {
            let numel: usize = t.shape(x[0])?.iter().product();
            t.reshape(x[0], &[numel])
        }),
        ("transpose", vec![vec![m, n]], |t, x| t.transpose(x[0])),
        ("mean", vec![vec![m, n]], |t, x| t.mean(x[0])),
        ("variance", vec![vec![m, n]], |t, x| t.variance(x[0])),
        ("mse", vec![vec![m, n], vec![m, n]], |t, x| {
            let numel: usize = t.shape(x[0])?.iter().product();
            let w = Arc::new((0..numel).map(|i| ((i + 1) % 3) as f64).collect());
            t.mse(x[0], x[1], w)
        }),
        ("gather_rows", vec![vec![m, n]], |t, x| {
            let rows = t.shape(x[0])?[0];
            t.gather_rows(x[0], Arc::new(vec![Some(rows - 1), None, Some(0), Some(rows - 1)]))
        }),
        ("slice_cols", vec![vec![m, n]], |t, x| {
            let cols = t.shape(x[0])?[1];
            t.slice_cols(x[0], cols / 2, cols - cols / 2)
        }),
        ("concat_cols", vec![vec![m, n], vec![m, 2]], |t, x| t.concat_cols(&[x[0], x[1], x[0]])),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_primitive_passes_gradient_check(m in 1usize..=8, n in 1usize..=8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, shapes, f) in primitives(m, n) {
            if shapes.iter().any(|s| s.iter().product::<usize>() > 64) {
                continue;
            }
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(s, &mut rng)).collect();
            let report = check(&inputs, 1e-5, |t, x| {
                let out = f(t, x)?;
                project(t, out, seed ^ 0x5eed)
            })
            .unwrap();
            prop_assert!(report.max_rel_error < 1e-6, "{name} {m}x{n}: {report:?}");
        }
    }

    #[test]
    fn fused_and_composed_attention_agree(blocks in prop::collection::vec(1usize..4, 1..5), heads in 1usize..4, seed in any::<u64>()) {
        let mask = Arc::new(block_prefix_mask(&blocks));
        let l = mask.size();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q, k, v) = (random(&[l, 2 * heads], &mut rng), random(&[l, 2 * heads], &mut rng), random(&[l, 2 * heads], &mut rng));
        let fused = multi_head(&q, &k, &v, heads, &mask, true);
        let composed = multi_head(&q, &k, &v, heads, &mask, false);
        prop_assert!(fused.max_abs_diff(&composed) < 1e-12);
    }
}

#[test]
fn identity_matmul_reproduces_input() {
    let mut tape = Tape::<f64>::new();
    let eye = tape.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 })).unwrap();
    let m = Tensor::new(vec![3, 1], vec![2.0, -1.0, 0.5]).unwrap();
    let mv = tape.constant(m.clone()).unwrap();
    let out = tape.matmul(eye, mv).unwrap();
    assert_eq!(tape.value(out).unwrap(), &m);
}

#[test]
fn layer_norm_of_constant_is_zero() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[2, 5], 3.25)).unwrap();
    let g = tape.constant(Tensor::ones(&[5])).unwrap();
    let b = tape.constant(Tensor::zeros(&[5])).unwrap();
    let y = tape.layer_norm(x, g, b, LAYER_NORM_EPS).unwrap();
    assert!(tape.value(y).unwrap().data().iter().all(|v| *v == 0.0));
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(&[4, 1])).unwrap();
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 1]"), "{msg}");
    let msg = tape.add(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 1]"), "{msg}");
}

#[test]
fn non_scalar_loss_and_foreign_vars_are_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::ones(&[2])).unwrap();
    assert_eq!(tape.backward(x).unwrap_err(), TensorError::NotScalar(vec![2]));
    let mut other = Tape::<f64>::new();
    let y = other.param(Tensor::scalar(1.0)).unwrap();
    assert_eq!(tape.backward(y).unwrap_err(), TensorError::ForeignVar);
    assert_eq!(tape.add(x, y).unwrap_err(), TensorError::ForeignVar);
}

#[test]
fn non_finite_results_are_errors() {
    let mut tape = Tape::<f32>::new();
    assert!(matches!(
        tape.param(Tensor::new(vec![1], vec![f32::NAN]).unwrap()),
        Err(TensorError::NonFinite { .. })
    ));
    let x = tape.param(Tensor::full(&[1], 1e30)).unwrap();
    let err = tape.mul(x, x).unwrap_err();
    assert_eq!(err, TensorError::NonFinite { op: "mul" });
}

#[test]
fn tensor_rejects_bad_shapes() {
    assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
    assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
}

#[test]
fn unused_parameters_get_zero_gradients() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::full(&[2], 2.0)).unwrap();
    let unused = tape.param(Tensor::ones(&[3])).unwrap();
    let s = tape.mul(x, x).unwrap();
    let s = tape.sum(s).unwrap();
    let g = tape.grad_named(s, &[("x", x), ("unused", unused)]).unwrap();
    assert_eq!(g["x"].data(), &[4.0, 4.0]);
    assert_eq!(g["unused"], Tensor::zeros(&[3]));
}

#[test]
fn shared_input_accumulates_every_use() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::full(&[1, 1], 3.0)).unwrap();
    let y = tape.matmul(x, x).unwrap();
    let y = tape.add(y, x).unwrap();
    let s = tape.sum(y).unwrap();
    assert_eq!(tape.backward(s).unwrap().get(x).unwrap().data(), &[7.0]);
}

#[test]
fn repeated_runs_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mask = Arc::new(block_prefix_mask(&[4, 4, 4, 4]));
        let mut tape = Tape::<f32>::new();
        let q = tape.param(random(&[16, 8], &mut rng).cast()).unwrap();
        let y = tape.multi_head_attention(q, q, q, 2, &mask).unwrap();
        let y = tape.gelu(y).unwrap();
        let y = tape.dropout(y, 0.3, &mut rng).unwrap();
        let s = tape.mean(y).unwrap();
        let g = tape.backward(s).unwrap();
        (tape.value(y).unwrap().clone(), g.get(q).unwrap().clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn rel_error_uses_floor_near_zero() {
    assert_eq!(gradcheck::rel_error(0.0, 0.0), 0.0);
    assert!((gradcheck::rel_error(1e-9, 0.0) - 1e-5).abs() < 1e-18);
    assert!((gradcheck::rel_error(2.0, 1.0) - 0.5).abs() < 1e-15);
}

#[test]
fn dropout_zero_is_identity_and_positive_rate_rescales() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::ones(&[1000])).unwrap();
    assert_eq!(tape.dropout(x, 0.0, &mut rng).unwrap(), x);
    let y = tape.dropout(x, 0.5, &mut rng).unwrap();
    let d = tape.value(y).unwrap().data();
    assert!(d.iter().all(|v| *v == 0.0 || *v == 2.0));
    let kept = d.iter().filter(|v| **v > 0.0).count();
    assert!((400..600).contains(&kept), "{kept}");
}
