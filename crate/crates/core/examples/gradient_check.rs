//! Compare tape gradients of a small model against central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vicon::model::{forward_on_tape, ModelConfig, ModelError, ModelParams};
use vicon::tensor::{gradcheck, Tensor, TensorError};

fn main() {
    let cfg = ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ffn: 32,
        max_pairs: 3,
        min_context: 1,
        grid: [8, 8],
        ..ModelConfig::desk()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = ModelParams::<f64>::init(&cfg, &mut rng);
    let rows = 2 * cfg.seq_len(1);
    let mut inputs: Vec<Tensor<f64>> = params.leaves().into_iter().cloned().collect();
    inputs.push(Tensor::from_fn(&[rows, cfg.patch_len()], |i| (i as f64 * 0.7).sin()));
    let n = inputs.len() - 1;

    let report = gradcheck::check(&inputs, 1e-5, |tape, vars| {
        let tree = ModelParams::<f64>::from_leaves(cfg.n_layers, vars[..n].to_vec()).expect("same structure");
        let out = forward_on_tape::<f64, ChaCha8Rng>(tape, &tree, &cfg, vars[n], None).map_err(|e| match e {
            ModelError::Tensor(t) => t,
            other => TensorError::Invalid(other.to_string()),
        })?;
        let sq = tape.mul(out, out)?;
        tape.mean(sq)
    })
    .expect("finite forward pass");
    println!("checked {} entries, max relative error {:.2e}", report.checked, report.max_rel_error);
    if let Some((input, elem, a, num)) = report.worst {
        println!("worst: input {input} element {elem}: analytic {a:.6e} numeric {num:.6e}");
    }
}
