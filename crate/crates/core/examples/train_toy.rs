//! Train a small model on mixed heat and advection data and save a
//! checkpoint. Pass a step count as the first argument (default 300).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vicon::dataio::{DatasetSpec, FamilySpec, PromptSampler, SamplerConfig};
use vicon::model::{ModelConfig, Vicon};
use vicon::train::{load_checkpoint, save_checkpoint, train, TrainConfig, TrainState};

fn main() {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let spec = DatasetSpec {
        nx: 16,
        ny: 16,
        nt: 21,
        seed: 1,
        families: vec![
            FamilySpec::Heat {
                count: 32,
                nu: [0.05, 0.3],
                dt: 0.1,
                kmax: 3,
            },
            FamilySpec::Advection {
                count: 32,
                cells_per_step: [-1.0, 1.0],
                dt: 0.1,
                kmax: 3,
                integer_shifts: false,
            },
        ],
    };
    let trajs = spec.generate().expect("valid spec");
    let sampler = PromptSampler::new(
        &trajs,
        SamplerConfig {
            pairs: 10,
            s_max: 3,
            prompts_per_traj: 4,
            seed: 2,
        },
    )
    .expect("feasible strides");
    let cfg = TrainConfig {
        total_steps: steps.max(2),
        warmup_steps: (steps / 10).max(1),
        batch_size: 8,
        log_every: 25,
        ..TrainConfig::desk()
    };
    let model = Vicon::new(ModelConfig::desk(), &mut ChaCha8Rng::seed_from_u64(0)).expect("valid config");
    println!("{} parameters", model.params.num_scalars());
    let mut state = TrainState::new(model);
    train(&mut state, &sampler, &cfg, cfg.total_steps, |r| {
        println!("step {:>5}  lr {:.2e}  loss {:.5}  |g| {:.3}", r.step, r.lr, r.loss, r.grad_norm)
    })
    .expect("training runs");

    let path = std::env::temp_dir().join("vicon-toy.ckpt");
    save_checkpoint(&path, &state, Some(&cfg)).expect("writable temp dir");
    assert_eq!(load_checkpoint(&path).expect("just written").state, state);
    println!("checkpoint written to {}", path.display());
}
