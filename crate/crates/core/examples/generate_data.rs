//! Generate heat and advection trajectories, store and reload one, and draw
//! normalized training prompts from the collection.

use vicon::dataio::{load_trajectory, save_trajectory, DatasetSpec, FamilySpec, PromptSampler, SamplerConfig};

fn main() {
    let spec = DatasetSpec {
        nx: 16,
        ny: 16,
        nt: 21,
        seed: 7,
        families: vec![
            FamilySpec::Heat {
                count: 4,
                nu: [0.05, 0.3],
                dt: 0.1,
                kmax: 3,
            },
            FamilySpec::Advection {
                count: 4,
                cells_per_step: [-1.0, 1.0],
                dt: 0.1,
                kmax: 3,
                integer_shifts: false,
            },
        ],
    };
    let trajs = spec.generate().expect("valid spec");
    for t in &trajs {
        println!("{:<10} {:?}", t.pde_tag, t.pde_params);
    }

    let dir = std::env::temp_dir().join(format!("vicon-example-{}", std::process::id()));
    let manifest = save_trajectory(&trajs[5], &dir).expect("writable temp dir");
    let back = load_trajectory(&dir).expect("just written");
    assert_eq!(back, trajs[5]);
    println!("\nstored {} frames, sha256 {}", manifest.nt, &manifest.payload_sha256[..16]);
    let _ = std::fs::remove_dir_all(&dir);

    let sampler = PromptSampler::new(
        &trajs,
        SamplerConfig {
            pairs: 10,
            s_max: 3,
            prompts_per_traj: 4,
            seed: 1,
        },
    )
    .expect("feasible strides");
    for p in sampler.batch(0, 4).expect("prompts") {
        let n = p.normalized();
        let (mean, sd) = (n.stats.mu[5], n.stats.sigma[5]);
        println!(
            "prompt: stride {}, conditions at {:?}, scalar mean {mean:.3} sd {sd:.3}",
            p.stride, p.start_indices
        );
    }
}
