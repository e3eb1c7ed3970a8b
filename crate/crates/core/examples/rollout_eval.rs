//! Roll out on a trajectory with missing initial frames and score it. With
//! a checkpoint path as the first argument the trained model is used;
//! otherwise an exact transport oracle stands in for it.

use std::collections::BTreeMap;

use vicon::dataio::{DatasetSpec, FamilySpec};
use vicon::metrics::evaluate_rollout;
use vicon::model::InContextPredictor;
use vicon::rollout::{execute, plan_rollout, DropSpec, RollPredictor, Strategy};
use vicon::train::load_checkpoint;

fn main() {
    let spec = DatasetSpec {
        nx: 16,
        ny: 16,
        nt: 21,
        seed: 99,
        families: vec![FamilySpec::Advection {
            count: 1,
            cells_per_step: [-1.0, 1.0],
            dt: 0.1,
            kmax: 3,
            integer_shifts: true,
        }],
    };
    let traj = spec.generate().expect("valid spec").remove(0);
    println!("{} {:?}", traj.pde_tag, traj.pde_params);

    let model: Box<dyn InContextPredictor> = match std::env::args().nth(1) {
        Some(path) => Box::new(load_checkpoint(path.as_ref()).expect("readable checkpoint").state.model),
        None => Box::new(RollPredictor),
    };
    for drops in ["none", "half-rate", "2,5,9"] {
        let fa = drops.parse::<DropSpec>().unwrap().available(10, 0).unwrap();
        let plan = plan_rollout(Strategy::Flexible, &fa, 9, 3, traj.nt()).expect("plannable");
        let initial: BTreeMap<usize, _> = fa.iter().map(|&i| (i, traj.frames[i].clone())).collect();
        let out = execute(&plan, &initial, model.as_ref()).expect("rollout");
        let report = evaluate_rollout(&out.predictions, &traj.frames, 10).expect("frames to score");
        let agg = &report.aggregates.rel_l2;
        println!(
            "drops {drops:<9} steps {:>2}  rel_l2 step1 {:.2e}  last {:.2e}  avg {:.2e}  tke_mae {:.2e}",
            plan.steps.len(),
            agg.step1.unwrap_or(f64::NAN),
            agg.last.unwrap_or(f64::NAN),
            agg.all_avg.unwrap_or(f64::NAN),
            report.tke_mae.unwrap_or(f64::NAN)
        );
    }
}
