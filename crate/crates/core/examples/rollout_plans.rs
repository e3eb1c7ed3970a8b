//! Rollout plans for complete and gappy initial frames, printed in the
//! same tabular form they are stored in.

use vicon::rollout::{check_plan, gen_flexible_step, gen_flexible_with_drops, gen_single_step, DropSpec};

fn main() {
    let show = |title: &str, plan: vicon::rollout::RolloutPlan| {
        assert!(check_plan(&plan).is_empty());
        println!("== {title} ({} steps)\n{}", plan.steps.len(), plan.to_text());
    };
    show("single step, 10 initial frames", gen_single_step(9, 10, 21).unwrap());
    show("flexible step, stride up to 5", gen_flexible_step(9, 10, 5, 21).unwrap());

    let fa = "2,5,9".parse::<DropSpec>().unwrap().available(10, 0).unwrap();
    show("frames 2, 5, 9 missing, stride 1", gen_flexible_with_drops(9, 1, 20, &fa).unwrap());
    show("frames 2, 5, 9 missing, stride up to 3", gen_flexible_with_drops(9, 3, 20, &fa).unwrap());

    let half = DropSpec::HalfRate.available(10, 0).unwrap();
    show("every other frame missing", gen_flexible_with_drops(9, 3, 21, &half).unwrap());
}
