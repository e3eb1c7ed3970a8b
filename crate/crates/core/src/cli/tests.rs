use super::*;

const DATA_TOML: &str = r#"
[dataset]
nx = 8
ny = 8
nt = 12
seed = 4

[[dataset.families]]
pde = "heat"
count = 3
nu = [0.1, 0.3]
dt = 0.1

[[dataset.families]]
pde = "advection"
count = 2
cells_per_step = [-1.0, 1.0]
dt = 0.1
"#;

const TRAIN_TOML: &str = r#"
[model]
d_model = 16
n_layers = 1
n_heads = 2
d_ffn = 32
max_pairs = 4
min_context = 1
patch = [4, 4]
grid = [8, 8]

[train]
warmup_steps = 2
total_steps = 6
batch_size = 2
min_context = 1
log_every = 2

[sampler]
pairs = 4
s_max = 2
prompts_per_traj = 2
seed = 1
"#;

fn args(dir: &Path, name: &str, toml: &str, out: &str, set: &[&str]) -> CommonArgs {
    let path = dir.join(name);
    fs::write(&path, toml).unwrap();
    CommonArgs {
        config: Some(path),
        out: Some(dir.join(out)),
        seed: None,
        set: set.iter().map(|s| s.to_string()).collect(),
    }
}

fn leftovers(dir: &Path) -> Vec<String> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.contains(".partial-"))
        .collect()
}

#[test]
fn every_config_problem_is_reported_at_once() {
    let dir = tempfile::tempdir().unwrap();
    let bad = format!("{TRAIN_TOML}\ncolour = 3\n").replace("n_heads = 2", "n_heads = 3\nwidth = 9").replace(
        "total_steps = 6",
        "total_steps = 2",
    );
    let a = args(dir.path(), "bad.toml", &bad, "out", &["data=\"d\"", "nonsense"]);
    let Err(CliError::Config(errs)) = resolve::<TrainRunConfig>(&a) else {
        panic!("expected config errors");
    };
    let joined = errs.join("\n");
    for needle in ["colour: unknown field", "model.width: unknown field", "--set \"nonsense\""] {
        assert!(joined.contains(needle), "{needle} missing from {joined}");
    }

    let a = args(dir.path(), "semantic.toml", &bad.replace("colour = 3", "").replace("width = 9", ""), "out", &[
        "data=\"d\"",
    ]);
    let Err(CliError::Config(errs)) = resolve::<TrainRunConfig>(&a) else {
        panic!("expected config errors");
    };
    let joined = errs.join("\n");
    assert!(joined.contains("n_heads"), "{joined}");
    assert!(joined.contains("warmup_steps"), "{joined}");
    assert_eq!(CliError::Config(errs).exit_code(), EXIT_CONFIG);
}

#[test]
fn flags_override_file_values() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = args(dir.path(), "t.toml", TRAIN_TOML, "o", &["data=\"d\"", "train.total_steps=9", "model.dropout=0.1"]);
    a.seed = Some(77);
    let c: TrainRunConfig = resolve(&a).unwrap();
    assert_eq!(c.train.total_steps, 9);
    assert_eq!(c.model.dropout, 0.1);
    assert_eq!((c.train.seed, c.sampler.seed), (77, 77));
    assert_eq!(c.out, dir.path().join("o"));
    assert_eq!(c.train.peak_lr, TrainConfig::desk().peak_lr);
}

#[test]
fn drops_parse_from_config_text() {
    let dir = tempfile::tempdir().unwrap();
    let text = "checkpoint = \"c\"\ntrajectory = \"t\"\ndrops = \"random-2\"\nseed = 5\n";
    let c: RolloutRunConfig = resolve(&args(dir.path(), "r.toml", text, "o", &[])).unwrap();
    assert_eq!(c.drops, DropSpec::Random(2));
    assert_eq!(c.strategy, Strategy::Flexible);
    let a = c.drops.available(10, c.seed).unwrap();
    assert_eq!(a, DropSpec::Random(2).available(10, 5).unwrap());
    let bad = args(dir.path(), "r2.toml", &text.replace("random-2", "random-10"), "o", &[]);
    assert!(matches!(resolve::<RolloutRunConfig>(&bad), Err(CliError::Config(_))));
}

#[test]
fn gen_data_is_deterministic_and_counts_match() {
    let dir = tempfile::tempdir().unwrap();
    let cfg: GenDataConfig = resolve(&args(dir.path(), "d.toml", DATA_TOML, "data", &[])).unwrap();
    let m = cmd_gen_data(&cfg).unwrap();
    assert_eq!(m.trajectories.len(), 5);
    assert_eq!(m.counts.get("heat"), Some(&3));
    assert_eq!(m.counts.get("advection"), Some(&2));
    let first = fs::read(dir.path().join("data/traj_00003/traj.f32")).unwrap();

    // Re-running from the resolved config reproduces the payload bytes.
    let again: GenDataConfig = resolve(&CommonArgs {
        config: Some(dir.path().join("data").join(RESOLVED_CONFIG)),
        out: Some(dir.path().join("again")),
        ..CommonArgs::default()
    })
    .unwrap();
    assert_eq!(again.dataset, cfg.dataset);
    cmd_gen_data(&again).unwrap();
    assert_eq!(fs::read(dir.path().join("again/traj_00003/traj.f32")).unwrap(), first);
    let loaded = load_dataset(&dir.path().join("again")).unwrap();
    assert_eq!(loaded, cfg.dataset.generate().unwrap());
}

#[test]
fn failed_commands_leave_no_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let a = args(dir.path(), "t.toml", TRAIN_TOML, "run", &["data=\"missing\""]);
    let err = cmd_train(&resolve(&a).unwrap()).unwrap_err();
    assert_eq!(err.exit_code(), EXIT_RUNTIME);
    assert!(!dir.path().join("run").exists());
    assert!(leftovers(dir.path()).is_empty());
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[dataset]\nnx = 0\n").unwrap();
    let code = run(["vicon", "gen-data", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(code, EXIT_CONFIG);
    let code = run(["vicon", "eval", "--set", "trajectory=\"nope\"", "--set", "predictions=\"nope\"", "--out", dir
        .path()
        .join("e")
        .to_str()
        .unwrap()]);
    assert_eq!(code, EXIT_RUNTIME);
    assert_eq!(run(["vicon", "frobnicate"]), EXIT_CONFIG);
    let data = dir.path().join("d.toml");
    fs::write(&data, DATA_TOML).unwrap();
    let code = run(["vicon", "gen-data", "-c", data.to_str().unwrap(), "-o", dir.path().join("ok").to_str().unwrap()]);
    assert_eq!(code, 0);
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    cmd_gen_data(&resolve(&args(p, "d.toml", DATA_TOML, "data", &[])).unwrap()).unwrap();
    let data = format!("data=\"{}\"", p.join("data").display());
    let state = cmd_train(&resolve(&args(p, "t.toml", TRAIN_TOML, "train", &[&data])).unwrap()).unwrap();
    assert_eq!(state.step, 6);
    let log = fs::read_to_string(p.join("train/train_log.jsonl")).unwrap();
    let steps: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<crate::train::LogRecord>(l).unwrap().step)
        .collect();
    assert_eq!(steps, vec![1, 2, 4, 6]);

    let rollout = format!(
        "checkpoint = \"{}\"\ntrajectory = \"{}\"\ndrops = \"3,5\"\ns_max = 2\n",
        p.join("train/model.ckpt").display(),
        p.join("data/traj_00004").display()
    );
    let preds = cmd_rollout(&resolve(&args(p, "r.toml", &rollout, "roll", &[])).unwrap()).unwrap();
    assert_eq!(preds.keys().copied().collect::<Vec<_>>(), vec![10, 11]);
    let plan = crate::rollout::RolloutPlan::from_text(&fs::read_to_string(p.join("roll/plan.txt")).unwrap()).unwrap();
    assert_eq!(plan.given.iter().copied().collect::<Vec<_>>(), vec![0, 1, 2, 4, 6, 7, 8, 9]);
    assert_eq!(fs::read_to_string(p.join("roll/steps.jsonl")).unwrap().lines().count(), plan.steps.len());

    let eval = format!(
        "trajectory = \"{}\"\npredictions = \"{}\"\n",
        p.join("data/traj_00004").display(),
        p.join("roll/predictions").display()
    );
    let report = cmd_eval(&resolve(&args(p, "e.toml", &eval, "eval", &[])).unwrap()).unwrap();
    assert_eq!(report.per_step.len(), 2);
    assert!(report.tke_mae.is_some());
    assert_eq!(report.config["initial_frames"], 10);
    let stored: MetricsReport = read_json(&p.join("eval/metrics.json")).unwrap();
    assert_eq!(stored, report);

    let plot = format!("reports = [\"{}\"]\n", p.join("eval/metrics.json").display());
    let svg = cmd_plot(&resolve(&args(p, "p.toml", &plot, "plot", &[])).unwrap()).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    for out in ["data", "train", "roll", "eval", "plot"] {
        assert!(p.join(out).join(RESOLVED_CONFIG).exists(), "{out}");
    }
    assert!(leftovers(p).is_empty());
}
