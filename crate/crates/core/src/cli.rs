//! Command-line experiments: `gen-data`, `train`, `rollout`, `eval`, `plot`.
//!
//! Every command reads a TOML config, applies flag overrides, validates the
//! result as a whole and writes into a staging directory that replaces the
//! output directory only on success. The resolved config is stored next to
//! the outputs as `config.toml`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataio::{load_trajectory, save_trajectory, DatasetSpec, PromptSampler, SamplerConfig, Trajectory};
use crate::metrics::{evaluate_rollout, MetricsReport};
use crate::model::{ModelConfig, Vicon};
use crate::patching::Frame;
use crate::rollout::{check_plan, execute, plan_rollout, DropSpec, Strategy};
use crate::train::{load_checkpoint, save_checkpoint, train, TrainConfig, TrainState};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const RESOLVED_CONFIG: &str = "config.toml";
pub const DATA_MANIFEST: &str = "manifest.json";

#[derive(Debug)]
pub enum CliError {
    Config(Vec<String>),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(errs) => {
                writeln!(f, "invalid configuration ({} problem(s)):", errs.len())?;
                for e in errs {
                    writeln!(f, "  - {e}")?;
                }
                Ok(())
            }
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "vicon", version, about = "In-context operator learning for time-dependent PDEs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a trajectory dataset.
    GenData(CommonArgs),
    /// Train a model on a generated dataset.
    Train(CommonArgs),
    /// Roll a trained model out on one trajectory.
    Rollout(CommonArgs),
    /// Score rollout predictions against ground truth.
    Eval(CommonArgs),
    /// Draw per-step error curves from metrics reports.
    Plot(CommonArgs),
}

#[derive(Debug, Args, Clone, Default)]
pub struct CommonArgs {
    /// TOML config file.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override any config value, e.g. `--set train.total_steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub out: PathBuf,
    pub dataset: DatasetSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    pub out: PathBuf,
    /// Directory written by `gen-data`.
    pub data: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    /// Checkpoint to continue from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutRunConfig {
    pub out: PathBuf,
    pub checkpoint: PathBuf,
    /// Trajectory directory providing the initial frames.
    pub trajectory: PathBuf,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default = "default_s_max")]
    pub s_max: usize,
    /// Example pairs per prompt; defaults to one less than the model's
    /// context length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demos: Option<usize>,
    #[serde(default = "default_initial")]
    pub initial_frames: usize,
    /// Frames to reach; defaults to the trajectory length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total: Option<usize>,
    #[serde(default = "default_drops")]
    pub drops: DropSpec,
    #[serde(default)]
    pub seed: u64,
}

fn default_strategy() -> Strategy {
    Strategy::Flexible
}

fn default_s_max() -> usize {
    3
}

fn default_initial() -> usize {
    crate::dataio::INITIAL_FRAMES
}

fn default_drops() -> DropSpec {
    DropSpec::None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRunConfig {
    pub out: PathBuf,
    pub trajectory: PathBuf,
    /// Directory written by `rollout`.
    pub predictions: PathBuf,
    /// Evaluation starts at this frame index (`I_0`, the first frame after
    /// the initial ones).
    #[serde(default = "default_initial")]
    pub initial_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotRunConfig {
    pub out: PathBuf,
    /// `metrics.json` files, one curve each.
    pub reports: Vec<PathBuf>,
    #[serde(default = "default_metric")]
    pub metric: PlotMetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotMetric {
    RelL2,
    AbsL2,
}

fn default_metric() -> PlotMetric {
    PlotMetric::RelL2
}

/// Dataset directory listing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub dataset: DatasetSpec,
    pub trajectories: Vec<DataEntry>,
    pub counts: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataEntry {
    pub dir: String,
    pub pde_tag: String,
    pub pde_params: BTreeMap<String, f64>,
    pub seed: Option<u64>,
}

/// Validated configuration of a command.
pub trait RunConfig: Serialize + DeserializeOwned {
    /// Every accepted key; used to report all unknown keys at once.
    fn reference() -> toml::Table;
    fn apply_seed(table: &mut toml::Table, seed: u64);
    fn validate(&self) -> Vec<String>;
}

fn to_table<T: Serialize>(v: &T) -> toml::Table {
    toml::Table::try_from(v).expect("config sections serialize to tables")
}

impl RunConfig for GenDataConfig {
    fn reference() -> toml::Table {
        key_table(&["out"], &[("dataset", toml::Table::new())])
    }

    fn apply_seed(table: &mut toml::Table, seed: u64) {
        set_path(table, "dataset.seed", toml::Value::Integer(seed as i64));
    }

    fn validate(&self) -> Vec<String> {
        self.dataset.validate()
    }
}

impl RunConfig for TrainRunConfig {
    fn reference() -> toml::Table {
        key_table(
            &["out", "data", "resume"],
            &[
                ("model", to_table(&ModelConfig::desk())),
                ("train", to_table(&TrainConfig::desk())),
                ("sampler", to_table(&SamplerConfig::default())),
            ],
        )
    }

    fn apply_seed(table: &mut toml::Table, seed: u64) {
        set_path(table, "train.seed", toml::Value::Integer(seed as i64));
        set_path(table, "sampler.seed", toml::Value::Integer(seed as i64));
    }

    fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        errs.extend(self.model.validate().err().unwrap_or_default().into_iter().map(|e| format!("model: {e}")));
        errs.extend(self.train.validate().err().unwrap_or_default().into_iter().map(|e| format!("train: {e}")));
        if self.train.min_context != self.model.min_context {
            errs.push(format!(
                "train.min_context ({}) must equal model.min_context ({})",
                self.train.min_context, self.model.min_context
            ));
        }
        if self.sampler.pairs > self.model.max_pairs {
            errs.push(format!(
                "sampler.pairs ({}) exceeds model.max_pairs ({})",
                self.sampler.pairs, self.model.max_pairs
            ));
        }
        if self.sampler.pairs <= self.train.min_context {
            errs.push(format!(
                "sampler.pairs ({}) must exceed train.min_context ({})",
                self.sampler.pairs, self.train.min_context
            ));
        }
        if self.sampler.s_max == 0 {
            errs.push("sampler.s_max must be positive".into());
        }
        if self.sampler.prompts_per_traj == 0 {
            errs.push("sampler.prompts_per_traj must be positive".into());
        }
        errs
    }
}

impl RunConfig for RolloutRunConfig {
    fn reference() -> toml::Table {
        key_table(
            &[
                "out",
                "checkpoint",
                "trajectory",
                "strategy",
                "s_max",
                "demos",
                "initial_frames",
                "total",
                "drops",
                "seed",
            ],
            &[],
        )
    }

    fn apply_seed(table: &mut toml::Table, seed: u64) {
        set_path(table, "seed", toml::Value::Integer(seed as i64));
    }

    fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.s_max == 0 {
            errs.push("s_max must be positive".into());
        }
        if self.demos == Some(0) {
            errs.push("demos must be positive".into());
        }
        if self.initial_frames == 0 {
            errs.push("initial_frames must be positive".into());
        }
        if let Some(t) = self.total {
            if t <= self.initial_frames {
                errs.push(format!("total ({t}) must exceed initial_frames ({})", self.initial_frames));
            }
        }
        if let Err(e) = self.drops.available(self.initial_frames.max(1), self.seed) {
            errs.push(format!("drops: {e}"));
        }
        errs
    }
}

impl RunConfig for EvalRunConfig {
    fn reference() -> toml::Table {
        key_table(&["out", "trajectory", "predictions", "initial_frames"], &[])
    }

    fn apply_seed(_: &mut toml::Table, _: u64) {}

    fn validate(&self) -> Vec<String> {
        Vec::new()
    }
}

impl RunConfig for PlotRunConfig {
    fn reference() -> toml::Table {
        key_table(&["out", "reports", "metric"], &[])
    }

    fn apply_seed(_: &mut toml::Table, _: u64) {}

    fn validate(&self) -> Vec<String> {
        if self.reports.is_empty() {
            vec!["reports must list at least one metrics file".into()]
        } else {
            Vec::new()
        }
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        if !entry.is_table() {
            *entry = toml::Value::Table(toml::Table::new());
        }
        cur = entry.as_table_mut().expect("just made a table");
    }
    cur.insert(last.to_string(), value);
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn unknown_keys(given: &toml::Table, reference: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in given {
        match reference.get(k) {
            None => out.push(format!("{prefix}{k}: unknown field")),
            Some(r) => {
                if let (Some(gt), Some(rt)) = (v.as_table(), r.as_table()) {
                    if !rt.is_empty() {
                        unknown_keys(gt, rt, &format!("{prefix}{k}."), out);
                    }
                }
            }
        }
    }
}

/// Reference table naming the top-level keys; sections map to their
/// default contents (empty when their keys are not checked).
fn key_table(keys: &[&str], sections: &[(&str, toml::Table)]) -> toml::Table {
    let mut t: toml::Table = keys.iter().map(|k| (k.to_string(), toml::Value::Boolean(true))).collect();
    for (k, v) in sections {
        t.insert(k.to_string(), toml::Value::Table(v.clone()));
    }
    t
}

/// Reads the config file (if any), applies overrides and validates the
/// result, reporting every problem found.
pub fn resolve<C: RunConfig>(args: &CommonArgs) -> Result<C, CliError> {
    let mut errs = Vec::new();
    let mut table = match &args.config {
        None => toml::Table::new(),
        Some(path) => match fs::read_to_string(path) {
            Err(e) => return Err(CliError::Config(vec![format!("{}: {e}", path.display())])),
            Ok(text) => text
                .parse::<toml::Table>()
                .map_err(|e| CliError::Config(vec![format!("{}: {e}", path.display())]))?,
        },
    };
    if let Some(out) = &args.out {
        table.insert("out".into(), toml::Value::String(out.display().to_string()));
    }
    if let Some(seed) = args.seed {
        if seed > i64::MAX as u64 {
            errs.push(format!("seed {seed} does not fit in a signed 64-bit integer"));
        } else {
            C::apply_seed(&mut table, seed);
        }
    }
    for s in &args.set {
        match s.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => set_path(&mut table, k.trim(), parse_value(v.trim())),
            _ => errs.push(format!("--set {s:?}: expected KEY=VALUE")),
        }
    }
    unknown_keys(&table, &C::reference(), "", &mut errs);
    let had_unknown = errs.iter().any(|e| e.ends_with("unknown field"));
    let parsed: Option<C> = match C::deserialize(toml::Value::Table(table)) {
        Ok(c) => Some(c),
        Err(e) => {
            let msg = e.to_string().trim().replace('\n', " ");
            if !(had_unknown && msg.contains("unknown field")) {
                errs.push(msg);
            }
            None
        }
    };
    if let Some(c) = &parsed {
        errs.extend(c.validate());
    }
    errs.dedup();
    match parsed {
        Some(c) if errs.is_empty() => Ok(c),
        _ => Err(CliError::Config(errs)),
    }
}

/// Output directory under construction: lives next to the target and
/// replaces it on [`Staging::commit`]; dropped uncommitted, it is removed.
pub struct Staging {
    target: PathBuf,
    dir: PathBuf,
    committed: bool,
}

impl Staging {
    pub fn new(target: &Path) -> Result<Self, CliError> {
        let name = target
            .file_name()
            .ok_or_else(|| CliError::Config(vec![format!("out {} has no final component", target.display())]))?;
        let mut staged = OsString::from(".");
        staged.push(name);
        staged.push(format!(".partial-{}", std::process::id()));
        let dir = target.with_file_name(staged);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(runtime)?;
        }
        fs::create_dir_all(&dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            target: target.to_path_buf(),
            dir,
            committed: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn commit(mut self) -> Result<(), CliError> {
        if self.target.exists() {
            fs::remove_dir_all(&self.target).map_err(|e| runtime(format!("{}: {e}", self.target.display())))?;
        }
        fs::rename(&self.dir, &self.target).map_err(|e| runtime(format!("{}: {e}", self.target.display())))?;
        self.committed = true;
        Ok(())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}

fn write_resolved<C: Serialize>(dir: &Path, cfg: &C) -> Result<(), CliError> {
    let text = toml::to_string(cfg).map_err(|e| CliError::Config(vec![e.to_string()]))?;
    fs::write(dir.join(RESOLVED_CONFIG), text).map_err(runtime)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).map_err(runtime)?;
    fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

pub fn cmd_gen_data(cfg: &GenDataConfig) -> Result<DataManifest, CliError> {
    let stage = Staging::new(&cfg.out)?;
    write_resolved(stage.path(), cfg)?;
    let trajs = cfg.dataset.generate().map_err(runtime)?;
    let mut entries = Vec::with_capacity(trajs.len());
    let mut counts = BTreeMap::new();
    for (k, t) in trajs.iter().enumerate() {
        let dir = format!("traj_{k:05}");
        save_trajectory(t, &stage.path().join(&dir)).map_err(runtime)?;
        *counts.entry(t.pde_tag.clone()).or_insert(0) += 1;
        entries.push(DataEntry {
            dir,
            pde_tag: t.pde_tag.clone(),
            pde_params: t.pde_params.clone(),
            seed: t.seed,
        });
    }
    let manifest = DataManifest {
        dataset: cfg.dataset.clone(),
        trajectories: entries,
        counts,
    };
    write_json(&stage.path().join(DATA_MANIFEST), &manifest)?;
    stage.commit()?;
    Ok(manifest)
}

/// Loads every trajectory listed in a `gen-data` directory.
pub fn load_dataset(dir: &Path) -> Result<Vec<Trajectory>, CliError> {
    let manifest: DataManifest = read_json(&dir.join(DATA_MANIFEST))?;
    manifest
        .trajectories
        .iter()
        .map(|e| load_trajectory(&dir.join(&e.dir)).map_err(runtime))
        .collect()
}

pub fn cmd_train(cfg: &TrainRunConfig) -> Result<TrainState, CliError> {
    let stage = Staging::new(&cfg.out)?;
    write_resolved(stage.path(), cfg)?;
    let trajs = load_dataset(&cfg.data)?;
    if let Some(t) = trajs.iter().find(|t| t.grid() != (cfg.model.grid[0], cfg.model.grid[1])) {
        return Err(runtime(format!(
            "dataset grid {:?} does not match model.grid {:?}",
            t.grid(),
            cfg.model.grid
        )));
    }
    let sampler = PromptSampler::new(&trajs, cfg.sampler.clone()).map_err(runtime)?;
    let mut state = match &cfg.resume {
        Some(path) => {
            let ck = load_checkpoint(path).map_err(runtime)?;
            if ck.state.model.config != cfg.model {
                return Err(runtime("resume checkpoint was trained with a different model config"));
            }
            ck.state
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            TrainState::new(Vicon::new(cfg.model.clone(), &mut rng).map_err(runtime)?)
        }
    };
    let mut log = String::new();
    train(&mut state, &sampler, &cfg.train, cfg.train.total_steps, |rec| {
        let line = serde_json::to_string(rec).expect("log records serialize");
        eprintln!("{line}");
        log.push_str(&line);
        log.push('\n');
    })
    .map_err(runtime)?;
    fs::write(stage.path().join("train_log.jsonl"), log).map_err(runtime)?;
    save_checkpoint(&stage.path().join("model.ckpt"), &state, Some(&cfg.train)).map_err(runtime)?;
    stage.commit()?;
    Ok(state)
}

pub fn cmd_rollout(cfg: &RolloutRunConfig) -> Result<BTreeMap<usize, Frame>, CliError> {
    let stage = Staging::new(&cfg.out)?;
    write_resolved(stage.path(), cfg)?;
    let model = load_checkpoint(&cfg.checkpoint).map_err(runtime)?.state.model;
    let traj = load_trajectory(&cfg.trajectory).map_err(runtime)?;
    let total = cfg.total.unwrap_or(traj.nt());
    if cfg.initial_frames > traj.nt() {
        return Err(runtime(format!(
            "trajectory has {} frames, fewer than initial_frames {}",
            traj.nt(),
            cfg.initial_frames
        )));
    }
    let demos = cfg.demos.unwrap_or(model.config.max_pairs - 1);
    let fa = cfg.drops.available(cfg.initial_frames, cfg.seed).map_err(runtime)?;
    let plan = plan_rollout(cfg.strategy, &fa, demos, cfg.s_max, total).map_err(runtime)?;
    let violations = check_plan(&plan);
    if !violations.is_empty() {
        let msgs: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(runtime(format!("planner produced an invalid plan: {}", msgs.join("; "))));
    }
    fs::write(stage.path().join("plan.txt"), plan.to_text()).map_err(runtime)?;
    let initial: BTreeMap<usize, Frame> = fa.iter().map(|&i| (i, traj.frames[i].clone())).collect();
    let out = execute(&plan, &initial, &model).map_err(runtime)?;
    let mut steps = String::new();
    for r in &out.records {
        steps.push_str(&serde_json::to_string(r).map_err(runtime)?);
        steps.push('\n');
    }
    fs::write(stage.path().join("steps.jsonl"), steps).map_err(runtime)?;
    if !out.predictions.is_empty() {
        let preds = Trajectory {
            frames: out.predictions.values().cloned().collect(),
            dt_record: traj.dt_record,
            pde_tag: traj.pde_tag.clone(),
            pde_params: traj.pde_params.clone(),
            seed: traj.seed,
        };
        save_trajectory(&preds, &stage.path().join("predictions")).map_err(runtime)?;
    }
    stage.commit()?;
    Ok(out.predictions)
}

pub fn cmd_eval(cfg: &EvalRunConfig) -> Result<MetricsReport, CliError> {
    let stage = Staging::new(&cfg.out)?;
    write_resolved(stage.path(), cfg)?;
    let gt = load_trajectory(&cfg.trajectory).map_err(runtime)?;
    let preds = load_trajectory(&cfg.predictions).map_err(runtime)?;
    let map: BTreeMap<usize, Frame> = preds.frames.into_iter().map(|f| (f.time_index, f)).collect();
    let mut report = evaluate_rollout(&map, &gt.frames, cfg.initial_frames).map_err(runtime)?;
    report.config = serde_json::to_value(cfg).map_err(runtime)?;
    write_json(&stage.path().join("metrics.json"), &report)?;
    stage.commit()?;
    Ok(report)
}

pub fn cmd_plot(cfg: &PlotRunConfig) -> Result<String, CliError> {
    let stage = Staging::new(&cfg.out)?;
    write_resolved(stage.path(), cfg)?;
    let mut series = Vec::new();
    for path in &cfg.reports {
        let r: MetricsReport = read_json(path)?;
        let pts: Vec<(f64, f64)> = r
            .per_step
            .iter()
            .map(|s| {
                let y = match cfg.metric {
                    PlotMetric::RelL2 => s.rel_l2,
                    PlotMetric::AbsL2 => s.abs_l2,
                };
                (s.step as f64, y)
            })
            .collect();
        let label = path
            .parent()
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        series.push((label, pts));
    }
    let title = match cfg.metric {
        PlotMetric::RelL2 => "relative L2 error",
        PlotMetric::AbsL2 => "absolute L2 error",
    };
    let svg = error_curves_svg(title, &series);
    fs::write(stage.path().join("errors.svg"), &svg).map_err(runtime)?;
    stage.commit()?;
    Ok(svg)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Line chart of error against rollout step.
pub fn error_curves_svg(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, m) = (640.0, 400.0, 56.0);
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let x_max = pts.clone().map(|p| p.0).fold(1.0f64, f64::max);
    let y_max = pts.map(|p| p.1).filter(|v| v.is_finite()).fold(0.0f64, f64::max).max(1e-12) * 1.05;
    let sx = |x: f64| m + (x - 1.0) / (x_max - 1.0).max(1.0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - y / y_max * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{title}</text>"#, w / 2.0);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    );
    for k in 0..=4 {
        let y = y_max * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{y:.3}</text>"#,
            m - 6.0,
            sy(y) + 4.0
        );
    }
    let ticks = x_max as usize;
    for k in 1..=ticks {
        if ticks <= 12 || k % (ticks / 10).max(1) == 0 || k == 1 {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{}" text-anchor="middle">{k}</text>"#,
                sx(k as f64),
                h - m + 16.0
            );
        }
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">rollout step</text>"#, w / 2.0, h - 12.0);
    for (i, (label, p)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = p
            .iter()
            .filter(|(_, y)| y.is_finite())
            .map(|(x, y)| format!("{:.1},{:.1}", sx(*x), sy(*y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        let ly = m + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" fill="{color}" text-anchor="end">{}</text>"#,
            w - m,
            xml_escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprint!("{e}");
            if matches!(e, CliError::Runtime(_)) {
                eprintln!();
            }
            e.exit_code()
        }
    }
}

pub fn dispatch(cmd: &Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData(a) => {
            let m = cmd_gen_data(&resolve(a)?)?;
            eprintln!("wrote {} trajectories {:?}", m.trajectories.len(), m.counts);
        }
        Command::Train(a) => {
            let s = cmd_train(&resolve(a)?)?;
            eprintln!("trained {} steps", s.step);
        }
        Command::Rollout(a) => {
            let p = cmd_rollout(&resolve(a)?)?;
            eprintln!("predicted {} frames", p.len());
        }
        Command::Eval(a) => {
            let r = cmd_eval(&resolve(a)?)?;
            eprintln!(
                "rel_l2 step1 {:?} all_avg {:?}",
                r.aggregates.rel_l2.step1, r.aggregates.rel_l2.all_avg
            );
        }
        Command::Plot(a) => {
            cmd_plot(&resolve(a)?)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
