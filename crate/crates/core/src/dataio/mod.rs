//! Analytic trajectories, trajectory files and stride-augmented prompts.

mod spectral;
mod storage;

pub use spectral::{apply_fourier_multiplier, heat_evolve, shift, FourierMode, InitialField};
pub use storage::{load_trajectory, read_manifest, save_trajectory, TrajectoryManifest, FORMAT_VERSION, MANIFEST_FILE};

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::patching::{Channel, ChannelMask, Frame, PatchError, UNION_CHANNELS};
use crate::prompt_norm::{compute_stats, normalize_with, NormError, NormalizedPrompt, PromptStats};

/// Largest stride sampled when none is configured.
pub const DEFAULT_S_MAX: usize = 5;
/// Initial frames handed to a rollout.
pub const INITIAL_FRAMES: usize = 10;
/// Highest wavenumber of generated initial fields.
pub const DEFAULT_KMAX: usize = 3;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("no stride in 1..={s_max} leaves room for {pairs} pairs in {nt} frames")]
    NoFeasibleStride { nt: usize, pairs: usize, s_max: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("unsupported trajectory format version {found} (expected {expected})")]
    VersionMismatch { found: u64, expected: u64 },
    #[error("payload holds {found} bytes, manifest implies {expected}")]
    PayloadLength { expected: u64, found: u64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("payload checksum {found} does not match manifest {expected}")]
    Checksum { expected: String, found: String },
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Norm(#[from] NormError),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// A uniformly recorded solution of one PDE instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub frames: Vec<Frame>,
    pub dt_record: f64,
    pub pde_tag: String,
    pub pde_params: BTreeMap<String, f64>,
    pub seed: Option<u64>,
}

impl Trajectory {
    pub fn nt(&self) -> usize {
        self.frames.len()
    }

    pub fn grid(&self) -> (usize, usize) {
        self.frames.first().map(|f| f.grid()).unwrap_or((0, 0))
    }

    pub fn channel_mask(&self) -> ChannelMask {
        self.frames.first().map(|f| f.channel_mask).unwrap_or_default()
    }
}

/// SplitMix64 finalizer over `(base, stream)`, for independent child seeds.
pub fn stream_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn check_grid(nx: usize, ny: usize, nt: usize, dt: f64) -> Result<()> {
    if nx == 0 || ny == 0 || nt == 0 {
        return Err(DataError::InvalidParameter(format!("grid {nx}x{ny} with {nt} frames")));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DataError::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    Ok(())
}

fn frame_from_channels(nx: usize, ny: usize, mask: ChannelMask, fill: &[(Channel, &dyn Fn(usize) -> f64)]) -> Result<Frame> {
    let mut values = vec![0.0f32; nx * ny * UNION_CHANNELS];
    for (c, f) in fill {
        for p in 0..nx * ny {
            values[p * UNION_CHANNELS + c.index()] = f(p) as f32;
        }
    }
    Ok(Frame::new(nx, ny, values, mask)?)
}

/// Heat equation `u_t = ν Δu` on `[0, 2π)²` from `initial`, solved exactly
/// mode by mode; the field lives in the scalar channel.
pub fn gen_heat_from(initial: &InitialField, nu: f64, dt: f64, nt: usize) -> Result<Trajectory> {
    let (nx, ny) = (initial.nx, initial.ny);
    check_grid(nx, ny, nt, dt)?;
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(DataError::InvalidParameter(format!("nu must be positive, got {nu}")));
    }
    let u0 = initial.sample();
    let mask = ChannelMask::from_channels(&[Channel::Scalar]);
    let mut frames = Vec::with_capacity(nt);
    for t in 0..nt {
        let u = heat_evolve(&u0, nx, ny, nu, t as f64 * dt);
        frames.push(frame_from_channels(nx, ny, mask, &[(Channel::Scalar, &|p| u[p])])?.with_time(t, dt));
    }
    Ok(Trajectory {
        frames,
        dt_record: dt,
        pde_tag: "heat".into(),
        pde_params: BTreeMap::from([("nu".into(), nu)]),
        seed: None,
    })
}

/// Heat trajectory from a random band-limited initial field drawn with `seed`.
pub fn gen_heat(nx: usize, ny: usize, nu: f64, dt: f64, nt: usize, seed: u64) -> Result<Trajectory> {
    let init = InitialField::random(nx, ny, DEFAULT_KMAX, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut traj = gen_heat_from(&init, nu, dt, nt)?;
    traj.seed = Some(seed);
    Ok(traj)
}

/// Transport `u_t + v·∇u = 0` on `[0, 1)²` at constant velocity, so frame `t`
/// is the initial field shifted by `t·v·dt·n` cells. Velocity channels carry
/// `(vx, vy)`, the scalar channel the transported field.
pub fn gen_advection_from(initial: &InitialField, vx: f64, vy: f64, dt: f64, nt: usize) -> Result<Trajectory> {
    let (nx, ny) = (initial.nx, initial.ny);
    check_grid(nx, ny, nt, dt)?;
    if !(vx.is_finite() && vy.is_finite()) {
        return Err(DataError::InvalidParameter("velocity must be finite".into()));
    }
    let u0 = initial.sample();
    let mask = ChannelMask::from_channels(&[Channel::VelocityX, Channel::VelocityY, Channel::Scalar]);
    let (cx, cy) = (vx * dt * nx as f64, vy * dt * ny as f64);
    let mut frames = Vec::with_capacity(nt);
    for t in 0..nt {
        let u = shift(&u0, nx, ny, cx * t as f64, cy * t as f64);
        let fill: [(Channel, &dyn Fn(usize) -> f64); 3] = [
            (Channel::VelocityX, &|_| vx),
            (Channel::VelocityY, &|_| vy),
            (Channel::Scalar, &|p| u[p]),
        ];
        frames.push(frame_from_channels(nx, ny, mask, &fill)?.with_time(t, dt));
    }
    Ok(Trajectory {
        frames,
        dt_record: dt,
        pde_tag: "advection".into(),
        pde_params: BTreeMap::from([("vx".into(), vx), ("vy".into(), vy)]),
        seed: None,
    })
}

pub fn gen_advection(nx: usize, ny: usize, vx: f64, vy: f64, dt: f64, nt: usize, seed: u64) -> Result<Trajectory> {
    let init = InitialField::random(nx, ny, DEFAULT_KMAX, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut traj = gen_advection_from(&init, vx, vy, dt, nt)?;
    traj.seed = Some(seed);
    Ok(traj)
}

/// A family of trajectories whose PDE parameters are drawn uniformly from
/// the given ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "pde", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilySpec {
    Heat {
        count: usize,
        nu: [f64; 2],
        dt: f64,
        #[serde(default = "default_kmax")]
        kmax: usize,
    },
    Advection {
        count: usize,
        /// Displacement per recorded step along each axis, in cells.
        cells_per_step: [f64; 2],
        dt: f64,
        #[serde(default = "default_kmax")]
        kmax: usize,
        /// Round displacements to whole cells.
        #[serde(default)]
        integer_shifts: bool,
    },
}

fn default_kmax() -> usize {
    DEFAULT_KMAX
}

impl FamilySpec {
    pub fn count(&self) -> usize {
        match self {
            FamilySpec::Heat { count, .. } | FamilySpec::Advection { count, .. } => *count,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            FamilySpec::Heat { .. } => "heat",
            FamilySpec::Advection { .. } => "advection",
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let (range, dt, kmax) = match self {
            FamilySpec::Heat { nu, dt, kmax, .. } => {
                if nu[0] <= 0.0 {
                    errs.push(format!("heat: nu range must be positive, got {nu:?}"));
                }
                (nu, dt, kmax)
            }
            FamilySpec::Advection {
                cells_per_step, dt, kmax, ..
            } => (cells_per_step, dt, kmax),
        };
        if !(range[0] <= range[1]) {
            errs.push(format!("{}: range {range:?} is not ordered", self.tag()));
        }
        if !(*dt > 0.0) {
            errs.push(format!("{}: dt must be positive", self.tag()));
        }
        if *kmax == 0 {
            errs.push(format!("{}: kmax must be positive", self.tag()));
        }
        errs
    }

    /// Trajectory number `index` of this family; everything random derives
    /// from `seed`.
    pub fn generate(&self, nx: usize, ny: usize, nt: usize, seed: u64) -> Result<Trajectory> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut traj = match self {
            FamilySpec::Heat { nu, dt, kmax, .. } => {
                let nu = rng.random_range(nu[0]..=nu[1]);
                let init = InitialField::random(nx, ny, *kmax, &mut rng);
                gen_heat_from(&init, nu, *dt, nt)?
            }
            FamilySpec::Advection {
                cells_per_step,
                dt,
                kmax,
                integer_shifts,
                ..
            } => {
                let mut draw = || {
                    let c = rng.random_range(cells_per_step[0]..=cells_per_step[1]);
                    if *integer_shifts {
                        c.round()
                    } else {
                        c
                    }
                };
                let (cx, cy) = (draw(), draw());
                let init = InitialField::random(nx, ny, *kmax, &mut rng);
                gen_advection_from(&init, cx / (dt * nx as f64), cy / (dt * ny as f64), *dt, nt)?
            }
        };
        traj.seed = Some(seed);
        Ok(traj)
    }
}

/// Grid, length and families of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub nx: usize,
    pub ny: usize,
    pub nt: usize,
    pub seed: u64,
    pub families: Vec<FamilySpec>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.nx == 0 || self.ny == 0 {
            errs.push(format!("grid {}x{} must be non-empty", self.nx, self.ny));
        }
        if self.nt < INITIAL_FRAMES + 1 {
            errs.push(format!("nt = {} must be at least {}", self.nt, INITIAL_FRAMES + 1));
        }
        if self.families.is_empty() {
            errs.push("at least one family is required".into());
        }
        for f in &self.families {
            errs.extend(f.validate());
        }
        errs
    }

    pub fn total(&self) -> usize {
        self.families.iter().map(|f| f.count()).sum()
    }

    /// Every trajectory, family by family; trajectory `k` uses
    /// `stream_seed(seed, k)`.
    pub fn generate(&self) -> Result<Vec<Trajectory>> {
        let errs = self.validate();
        if !errs.is_empty() {
            return Err(DataError::InvalidParameter(errs.join("; ")));
        }
        let mut out = Vec::with_capacity(self.total());
        for fam in &self.families {
            for _ in 0..fam.count() {
                let seed = stream_seed(self.seed, out.len() as u64);
                out.push(fam.generate(self.nx, self.ny, self.nt, seed)?);
            }
        }
        Ok(out)
    }
}

/// Condition/QoI pairs from one trajectory at one stride.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSequence {
    pub pairs: Vec<(Frame, Frame)>,
    pub stride: usize,
    /// Frame index of each pair's condition.
    pub start_indices: Vec<usize>,
    pub channel_mask: ChannelMask,
    pub stats: PromptStats,
}

impl PromptSequence {
    /// Pairs at the given condition indices; statistics are computed from
    /// the conditions.
    pub fn from_indices(traj: &Trajectory, starts: &[usize], stride: usize) -> Result<Self> {
        let nt = traj.nt();
        if let Some(bad) = starts.iter().find(|&&a| a + stride >= nt) {
            return Err(DataError::InvalidParameter(format!(
                "pair starting at {bad} with stride {stride} exceeds {nt} frames"
            )));
        }
        let pairs: Vec<(Frame, Frame)> = starts
            .iter()
            .map(|&a| (traj.frames[a].clone(), traj.frames[a + stride].clone()))
            .collect();
        let conds: Vec<&Frame> = pairs.iter().map(|(c, _)| c).collect();
        let stats = compute_stats(&conds)?;
        Ok(Self {
            pairs,
            stride,
            start_indices: starts.to_vec(),
            channel_mask: traj.channel_mask(),
            stats,
        })
    }

    pub fn normalized(&self) -> NormalizedPrompt {
        normalize_with(&self.pairs, None, self.stats)
    }
}

/// Strides `s ≤ s_max` with at least `pairs` distinct condition indices.
pub fn feasible_strides(nt: usize, pairs: usize, s_max: usize) -> Vec<usize> {
    (1..=s_max).filter(|&s| s < nt && nt - s >= pairs).collect()
}

/// Draws a stride uniformly among the feasible ones, then `pairs` distinct
/// condition indices from `0..nt−s` in draw order.
pub fn sample_prompt<R: Rng + ?Sized>(traj: &Trajectory, pairs: usize, s_max: usize, rng: &mut R) -> Result<PromptSequence> {
    let strides = feasible_strides(traj.nt(), pairs, s_max);
    if pairs == 0 || strides.is_empty() {
        return Err(DataError::NoFeasibleStride {
            nt: traj.nt(),
            pairs,
            s_max,
        });
    }
    let s = strides[rng.random_range(0..strides.len())];
    let starts = index::sample(rng, traj.nt() - s, pairs).into_vec();
    PromptSequence::from_indices(traj, &starts, s)
}

/// How training prompts are drawn from a trajectory collection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub pairs: usize,
    pub s_max: usize,
    /// Prompts drawn from each trajectory per epoch.
    pub prompts_per_traj: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            pairs: 10,
            s_max: 3,
            prompts_per_traj: 4,
            seed: 0,
        }
    }
}

/// Epoch-shuffled prompt stream. Prompt `g` is a pure function of the seed
/// and `g`, so any step of a run can be regenerated independently.
pub struct PromptSampler<'a> {
    trajs: &'a [Trajectory],
    cfg: SamplerConfig,
}

impl<'a> PromptSampler<'a> {
    pub fn new(trajs: &'a [Trajectory], cfg: SamplerConfig) -> Result<Self> {
        if trajs.is_empty() || cfg.prompts_per_traj == 0 {
            return Err(DataError::InvalidParameter(
                "sampler needs trajectories and prompts_per_traj > 0".into(),
            ));
        }
        if let Some(t) = trajs.iter().find(|t| feasible_strides(t.nt(), cfg.pairs, cfg.s_max).is_empty()) {
            return Err(DataError::NoFeasibleStride {
                nt: t.nt(),
                pairs: cfg.pairs,
                s_max: cfg.s_max,
            });
        }
        Ok(Self { trajs, cfg })
    }

    pub fn epoch_len(&self) -> usize {
        self.trajs.len() * self.cfg.prompts_per_traj
    }

    /// Trajectory index serving global prompt `g`.
    pub fn trajectory_of(&self, g: u64) -> usize {
        let n = self.epoch_len() as u64;
        let (epoch, pos) = (g / n, (g % n) as usize);
        let mut order: Vec<usize> = (0..self.epoch_len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(self.cfg.seed, epoch)));
        order[pos] / self.cfg.prompts_per_traj
    }

    pub fn prompt(&self, g: u64) -> Result<PromptSequence> {
        let traj = &self.trajs[self.trajectory_of(g)];
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.cfg.seed ^ 0x7072_6f6d_7074, g));
        sample_prompt(traj, self.cfg.pairs, self.cfg.s_max, &mut rng)
    }

    /// Prompts `step·batch .. (step+1)·batch`.
    pub fn batch(&self, step: u64, batch: usize) -> Result<Vec<PromptSequence>> {
        (0..batch as u64).map(|b| self.prompt(step * batch as u64 + b)).collect()
    }
}
