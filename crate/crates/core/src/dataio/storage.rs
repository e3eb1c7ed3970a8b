//! Trajectory directories: a JSON manifest next to a raw little-endian
//! `f32` payload laid out `[nt][nx][ny][7]`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DataError, Result, Trajectory};
use crate::patching::{channel_names, ChannelMask, Frame, UNION_CHANNELS};

pub const FORMAT_VERSION: u64 = 1;
pub const MANIFEST_FILE: &str = "traj.json";
const PAYLOAD_FILE: &str = "traj.f32";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryManifest {
    pub format_version: u64,
    pub pde_tag: String,
    pub pde_params: BTreeMap<String, f64>,
    pub nx: usize,
    pub ny: usize,
    pub nt: usize,
    pub dt_record: f64,
    pub channel_order: Vec<String>,
    pub channel_mask: [bool; UNION_CHANNELS],
    pub payload_file: String,
    pub payload_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Time index of each stored frame when they are not simply `0..nt`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_indices: Option<Vec<usize>>,
}

impl TrajectoryManifest {
    pub fn payload_bytes(&self) -> u64 {
        (self.nt * self.nx * self.ny * UNION_CHANNELS * 4) as u64
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `dir/traj.json` and its payload, creating `dir` if needed.
pub fn save_trajectory(traj: &Trajectory, dir: &Path) -> Result<TrajectoryManifest> {
    let (nx, ny) = traj.grid();
    if traj.frames.is_empty() {
        return Err(DataError::ShapeMismatch("trajectory has no frames".into()));
    }
    if let Some(f) = traj.frames.iter().find(|f| f.grid() != (nx, ny)) {
        return Err(DataError::ShapeMismatch(format!(
            "frame {} is {:?}, expected {:?}",
            f.time_index,
            f.grid(),
            (nx, ny)
        )));
    }
    let mut payload = Vec::with_capacity(traj.nt() * nx * ny * UNION_CHANNELS * 4);
    for f in &traj.frames {
        for v in f.values() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = TrajectoryManifest {
        format_version: FORMAT_VERSION,
        pde_tag: traj.pde_tag.clone(),
        pde_params: traj.pde_params.clone(),
        nx,
        ny,
        nt: traj.nt(),
        dt_record: traj.dt_record,
        channel_order: channel_names(),
        channel_mask: traj.channel_mask().0,
        payload_file: PAYLOAD_FILE.into(),
        payload_sha256: hex::encode(Sha256::digest(&payload)),
        seed: traj.seed,
        frame_indices: traj
            .frames
            .iter()
            .enumerate()
            .any(|(k, f)| f.time_index != k)
            .then(|| traj.frames.iter().map(|f| f.time_index).collect()),
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let payload_path = dir.join(PAYLOAD_FILE);
    fs::write(&payload_path, &payload).map_err(io_err(&payload_path))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| DataError::Manifest(e.to_string()))?;
    fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;
    Ok(manifest)
}

/// Reads and validates the manifest without touching the payload.
pub fn read_manifest(dir: &Path) -> Result<TrajectoryManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| DataError::Manifest("missing format_version".into()))?;
    if version != FORMAT_VERSION {
        return Err(DataError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let m: TrajectoryManifest = serde_json::from_value(raw).map_err(|e| DataError::Manifest(e.to_string()))?;
    if m.channel_order != channel_names() {
        return Err(DataError::ShapeMismatch(format!("channel order {:?}", m.channel_order)));
    }
    if m.nx == 0 || m.ny == 0 || m.nt == 0 {
        return Err(DataError::ShapeMismatch(format!("empty shape {}x{}x{}", m.nt, m.nx, m.ny)));
    }
    if let Some(idx) = &m.frame_indices {
        if idx.len() != m.nt || idx.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DataError::ShapeMismatch(format!(
                "frame_indices must list {} increasing indices",
                m.nt
            )));
        }
    }
    Ok(m)
}

pub fn load_trajectory(dir: &Path) -> Result<Trajectory> {
    let m = read_manifest(dir)?;
    let path = dir.join(&m.payload_file);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    if bytes.len() as u64 != m.payload_bytes() {
        return Err(DataError::PayloadLength {
            expected: m.payload_bytes(),
            found: bytes.len() as u64,
        });
    }
    let digest = hex::encode(Sha256::digest(&bytes));
    if digest != m.payload_sha256 {
        return Err(DataError::Checksum {
            expected: m.payload_sha256,
            found: digest,
        });
    }
    let mask = ChannelMask(m.channel_mask);
    let per_frame = m.nx * m.ny * UNION_CHANNELS;
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mut frames = Vec::with_capacity(m.nt);
    for (t, chunk) in values.chunks_exact(per_frame).enumerate() {
        for (i, v) in chunk.iter().enumerate() {
            let c = i % UNION_CHANNELS;
            if !v.is_finite() || (!mask.is_valid(c) && *v != 0.0) {
                return Err(DataError::ShapeMismatch(format!(
                    "frame {t} holds {v} in channel {c} (mask {:?})",
                    mask.0
                )));
            }
        }
        let index = m.frame_indices.as_ref().map_or(t, |idx| idx[t]);
        frames.push(Frame::new(m.nx, m.ny, chunk.to_vec(), mask)?.with_time(index, m.dt_record));
    }
    Ok(Trajectory {
        frames,
        dt_record: m.dt_record,
        pde_tag: m.pde_tag,
        pde_params: m.pde_params,
        seed: m.seed,
    })
}
