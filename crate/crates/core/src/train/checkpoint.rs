//! Binary checkpoints: magic, format version, a JSON header describing
//! every tensor, then little-endian `f32` payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AdamState, Result, TrainConfig, TrainError, TrainState};
use crate::model::{ModelConfig, ModelParams, Vicon};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VICONCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in `f32` elements from the start of the payload.
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: Option<TrainConfig>,
    step: u64,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub train_config: Option<TrainConfig>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn groups(state: &TrainState) -> [(&'static str, &ModelParams<f32>); 3] {
    [
        ("", &state.model.params),
        ("adam.m.", &state.adam.m),
        ("adam.v.", &state.adam.v),
    ]
}

pub fn save_checkpoint(path: &Path, state: &TrainState, train: Option<&TrainConfig>) -> Result<()> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (prefix, tree) in groups(state) {
        for (name, t) in tree.named() {
            tensors.push(TensorEntry {
                name: format!("{prefix}{name}"),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel();
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = Header {
        model: state.model.config.clone(),
        train: train.cloned(),
        step: state.step,
        tensors,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let header = serde_json::to_vec(&header).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    let mut buf = Vec::with_capacity(20 + header.len() + payload.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&payload);
    file.write_all(&buf).map_err(io_err(path))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = |m: &str| TrainError::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..header_end]).map_err(|e| bad(&e.to_string()))?;
    let payload = &bytes[header_end..];
    if payload.len() % 4 != 0 {
        return Err(bad("payload length is not a multiple of 4"));
    }
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(bad("payload checksum mismatch"));
    }
    let floats: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let shapes = crate::model::param_shapes(&header.model);
    let names = shapes.names();
    let mut entries = header.tensors.iter();
    let mut read_tree = |prefix: &str| -> Result<ModelParams<f32>> {
        let mut leaves = Vec::with_capacity(names.len());
        for (name, shape) in names.iter().zip(shapes.leaves()) {
            let e = entries.next().ok_or_else(|| bad("missing tensors"))?;
            if e.name != format!("{prefix}{name}") || &e.shape != shape {
                return Err(bad(&format!("unexpected tensor {} {:?}", e.name, e.shape)));
            }
            let n: usize = shape.iter().product();
            let data = floats.get(e.offset..e.offset + n).ok_or_else(|| bad("payload too short"))?;
            leaves.push(Tensor::new(shape.clone(), data.to_vec())?);
        }
        Ok(ModelParams::<f32>::from_leaves(header.model.n_layers, leaves).expect("names follow config"))
    };
    let params = read_tree("")?;
    let m = read_tree("adam.m.")?;
    let v = read_tree("adam.v.")?;
    let model = Vicon::from_parts(header.model, params)?;
    Ok(Checkpoint {
        state: TrainState {
            model,
            adam: AdamState { m, v },
            step: header.step,
        },
        train_config: header.train,
    })
}
