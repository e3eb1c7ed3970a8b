//! The in-context operator transformer.
//!
//! A prompt of `J` condition/QoI frame pairs is cut into patches, embedded by
//! one shared linear map, tagged with a patch encoding and a per-pair
//! condition or QoI encoding, and run through pre-norm transformer blocks
//! under a block-causal mask. The prediction for pair `i` is decoded from the
//! output tokens sitting at the condition positions of pair `i`.

mod config;
mod params;

pub use config::ModelConfig;
pub use params::{param_shapes, LayerParams, ModelParams, ParamTree};

use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::patching::{unpatchify, ChannelMask, Frame, PatchError, PatchGrid, PatchLayout, UNION_CHANNELS};
use crate::tensor::{AttentionMask, Scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error("prompt exceeds trained context length: {pairs} pairs > {max}")]
    PromptTooLong { pairs: usize, max: usize },
    #[error("prompt has no pairs")]
    EmptyPrompt,
    #[error("frame grid {got:?} does not match model grid {expected:?}")]
    GridMismatch { got: (usize, usize), expected: (usize, usize) },
    #[error("invalid model config: {0}")]
    Config(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Role of a token in the prompt sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenRole {
    Condition,
    Qoi,
}

/// `(pair, role, patch)` of token `t` for blocks of `nc` condition and `nq`
/// QoI tokens per pair.
pub fn token_position(t: usize, nc: usize, nq: usize) -> (usize, TokenRole, usize) {
    let block = nc + nq;
    let (pair, within) = (t / block, t % block);
    if within < nc {
        (pair, TokenRole::Condition, within)
    } else {
        (pair, TokenRole::Qoi, within - nc)
    }
}

/// Block-causal mask over `pairs·(nc+nq)` tokens: condition tokens of pair
/// `i` see all earlier pairs and their own condition block; QoI tokens of
/// pair `i` additionally see their own QoI block.
pub fn build_block_causal_mask(pairs: usize, nc: usize, nq: usize) -> AttentionMask {
    let block = nc + nq;
    let size = pairs * block;
    AttentionMask::from_fn(size, |r, c| {
        let (pr, _) = (r / block, r % block);
        let end = match token_position(r, nc, nq).1 {
            TokenRole::Condition => pr * block + nc,
            TokenRole::Qoi => (pr + 1) * block,
        };
        c < end
    })
}

/// Tape handles for every parameter.
pub type ParamVars = ParamTree<Var>;

/// Registers parameters on a tape as differentiable leaves.
pub fn register_params<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>) -> Result<ParamVars> {
    Ok(params.try_map(|_, t| tape.param(t.clone()))?)
}

/// Registers parameters as constants (inference).
pub fn register_constants<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams<T>) -> Result<ParamVars> {
    Ok(params.try_map(|_, t| tape.constant(t.clone()))?)
}

fn check_grid(cfg: &ModelConfig, f: &Frame) -> Result<()> {
    let expected = (cfg.grid[0], cfg.grid[1]);
    if f.grid() != expected {
        return Err(ModelError::GridMismatch { got: f.grid(), expected });
    }
    Ok(())
}

fn push_patches<T: Scalar>(cfg: &ModelConfig, f: &Frame, out: &mut Vec<T>) -> Result<()> {
    check_grid(cfg, f)?;
    let g = f.patchify(cfg.patch[0], cfg.patch[1])?;
    out.extend(g.patches.iter().map(|v| T::c(*v as f64)));
    Ok(())
}

/// Token input matrix `[pairs·2·Np, patch_len]` in sequence order
/// `c_1^1..c_1^Np, q_1^1..q_1^Np, c_2^1, ...`.
pub fn prompt_matrix<T: Scalar>(cfg: &ModelConfig, pairs: &[(&Frame, &Frame)]) -> Result<Tensor<T>> {
    if pairs.is_empty() {
        return Err(ModelError::EmptyPrompt);
    }
    let mut data = Vec::with_capacity(cfg.seq_len(pairs.len()) * cfg.patch_len());
    for (c, q) in pairs {
        push_patches(cfg, c, &mut data)?;
        push_patches(cfg, q, &mut data)?;
    }
    Ok(Tensor::new(vec![cfg.seq_len(pairs.len()), cfg.patch_len()], data)?)
}

/// QoI patches of every pair, `[pairs·Np, patch_len]`, aligned with the rows
/// of the decoded predictions.
pub fn target_matrix<T: Scalar>(cfg: &ModelConfig, qois: &[&Frame]) -> Result<Tensor<T>> {
    if qois.is_empty() {
        return Err(ModelError::EmptyPrompt);
    }
    let mut data = Vec::with_capacity(qois.len() * cfg.patches_per_frame() * cfg.patch_len());
    for q in qois {
        push_patches(cfg, q, &mut data)?;
    }
    Ok(Tensor::new(vec![qois.len() * cfg.patches_per_frame(), cfg.patch_len()], data)?)
}

/// Embedded token sequence `[pairs·2·Np, d]`: shared linear patch embedding
/// plus patch and function positional encodings.
pub fn embed_prompt<T: Scalar>(tape: &mut Tape<T>, vars: &ParamVars, cfg: &ModelConfig, input: Var) -> Result<Var> {
    let np = cfg.patches_per_frame();
    let (len, _) = tape.value(input)?.dims2()?;
    let pairs = len / (2 * np);
    if pairs * 2 * np != len || pairs == 0 {
        return Err(ModelError::Tensor(TensorError::Invalid(format!(
            "token count {len} is not a whole number of pairs of {np}+{np} patches"
        ))));
    }
    if pairs > cfg.max_pairs {
        return Err(ModelError::PromptTooLong {
            pairs,
            max: cfg.max_pairs,
        });
    }
    let mut patch_idx = Vec::with_capacity(len);
    let mut cond_idx = Vec::with_capacity(len);
    let mut qoi_idx = Vec::with_capacity(len);
    for t in 0..len {
        let (pair, role, k) = token_position(t, np, np);
        patch_idx.push(Some(k));
        match role {
            TokenRole::Condition => {
                cond_idx.push(Some(pair));
                qoi_idx.push(None);
            }
            TokenRole::Qoi => {
                cond_idx.push(None);
                qoi_idx.push(Some(pair));
            }
        }
    }
    let x = tape.matmul(input, vars.embed_w)?;
    let x = tape.add_row(x, vars.embed_b)?;
    let ep = tape.gather_rows(vars.pos_patch, Arc::new(patch_idx))?;
    let ec = tape.gather_rows(vars.pos_cond, Arc::new(cond_idx))?;
    let eq = tape.gather_rows(vars.pos_qoi, Arc::new(qoi_idx))?;
    let x = tape.add(x, ep)?;
    let x = tape.add(x, ec)?;
    Ok(tape.add(x, eq)?)
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add_row(y, b)?)
}

fn block<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    layer: &LayerParams<Var>,
    cfg: &ModelConfig,
    x: Var,
    mask: &Arc<AttentionMask>,
    mut rng: Option<&mut R>,
) -> Result<Var> {
    let eps = T::c(cfg.layer_norm_eps);
    let h = tape.layer_norm(x, layer.ln1_gamma, layer.ln1_beta, eps)?;
    let q = linear(tape, h, layer.wq, layer.bq)?;
    let k = linear(tape, h, layer.wk, layer.bk)?;
    let v = linear(tape, h, layer.wv, layer.bv)?;
    let attn = tape.multi_head_attention(q, k, v, cfg.n_heads, mask)?;
    let mut attn = linear(tape, attn, layer.wo, layer.bo)?;
    if let Some(r) = rng.as_deref_mut() {
        attn = tape.dropout(attn, cfg.dropout, r)?;
    }
    let x = tape.add(x, attn)?;
    let h = tape.layer_norm(x, layer.ln2_gamma, layer.ln2_beta, eps)?;
    let h = linear(tape, h, layer.w1, layer.b1)?;
    let h = tape.gelu(h)?;
    let mut h = linear(tape, h, layer.w2, layer.b2)?;
    if let Some(r) = rng {
        h = tape.dropout(h, cfg.dropout, r)?;
    }
    Ok(tape.add(x, h)?)
}

/// Full forward pass on a tape. Returns decoded patch predictions
/// `[pairs·Np, patch_len]`, row block `i` predicting the QoI of pair `i`.
///
/// Dropout is applied only when `dropout_rng` is given.
pub fn forward_on_tape<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    cfg: &ModelConfig,
    input: Var,
    mut dropout_rng: Option<&mut R>,
) -> Result<Var> {
    let np = cfg.patches_per_frame();
    let mut x = embed_prompt(tape, vars, cfg, input)?;
    let (len, _) = tape.value(x)?.dims2()?;
    let pairs = len / (2 * np);
    let mask = Arc::new(build_block_causal_mask(pairs, np, np));
    for layer in &vars.layers {
        x = block(tape, layer, cfg, x, &mask, dropout_rng.as_deref_mut())?;
    }
    let x = tape.layer_norm(x, vars.final_gamma, vars.final_beta, T::c(cfg.layer_norm_eps))?;
    let cond_rows: Vec<Option<usize>> = (0..pairs)
        .flat_map(|i| (0..np).map(move |k| Some(i * 2 * np + k)))
        .collect();
    let x = tape.gather_rows(x, Arc::new(cond_rows))?;
    linear(tape, x, vars.decode_w, vars.decode_b)
}

/// Result of a single in-context prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub frame: Frame,
    /// Number of context pairs the prediction was conditioned on.
    pub context_pairs: usize,
    /// Fewer context pairs than the loss-exempt minimum seen in training.
    pub low_context: bool,
}

/// Anything that can answer an in-context question on normalized frames.
pub trait InContextPredictor {
    fn predict_next(&self, context: &[(Frame, Frame)], question: &Frame) -> Result<Prediction>;

    /// Largest number of example pairs accepted alongside a question.
    fn max_context(&self) -> Option<usize> {
        None
    }
}

/// Model configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Vicon<T: Scalar> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Scalar> Vicon<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate().map_err(|e| ModelError::Config(e.join("; ")))?;
        let params = ModelParams::init(&config, rng);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate().map_err(|e| ModelError::Config(e.join("; ")))?;
        let shapes = param_shapes(&config);
        if shapes.layers.len() != params.layers.len() {
            return Err(ModelError::Config("layer count does not match config".into()));
        }
        for ((name, t), s) in params.named().into_iter().zip(shapes.leaves()) {
            if t.shape() != s.as_slice() {
                return Err(ModelError::Config(format!(
                    "parameter {name} has shape {:?}, config expects {s:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    /// Decoded patch matrix for a prompt.
    pub fn forward_patches(&self, pairs: &[(&Frame, &Frame)]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = register_constants(&mut tape, &self.params)?;
        let input = tape.constant(prompt_matrix(&self.config, pairs)?)?;
        let out = forward_on_tape::<T, rand_chacha::ChaCha8Rng>(&mut tape, &vars, &self.config, input, None)?;
        Ok(tape.value(out)?.clone())
    }

    /// Predictions for every pair of the prompt in one pass; prediction `i`
    /// uses pairs `< i` and condition `i` only.
    pub fn forward(&self, pairs: &[(&Frame, &Frame)]) -> Result<Vec<Frame>> {
        let out = self.forward_patches(pairs)?;
        let mask = pairs[0].0.channel_mask;
        decode_frames(&self.config, &out, mask)
    }
}

/// Splits a decoded `[pairs·Np, patch_len]` matrix into frames.
pub fn decode_frames<T: Scalar>(cfg: &ModelConfig, decoded: &Tensor<T>, mask: ChannelMask) -> Result<Vec<Frame>> {
    let layout = PatchLayout::new(cfg.grid[0], cfg.grid[1], cfg.patch[0], cfg.patch[1], UNION_CHANNELS)?;
    let per_frame = layout.num_patches() * layout.patch_len();
    decoded
        .data()
        .chunks_exact(per_frame)
        .map(|chunk| {
            let grid = PatchGrid {
                patches: chunk.iter().map(|v| v.f64() as f32).collect(),
                layout,
            };
            let values = unpatchify(&grid)?;
            Ok(Frame::new(cfg.grid[0], cfg.grid[1], values, mask)?)
        })
        .collect()
}

impl<T: Scalar> InContextPredictor for Vicon<T> {
    fn max_context(&self) -> Option<usize> {
        Some(self.config.max_pairs - 1)
    }

    /// Appends the question as the condition of pair `J+1` with a zero
    /// placeholder QoI; the mask keeps the placeholder out of the read-out.
    fn predict_next(&self, context: &[(Frame, Frame)], question: &Frame) -> Result<Prediction> {
        let j = context.len();
        if j + 1 > self.config.max_pairs {
            return Err(ModelError::PromptTooLong {
                pairs: j + 1,
                max: self.config.max_pairs,
            });
        }
        let placeholder = Frame::zeros(question.nx(), question.ny(), question.channel_mask);
        let mut pairs: Vec<(&Frame, &Frame)> = context.iter().map(|(c, q)| (c, q)).collect();
        pairs.push((question, &placeholder));
        let out = self.forward_patches(&pairs)?;
        let per_frame = self.config.patches_per_frame() * self.config.patch_len();
        let last = Tensor::new(
            vec![self.config.patches_per_frame(), self.config.patch_len()],
            out.data()[j * per_frame..].to_vec(),
        )?;
        let mut frame = decode_frames(&self.config, &last, question.channel_mask)?.remove(0);
        frame.time_index = question.time_index;
        frame.dt_record = question.dt_record;
        Ok(Prediction {
            frame,
            context_pairs: j,
            low_context: j < self.config.min_context,
        })
    }
}
