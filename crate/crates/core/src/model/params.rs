use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::tensor::{Scalar, Tensor};

/// Weights of one pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<P> {
    pub ln1_gamma: P,
    pub ln1_beta: P,
    pub wq: P,
    pub bq: P,
    pub wk: P,
    pub bk: P,
    pub wv: P,
    pub bv: P,
    pub wo: P,
    pub bo: P,
    pub ln2_gamma: P,
    pub ln2_beta: P,
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
}

/// The full parameter set, generic over what each leaf holds (tensors,
/// tape variables, gradients, optimizer moments).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTree<P> {
    /// Patch embedding, `[patch_len, d]`.
    pub embed_w: P,
    pub embed_b: P,
    /// Patch positional encoding, `[patches, d]`, shared by conditions and QoIs.
    pub pos_patch: P,
    /// Condition function encoding, `[max_pairs, d]`.
    pub pos_cond: P,
    /// QoI function encoding, `[max_pairs, d]`.
    pub pos_qoi: P,
    pub layers: Vec<LayerParams<P>>,
    pub final_gamma: P,
    pub final_beta: P,
    /// Patch decoder, `[d, patch_len]`.
    pub decode_w: P,
    pub decode_b: P,
}

pub type ModelParams<T> = ParamTree<Tensor<T>>;

const LAYER_FIELDS: [&str; 16] = [
    "ln1.gamma",
    "ln1.beta",
    "attn.wq",
    "attn.bq",
    "attn.wk",
    "attn.bk",
    "attn.wv",
    "attn.bv",
    "attn.wo",
    "attn.bo",
    "ln2.gamma",
    "ln2.beta",
    "ffn.w1",
    "ffn.b1",
    "ffn.w2",
    "ffn.b2",
];

impl<P> LayerParams<P> {
    fn refs(&self) -> [&P; 16] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn refs_mut(&mut self) -> [&mut P; 16] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    fn from_iter(it: &mut impl Iterator<Item = P>) -> Option<Self> {
        Some(Self {
            ln1_gamma: it.next()?,
            ln1_beta: it.next()?,
            wq: it.next()?,
            bq: it.next()?,
            wk: it.next()?,
            bk: it.next()?,
            wv: it.next()?,
            bv: it.next()?,
            wo: it.next()?,
            bo: it.next()?,
            ln2_gamma: it.next()?,
            ln2_beta: it.next()?,
            w1: it.next()?,
            b1: it.next()?,
            w2: it.next()?,
            b2: it.next()?,
        })
    }
}

impl<P> ParamTree<P> {
    /// Names in canonical order.
    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = ["embed.weight", "embed.bias", "pos.patch", "pos.cond", "pos.qoi"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for l in 0..self.layers.len() {
            names.extend(LAYER_FIELDS.iter().map(|f| format!("layers.{l}.{f}")));
        }
        names.extend(
            ["final_ln.gamma", "final_ln.beta", "decode.weight", "decode.bias"]
                .iter()
                .map(|s| s.to_string()),
        );
        names
    }

    /// Leaves in canonical order (same order as [`ParamTree::names`]).
    pub fn leaves(&self) -> Vec<&P> {
        let mut out = vec![&self.embed_w, &self.embed_b, &self.pos_patch, &self.pos_cond, &self.pos_qoi];
        for l in &self.layers {
            out.extend(l.refs());
        }
        out.extend([&self.final_gamma, &self.final_beta, &self.decode_w, &self.decode_b]);
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut P> {
        let mut out = vec![
            &mut self.embed_w,
            &mut self.embed_b,
            &mut self.pos_patch,
            &mut self.pos_cond,
            &mut self.pos_qoi,
        ];
        for l in &mut self.layers {
            out.extend(l.refs_mut());
        }
        out.extend([
            &mut self.final_gamma,
            &mut self.final_beta,
            &mut self.decode_w,
            &mut self.decode_b,
        ]);
        out
    }

    pub fn named(&self) -> Vec<(String, &P)> {
        self.names().into_iter().zip(self.leaves()).collect()
    }

    /// Rebuilds a tree with the same structure from leaves in canonical order.
    pub fn from_leaves<Q>(n_layers: usize, leaves: Vec<Q>) -> Option<ParamTree<Q>> {
        let expected = 9 + 16 * n_layers;
        if leaves.len() != expected {
            return None;
        }
        let mut it = leaves.into_iter();
        let embed_w = it.next()?;
        let embed_b = it.next()?;
        let pos_patch = it.next()?;
        let pos_cond = it.next()?;
        let pos_qoi = it.next()?;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            layers.push(LayerParams::from_iter(&mut it)?);
        }
        Some(ParamTree {
            embed_w,
            embed_b,
            pos_patch,
            pos_cond,
            pos_qoi,
            layers,
            final_gamma: it.next()?,
            final_beta: it.next()?,
            decode_w: it.next()?,
            decode_b: it.next()?,
        })
    }

    pub fn try_map<Q, E>(&self, mut f: impl FnMut(&str, &P) -> Result<Q, E>) -> Result<ParamTree<Q>, E> {
        let mapped = self
            .named()
            .into_iter()
            .map(|(n, p)| f(&n, p))
            .collect::<Result<Vec<Q>, E>>()?;
        Ok(Self::from_leaves(self.layers.len(), mapped).expect("same structure"))
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> ParamTree<Q> {
        self.try_map::<Q, std::convert::Infallible>(|n, p| Ok(f(n, p)))
            .unwrap_or_else(|e| match e {})
    }
}

/// Expected shape of every parameter, in canonical order.
pub fn param_shapes(cfg: &ModelConfig) -> ParamTree<Vec<usize>> {
    let (d, f, p) = (cfg.d_model, cfg.d_ffn, cfg.patch_len());
    let layer = || LayerParams {
        ln1_gamma: vec![d],
        ln1_beta: vec![d],
        wq: vec![d, d],
        bq: vec![d],
        wk: vec![d, d],
        bk: vec![d],
        wv: vec![d, d],
        bv: vec![d],
        wo: vec![d, d],
        bo: vec![d],
        ln2_gamma: vec![d],
        ln2_beta: vec![d],
        w1: vec![d, f],
        b1: vec![f],
        w2: vec![f, d],
        b2: vec![d],
    };
    ParamTree {
        embed_w: vec![p, d],
        embed_b: vec![d],
        pos_patch: vec![cfg.patches_per_frame(), d],
        pos_cond: vec![cfg.max_pairs, d],
        pos_qoi: vec![cfg.max_pairs, d],
        layers: (0..cfg.n_layers).map(|_| layer()).collect(),
        final_gamma: vec![d],
        final_beta: vec![d],
        decode_w: vec![d, p],
        decode_b: vec![p],
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Fan-in scaled normal weights, zero biases, unit layer-norm gains and
    /// small normal positional encodings.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let shapes = param_shapes(cfg);
        shapes.map(|name, shape| {
            let std = if name.starts_with("pos.") {
                cfg.pos_init_std
            } else if name.ends_with("gamma") {
                return Tensor::ones(shape);
            } else if shape.len() == 1 {
                return Tensor::zeros(shape);
            } else {
                1.0 / (shape[0] as f64).sqrt()
            };
            let normal = Normal::new(0.0, std).expect("valid std");
            Tensor::from_fn(shape, |_| T::c(normal.sample(rng)))
        })
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_, t| Tensor::zeros(t.shape()))
    }

    pub fn num_scalars(&self) -> usize {
        self.leaves().iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        self.map(|_, t| t.cast())
    }

    pub fn all_finite(&self) -> bool {
        self.leaves().iter().all(|t| t.is_finite())
    }
}
