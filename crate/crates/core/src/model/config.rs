use serde::{Deserialize, Serialize};

use crate::patching::UNION_CHANNELS;
use crate::tensor::LAYER_NORM_EPS;

/// Transformer and tokenizer hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    /// Maximum number of condition/QoI pairs per prompt.
    pub max_pairs: usize,
    /// Leading pairs exempt from the training loss.
    pub min_context: usize,
    /// Patch resolution `[rx, ry]`.
    pub patch: [usize; 2],
    /// Grid resolution `[nx, ny]`.
    pub grid: [usize; 2],
    pub channels: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    /// Standard deviation of the positional-encoding initialization.
    pub pos_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// CPU-sized configuration: 16x16 grid, 4x4 patches, 10 pairs.
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ffn: 128,
            max_pairs: 10,
            min_context: 5,
            patch: [4, 4],
            grid: [16, 16],
            channels: UNION_CHANNELS,
            dropout: 0.0,
            layer_norm_eps: LAYER_NORM_EPS,
            pos_init_std: 0.02,
        }
    }

    /// Published full-size configuration (128x128 grid, 16x16 patches).
    pub fn full_scale() -> Self {
        Self {
            d_model: 1024,
            n_layers: 10,
            n_heads: 8,
            d_ffn: 2048,
            max_pairs: 10,
            min_context: 5,
            patch: [16, 16],
            grid: [128, 128],
            ..Self::desk()
        }
    }

    /// Every violated constraint, in one list.
    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if self.d_model == 0 {
            errs.push("d_model must be positive".to_string());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads.max(1) != 0 {
            errs.push(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 {
            errs.push("n_layers must be positive".to_string());
        }
        if self.d_ffn == 0 {
            errs.push("d_ffn must be positive".to_string());
        }
        if self.max_pairs == 0 {
            errs.push("max_pairs must be positive".to_string());
        }
        if self.min_context >= self.max_pairs {
            errs.push(format!(
                "min_context ({}) must be smaller than max_pairs ({})",
                self.min_context, self.max_pairs
            ));
        }
        for (axis, (n, r)) in ["x", "y"].iter().zip(self.grid.iter().zip(&self.patch)) {
            if *r == 0 || *n == 0 || n % r != 0 {
                errs.push(format!("grid {axis} size {n} is not divisible by patch size {r}"));
            }
        }
        if self.channels != UNION_CHANNELS {
            errs.push(format!("channels must be {UNION_CHANNELS}, got {}", self.channels));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if !(self.layer_norm_eps > 0.0) {
            errs.push("layer_norm_eps must be positive".to_string());
        }
        if !(self.pos_init_std >= 0.0) {
            errs.push("pos_init_std must be non-negative".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    /// Patches per frame (`Nc = Nq`).
    pub fn patches_per_frame(&self) -> usize {
        (self.grid[0] / self.patch[0]) * (self.grid[1] / self.patch[1])
    }

    pub fn patch_len(&self) -> usize {
        self.patch[0] * self.patch[1] * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn seq_len(&self, pairs: usize) -> usize {
        2 * self.patches_per_frame() * pairs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::full_scale().validate().unwrap();
        assert_eq!(ModelConfig::desk().seq_len(10), 320);
        assert_eq!(ModelConfig::full_scale().patches_per_frame(), 64);
    }

    #[test]
    fn validation_lists_every_problem() {
        let cfg = ModelConfig {
            n_heads: 3,
            min_context: 10,
            dropout: 1.0,
            grid: [15, 16],
            ..ModelConfig::desk()
        };
        let errs = cfg.validate().unwrap_err();
        assert_eq!(errs.len(), 4, "{errs:?}");
    }
}
