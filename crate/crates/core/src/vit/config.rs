use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("image size {image} is not divisible by patch size {patch}")]
    PatchGrid { image: usize, patch: usize },
    #[error("embed dim {dim} is not divisible by {heads} heads")]
    Heads { dim: usize, heads: usize },
    #[error("mlp_ratio {ratio} does not give an integer hidden width for dim {dim}")]
    MlpWidth { ratio: f64, dim: usize },
    #[error("drop rate {0} outside [0, 1)")]
    DropRate(f64),
    #[error("{0} must be positive")]
    Zero(&'static str),
    #[error("unknown preset {0:?} (expected tiny, small or micro)")]
    UnknownPreset(String),
}

/// Backbone hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub drop_rate: f64,
    pub qkv_bias: bool,
}

impl ViTConfig {
    /// ViT-Small/16 at 224px: 384 wide, 12 blocks, 6 heads.
    pub fn small() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            in_channels: 3,
            embed_dim: 384,
            depth: 12,
            num_heads: 6,
            mlp_ratio: 4.0,
            drop_rate: 0.1,
            qkv_bias: true,
        }
    }

    /// ViT-Tiny/16 at 224px: 192 wide, 12 blocks, 3 heads.
    pub fn tiny() -> Self {
        Self {
            embed_dim: 192,
            num_heads: 3,
            ..Self::small()
        }
    }

    /// Laptop-scale configuration used by tests and smoke runs.
    pub fn micro() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            in_channels: 3,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4.0,
            drop_rate: 0.1,
            qkv_bias: true,
        }
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        match name {
            "small" => Ok(Self::small()),
            "tiny" => Ok(Self::tiny()),
            "micro" => Ok(Self::micro()),
            other => Err(ConfigError::UnknownPreset(other.to_owned())),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("in_channels", self.in_channels),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
        ] {
            if v == 0 {
                return Err(ConfigError::Zero(name));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(ConfigError::PatchGrid {
                image: self.image_size,
                patch: self.patch_size,
            });
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(ConfigError::Heads {
                dim: self.embed_dim,
                heads: self.num_heads,
            });
        }
        let hidden = self.mlp_ratio * self.embed_dim as f64;
        if !(hidden >= 1.0 && hidden.fract() == 0.0) {
            return Err(ConfigError::MlpWidth {
                ratio: self.mlp_ratio,
                dim: self.embed_dim,
            });
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(ConfigError::DropRate(self.drop_rate));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patch tokens T.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length entering the blocks (patches plus CLS).
    pub fn seq_len(&self) -> usize {
        1 + self.num_patches()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64) as usize
    }

    /// Closed-form learnable parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let h = self.mlp_hidden();
        let patch = d * self.patch_dim() + d;
        let pos = self.seq_len() * d;
        let cls = d;
        let qkv = 3 * d * d + if self.qkv_bias { 3 * d } else { 0 };
        let proj = d * d + d;
        let norms = 4 * d;
        let mlp = h * d + h + d * h + d;
        patch + pos + cls + self.depth * (qkv + proj + norms + mlp) + 2 * d
    }
}
