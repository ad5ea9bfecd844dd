use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Encoder dimensions. Defaults are a CPU-sized model: 32x32 frames cut into
/// 8x8 patches (16 patches + CLS), width 64, four heads, two layers, six frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub mlp_ratio: usize,
    pub n_frames: usize,
    pub text_len: usize,
    pub vocab_size: usize,
    pub text_layers: usize,
    /// Width of the joint embedding space, also the temporal encoder width.
    pub embed_dim: usize,
    pub temporal_layers: usize,
    pub temporal_heads: usize,
    pub disc_hidden: usize,
    /// Divide gated attention rows by their remaining mass.
    pub renormalize_gated_attention: bool,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            patch_size: 8,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            mlp_ratio: 4,
            n_frames: 6,
            text_len: 7,
            vocab_size: 18,
            text_layers: 2,
            embed_dim: 64,
            temporal_layers: 2,
            temporal_heads: 4,
            disc_hidden: 64,
            renormalize_gated_attention: true,
            ln_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("patch_size", self.patch_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("mlp_ratio", self.mlp_ratio),
            ("n_frames", self.n_frames),
            ("text_len", self.text_len),
            ("vocab_size", self.vocab_size),
            ("text_layers", self.text_layers),
            ("embed_dim", self.embed_dim),
            ("temporal_layers", self.temporal_layers),
            ("temporal_heads", self.temporal_heads),
            ("disc_hidden", self.disc_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            bail!(Config, "{name} must be positive");
        }
        if self.image_height % self.patch_size != 0 || self.image_width % self.patch_size != 0 {
            bail!(
                Config,
                "image {}x{} is not divisible into {}px patches",
                self.image_height,
                self.image_width,
                self.patch_size
            );
        }
        if self.d_model % self.n_heads != 0 {
            bail!(Config, "d_model {} not divisible by {} heads", self.d_model, self.n_heads);
        }
        if self.embed_dim % self.temporal_heads != 0 {
            bail!(Config, "embed_dim {} not divisible by {} heads", self.embed_dim, self.temporal_heads);
        }
        if self.d_model < 2 || self.embed_dim < 2 {
            bail!(Config, "layer norm needs widths of at least 2");
        }
        if self.text_len < 2 {
            bail!(Config, "text_len must fit the start and end tokens");
        }
        if !(self.ln_eps > 0.0) {
            bail!(Config, "ln_eps must be positive");
        }
        Ok(())
    }

    /// Patches per frame, `h*w/p^2`.
    pub fn n_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    /// Spatial sequence length including CLS.
    pub fn seq_len(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}
