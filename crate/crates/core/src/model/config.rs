use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Window,
    Global,
}

/// Architecture of the miniature segmenter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub encoder_layers: usize,
    pub global_layer_indices: Vec<usize>,
    /// Window side length, in tokens.
    pub window_size: usize,
    /// Two-way blocks; a final token-to-image attention always follows.
    pub decoder_layers: usize,
    pub decoder_mlp_dim: usize,
    pub neck_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            in_channels: 3,
            patch_size: 8,
            embed_dim: 64,
            num_heads: 4,
            mlp_ratio: 4,
            encoder_layers: 6,
            global_layer_indices: vec![2, 5],
            window_size: 4,
            decoder_layers: 2,
            decoder_mlp_dim: 64,
            neck_dim: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        (0..self.encoder_layers)
            .map(|i| {
                if self.global_layer_indices.contains(&i) {
                    LayerKind::Global
                } else {
                    LayerKind::Window
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.window_size == 0 || self.grid() % self.window_size != 0 {
            return bad(format!(
                "token grid {} not divisible by window_size {}",
                self.grid(),
                self.window_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.neck_dim % self.num_heads != 0 || self.neck_dim % 2 != 0 {
            return bad(format!(
                "neck_dim {} must be even and divisible by num_heads {}",
                self.neck_dim, self.num_heads
            ));
        }
        if self.encoder_layers == 0 {
            return bad("encoder needs at least one layer".into());
        }
        if let Some(&i) = self.global_layer_indices.iter().find(|&&i| i >= self.encoder_layers) {
            return bad(format!("global layer index {i} beyond {} layers", self.encoder_layers));
        }
        if !self.global_layer_indices.contains(&(self.encoder_layers - 1)) {
            return bad("the last encoder layer must use global attention".into());
        }
        if self.in_channels == 0 || self.mlp_ratio == 0 || self.decoder_mlp_dim == 0 {
            return bad("channel counts must be positive".into());
        }
        Ok(())
    }
}
