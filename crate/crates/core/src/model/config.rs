use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the encoder-decoder backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub max_target_len: usize,
    /// The image is a `grid_side × grid_side` symbol grid.
    pub grid_side: usize,
    pub image_vocab_size: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Two encoder and two decoder layers at width 64 over the default
    /// 8×8 task vocabulary.
    pub fn toy() -> Self {
        let vocab = crate::tasks::Vocab::new(8);
        Self {
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            num_encoder_layers: 2,
            num_decoder_layers: 2,
            vocab_size: vocab.len(),
            max_text_len: 8,
            max_target_len: 16,
            grid_side: 8,
            image_vocab_size: crate::tasks::IMAGE_VOCAB_SIZE,
            dropout: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Total layers that can host prompts.
    pub fn num_layers(&self) -> usize {
        self.num_encoder_layers + self.num_decoder_layers
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("num_encoder_layers", self.num_encoder_layers),
            ("num_decoder_layers", self.num_decoder_layers),
            ("vocab_size", self.vocab_size),
            ("max_text_len", self.max_text_len),
            ("max_target_len", self.max_target_len),
            ("grid_side", self.grid_side),
            ("image_vocab_size", self.image_vocab_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model.hidden_dim ({}) must be divisible by model.num_heads ({})",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "model.dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Closed-form backbone parameter count.
    pub fn param_count(&self) -> usize {
        let h = self.hidden_dim;
        let f = self.ffn_dim;
        let g = self.grid_side;
        let embeddings = self.vocab_size * h
            + self.image_vocab_size * h
            + 2 * g * h
            + self.max_text_len * h
            + self.max_target_len * h;
        let norm = 2 * h;
        let attn = 4 * (h * h + h);
        let ffn = h * f + f + f * h + h;
        let enc_layer = 2 * norm + attn + ffn;
        let dec_layer = 3 * norm + 2 * attn + ffn;
        let output = h * self.vocab_size + self.vocab_size;
        embeddings
            + self.num_encoder_layers * enc_layer
            + self.num_decoder_layers * dec_layer
            + 2 * norm
            + output
    }
}
