use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::language::vocab::Vocab;
use crate::scene::IMAGE_VOCAB_SIZE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_hidden: usize,
    pub d_img: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub image_vocab: usize,
    pub text_vocab: usize,
    pub max_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_hidden: 64,
            d_img: 32,
            layers: 2,
            heads: 4,
            d_ff: 256,
            image_vocab: IMAGE_VOCAB_SIZE,
            text_vocab: Vocab::global().len(),
            max_len: 160,
            lora_rank: 8,
            lora_alpha: 16.0,
            lora_dropout: 0.0,
        }
    }
}

impl ModelConfig {
    /// A very small configuration for gradient checks and unit tests.
    pub fn tiny() -> Self {
        Self { d_hidden: 8, d_img: 4, layers: 2, heads: 2, d_ff: 12, max_len: 48, lora_rank: 2, lora_alpha: 4.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_hidden", self.d_hidden),
            ("d_img", self.d_img),
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("image_vocab", self.image_vocab),
            ("text_vocab", self.text_vocab),
            ("max_len", self.max_len),
            ("lora_rank", self.lora_rank),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_hidden {} is not divisible by heads {}", self.d_hidden, self.heads)));
        }
        if !(self.lora_alpha.is_finite() && self.lora_alpha >= 0.0) {
            return Err(Error::Config(format!("lora_alpha {} must be finite and non-negative", self.lora_alpha)));
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return Err(Error::Config(format!("lora_dropout {} outside [0, 1)", self.lora_dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_hidden / self.heads
    }

    /// Adapter multiplier at inference scale `tau`: τ·α/r.
    pub fn adapter_scale(&self, tau: f64) -> f64 {
        tau * self.lora_alpha / self.lora_rank as f64
    }
}
