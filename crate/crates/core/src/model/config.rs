use serde::{Deserialize, Serialize};

use crate::dataforge::Alphabet;
use crate::error::{Error, Result};

/// Architecture of the tiny decoder-only language model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LMConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
}

impl Default for LMConfig {
    fn default() -> Self {
        Self {
            vocab_size: Alphabet::SIZE,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 128,
        }
    }
}

impl LMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.vocab_size > 256 {
            return Err(Error::Config(format!(
                "vocab_size must be in 1..=256, got {}",
                self.vocab_size
            )));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.max_seq_len == 0 {
            return Err(Error::Config(
                "d_model, n_heads and max_seq_len must be positive".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }
}
