//! Decoder architecture configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub norm_eps: f64,
    pub max_position: usize,
}

impl ModelConfig {
    /// Default toy scale: small enough for float64 finite-difference suites
    /// in seconds, deep enough for multi-hop cache chains.
    pub fn toy() -> Self {
        ModelConfig {
            layers: 4,
            d_model: 64,
            n_heads: 4,
            head_dim: 16,
            vocab_size: 256,
            norm_eps: 1e-5,
            max_position: 8192,
        }
    }

    /// Minimal configuration for exhaustive finite-difference oracles.
    pub fn tiny() -> Self {
        ModelConfig {
            layers: 2,
            d_model: 8,
            n_heads: 2,
            head_dim: 4,
            vocab_size: 8,
            norm_eps: 1e-5,
            max_position: 512,
        }
    }

    /// SwiGLU hidden width; fixed convention rather than a tunable.
    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::InvalidArg("layers must be >= 1".into()));
        }
        if self.d_model != self.n_heads * self.head_dim {
            return Err(Error::InvalidArg(format!(
                "d_model {} != n_heads {} * head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::InvalidArg("head_dim must be even for rotary pairs".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::InvalidArg("vocab_size must be >= 2".into()));
        }
        if self.norm_eps <= 0.0 {
            return Err(Error::InvalidArg("norm_eps must be positive".into()));
        }
        Ok(())
    }
}
