use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Shape and adapter settings of a [`super::TransformerModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    /// 0 disables the adapters.
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            vocab_size: 128,
            max_positions: 1024,
            lora_rank: 4,
            lora_alpha: 8.0,
            lora_dropout: 0.05,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} does not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if !(self.lora_alpha > 0.0 && self.lora_alpha.is_finite()) {
            return Err(Error::Config("lora_alpha must be a positive real".into()));
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return Err(Error::Config("lora_dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn lora_scale(&self) -> f64 {
        if self.lora_rank == 0 {
            0.0
        } else {
            self.lora_alpha / self.lora_rank as f64
        }
    }

    /// Fails with a capacity error when `n` positions do not fit.
    pub fn check_positions(&self, n: usize) -> Result<()> {
        if n > self.max_positions {
            Err(Error::Capacity {
                needed: n,
                max: self.max_positions,
            })
        } else {
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_adapter_settings_are_accepted() {
        let cfg = TransformerConfig {
            lora_rank: 64,
            lora_alpha: 16.0,
            lora_dropout: 0.05,
            ..Default::default()
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.lora_scale(), 0.25);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad_heads = TransformerConfig {
            n_heads: 5,
            ..Default::default()
        };
        assert!(matches!(bad_heads.validate(), Err(Error::Config(_))));
        let bad_dropout = TransformerConfig {
            lora_dropout: 1.0,
            ..Default::default()
        };
        assert!(bad_dropout.validate().is_err());
        let bad_alpha = TransformerConfig {
            lora_alpha: 0.0,
            ..Default::default()
        };
        assert!(bad_alpha.validate().is_err());
    }
}
