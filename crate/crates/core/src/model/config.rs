use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the score matrix enters the attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modulation {
    /// `S * (QK^T / sqrt(d_k))`.
    #[default]
    Multiplicative,
    /// `QK^T / sqrt(d_k) + ln S`. An extension for ablations, not the
    /// multiplicative method.
    AdditiveVariant,
    /// Plain causal attention; the score matrix is ignored.
    Off,
}

impl Modulation {
    pub fn name(self) -> &'static str {
        match self {
            Modulation::Multiplicative => "multiplicative",
            Modulation::AdditiveVariant => "additive-variant",
            Modulation::Off => "off",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_context: usize,
    pub seed: u64,
    pub modulation: Modulation,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_heads: 2,
            n_layers: 2,
            d_ff: 128,
            max_context: 512,
            seed: 0,
            modulation: Modulation::Multiplicative,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("max_context", self.max_context),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::param(name, "must be >= 1"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::param(
                "n_heads",
                format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads),
            ));
        }
        Ok(())
    }
}
