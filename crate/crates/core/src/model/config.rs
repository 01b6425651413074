use serde::{Deserialize, Serialize};

use super::{ModelError, Result};
use crate::tensor::DType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frontend {
    /// Precomputed filter-bank frames feed the conv subsampler.
    Filterbank,
    /// Three stride-2 convolutions over raw samples replace the subsampler.
    LearnedConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Causal,
    Full,
}

/// Output head (the generator) attached on top of the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HeadConfig {
    None,
    /// One linear generator per lag, each predicting a stacked frame group.
    Apc {
        lags: usize,
    },
    /// Projection to code space, a Gumbel quantizer and its codebook.
    Contrastive {
        codebook_size: usize,
        d_code: usize,
    },
    /// Projection to unit logits.
    Hubert {
        units: usize,
    },
    /// Projection to token logits including the blank.
    Ctc {
        vocab: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frontend: Frontend,
    pub feature_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub ffn_dim: usize,
    pub subsample_factor: usize,
    pub conv_kernel: usize,
    pub mask_mode: MaskMode,
    pub d_ada: Option<usize>,
    pub dropout: f64,
    pub head: HeadConfig,
    pub dtype: DType,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::toy()
    }
}

impl ModelConfig {
    /// Desk-scale configuration used by the synthetic pipeline.
    pub fn toy() -> Self {
        ModelConfig {
            frontend: Frontend::Filterbank,
            feature_dim: 8,
            d_model: 64,
            n_heads: 4,
            n_blocks: 2,
            ffn_dim: 128,
            subsample_factor: 4,
            conv_kernel: 3,
            mask_mode: MaskMode::Causal,
            d_ada: None,
            dropout: 0.0,
            head: HeadConfig::Apc { lags: 1 },
            dtype: DType::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if ![1, 2, 4].contains(&self.subsample_factor) {
            return bad(format!(
                "subsample_factor must be 1, 2 or 4, got {}",
                self.subsample_factor
            ));
        }
        if self.feature_dim == 0 || self.ffn_dim == 0 || self.conv_kernel == 0 {
            return bad("feature_dim, ffn_dim and conv_kernel must be positive".into());
        }
        if self.d_ada == Some(0) {
            return bad("d_ada must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        match self.head {
            HeadConfig::Apc { lags: 0 } => return bad("APC head needs at least one lag".into()),
            HeadConfig::Apc { .. } if self.frontend != Frontend::Filterbank => {
                return bad(
                    "APC heads predict filter-bank frames and need the filterbank frontend".into(),
                )
            }
            HeadConfig::Contrastive {
                codebook_size,
                d_code,
            } if codebook_size == 0 || d_code == 0 => return bad("empty codebook".into()),
            HeadConfig::Hubert { units: 0 } | HeadConfig::Ctc { vocab: 0 } => {
                return bad("empty output head".into())
            }
            _ => {}
        }
        Ok(())
    }

    /// Model steps per input step.
    pub fn time_reduction(&self) -> usize {
        match self.frontend {
            Frontend::Filterbank => self.subsample_factor,
            Frontend::LearnedConv => 8,
        }
    }

    /// Subsampled length for `t` input steps.
    pub fn subsampled_len(&self, t: usize) -> usize {
        match self.frontend {
            Frontend::Filterbank => t.div_ceil(self.subsample_factor),
            Frontend::LearnedConv => t.div_ceil(2).div_ceil(2).div_ceil(2),
        }
    }

    /// Width of one stacked APC target: `subsample_factor · feature_dim`.
    pub fn stacked_dim(&self) -> usize {
        self.subsample_factor * self.feature_dim
    }

    /// Conv subsampler strides, two layers whose product is the factor.
    pub fn conv_strides(&self) -> [usize; 2] {
        match self.subsample_factor {
            4 => [2, 2],
            2 => [2, 1],
            _ => [1, 1],
        }
    }
}
