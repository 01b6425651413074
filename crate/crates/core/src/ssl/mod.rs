//! Self-supervised objectives: APC and its multi-lag and bidirectional
//! extensions, contrastive masked prediction with a Gumbel quantizer, and
//! HuBERT-style unit prediction with K-means targets.

mod apc;
mod contrastive;
mod hubert;
mod kmeans;
mod masking;

pub use apc::{
    apc_loss, eapc_loss, eapc_objective, ebiapc_loss, shift_targets, Norm, Reduction, ShiftSpec,
    StackedTargets,
};
pub use contrastive::{
    contrastive_loss, contrastive_objective, diversity_loss, gumbel_quantize, sample_negatives,
    ContrastiveConfig, GumbelOutput,
};
pub use hubert::{hubert_loss, hubert_objective, unit_labels, HubertConfig};
pub use kmeans::{kmeans_assign, kmeans_fit, KMeansModel};
pub use masking::{mask_from_starts, sample_masks, MaskConfig};

use serde::{Deserialize, Serialize};

use crate::model::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum SslError {
    #[error("objective needs {expected} generators, model has {found}")]
    GeneratorCount { expected: usize, found: usize },
    #[error("need at least {k} points for {k} clusters, got {n}")]
    TooFewPoints { n: usize, k: usize },
    #[error("invalid objective setting: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, SslError>;

/// A pretraining or adaptation objective with its knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Objective {
    /// E-APC; plain APC is the `k = 1` case.
    Eapc(ShiftSpec),
    /// E-APC in both directions over a Bi-APC pair.
    Ebiapc(ShiftSpec),
    Contrastive(ContrastiveConfig),
    Hubert(HubertConfig),
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Eapc(s) if s.k == 1 => "apc",
            Objective::Eapc(_) => "eapc",
            Objective::Ebiapc(_) => "ebiapc",
            Objective::Contrastive(_) => "contrastive",
            Objective::Hubert(_) => "hubert",
        }
    }
}
