//! Transformer backbones with convolutional subsampling, residual adapters,
//! swappable generator heads and bidirectional APC pairs.

mod backbone;
mod biapc;
mod config;
mod layers;
mod params;

pub use backbone::{
    attention_mask, positional_encoding, Backbone, ModelInput, ModelView, ModulePrefixes,
};
pub use biapc::{build_biapc_pair, BiApcPair, Direction, SharingScheme};
pub use config::{Frontend, HeadConfig, MaskMode, ModelConfig};
pub use layers::adapter_forward;
pub use params::{module_of, xavier_uniform, Group, Module, Param, ParamStore};

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("adapters already present")]
    AdaptersPresent,
    #[error("no trainable parameters")]
    NoTrainable,
    #[error("unknown parameter group {0:?}")]
    UnknownGroup(String),
    #[error("input kind does not match the {0} frontend")]
    InputKind(&'static str),
    #[error("structural mismatch: {0}")]
    Structure(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;
