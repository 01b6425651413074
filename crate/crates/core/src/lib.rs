//! Self-supervised speech pretraining (E-APC, Bi-APC, contrastive and
//! masked unit prediction), residual-adapter domain adaptation and CTC
//! finetuning on a small reverse-mode autodiff engine.

pub mod ctc;
pub mod data;
pub mod features;
pub mod model;
pub mod oracle;
pub mod ssl;
pub mod tensor;
pub mod train;

pub use ctc::{Vocab, BLANK};
pub use data::{Batch, Domain, Manifest, SynthConfig, Synthesizer, Utterance};
pub use features::{FeatureMatrix, FeaturizerConfig, Waveform};
pub use model::{
    Backbone, BiApcPair, Group, HeadConfig, MaskMode, ModelConfig, ModelInput, SharingScheme,
};
pub use ssl::{Objective, ShiftSpec};
pub use tensor::{DType, Tape, Tensor, Var};
pub use train::{Checkpoint, Pipeline, Recipe, Schedule, Stage, StageConfig};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Feature(#[from] features::FeatureError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Ssl(#[from] ssl::SslError),
    #[error(transparent)]
    Ctc(#[from] ctc::CtcError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
}

pub type Result<T> = std::result::Result<T, Error>;
