//! Learning-rate schedules, checkpoints, the stage runner and multi-stage
//! recipes (DRAFT, SAFT, plain finetuning and training from scratch).

mod checkpoint;
mod recipe;
mod schedule;
mod stage;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, Provenance, RngState, StageRecord,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use recipe::{run_pipeline, Pipeline, PipelineResult, Recipe};
pub use schedule::{NoamSchedule, Schedule, TriStageSchedule};
pub use stage::{
    default_schedule, run_stage, FinetuneMode, MetricRecord, Stage, StageConfig, StageOutput,
};

use crate::model::Group;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("tensor {name} has shape {found:?}, config expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint lacks tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint tensor {0} is not part of the configured model")]
    UnexpectedTensor(String),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("invalid stage config: {0}")]
    Config(String),
    #[error("the {0} stage needs an initial checkpoint")]
    MissingInit(Stage),
    #[error("finetuning needs a vocabulary")]
    MissingVocab,
    #[error("model already has adapters of width {existing}, requested {requested}")]
    AdapterWidth { existing: usize, requested: usize },
    #[error(
        "trainable groups {requested:?} conflict with the {stage} stage, which trains {required:?}"
    )]
    Trainable {
        stage: Stage,
        requested: Vec<Group>,
        required: Vec<Group>,
    },
    #[error("non-finite loss at step {0}")]
    NonFinite(u64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Ssl(#[from] crate::ssl::SslError),
    #[error(transparent)]
    Ctc(#[from] crate::ctc::CtcError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;
