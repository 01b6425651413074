//! Synthetic domain-shifted corpora, manifests, batching, evaluation and
//! `key = value` configuration files.

mod batch;
mod eval;
mod kv;
mod manifest;
mod synth;

pub use batch::{make_batches, Batch};
pub use eval::{evaluate, EvalReport, UtteranceReport};
pub use kv::KvConfig;
pub use manifest::{
    load_manifest, load_utterances, write_manifest, Domain, Manifest, ManifestRow, Utterance,
};
pub use synth::{
    gen_corpus, CorpusManifests, CorpusSplits, DomainShift, EmitMode, SynthConfig, Synthesizer,
};

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("no utterances")]
    Empty,
    #[error("duplicate utterance id {0:?}")]
    DuplicateId(String),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("invalid setting: {0}")]
    Invalid(String),
    #[error("vocabulary mismatch: model emits {model} symbols, evaluation expects {expected}")]
    VocabMismatch { model: usize, expected: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Ctc(#[from] crate::ctc::CtcError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;
