//! Log-mel filter-bank features, SpecAugment masking and the `FEAT1` file
//! format.

mod io;
mod mel;
mod specaug;

pub use io::{
    decode_features, encode_features, read_features, read_waveform, write_features, write_waveform,
};
pub use mel::{
    hamming_window, hz_to_mel, log_mel, mel_center_hz, mel_filterbank, mel_to_hz, FeaturizerConfig,
};
pub use specaug::{spec_augment, spec_augment_with_spans, MaskSpan, SpecAugConfig};

use crate::tensor::{DType, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("invalid featurizer config: {0}")]
    InvalidConfig(String),
    #[error("bad feature file magic")]
    BadMagic,
    #[error("truncated feature file")]
    Truncated,
    #[error("feature file shape {frames}x{dim} overflows")]
    ShapeOverflow { frames: u64, dim: u64 },
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wav(#[from] hound::Error),
}

/// Mono audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, FeatureError> {
        if sample_rate == 0 {
            return Err(FeatureError::InvalidWaveform(
                "sample rate must be positive".into(),
            ));
        }
        if !samples.iter().all(|s| s.is_finite()) {
            return Err(FeatureError::InvalidWaveform("non-finite sample".into()));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// `frames × dim` frame-level features with their framing metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub frames: usize,
    pub dim: usize,
    pub values: Vec<f32>,
    pub frame_shift_ms: f32,
    pub frame_len_ms: f32,
}

impl FeatureMatrix {
    pub fn new(
        frames: usize,
        dim: usize,
        values: Vec<f32>,
        frame_shift_ms: f32,
        frame_len_ms: f32,
    ) -> Self {
        assert_eq!(frames * dim, values.len(), "feature matrix shape");
        FeatureMatrix {
            frames,
            dim,
            values,
            frame_shift_ms,
            frame_len_ms,
        }
    }

    pub fn zeros(frames: usize, dim: usize) -> Self {
        Self::new(frames, dim, vec![0.0; frames * dim], 10.0, 25.0)
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn get(&self, t: usize, d: usize) -> f32 {
        self.values[t * self.dim + d]
    }

    pub fn is_empty(&self) -> bool {
        self.frames == 0
    }

    pub fn to_tensor(&self, dtype: DType) -> Tensor {
        let data = self.values.iter().map(|&v| v as f64).collect();
        Tensor::with_dtype(&[self.frames, self.dim], data, dtype)
            .expect("shape matches by construction")
    }
}
