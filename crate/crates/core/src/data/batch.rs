use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, Result, Utterance};
use crate::model::ModelInput;
use crate::tensor::Tensor;

/// Utterances zero-padded to the longest one in the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    /// Each input padded to `t_max` steps.
    pub inputs: Vec<ModelInput>,
    pub lengths: Vec<usize>,
    pub targets: Vec<Vec<usize>>,
    pub t_max: usize,
}

impl Batch {
    pub fn from_utterances(utts: &[&Utterance]) -> Result<Self> {
        let t_max = utts
            .iter()
            .map(|u| u.input.len())
            .max()
            .ok_or(DataError::Empty)?;
        let inputs = utts.iter().map(|u| pad(&u.input, t_max)).collect();
        Ok(Batch {
            ids: utts.iter().map(|u| u.id.clone()).collect(),
            inputs,
            lengths: utts.iter().map(|u| u.input.len()).collect(),
            targets: utts.iter().map(|u| u.transcript.clone()).collect(),
            t_max,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `[B, t_max, C]` stack of the padded inputs.
    pub fn padded(&self) -> Tensor {
        let first = self.inputs[0].tensor();
        let c = first.shape()[1];
        let data = self
            .inputs
            .iter()
            .flat_map(|x| x.tensor().data().iter().copied())
            .collect();
        Tensor::with_dtype(&[self.len(), self.t_max, c], data, first.dtype())
            .expect("inputs share a shape")
    }

    /// Input `i` cut back to its true length.
    pub fn unpadded(&self, i: usize) -> ModelInput {
        self.inputs[i].truncated(self.lengths[i])
    }
}

fn pad(x: &ModelInput, t_max: usize) -> ModelInput {
    let t = x.tensor();
    let c = t.shape()[1];
    let mut data = t.data().to_vec();
    data.resize(t_max * c, 0.0);
    let padded = Tensor::with_dtype(&[t_max, c], data, t.dtype()).expect("length matches");
    match x {
        ModelInput::Features(_) => ModelInput::Features(padded),
        ModelInput::Waveform(_) => ModelInput::Waveform(padded),
    }
}

/// One epoch of batches. Utterances are shuffled, stably sorted by length
/// so each batch holds similar lengths, chunked, and the chunk order is
/// shuffled again. Every utterance appears exactly once.
pub fn make_batches(utts: &[Utterance], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(DataError::Invalid("batch size must be positive".into()));
    }
    if utts.is_empty() {
        return Err(DataError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..utts.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| utts[i].input.len());
    let mut chunks: Vec<&[usize]> = order.chunks(batch_size).collect();
    chunks.shuffle(&mut rng);
    chunks
        .into_iter()
        .map(|c| Batch::from_utterances(&c.iter().map(|&i| &utts[i]).collect::<Vec<_>>()))
        .collect()
}
