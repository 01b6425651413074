use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::apc::StackedTargets;
use super::kmeans::{kmeans_assign, KMeansModel};
use super::masking::{sample_masks, MaskConfig};
use super::{Result, SslError};
use crate::model::{HeadConfig, ModelInput, ModelView};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HubertConfig {
    pub mask: MaskConfig,
    /// Weight of the masked term; `1 − alpha` goes to observed frames.
    pub alpha: f64,
    pub clusters: usize,
    pub kmeans_iters: usize,
}

impl Default for HubertConfig {
    fn default() -> Self {
        HubertConfig {
            mask: MaskConfig::default(),
            alpha: 1.0,
            clusters: 16,
            kmeans_iters: 50,
        }
    }
}

/// Pseudo-labels per model step: the nearest centroid of each complete
/// stacked frame group. Steps past the last complete group get no label.
pub fn unit_labels(model: &KMeansModel, frames: &Tensor, factor: usize) -> Result<Vec<usize>> {
    let z = StackedTargets::from_frames(frames, factor)?;
    let w = z.width();
    let valid = Tensor::with_dtype(
        &[z.valid_len, w],
        z.data.data()[..z.valid_len * w].to_vec(),
        z.data.dtype(),
    )?;
    kmeans_assign(model, &valid)
}

/// `α`-weighted cross-entropy over masked frames plus `(1 − α)`-weighted
/// cross-entropy over observed frames, each averaged over its own frames.
/// Only the first `targets.len()` rows of `logits` take part.
pub fn hubert_loss(
    tape: &mut Tape,
    logits: Var,
    targets: &[usize],
    mask: &[bool],
    alpha: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(SslError::Invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let n = targets.len();
    if mask.len() < n || tape.shape(logits)?[0] < n {
        return Err(SslError::Invalid(format!(
            "{n} targets exceed the mask or logit length"
        )));
    }
    if n == 0 {
        return Ok(tape.constant(&Tensor::scalar(0.0)));
    }
    let masked = mask[..n].iter().filter(|&&m| m).count();
    let observed = n - masked;
    let w: Vec<f64> = mask[..n]
        .iter()
        .map(|&m| match m {
            true => alpha / masked as f64,
            false => (1.0 - alpha) / observed as f64,
        })
        .collect();
    let rows = tape.slice(logits, 0, 0, n)?;
    let ce = tape.cross_entropy(rows, targets)?;
    let w = tape.constant(&Tensor::new(&[n], w)?);
    let weighted = tape.mul(ce, w)?;
    Ok(tape.sum(weighted)?)
}

/// Masked unit prediction for one utterance given its labels.
pub fn hubert_objective(
    tape: &mut Tape,
    view: &ModelView<'_>,
    input: &ModelInput,
    labels: &[usize],
    cfg: &HubertConfig,
    seed: u64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    if !matches!(view.config.head, HeadConfig::Hubert { .. }) {
        return Err(SslError::Invalid(
            "model head is not a unit classifier".into(),
        ));
    }
    let z = view.subsample(tape, input, rng.as_deref_mut())?;
    let t = tape.shape(z)?[0];
    let mask = sample_masks(t, &cfg.mask, seed);
    let c = view.encode(tape, z, Some(&mask), rng)?;
    let logits = view.head(tape, "gen.hubert", c)?;
    hubert_loss(tape, logits, labels, &mask, cfg.alpha)
}
