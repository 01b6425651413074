use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Result, SslError};
use crate::model::{BiApcPair, Direction, HeadConfig, ModelError, ModelInput, ModelView};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    /// Absolute error.
    #[default]
    L1,
    /// Squared error.
    L2,
}

/// How a loss is reduced over time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    /// Sum divided by the number of contributing frames.
    Mean,
}

/// Lags `{s, s+1, …, s+k−1}`, one generator each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub s: usize,
    pub k: usize,
    #[serde(default)]
    pub p: Norm,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec {
            s: 1,
            k: 1,
            p: Norm::L1,
        }
    }
}

impl ShiftSpec {
    pub fn lags(&self) -> std::ops::Range<usize> {
        self.s..self.s + self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.s == 0 || self.k == 0 {
            return Err(SslError::Invalid(format!(
                "shift spec s={} k={} must be positive",
                self.s, self.k
            )));
        }
        Ok(())
    }
}

/// Raw frames regrouped per model step: row `t` concatenates frames
/// `f·t .. f·t+f`. A trailing partial group is zero-padded and lies beyond
/// `valid_len`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedTargets {
    pub data: Tensor,
    pub valid_len: usize,
}

impl StackedTargets {
    /// `x: [T, D]` with stacking factor `f`.
    pub fn from_frames(x: &Tensor, f: usize) -> Result<Self> {
        let [t, d] = *x.shape() else {
            return Err(SslError::Invalid(format!(
                "frames must be [T, D], got {:?}",
                x.shape()
            )));
        };
        if f == 0 {
            return Err(SslError::Invalid("stacking factor must be positive".into()));
        }
        let rows = t.div_ceil(f);
        let mut data = x.data().to_vec();
        data.resize(rows * f * d, 0.0);
        Ok(StackedTargets {
            data: Tensor::with_dtype(&[rows, f * d], data, x.dtype())?,
            valid_len: t / f,
        })
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    fn rows(&self, start: usize, len: usize) -> Tensor {
        let w = self.width();
        Tensor::with_dtype(
            &[len, w],
            self.data.data()[start * w..(start + len) * w].to_vec(),
            self.data.dtype(),
        )
        .expect("rows in range")
    }
}

/// Inputs `Z′[0..T′−n]` and targets `Z′[n..T′]` over the valid rows; both
/// empty when `n ≥ T′`.
pub fn shift_targets(z: &StackedTargets, n: usize) -> (Tensor, Tensor) {
    let pairs = z.valid_len.saturating_sub(n);
    (z.rows(0, pairs), z.rows(n.min(z.valid_len), pairs))
}

/// Distance between predictions `y[t]` and targets `Z′[t+n]` summed over
/// every valid pair. Rows of `y` past the last pair are ignored.
pub fn apc_loss(
    tape: &mut Tape,
    y: Var,
    z: &StackedTargets,
    n: usize,
    p: Norm,
    reduction: Reduction,
) -> Result<Var> {
    if n == 0 {
        return Err(SslError::Invalid("lag must be at least 1".into()));
    }
    let shape = tape.shape(y)?.to_vec();
    if shape.len() != 2 || shape[1] != z.width() {
        return Err(TensorError::ShapeMismatch {
            op: "apc_loss",
            lhs: shape,
            rhs: z.data.shape().to_vec(),
        }
        .into());
    }
    let (_, targets) = shift_targets(z, n);
    let pairs = targets.shape()[0];
    if pairs == 0 {
        return Ok(tape.constant(&Tensor::scalar(0.0)));
    }
    if shape[0] < pairs {
        return Err(TensorError::ShapeMismatch {
            op: "apc_loss",
            lhs: shape,
            rhs: targets.shape().to_vec(),
        }
        .into());
    }
    let y = tape.slice(y, 0, 0, pairs)?;
    let target = tape.constant(&targets);
    let diff = tape.sub(y, target)?;
    let dist = match p {
        Norm::L1 => tape.abs(diff)?,
        Norm::L2 => tape.square(diff)?,
    };
    let total = tape.sum(dist)?;
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => tape.scale(total, 1.0 / pairs as f64)?,
    })
}

fn check_generators(view: &ModelView<'_>, k: usize) -> Result<()> {
    match view.config.head {
        HeadConfig::Apc { lags } if lags == k => Ok(()),
        HeadConfig::Apc { lags } => Err(SslError::GeneratorCount {
            expected: k,
            found: lags,
        }),
        _ => Err(SslError::GeneratorCount {
            expected: k,
            found: 0,
        }),
    }
}

/// Sum of per-lag APC losses on shared hidden states `h`, lag `s+i` using
/// generator `gen.apc{i}`.
pub fn eapc_loss(
    tape: &mut Tape,
    view: &ModelView<'_>,
    h: Var,
    z: &StackedTargets,
    spec: &ShiftSpec,
    reduction: Reduction,
) -> Result<Var> {
    spec.validate()?;
    check_generators(view, spec.k)?;
    let mut total: Option<Var> = None;
    for (i, lag) in spec.lags().enumerate() {
        let y = view.head(tape, &format!("gen.apc{i}"), h)?;
        let l = apc_loss(tape, y, z, lag, spec.p, reduction)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    Ok(total.expect("k >= 1"))
}

/// Forward `input` through `view` and score it with E-APC against its own
/// stacked frames.
pub fn eapc_objective(
    tape: &mut Tape,
    view: &ModelView<'_>,
    input: &ModelInput,
    spec: &ShiftSpec,
    reduction: Reduction,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let ModelInput::Features(x) = input else {
        return Err(ModelError::InputKind("filterbank").into());
    };
    let z = StackedTargets::from_frames(x, view.config.subsample_factor)?;
    let h = view.forward(tape, input, rng)?;
    eapc_loss(tape, view, h, &z, spec, reduction)
}

/// Left-to-right E-APC plus right-to-left E-APC on the time-reversed
/// utterance. Shared modules collect gradient from both terms.
pub fn ebiapc_loss(
    tape: &mut Tape,
    pair: &BiApcPair,
    input: &ModelInput,
    spec: &ShiftSpec,
    reduction: Reduction,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let fwd = eapc_objective(
        tape,
        &pair.view(Direction::LeftToRight),
        input,
        spec,
        reduction,
        rng.as_deref_mut(),
    )?;
    let bwd = eapc_objective(
        tape,
        &pair.view(Direction::RightToLeft),
        &input.reversed(),
        spec,
        reduction,
        rng,
    )?;
    Ok(tape.add(fwd, bwd)?)
}
