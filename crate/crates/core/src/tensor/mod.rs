//! Dense tensors, a reverse-mode tape, Adam and a finite-difference oracle.
//!
//! Values are stored as `f64` regardless of [`DType`]. A `F32` tensor only
//! ever holds values that are exactly representable in single precision:
//! every op rounds its output through `f32` when the tape runs in `F32`.
//! This keeps one set of kernels while giving training runs single-precision
//! numerics and gradient checks full double precision.

mod gradcheck;
pub(crate) mod kernels;
mod optim;
mod tape;

pub use gradcheck::{finite_diff_gradcheck, GradcheckReport, GRADCHECK_FLOOR};
pub use optim::{adam_step, AdamConfig, AdamState, Moments};
pub use tape::{ConvPadding, CustomBackward, Tape, Var};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("fully masked softmax row")]
    FullyMaskedRow,
    #[error("layer norm over an empty axis")]
    EmptyNorm,
    #[error("degenerate similarity input")]
    DegenerateSimilarity,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable belongs to a tape that has been reset")]
    StaleVar,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("non-deterministic function: two evaluations differ")]
    NonDeterministic,
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    F32,
    F64,
}

impl DType {
    /// Round a value to this precision.
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            DType::F32 => x as f32 as f64,
            DType::F64 => x,
        }
    }

    pub fn round_slice(self, xs: &mut [f64]) {
        if self == DType::F32 {
            for x in xs {
                *x = *x as f32 as f64;
            }
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::with_dtype(shape, data, DType::F64)
    }

    pub fn with_dtype(shape: &[usize], mut data: Vec<f64>, dtype: DType) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        dtype.round_slice(&mut data);
        Ok(Tensor {
            shape: shape.to_vec(),
            dtype,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            dtype,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64, dtype: DType) -> Self {
        let mut t = Self::zeros(shape, dtype);
        let v = dtype.round(value);
        t.data.iter_mut().for_each(|x| *x = v);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            dtype: DType::F64,
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(values: &[f64]) -> Self {
        Tensor {
            shape: vec![values.len()],
            dtype: DType::F64,
            data: values.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Mark this tensor as a gradient-tracked leaf.
    pub fn requires_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        self
    }

    pub fn tracks_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the values. Callers are responsible for keeping
    /// them representable in [`Tensor::dtype`].
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![g.len()],
            });
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn scale_grad(&mut self, s: f64) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn cast(&self, dtype: DType) -> Tensor {
        let mut t = self.clone();
        t.dtype = dtype;
        dtype.round_slice(&mut t.data);
        t
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}
