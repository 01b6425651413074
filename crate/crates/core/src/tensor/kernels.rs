//! Raw slice kernels shared by the forward and backward passes.
//!
//! Every loop runs in a fixed sequential order so results are bit-identical
//! across runs.

use super::{Result, TensorError};

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn mm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
pub fn mm_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (&x, &y) in grow.iter().zip(brow) {
                s += x * y;
            }
            out[i * k + p] += s;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
pub fn mm_at_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// How an input of some shape maps onto a broadcast output.
#[derive(Debug, Clone)]
pub enum BroadcastMap {
    Identity,
    /// Input equals the trailing dims of the output; index = out % len.
    Suffix(usize),
    Scalar,
    General(Vec<usize>),
}

impl BroadcastMap {
    pub fn new(out: &[usize], input: &[usize]) -> Self {
        let n_in: usize = input.iter().product();
        if out == input {
            return BroadcastMap::Identity;
        }
        if n_in == 1 {
            return BroadcastMap::Scalar;
        }
        // strip leading ones of the input
        let trimmed: Vec<usize> = {
            let first = input.iter().position(|&d| d != 1).unwrap_or(input.len());
            input[first..].to_vec()
        };
        if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
            return BroadcastMap::Suffix(n_in);
        }
        let rank = out.len();
        let mut strides = vec![0usize; rank];
        let mut s = 1;
        for i in (0..input.len()).rev() {
            let oi = i + rank - input.len();
            strides[oi] = if input[i] == 1 { 0 } else { s };
            s *= input[i];
        }
        let n_out: usize = out.iter().product();
        let mut map = Vec::with_capacity(n_out);
        let mut idx = vec![0usize; rank];
        for _ in 0..n_out {
            map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        BroadcastMap::General(map)
    }

    #[inline]
    pub fn index(&self, i: usize) -> usize {
        match self {
            BroadcastMap::Identity => i,
            BroadcastMap::Suffix(n) => i % n,
            BroadcastMap::Scalar => 0,
            BroadcastMap::General(m) => m[i],
        }
    }
}

/// Split a shape around `axis` into (outer, axis length, inner).
pub fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Numerically stable `ln(exp(a) + exp(b))`.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}
