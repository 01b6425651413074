use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, BroadcastMap};
use super::{numel, DType, Result, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    tape: u64,
}

/// Backward rule for an op defined outside this module.
///
/// `backward` receives the upstream gradient, the input values and the
/// output value, and returns one optional gradient per input.
pub trait CustomBackward {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        grad_out: &[f64],
        inputs: &[&[f64]],
        output: &[f64],
    ) -> Vec<Option<Vec<f64>>>;
}

/// Padding policy for [`Tape::conv1d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvPadding {
    /// Left-pad with `w - 1` zeros; output `t` sees only inputs `<= t·stride`.
    Causal,
    /// Split `w - 1` zeros between both sides, extra on the right.
    Same,
    /// No padding.
    None,
}

enum Op {
    Leaf,
    Add(usize, usize, BroadcastMap, BroadcastMap),
    Sub(usize, usize, BroadcastMap, BroadcastMap),
    Mul(usize, usize, BroadcastMap, BroadcastMap),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        shared_rhs: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: usize,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Reshape(usize),
    Concat {
        inputs: Vec<usize>,
        outer: usize,
        widths: Vec<usize>,
    },
    Slice {
        a: usize,
        outer: usize,
        in_width: usize,
        offset: usize,
        width: usize,
    },
    Gather {
        a: usize,
        row: usize,
        indices: Vec<usize>,
    },
    Exp(usize),
    Log(usize),
    Relu(usize),
    Gelu(usize),
    Softmax {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        d: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: usize,
        kernel: usize,
        t_in: usize,
        c_in: usize,
        c_out: usize,
        width: usize,
        stride: usize,
        pad_left: usize,
        t_out: usize,
    },
    MaskedFill {
        a: usize,
        mask: Vec<bool>,
    },
    Sum(usize),
    Mean(usize),
    SumAxis {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Cosine {
        a: usize,
        b: usize,
        d: usize,
        norm_a: Vec<f64>,
        norm_b: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        classes: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Custom {
        inputs: Vec<usize>,
        op: Box<dyn CustomBackward>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records a forward computation and replays it in reverse.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and the backward pass is a single reverse sweep.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    dtype: DType,
    verify: bool,
    bound: HashMap<String, Var>,
    bound_order: Vec<String>,
}

impl Tape {
    pub fn new(dtype: DType) -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            dtype,
            verify: false,
            bound: HashMap::new(),
            bound_order: Vec::new(),
        }
    }

    /// Verification mode: every forward op checks its output for NaN/Inf.
    pub fn with_verification(mut self, on: bool) -> Self {
        self.verify = on;
        self
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every recorded node. Vars from before the reset become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.bound.clear();
        self.bound_order.clear();
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::StaleVar);
        }
        Ok(v.idx)
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        mut value: Vec<f64>,
        op: Op,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        self.dtype.round_slice(&mut value);
        if self.verify
            && !matches!(op, Op::Custom { .. } | Op::Leaf)
            && !value.iter().all(|x| x.is_finite())
        {
            return Err(TensorError::NonFinite(name));
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var {
            idx: self.nodes.len() - 1,
            tape: self.id,
        })
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    // ---- leaves -------------------------------------------------------

    /// Record a tensor as a leaf; it tracks gradients if the tensor does.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let op = Op::Leaf;
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            op,
            t.tracks_grad(),
            "leaf",
        )
        .expect("leaf values come from a validated tensor")
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            false,
            "constant",
        )
        .expect("constant values come from a validated tensor")
    }

    /// Bind a named parameter. Binding the same name twice on one tape
    /// returns the same var, so gradients from every use accumulate.
    pub fn param(&mut self, name: &str, t: &Tensor, trainable: bool) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let v = self
            .push(
                t.shape().to_vec(),
                t.data().to_vec(),
                Op::Leaf,
                trainable,
                "param",
            )
            .expect("parameter values come from a validated tensor");
        self.bound.insert(name.to_string(), v);
        self.bound_order.push(name.to_string());
        v
    }

    /// Register an existing var under a parameter name, so later
    /// [`Tape::param`] calls for that name return it.
    pub fn bind(&mut self, name: &str, v: Var) -> Result<()> {
        self.check(v)?;
        if self.bound.insert(name.to_string(), v).is_none() {
            self.bound_order.push(name.to_string());
        }
        Ok(())
    }

    /// Parameters bound on this tape, in binding order.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> + '_ {
        self.bound_order
            .iter()
            .map(move |n| (n.as_str(), self.bound[n]))
    }

    // ---- inspection ---------------------------------------------------

    pub fn value(&self, v: Var) -> Result<&[f64]> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].shape)
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let i = self.check(v)?;
        Ok(self.nodes[i].value[0])
    }

    pub fn tensor(&self, v: Var) -> Result<Tensor> {
        let i = self.check(v)?;
        Tensor::with_dtype(
            &self.nodes[i].shape,
            self.nodes[i].value.clone(),
            self.dtype,
        )
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Result<Option<&[f64]>> {
        let i = self.check(v)?;
        Ok(self.nodes[i].grad.as_deref())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        let i = self.check(v)?;
        Ok(self.nodes[i].requires_grad)
    }

    // ---- elementwise binary -------------------------------------------

    fn binary(&mut self, a: Var, b: Var, kind: u8) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let name = ["add", "sub", "mul"][kind as usize];
        let sa = self.nodes[ia].shape.clone();
        let sb = self.nodes[ib].shape.clone();
        let out = kernels::broadcast_shape(&sa, &sb, name)?;
        let ma = BroadcastMap::new(&out, &sa);
        let mb = BroadcastMap::new(&out, &sb);
        let n = numel(&out);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let value: Vec<f64> = (0..n)
            .map(|i| {
                let (x, y) = (va[ma.index(i)], vb[mb.index(i)]);
                match kind {
                    0 => x + y,
                    1 => x - y,
                    _ => x * y,
                }
            })
            .collect();
        let rg = self.rg(ia) || self.rg(ib);
        let op = match kind {
            0 => Op::Add(ia, ib, ma, mb),
            1 => Op::Sub(ia, ib, ma, mb),
            _ => Op::Mul(ia, ib, ma, mb),
        };
        self.push(out, value, op, rg, name)
    }

    /// Broadcasting addition.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 1)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 2)
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.iter().map(|x| x * c).collect();
        let shape = self.nodes[ia].shape.clone();
        let rg = self.rg(ia);
        self.push(shape, value, Op::Scale(ia, c), rg, "scale")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.iter().map(|x| x + c).collect();
        let shape = self.nodes[ia].shape.clone();
        let rg = self.rg(ia);
        self.push(shape, value, Op::AddScalar(ia), rg, "add_scalar")
    }

    /// `|x|`, composed as `relu(x) + relu(-x)`.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let pos = self.relu(a)?;
        let na = self.neg(a)?;
        let neg = self.relu(na)?;
        self.add(pos, neg)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Stop-gradient copy.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let (shape, value) = (self.nodes[ia].shape.clone(), self.nodes[ia].value.clone());
        self.push(shape, value, Op::Leaf, false, "detach")
    }

    // ---- linear algebra -----------------------------------------------

    /// Matrix product over the last two axes.
    ///
    /// `a: [.., m, k]` with `b: [k, n]` shares `b` across the leading axes;
    /// `a: [B, m, k]` with `b: [B, k, n]` is a batched product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let sa = self.nodes[ia].shape.clone();
        let sb = self.nodes[ib].shape.clone();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let shared_rhs = sb.len() == 2;
        let batch: usize = sa[..sa.len() - 2].iter().product();
        if !shared_rhs && (sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(mismatch());
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut value = vec![0.0; batch * m * n];
        {
            let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
            if shared_rhs {
                kernels::mm_acc(va, vb, &mut value, batch * m, k, n);
            } else {
                for bi in 0..batch {
                    kernels::mm_acc(
                        &va[bi * m * k..(bi + 1) * m * k],
                        &vb[bi * k * n..(bi + 1) * k * n],
                        &mut value[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        let rg = self.rg(ia) || self.rg(ib);
        let op = Op::MatMul {
            a: ia,
            b: ib,
            batch,
            shared_rhs,
            m,
            k,
            n,
        };
        self.push(out_shape, value, op, rg, "matmul")
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].shape.clone();
        if s.len() < 2 {
            return Err(TensorError::InvalidAxis {
                axis: 1,
                rank: s.len(),
            });
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let batch: usize = s[..s.len() - 2].iter().product();
        let v = &self.nodes[ia].value;
        let mut value = vec![0.0; v.len()];
        for b in 0..batch {
            let o = b * rows * cols;
            for r in 0..rows {
                for c in 0..cols {
                    value[o + c * rows + r] = v[o + r * cols + c];
                }
            }
        }
        let mut shape = s;
        let len = shape.len();
        shape.swap(len - 2, len - 1);
        let rg = self.rg(ia);
        self.push(
            shape,
            value,
            Op::Transpose {
                a: ia,
                batch,
                rows,
                cols,
            },
            rg,
            "transpose",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        if numel(shape) != self.nodes[ia].value.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[ia].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.nodes[ia].value.clone();
        let rg = self.rg(ia);
        self.push(shape.to_vec(), value, Op::Reshape(ia), rg, "reshape")
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concat of zero tensors".into()));
        }
        let idx: Vec<usize> = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<_>>()?;
        let first = self.nodes[idx[0]].shape.clone();
        if axis >= first.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &i in &idx {
            let s = &self.nodes[i].shape;
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.clone(),
                });
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let widths: Vec<usize> = idx
            .iter()
            .map(|&i| self.nodes[i].shape[axis] * inner)
            .collect();
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&i, &w) in idx.iter().zip(&widths) {
                value.extend_from_slice(&self.nodes[i].value[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = idx.iter().any(|&i| self.rg(i));
        self.push(
            shape,
            value,
            Op::Concat {
                inputs: idx,
                outer,
                widths,
            },
            rg,
            "concat",
        )
    }

    /// Take `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].shape.clone();
        let (outer, dim, inner) = kernels::split_axis(&s, axis)?;
        if start + len > dim {
            return Err(TensorError::Invalid(format!(
                "slice {start}..{} out of range for axis of length {dim}",
                start + len
            )));
        }
        let in_width = dim * inner;
        let (offset, width) = (start * inner, len * inner);
        let v = &self.nodes[ia].value;
        let mut value = Vec::with_capacity(outer * width);
        for o in 0..outer {
            value.extend_from_slice(&v[o * in_width + offset..o * in_width + offset + width]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(ia);
        let op = Op::Slice {
            a: ia,
            outer,
            in_width,
            offset,
            width,
        };
        self.push(shape, value, op, rg, "slice")
    }

    /// Select rows along axis 0 (embedding lookup, reordering, repetition).
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].shape.clone();
        if s.is_empty() {
            return Err(TensorError::InvalidAxis { axis: 0, rank: 0 });
        }
        let row: usize = s[1..].iter().product();
        let v = &self.nodes[ia].value;
        let mut value = Vec::with_capacity(indices.len() * row);
        for &r in indices {
            if r >= s[0] {
                return Err(TensorError::LabelOutOfRange {
                    label: r,
                    classes: s[0],
                });
            }
            value.extend_from_slice(&v[r * row..(r + 1) * row]);
        }
        let mut shape = s;
        shape[0] = indices.len();
        let rg = self.rg(ia);
        let op = Op::Gather {
            a: ia,
            row,
            indices: indices.to_vec(),
        };
        self.push(shape, value, op, rg, "gather")
    }

    // ---- elementwise unary --------------------------------------------

    fn unary(
        &mut self,
        a: Var,
        f: fn(f64) -> f64,
        op: fn(usize) -> Op,
        name: &'static str,
    ) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[ia].shape.clone();
        let rg = self.rg(ia);
        self.push(shape, value, op(ia), rg, name)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp, "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::ln, Op::Log, "log")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu, "relu")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, kernels::gelu, Op::Gelu, "gelu")
    }

    // ---- normalizations -----------------------------------------------

    /// Softmax along `axis`. With a mask (broadcastable to `a`), positions
    /// where the mask is `false` get exactly zero weight.
    pub fn softmax(&mut self, a: Var, axis: usize, mask: Option<&Tensor>) -> Result<Var> {
        let ia = self.check(a)?;
        let shape = self.nodes[ia].shape.clone();
        let (outer, len, inner) = kernels::split_axis(&shape, axis)?;
        let allow = match mask {
            Some(m) => Some(expand_mask(m, &shape, "softmax")?),
            None => None,
        };
        let v = &self.nodes[ia].value;
        let mut value = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let ok = |j: usize| allow.as_ref().is_none_or(|m| m[at(j)]);
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    if ok(j) {
                        mx = mx.max(v[at(j)]);
                    }
                }
                if mx == f64::NEG_INFINITY && len > 0 {
                    return Err(TensorError::FullyMaskedRow);
                }
                let mut z = 0.0;
                for j in 0..len {
                    if ok(j) {
                        let e = (v[at(j)] - mx).exp();
                        value[at(j)] = e;
                        z += e;
                    }
                }
                for j in 0..len {
                    value[at(j)] /= z;
                }
            }
        }
        let rg = self.rg(ia);
        self.push(
            shape,
            value,
            Op::Softmax {
                a: ia,
                outer,
                len,
                inner,
            },
            rg,
            "softmax",
        )
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let shape = self.nodes[ia].shape.clone();
        let (outer, len, inner) = kernels::split_axis(&shape, axis)?;
        let v = &self.nodes[ia].value;
        let mut value = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| v[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..len).map(|j| (v[at(j)] - mx).exp()).sum();
                let lz = mx + z.ln();
                for j in 0..len {
                    value[at(j)] = v[at(j)] - lz;
                }
            }
        }
        let rg = self.rg(ia);
        self.push(
            shape,
            value,
            Op::LogSoftmax {
                a: ia,
                outer,
                len,
                inner,
            },
            rg,
            "log_softmax",
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let shape = self.nodes[ix].shape.clone();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 {
            return Err(TensorError::EmptyNorm);
        }
        for &p in &[ig, ib] {
            if self.nodes[p].value.len() != d {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.nodes[p].shape.clone(),
                });
            }
        }
        let rows = self.nodes[ix].value.len() / d;
        let (v, g, b) = (
            &self.nodes[ix].value,
            &self.nodes[ig].value,
            &self.nodes[ib].value,
        );
        let mut xhat = vec![0.0; v.len()];
        let mut rstd = vec![0.0; rows];
        let mut value = vec![0.0; v.len()];
        for r in 0..rows {
            let row = &v[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                value[r * d + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(ix) || self.rg(ig) || self.rg(ib);
        let op = Op::LayerNorm {
            x: ix,
            gamma: ig,
            beta: ib,
            d,
            xhat,
            rstd,
        };
        self.push(shape, value, op, rg, "layer_norm")
    }

    // ---- convolution --------------------------------------------------

    /// Temporal convolution. `x: [T, c_in]`, `kernel: [w, c_in, c_out]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        kernel: Var,
        stride: usize,
        padding: ConvPadding,
    ) -> Result<Var> {
        let (ix, ik) = (self.check(x)?, self.check(kernel)?);
        let sx = self.nodes[ix].shape.clone();
        let sk = self.nodes[ik].shape.clone();
        if stride == 0 {
            return Err(TensorError::Invalid(
                "conv1d stride must be positive".into(),
            ));
        }
        if sx.len() != 2 || sk.len() != 3 || sk[1] != sx[1] || sk[0] == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: sx,
                rhs: sk,
            });
        }
        let (t_in, c_in) = (sx[0], sx[1]);
        let (width, c_out) = (sk[0], sk[2]);
        let (pad_left, t_out) = match padding {
            ConvPadding::Causal => (width - 1, t_in.div_ceil(stride)),
            ConvPadding::Same => ((width - 1) / 2, t_in.div_ceil(stride)),
            ConvPadding::None => {
                if width > t_in {
                    return Err(TensorError::Invalid(format!(
                        "conv1d kernel width {width} exceeds input length {t_in}"
                    )));
                }
                (0, (t_in - width) / stride + 1)
            }
        };
        let (v, k) = (&self.nodes[ix].value, &self.nodes[ik].value);
        let mut value = vec![0.0; t_out * c_out];
        for t in 0..t_out {
            let out = &mut value[t * c_out..(t + 1) * c_out];
            for j in 0..width {
                let pos = (t * stride + j) as isize - pad_left as isize;
                if pos < 0 || pos as usize >= t_in {
                    continue;
                }
                let xrow = &v[pos as usize * c_in..(pos as usize + 1) * c_in];
                for (ci, &xv) in xrow.iter().enumerate() {
                    let krow = &k[(j * c_in + ci) * c_out..(j * c_in + ci + 1) * c_out];
                    for (o, &kv) in out.iter_mut().zip(krow) {
                        *o += xv * kv;
                    }
                }
            }
        }
        let rg = self.rg(ix) || self.rg(ik);
        let op = Op::Conv1d {
            x: ix,
            kernel: ik,
            t_in,
            c_in,
            c_out,
            width,
            stride,
            pad_left,
            t_out,
        };
        self.push(vec![t_out, c_out], value, op, rg, "conv1d")
    }

    // ---- masking and reductions ---------------------------------------

    /// Replace entries where `mask` is true with `fill`.
    pub fn masked_fill(&mut self, a: Var, mask: &Tensor, fill: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let shape = self.nodes[ia].shape.clone();
        let m = expand_mask(mask, &shape, "masked_fill")?;
        let value = self.nodes[ia]
            .value
            .iter()
            .zip(&m)
            .map(|(&x, &hit)| if hit { fill } else { x })
            .collect();
        let rg = self.rg(ia);
        self.push(
            shape,
            value,
            Op::MaskedFill { a: ia, mask: m },
            rg,
            "masked_fill",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s: f64 = self.nodes[ia].value.iter().sum();
        let rg = self.rg(ia);
        self.push(vec![], vec![s], Op::Sum(ia), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let n = self.nodes[ia].value.len();
        if n == 0 {
            return Err(TensorError::Invalid("mean of an empty tensor".into()));
        }
        let s: f64 = self.nodes[ia].value.iter().sum::<f64>() / n as f64;
        let rg = self.rg(ia);
        self.push(vec![], vec![s], Op::Mean(ia), rg, "mean")
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let shape = self.nodes[ia].shape.clone();
        let (outer, len, inner) = kernels::split_axis(&shape, axis)?;
        let v = &self.nodes[ia].value;
        let mut value = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    value[o * inner + i] += v[(o * len + j) * inner + i];
                }
            }
        }
        let mut out = shape;
        out.remove(axis);
        let rg = self.rg(ia);
        self.push(
            out,
            value,
            Op::SumAxis {
                a: ia,
                outer,
                len,
                inner,
            },
            rg,
            "sum_axis",
        )
    }

    /// Cosine similarity along the last axis of two same-shape tensors.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let s = self.nodes[ia].shape.clone();
        if s != self.nodes[ib].shape || s.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "cosine_similarity",
                lhs: s,
                rhs: self.nodes[ib].shape.clone(),
            });
        }
        let d = s[s.len() - 1];
        let rows = self.nodes[ia].value.len().checked_div(d).unwrap_or(0);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let mut value = vec![0.0; rows];
        let mut norm_a = vec![0.0; rows];
        let mut norm_b = vec![0.0; rows];
        for r in 0..rows {
            let (x, y) = (&va[r * d..(r + 1) * d], &vb[r * d..(r + 1) * d]);
            let na = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(TensorError::DegenerateSimilarity);
            }
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            value[r] = dot / (na * nb);
            norm_a[r] = na;
            norm_b[r] = nb;
        }
        let rg = self.rg(ia) || self.rg(ib);
        let op = Op::Cosine {
            a: ia,
            b: ib,
            d,
            norm_a,
            norm_b,
        };
        self.push(
            s[..s.len() - 1].to_vec(),
            value,
            op,
            rg,
            "cosine_similarity",
        )
    }

    /// Per-row negative log-likelihood of `targets` under `softmax(logits)`.
    /// `logits: [n, classes]` → `[n]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let s = self.nodes[il].shape.clone();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![targets.len()],
            });
        }
        let classes = s[1];
        let v = &self.nodes[il].value;
        let mut probs = vec![0.0; v.len()];
        let mut value = vec![0.0; targets.len()];
        for (r, &t) in targets.iter().enumerate() {
            if t >= classes {
                return Err(TensorError::LabelOutOfRange { label: t, classes });
            }
            let row = &v[r * classes..(r + 1) * classes];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            for j in 0..classes {
                probs[r * classes + j] = (row[j] - mx).exp() / z;
            }
            value[r] = mx + z.ln() - row[t];
        }
        let rg = self.rg(il);
        let op = Op::CrossEntropy {
            logits: il,
            classes,
            targets: targets.to_vec(),
            probs,
        };
        self.push(vec![targets.len()], value, op, rg, "cross_entropy")
    }

    /// Record an op whose forward was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: &[usize],
        value: Vec<f64>,
        op: Box<dyn CustomBackward>,
    ) -> Result<Var> {
        let idx: Vec<usize> = inputs
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<_>>()?;
        if numel(shape) != value.len() {
            return Err(TensorError::ShapeMismatch {
                op: op.name(),
                lhs: shape.to_vec(),
                rhs: vec![value.len()],
            });
        }
        let rg = idx.iter().any(|&i| self.rg(i));
        let name = op.name();
        self.push(
            shape.to_vec(),
            value,
            Op::Custom { inputs: idx, op },
            rg,
            name,
        )
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls; they are never zeroed implicitly.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let il = self.check(loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[il].shape.clone()));
        }
        let n = il + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[il] = Some(vec![1.0]);
        let mut leaf_grads: Vec<(usize, Vec<f64>)> = Vec::new();
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, g, &mut grads, &mut leaf_grads);
        }
        for (i, g) in leaf_grads {
            match &mut self.nodes[i].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => self.nodes[i].grad = Some(g),
            }
        }
        Ok(())
    }

    fn backward_node(
        &self,
        i: usize,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        leaves: &mut Vec<(usize, Vec<f64>)>,
    ) {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].requires_grad;
        // Gradient buffer of input `j`, created on first use.
        macro_rules! acc {
            ($j:expr) => {{
                let len = nodes[$j].value.len();
                grads[$j].get_or_insert_with(|| vec![0.0; len])
            }};
        }
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => leaves.push((i, g)),
            Op::Add(a, b, ma, mb) | Op::Sub(a, b, ma, mb) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if wants(*a) {
                    let ga = acc!(*a);
                    for (k, &gv) in g.iter().enumerate() {
                        ga[ma.index(k)] += gv;
                    }
                }
                if wants(*b) {
                    let gb = acc!(*b);
                    for (k, &gv) in g.iter().enumerate() {
                        gb[mb.index(k)] += sign * gv;
                    }
                }
            }
            Op::Mul(a, b, ma, mb) => {
                let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                if wants(*a) {
                    let ga = acc!(*a);
                    for (k, &gv) in g.iter().enumerate() {
                        ga[ma.index(k)] += gv * vb[mb.index(k)];
                    }
                }
                if wants(*b) {
                    let gb = acc!(*b);
                    for (k, &gv) in g.iter().enumerate() {
                        gb[mb.index(k)] += gv * va[ma.index(k)];
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = acc!(*a);
                ga.iter_mut().zip(&g).for_each(|(x, gv)| *x += gv * c);
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let ga = acc!(*a);
                ga.iter_mut().zip(&g).for_each(|(x, gv)| *x += gv);
            }
            Op::MatMul {
                a,
                b,
                batch,
                shared_rhs,
                m,
                k,
                n,
            } => {
                let (m, k, n, batch) = (*m, *k, *n, *batch);
                let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                if wants(*a) {
                    let ga = acc!(*a);
                    if *shared_rhs {
                        kernels::mm_bt_acc(&g, vb, ga, batch * m, k, n);
                    } else {
                        for bi in 0..batch {
                            kernels::mm_bt_acc(
                                &g[bi * m * n..(bi + 1) * m * n],
                                &vb[bi * k * n..(bi + 1) * k * n],
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                }
                if wants(*b) {
                    let gb = acc!(*b);
                    if *shared_rhs {
                        kernels::mm_at_acc(va, &g, gb, batch * m, k, n);
                    } else {
                        for bi in 0..batch {
                            kernels::mm_at_acc(
                                &va[bi * m * k..(bi + 1) * m * k],
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                }
            }
            Op::Transpose {
                a,
                batch,
                rows,
                cols,
            } => {
                let ga = acc!(*a);
                for b in 0..*batch {
                    let o = b * rows * cols;
                    for r in 0..*rows {
                        for c in 0..*cols {
                            ga[o + r * cols + c] += g[o + c * rows + r];
                        }
                    }
                }
            }
            Op::Concat {
                inputs,
                outer,
                widths,
            } => {
                let total: usize = widths.iter().sum();
                let mut off = 0;
                for (&j, &w) in inputs.iter().zip(widths) {
                    if wants(j) {
                        let gj = acc!(j);
                        for o in 0..*outer {
                            for x in 0..w {
                                gj[o * w + x] += g[o * total + off + x];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::Slice {
                a,
                outer,
                in_width,
                offset,
                width,
            } => {
                let ga = acc!(*a);
                for o in 0..*outer {
                    for x in 0..*width {
                        ga[o * in_width + offset + x] += g[o * width + x];
                    }
                }
            }
            Op::Gather { a, row, indices } => {
                let ga = acc!(*a);
                for (k, &r) in indices.iter().enumerate() {
                    for x in 0..*row {
                        ga[r * row + x] += g[k * row + x];
                    }
                }
            }
            Op::Exp(a) => {
                let ga = acc!(*a);
                for (k, gv) in g.iter().enumerate() {
                    ga[k] += gv * node.value[k];
                }
            }
            Op::Log(a) => {
                let va = &nodes[*a].value;
                let ga = acc!(*a);
                for (k, gv) in g.iter().enumerate() {
                    ga[k] += gv / va[k];
                }
            }
            Op::Relu(a) => {
                let va = &nodes[*a].value;
                let ga = acc!(*a);
                for (k, gv) in g.iter().enumerate() {
                    if va[k] > 0.0 {
                        ga[k] += gv;
                    }
                }
            }
            Op::Gelu(a) => {
                let va = &nodes[*a].value;
                let ga = acc!(*a);
                for (k, gv) in g.iter().enumerate() {
                    ga[k] += gv * kernels::gelu_grad(va[k]);
                }
            }
            Op::Softmax {
                a,
                outer,
                len,
                inner,
            } => {
                let y = &node.value;
                let ga = acc!(*a);
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..*len {
                            ga[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax {
                a,
                outer,
                len,
                inner,
            } => {
                let y = &node.value;
                let ga = acc!(*a);
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let gs: f64 = (0..*len).map(|j| g[at(j)]).sum();
                        for j in 0..*len {
                            ga[at(j)] += g[at(j)] - y[at(j)].exp() * gs;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                d,
                xhat,
                rstd,
            } => {
                let d = *d;
                let rows = rstd.len();
                let gam = &nodes[*gamma].value;
                if wants(*gamma) {
                    let gg = acc!(*gamma);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if wants(*beta) {
                    let gb = acc!(*beta);
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if wants(*x) {
                    let gx = acc!(*x);
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gam[j];
                            m1 += dxh;
                            m2 += dxh * xhat[r * d + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gam[j];
                            gx[r * d + j] += rstd[r] * (dxh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                kernel,
                t_in,
                c_in,
                c_out,
                width,
                stride,
                pad_left,
                t_out,
            } => {
                let (vx, vk) = (&nodes[*x].value, &nodes[*kernel].value);
                let (wx, wk) = (wants(*x), wants(*kernel));
                for t in 0..*t_out {
                    let gout = &g[t * c_out..(t + 1) * c_out];
                    for j in 0..*width {
                        let pos = (t * stride + j) as isize - *pad_left as isize;
                        if pos < 0 || pos as usize >= *t_in {
                            continue;
                        }
                        let pos = pos as usize;
                        for ci in 0..*c_in {
                            let kb = (j * c_in + ci) * c_out;
                            if wx {
                                let gx = acc!(*x);
                                let mut s = 0.0;
                                for co in 0..*c_out {
                                    s += gout[co] * vk[kb + co];
                                }
                                gx[pos * c_in + ci] += s;
                            }
                            if wk {
                                let gk = acc!(*kernel);
                                let xv = vx[pos * c_in + ci];
                                for co in 0..*c_out {
                                    gk[kb + co] += xv * gout[co];
                                }
                            }
                        }
                    }
                }
            }
            Op::MaskedFill { a, mask } => {
                let ga = acc!(*a);
                for (k, gv) in g.iter().enumerate() {
                    if !mask[k] {
                        ga[k] += gv;
                    }
                }
            }
            Op::Sum(a) => {
                let ga = acc!(*a);
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
            Op::Mean(a) => {
                let ga = acc!(*a);
                let s = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|x| *x += s);
            }
            Op::SumAxis {
                a,
                outer,
                len,
                inner,
            } => {
                let ga = acc!(*a);
                for o in 0..*outer {
                    for j in 0..*len {
                        for i in 0..*inner {
                            ga[(o * len + j) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
            Op::Cosine {
                a,
                b,
                d,
                norm_a,
                norm_b,
            } => {
                let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                let d = *d;
                for (r, gv) in g.iter().enumerate() {
                    let (na, nb, c) = (norm_a[r], norm_b[r], node.value[r]);
                    if wants(*a) {
                        let ga = acc!(*a);
                        for j in 0..d {
                            ga[r * d + j] +=
                                gv * (vb[r * d + j] / (na * nb) - c * va[r * d + j] / (na * na));
                        }
                    }
                    if wants(*b) {
                        let gb = acc!(*b);
                        for j in 0..d {
                            gb[r * d + j] +=
                                gv * (va[r * d + j] / (na * nb) - c * vb[r * d + j] / (nb * nb));
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                classes,
                targets,
                probs,
            } => {
                let gl = acc!(*logits);
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..*classes {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gl[r * classes + j] += g[r] * (probs[r * classes + j] - onehot);
                    }
                }
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&[f64]> = inputs.iter().map(|&j| nodes[j].value.as_slice()).collect();
                let gs = op.backward(&g, &vals, &node.value);
                for (&j, gj) in inputs.iter().zip(gs) {
                    if let (true, Some(gj)) = (wants(j), gj) {
                        let buf = acc!(j);
                        buf.iter_mut().zip(&gj).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
    }
}

/// Broadcast a mask tensor (nonzero = true) to `shape`.
fn expand_mask(mask: &Tensor, shape: &[usize], op: &'static str) -> Result<Vec<bool>> {
    let out = kernels::broadcast_shape(shape, mask.shape(), op)?;
    if out != shape {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: mask.shape().to_vec(),
        });
    }
    let map = BroadcastMap::new(shape, mask.shape());
    Ok((0..numel(shape))
        .map(|i| mask.data()[map.index(i)] != 0.0)
        .collect())
}
