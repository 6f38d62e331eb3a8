//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every operation appends a node holding its forward value to a [`Tape`].
//! [`Tape::backward`] walks the nodes in reverse and accumulates gradients for
//! every node that (transitively) depends on a grad-requiring leaf.
//!
//! Binary element-wise ops broadcast with the usual trailing-dimension rules:
//! shapes are right-aligned and every dimension must either match or be 1.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use super::params::{ParamId, ParamSet};
use super::AutodiffError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The recordable operation kinds.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// `[m, k] x [k, n] -> [m, n]`
    MatMul,
    /// `[c, h, w]` input, `[o, c, kh, kw]` kernel, optional `[o]` bias; stride 1, zero "same" padding.
    Conv2d,
    Add,
    Sub,
    Mul,
    Div,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Reshape { shape: Vec<usize> },
    Scale(f64),
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Ln,
    /// Softmax over the last axis.
    Softmax,
    /// Log-softmax over the last axis.
    LogSoftmax,
    /// Sum over one axis, or over everything when `axis` is `None`.
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    /// Maximum over one axis (the axis is removed).
    Max { axis: usize },
    /// 2x2 max pooling with stride 2 over the last two axes of `[c, h, w]`.
    MaxPool2d,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Reshape { .. } => "reshape",
            OpKind::Scale(_) => "scale",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softplus => "softplus",
            OpKind::Exp => "exp",
            OpKind::Ln => "ln",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Sum { .. } => "sum",
            OpKind::Mean { .. } => "mean",
            OpKind::Max { .. } => "max",
            OpKind::MaxPool2d => "max_pool2d",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses the parameter-free kinds by name. Kinds carrying arguments
/// (`concat`, `slice`, `reshape`, `scale`, axis reductions) default to their
/// whole-tensor / axis-0 forms.
impl FromStr for OpKind {
    type Err = AutodiffError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "matmul" => OpKind::MatMul,
            "conv2d" => OpKind::Conv2d,
            "add" => OpKind::Add,
            "sub" => OpKind::Sub,
            "mul" => OpKind::Mul,
            "div" => OpKind::Div,
            "concat" => OpKind::Concat { axis: 0 },
            "relu" => OpKind::Relu,
            "tanh" => OpKind::Tanh,
            "sigmoid" => OpKind::Sigmoid,
            "softplus" => OpKind::Softplus,
            "exp" => OpKind::Exp,
            "ln" => OpKind::Ln,
            "softmax" => OpKind::Softmax,
            "log_softmax" => OpKind::LogSoftmax,
            "sum" => OpKind::Sum { axis: None },
            "mean" => OpKind::Mean { axis: None },
            "max" => OpKind::Max { axis: 0 },
            "max_pool2d" | "max-pool-2d" => OpKind::MaxPool2d,
            other => return Err(AutodiffError::UnknownKind(other.to_string())),
        })
    }
}

#[derive(Debug)]
enum Saved {
    None,
    /// im2col matrix of a convolution, `[c*kh*kw, h*w]`.
    Columns(Vec<f64>),
    /// Flat input index selected for every output element.
    Argmax(Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    kind: Option<OpKind>,
    inputs: Vec<Var>,
    saved: Saved,
    requires_grad: bool,
}

/// A single-threaded computation tape.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
    param_of: Vec<(Var, ParamId)>,
    backpropagated: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    param_of: Vec<(Var, ParamId)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradients aligned with `params`; parameters never bound on the tape get zeros.
    pub fn param_grads(&self, params: &ParamSet) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.values.len()]).collect();
        for &(var, id) in &self.param_of {
            if let Some(g) = self.get(var) {
                for (o, v) in out[id.index()].iter_mut().zip(g) {
                    *o += *v;
                }
            }
        }
        out
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>, AutodiffError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(AutodiffError::shape(op, a, b));
        };
    }
    Ok(out)
}

/// For every element of `out_shape`, the flat index into a tensor of `shape`
/// broadcast to `out_shape`.
fn broadcast_index_map(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let n = numel(out_shape);
    if shape == out_shape {
        return (0..n).collect();
    }
    let src_len = numel(shape);
    if src_len == 1 {
        return vec![0; n];
    }
    let rank = out_shape.len();
    let pad = rank - shape.len();
    let src_strides = strides(shape);
    let mut eff = vec![0usize; rank];
    for i in 0..shape.len() {
        if shape[i] != 1 {
            eff[i + pad] = src_strides[i];
        }
    }
    let mut idx = vec![0usize; rank];
    let mut map = Vec::with_capacity(n);
    let mut src = 0usize;
    for _ in 0..n {
        map.push(src);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

pub(crate) fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    // Packing dominates for the thin products of per-agent rows.
    if (m <= 4 || k <= 4) && (csb == 1 || (csa == 1 && rsb == 1)) {
        #[cfg(all(feature = "std", target_arch = "x86_64"))]
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            unsafe { small_gemm_avx2(m, k, n, alpha, a, (rsa, csa), b, (rsb, csb), beta, c) };
            return;
        }
        small_gemm(m, k, n, alpha, a, (rsa, csa), b, (rsb, csb), beta, c);
        return;
    }
    // SAFETY: callers pass buffers whose extents cover the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(all(feature = "std", target_arch = "x86_64"))]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn small_gemm_avx2(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    sa: (isize, isize),
    b: &[f64],
    sb: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    small_gemm(m, k, n, alpha, a, sa, b, sb, beta, c)
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn small_gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa, rsb, csb) = (rsa as usize, csa as usize, rsb as usize, csb as usize);
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        if beta == 0.0 {
            row.fill(0.0);
        } else if beta != 1.0 {
            row.iter_mut().for_each(|x| *x *= beta);
        }
        if csb == 1 {
            for p in 0..k {
                let aip = alpha * a[i * rsa + p * csa];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b[p * rsb..p * rsb + n];
                for (x, &bv) in row.iter_mut().zip(brow) {
                    *x += aip * bv;
                }
            }
        } else {
            // a row and b column both contiguous
            let arow = &a[i * rsa..i * rsa + k];
            for (j, x) in row.iter_mut().enumerate() {
                let bcol = &b[j * csb..j * csb + k];
                *x += alpha * dot(arow, bcol);
            }
        }
    }
}

/// Independent accumulators so the loop vectorizes.
#[inline(always)]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(u, v)| u * v).sum();
    for (u, v) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += u[i] * v[i];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Rows of an outer/axis/inner split used by axis-wise ops.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// The single value of a one-element tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_leaf(&mut self, value: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Var, AutodiffError> {
        if numel(&shape) != value.len() || shape.iter().any(|&d| d == 0) {
            return Err(AutodiffError::BadLeaf { shape, len: value.len() });
        }
        self.backpropagated = false;
        self.nodes.push(Node { value, shape, kind: None, inputs: Vec::new(), saved: Saved::None, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant leaf (no gradient).
    pub fn constant(&mut self, value: Vec<f64>, shape: &[usize]) -> Result<Var, AutodiffError> {
        self.push_leaf(value, shape.to_vec(), false)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Vec<f64>, shape: &[usize]) -> Result<Var, AutodiffError> {
        self.push_leaf(value, shape.to_vec(), true)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.push_leaf(vec![0.0; numel(shape)], shape.to_vec(), false).expect("positive dims")
    }

    /// Binds a parameter as a grad-requiring leaf; repeated binds reuse the node.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if self.bound.len() < params.len() {
            self.bound.resize(params.len(), None);
        }
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let p = params.get(id);
        let v = self.push_leaf(p.values.clone(), p.shape.clone(), true).expect("parameter shapes are valid");
        self.bound[id.index()] = Some(v);
        self.param_of.push((v, id));
        v
    }

    /// Records `kind` applied to `inputs`.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var, AutodiffError> {
        let arity_ok = match &kind {
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => inputs.len() == 2,
            OpKind::Conv2d => inputs.len() == 2 || inputs.len() == 3,
            OpKind::Concat { .. } => !inputs.is_empty(),
            _ => inputs.len() == 1,
        };
        if !arity_ok {
            return Err(AutodiffError::Arity { op: kind.name(), got: inputs.len() });
        }
        let (value, shape, saved) = self.forward(&kind, inputs)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.backpropagated = false;
        self.nodes.push(Node { value, shape, kind: Some(kind), inputs: inputs.to_vec(), saved, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn forward(&self, kind: &OpKind, inputs: &[Var]) -> Result<(Vec<f64>, Vec<usize>, Saved), AutodiffError> {
        let node = |v: Var| &self.nodes[v.0];
        match kind {
            OpKind::MatMul => {
                let (a, b) = (node(inputs[0]), node(inputs[1]));
                if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                    return Err(AutodiffError::shape("matmul", &a.shape, &b.shape));
                }
                let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
                let mut out = vec![0.0; m * n];
                dgemm(m, k, n, 1.0, &a.value, (k as isize, 1), &b.value, (n as isize, 1), 0.0, &mut out);
                Ok((out, vec![m, n], Saved::None))
            }
            OpKind::Conv2d => self.conv_forward(inputs),
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
                let (a, b) = (node(inputs[0]), node(inputs[1]));
                let shape = broadcast_shape(kind.name(), &a.shape, &b.shape)?;
                let f: fn(f64, f64) -> f64 = match kind {
                    OpKind::Add => |x, y| x + y,
                    OpKind::Sub => |x, y| x - y,
                    OpKind::Mul => |x, y| x * y,
                    _ => |x, y| x / y,
                };
                let out = if a.shape == shape && b.shape == shape {
                    a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect()
                } else {
                    let ia = broadcast_index_map(&a.shape, &shape);
                    let ib = broadcast_index_map(&b.shape, &shape);
                    ia.iter().zip(&ib).map(|(&i, &j)| f(a.value[i], b.value[j])).collect()
                };
                Ok((out, shape, Saved::None))
            }
            OpKind::Concat { axis } => {
                let first = &node(inputs[0]).shape;
                if *axis >= first.len() {
                    return Err(AutodiffError::Axis { op: "concat", axis: *axis, shape: first.clone() });
                }
                let mut total = 0;
                for &v in inputs {
                    let s = &node(v).shape;
                    let compatible = s.len() == first.len()
                        && s.iter().zip(first).enumerate().all(|(d, (x, y))| d == *axis || x == y);
                    if !compatible {
                        return Err(AutodiffError::shape("concat", first, s));
                    }
                    total += s[*axis];
                }
                let mut shape = first.clone();
                shape[*axis] = total;
                let outer = numel(&first[..*axis]);
                let inner = numel(&first[*axis + 1..]);
                let mut out = Vec::with_capacity(numel(&shape));
                for o in 0..outer {
                    for &v in inputs {
                        let n = node(v);
                        let chunk = n.shape[*axis] * inner;
                        out.extend_from_slice(&n.value[o * chunk..(o + 1) * chunk]);
                    }
                }
                Ok((out, shape, Saved::None))
            }
            OpKind::Slice { axis, start, len } => {
                let a = node(inputs[0]);
                if *axis >= a.shape.len() {
                    return Err(AutodiffError::Axis { op: "slice", axis: *axis, shape: a.shape.clone() });
                }
                if *len == 0 || start + len > a.shape[*axis] {
                    return Err(AutodiffError::SliceRange { start: *start, len: *len, dim: a.shape[*axis] });
                }
                let (outer, dim, inner) = split_axis(&a.shape, *axis);
                let mut out = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = o * dim * inner + start * inner;
                    out.extend_from_slice(&a.value[base..base + len * inner]);
                }
                let mut shape = a.shape.clone();
                shape[*axis] = *len;
                Ok((out, shape, Saved::None))
            }
            OpKind::Reshape { shape } => {
                let a = node(inputs[0]);
                if numel(shape) != a.value.len() || shape.iter().any(|&d| d == 0) {
                    return Err(AutodiffError::shape("reshape", &a.shape, shape));
                }
                Ok((a.value.clone(), shape.clone(), Saved::None))
            }
            OpKind::Scale(c) => {
                let a = node(inputs[0]);
                Ok((a.value.iter().map(|x| x * c).collect(), a.shape.clone(), Saved::None))
            }
            OpKind::Relu | OpKind::Tanh | OpKind::Sigmoid | OpKind::Softplus | OpKind::Exp | OpKind::Ln => {
                let a = node(inputs[0]);
                let f: fn(f64) -> f64 = match kind {
                    OpKind::Relu => |x| if x > 0.0 { x } else { 0.0 },
                    OpKind::Tanh => libm::tanh,
                    OpKind::Sigmoid => sigmoid,
                    OpKind::Softplus => softplus,
                    OpKind::Exp => libm::exp,
                    _ => libm::log,
                };
                Ok((a.value.iter().map(|&x| f(x)).collect(), a.shape.clone(), Saved::None))
            }
            OpKind::Softmax | OpKind::LogSoftmax => {
                let a = node(inputs[0]);
                let cols = *a.shape.last().expect("non-empty shape");
                let mut out = vec![0.0; a.value.len()];
                for (row, dst) in a.value.chunks(cols).zip(out.chunks_mut(cols)) {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for (d, &x) in dst.iter_mut().zip(row) {
                        *d = libm::exp(x - max);
                        total += *d;
                    }
                    if matches!(kind, OpKind::Softmax) {
                        dst.iter_mut().for_each(|d| *d /= total);
                    } else {
                        let lse = libm::log(total);
                        for (d, &x) in dst.iter_mut().zip(row) {
                            *d = x - max - lse;
                        }
                    }
                }
                Ok((out, a.shape.clone(), Saved::None))
            }
            OpKind::Sum { axis } | OpKind::Mean { axis } => {
                let a = node(inputs[0]);
                let mean = matches!(kind, OpKind::Mean { .. });
                match axis {
                    None => {
                        let s: f64 = a.value.iter().sum();
                        let v = if mean { s / a.value.len() as f64 } else { s };
                        Ok((vec![v], vec![1], Saved::None))
                    }
                    Some(axis) => {
                        if *axis >= a.shape.len() {
                            return Err(AutodiffError::Axis { op: kind.name(), axis: *axis, shape: a.shape.clone() });
                        }
                        let (outer, dim, inner) = split_axis(&a.shape, *axis);
                        let mut out = vec![0.0; outer * inner];
                        for o in 0..outer {
                            for d in 0..dim {
                                let src = &a.value[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                                for (x, y) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                    *x += y;
                                }
                            }
                        }
                        if mean {
                            out.iter_mut().for_each(|x| *x /= dim as f64);
                        }
                        Ok((out, reduced_shape(&a.shape, *axis), Saved::None))
                    }
                }
            }
            OpKind::Max { axis } => {
                let a = node(inputs[0]);
                if *axis >= a.shape.len() {
                    return Err(AutodiffError::Axis { op: "max", axis: *axis, shape: a.shape.clone() });
                }
                let (outer, dim, inner) = split_axis(&a.shape, *axis);
                let mut out = vec![0.0; outer * inner];
                let mut arg = vec![0usize; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = (o * dim) * inner + i;
                        for d in 1..dim {
                            let idx = (o * dim + d) * inner + i;
                            if a.value[idx] > a.value[best] {
                                best = idx;
                            }
                        }
                        out[o * inner + i] = a.value[best];
                        arg[o * inner + i] = best;
                    }
                }
                Ok((out, reduced_shape(&a.shape, *axis), Saved::Argmax(arg)))
            }
            OpKind::MaxPool2d => {
                let a = node(inputs[0]);
                if a.shape.len() != 3 || a.shape[1] % 2 != 0 || a.shape[2] % 2 != 0 {
                    return Err(AutodiffError::shape("max_pool2d", &a.shape, &[0, 2, 2]));
                }
                let (c, h, w) = (a.shape[0], a.shape[1], a.shape[2]);
                let (ho, wo) = (h / 2, w / 2);
                let mut out = Vec::with_capacity(c * ho * wo);
                let mut arg = Vec::with_capacity(c * ho * wo);
                for ch in 0..c {
                    for y in 0..ho {
                        for x in 0..wo {
                            let base = ch * h * w + 2 * y * w + 2 * x;
                            let mut best = base;
                            for idx in [base + 1, base + w, base + w + 1] {
                                if a.value[idx] > a.value[best] {
                                    best = idx;
                                }
                            }
                            out.push(a.value[best]);
                            arg.push(best);
                        }
                    }
                }
                Ok((out, vec![c, ho, wo], Saved::Argmax(arg)))
            }
        }
    }

    fn conv_forward(&self, inputs: &[Var]) -> Result<(Vec<f64>, Vec<usize>, Saved), AutodiffError> {
        let x = &self.nodes[inputs[0].0];
        let k = &self.nodes[inputs[1].0];
        if x.shape.len() != 3 || k.shape.len() != 4 || k.shape[1] != x.shape[0] || k.shape[2] % 2 == 0 || k.shape[3] % 2 == 0 {
            return Err(AutodiffError::shape("conv2d", &x.shape, &k.shape));
        }
        let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
        let (o, kh, kw) = (k.shape[0], k.shape[2], k.shape[3]);
        if let Some(&b) = inputs.get(2) {
            let bias = &self.nodes[b.0];
            if bias.shape != [o] {
                return Err(AutodiffError::shape("conv2d", &k.shape, &bias.shape));
            }
        }
        let cols = im2col(&x.value, c, h, w, kh, kw);
        let rows = c * kh * kw;
        let hw = h * w;
        let mut out = vec![0.0; o * hw];
        if let Some(&b) = inputs.get(2) {
            for (ch, chunk) in out.chunks_mut(hw).enumerate() {
                chunk.fill(self.nodes[b.0].value[ch]);
            }
        }
        dgemm(o, rows, hw, 1.0, &k.value, (rows as isize, 1), &cols, (hw as isize, 1), 1.0, &mut out);
        Ok((out, vec![o, h, w], Saved::Columns(cols)))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, AutodiffError> {
        let shape = &self.nodes[loss.0].shape;
        if numel(shape) != 1 {
            return Err(AutodiffError::NonScalarLoss(shape.clone()));
        }
        if self.backpropagated {
            return Err(AutodiffError::AlreadyBackpropagated);
        }
        self.backpropagated = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(kind) = &node.kind {
                self.backward_node(kind, node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, param_of: self.param_of.clone() })
    }

    fn backward_node(&self, kind: &OpKind, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let inputs = &node.inputs;
        let want = |i: usize| self.nodes[inputs[i].0].requires_grad;
        let mut acc = |var: Var, f: &mut dyn FnMut(&mut [f64])| {
            let len = self.nodes[var.0].value.len();
            let slot = grads[var.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match kind {
            OpKind::MatMul => {
                let (a, b) = (&self.nodes[inputs[0].0], &self.nodes[inputs[1].0]);
                let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
                if want(0) {
                    // dA = G B^T
                    acc(inputs[0], &mut |ga| {
                        dgemm(m, n, k, 1.0, g, (n as isize, 1), &b.value, (1, n as isize), 1.0, ga)
                    });
                }
                if want(1) {
                    // dB = A^T G
                    acc(inputs[1], &mut |gb| {
                        dgemm(k, m, n, 1.0, &a.value, (1, k as isize), g, (n as isize, 1), 1.0, gb)
                    });
                }
            }
            OpKind::Conv2d => {
                let x = &self.nodes[inputs[0].0];
                let kern = &self.nodes[inputs[1].0];
                let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
                let (o, kh, kw) = (kern.shape[0], kern.shape[2], kern.shape[3]);
                let rows = c * kh * kw;
                let hw = h * w;
                let Saved::Columns(cols) = &node.saved else { unreachable!("conv saves columns") };
                if want(1) {
                    acc(inputs[1], &mut |gk| {
                        dgemm(o, hw, rows, 1.0, g, (hw as isize, 1), cols, (1, hw as isize), 1.0, gk)
                    });
                }
                if inputs.len() == 3 && want(2) {
                    acc(inputs[2], &mut |gb| {
                        for (ch, chunk) in g.chunks(hw).enumerate() {
                            gb[ch] += chunk.iter().sum::<f64>();
                        }
                    });
                }
                if want(0) {
                    let mut dcols = vec![0.0; rows * hw];
                    dgemm(rows, o, hw, 1.0, &kern.value, (1, rows as isize), g, (hw as isize, 1), 0.0, &mut dcols);
                    acc(inputs[0], &mut |gx| col2im_add(&dcols, gx, c, h, w, kh, kw));
                }
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
                let (a, b) = (&self.nodes[inputs[0].0], &self.nodes[inputs[1].0]);
                if a.shape == node.shape && b.shape == node.shape {
                    if want(0) {
                        acc(inputs[0], &mut |ga| match kind {
                            OpKind::Add | OpKind::Sub => add_into(ga, g),
                            OpKind::Mul => ga.iter_mut().zip(g).zip(&b.value).for_each(|((d, gi), bv)| *d += gi * bv),
                            _ => ga.iter_mut().zip(g).zip(&b.value).for_each(|((d, gi), bv)| *d += gi / bv),
                        });
                    }
                    if want(1) {
                        acc(inputs[1], &mut |gb| {
                            for (t, d) in gb.iter_mut().enumerate() {
                                *d += match kind {
                                    OpKind::Add => g[t],
                                    OpKind::Sub => -g[t],
                                    OpKind::Mul => g[t] * a.value[t],
                                    _ => -g[t] * a.value[t] / (b.value[t] * b.value[t]),
                                };
                            }
                        });
                    }
                    return;
                }
                let ia = broadcast_index_map(&a.shape, &node.shape);
                let ib = broadcast_index_map(&b.shape, &node.shape);
                if want(0) {
                    acc(inputs[0], &mut |ga| {
                        for (t, (&i, &j)) in ia.iter().zip(&ib).enumerate() {
                            ga[i] += match kind {
                                OpKind::Add | OpKind::Sub => g[t],
                                OpKind::Mul => g[t] * b.value[j],
                                _ => g[t] / b.value[j],
                            };
                        }
                    });
                }
                if want(1) {
                    acc(inputs[1], &mut |gb| {
                        for (t, (&i, &j)) in ia.iter().zip(&ib).enumerate() {
                            gb[j] += match kind {
                                OpKind::Add => g[t],
                                OpKind::Sub => -g[t],
                                OpKind::Mul => g[t] * a.value[i],
                                _ => -g[t] * a.value[i] / (b.value[j] * b.value[j]),
                            };
                        }
                    });
                }
            }
            OpKind::Concat { axis } => {
                let outer = numel(&node.shape[..*axis]);
                let inner = numel(&node.shape[*axis + 1..]);
                let total = node.shape[*axis] * inner;
                let mut offset = 0;
                for (i, &v) in inputs.iter().enumerate() {
                    let chunk = self.nodes[v.0].shape[*axis] * inner;
                    if want(i) {
                        acc(v, &mut |gv| {
                            for o in 0..outer {
                                let src = &g[o * total + offset..o * total + offset + chunk];
                                for (d, s) in gv[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        });
                    }
                    offset += chunk;
                }
            }
            OpKind::Slice { axis, start, len } => {
                let a = &self.nodes[inputs[0].0];
                let (outer, dim, inner) = split_axis(&a.shape, *axis);
                acc(inputs[0], &mut |ga| {
                    for o in 0..outer {
                        let base = o * dim * inner + start * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (d, s) in ga[base..base + len * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
            }
            OpKind::Reshape { .. } => acc(inputs[0], &mut |ga| add_into(ga, g)),
            OpKind::Scale(c) => acc(inputs[0], &mut |ga| {
                for (d, s) in ga.iter_mut().zip(g) {
                    *d += s * c;
                }
            }),
            OpKind::Relu | OpKind::Tanh | OpKind::Sigmoid | OpKind::Softplus | OpKind::Exp | OpKind::Ln => {
                let x = &self.nodes[inputs[0].0].value;
                let y = &node.value;
                acc(inputs[0], &mut |ga| {
                    for i in 0..ga.len() {
                        let d = match kind {
                            OpKind::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            OpKind::Tanh => 1.0 - y[i] * y[i],
                            OpKind::Sigmoid => y[i] * (1.0 - y[i]),
                            OpKind::Softplus => sigmoid(x[i]),
                            OpKind::Exp => y[i],
                            _ => 1.0 / x[i],
                        };
                        ga[i] += g[i] * d;
                    }
                });
            }
            OpKind::Softmax | OpKind::LogSoftmax => {
                let cols = *node.shape.last().expect("non-empty shape");
                let y = &node.value;
                let log = matches!(kind, OpKind::LogSoftmax);
                acc(inputs[0], &mut |ga| {
                    for ((gr, yr), dst) in g.chunks(cols).zip(y.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        if log {
                            let s: f64 = gr.iter().sum();
                            for ((d, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                                *d += gi - libm::exp(yi) * s;
                            }
                        } else {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for ((d, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                                *d += yi * (gi - dot);
                            }
                        }
                    }
                });
            }
            OpKind::Sum { axis } | OpKind::Mean { axis } => {
                let a = &self.nodes[inputs[0].0];
                let mean = matches!(kind, OpKind::Mean { .. });
                match axis {
                    None => {
                        let scale = if mean { 1.0 / a.value.len() as f64 } else { 1.0 };
                        acc(inputs[0], &mut |ga| ga.iter_mut().for_each(|d| *d += g[0] * scale));
                    }
                    Some(axis) => {
                        let (outer, dim, inner) = split_axis(&a.shape, *axis);
                        let scale = if mean { 1.0 / dim as f64 } else { 1.0 };
                        acc(inputs[0], &mut |ga| {
                            for o in 0..outer {
                                for d in 0..dim {
                                    let dst = &mut ga[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                                    for (x, s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                        *x += s * scale;
                                    }
                                }
                            }
                        });
                    }
                }
            }
            OpKind::Max { .. } | OpKind::MaxPool2d => {
                let Saved::Argmax(arg) = &node.saved else { unreachable!("max saves argmax") };
                acc(inputs[0], &mut |ga| {
                    for (&src, &gi) in arg.iter().zip(g) {
                        ga[src] += gi;
                    }
                });
            }
        }
    }

    // Convenience wrappers.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Div, &[a, b])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Scale(c), &[a])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Concat { axis }, parts)
    }
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Slice { axis, start, len }, &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Reshape { shape: shape.to_vec() }, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Relu, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Tanh, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Sigmoid, &[a])
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Softplus, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Exp, &[a])
    }
    pub fn ln(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Ln, &[a])
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Softmax, &[a])
    }
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::LogSoftmax, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Sum { axis: None }, &[a])
    }
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Sum { axis: Some(axis) }, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Mean { axis: None }, &[a])
    }
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.apply(OpKind::Max { axis }, &[a])
    }
    pub fn max_pool2d(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.apply(OpKind::MaxPool2d, &[a])
    }
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var, AutodiffError> {
        match bias {
            Some(b) => self.apply(OpKind::Conv2d, &[x, kernel, b]),
            None => self.apply(OpKind::Conv2d, &[x, kernel]),
        }
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<f64> {
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * w;
    let mut cols = vec![0.0; c * kh * kw * hw];
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &x[ch * hw + sy as usize * w..ch * hw + (sy as usize + 1) * w];
                    let lo = pw.saturating_sub(kx);
                    let hi = (w + pw).saturating_sub(kx).min(w);
                    for xx in lo..hi {
                        dst[y * w + xx] = src_row[xx + kx - pw];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], gx: &mut [f64], c: usize, h: usize, w: usize, kh: usize, kw: usize) {
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * w;
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh + ky) * kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = ch * hw + sy as usize * w;
                    let lo = pw.saturating_sub(kx);
                    let hi = (w + pw).saturating_sub(kx).min(w);
                    for xx in lo..hi {
                        gx[base + xx + kx - pw] += src[y * w + xx];
                    }
                }
            }
        }
    }
}
