//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles in
//! append order. Calling [`Tape::backward`] on a scalar walks the records in
//! strict reverse order and returns the gradient of that scalar with respect
//! to every leaf created with `requires_grad = true`.
//!
//! ```
//! use ldrpm_core::autodiff::Tape;
//! use ldrpm_core::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::from_slice(&[1.0, 2.0]), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

pub mod kernels;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::{BmmGeometry, ConvGeometry};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    generation: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Train mode normalizes with batch statistics and updates running stats;
/// eval mode uses the running stats only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNormConfig {
    pub mode: Mode,
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig { mode: Mode::Train, momentum: 0.1, eps: 1e-5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dOptions {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv1dOptions {
    fn default() -> Self {
        Conv1dOptions { stride: 1, padding: 0, groups: 1 }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    SumAxis { x: usize, axis: usize, scale: f64 },
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    Concat { inputs: Vec<usize>, axis: usize },
    Linear { x: usize, w: usize, b: Option<usize>, rows: usize, fin: usize, fout: usize },
    Bmm { a: usize, b: usize, geom: BmmGeometry },
    Conv1d { x: usize, w: usize, b: Option<usize>, geom: ConvGeometry },
    MaxPool1d { x: usize, argmax: Vec<usize> },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(usize),
    Softmax { x: usize, axis: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Linear { .. } => "linear",
            Op::Bmm { .. } => "bmm",
            Op::Conv1d { .. } => "conv1d",
            Op::MaxPool1d { .. } => "max_pool1d",
            Op::BatchNorm { .. } => "batchnorm1d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    generation: u32,
    backward_done: bool,
}

/// Gradients of a scalar with respect to the tape leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    generation: u32,
}

impl Gradients {
    /// Gradient for `var`, or `None` if it is not a grad-requiring leaf.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.generation != self.generation {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        if var.generation != self.generation {
            return None;
        }
        self.grads.get_mut(var.index).and_then(Option::take)
    }
}

fn normalize_axis(op: &'static str, axis: usize, rank: usize) -> Result<usize> {
    if axis >= rank {
        return Err(Error::dim(op, format!("axis {axis} out of range for rank {rank}")));
    }
    Ok(axis)
}

/// Splits `shape` around `axis` into (outer, extent, inner).
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::dim(op, format!("rank mismatch {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(ax, (&x, &y))| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::dim(op, format!("axis {ax}: {x} vs {y} cannot broadcast ({a:?} vs {b:?})"))),
        })
        .collect()
}

/// Sums `grad` (shaped like `out_shape`) down to `in_shape`.
fn reduce_broadcast(grad: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    if out_shape == in_shape {
        return grad.to_vec();
    }
    let mut acc = vec![0.0; in_shape.iter().product()];
    for (g, off) in grad.iter().zip(kernels::broadcast_offsets(out_shape, in_shape)) {
        acc[off] += g;
    }
    acc
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(&contribution) {
                *e += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

#[inline]
fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact (erf-based) GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    x * std_normal_cdf(x)
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

    /// Drops every recorded node and invalidates all outstanding handles.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.generation = self.generation.wrapping_add(1);
        self.backward_done = false;
    }

    fn check(&self, var: Var) -> Result<usize> {
        if var.generation != self.generation || var.index >= self.nodes.len() {
            return Err(Error::Contract(format!("stale or foreign tape handle {var:?}")));
        }
        Ok(var.index)
    }

    pub fn try_value(&self, var: Var) -> Result<&Tensor> {
        let i = self.check(var)?;
        Ok(&self.nodes[i].value)
    }

    /// Value of a live handle.
    ///
    /// # Panics
    /// If the handle belongs to a cleared tape.
    pub fn value(&self, var: Var) -> &Tensor {
        self.try_value(var).expect("invalid tape handle")
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    /// Shapes of every recorded node in append order.
    pub fn node_shapes(&self) -> impl Iterator<Item = (&'static str, &[usize])> {
        self.nodes.iter().map(|n| (n.op.name(), n.value.shape()))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var { index: self.nodes.len() - 1, generation: self.generation })
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    /// Records an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var { index: self.nodes.len() - 1, generation: self.generation }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, usize, usize, bool)> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        let shape = broadcast_shape(op, ta.shape(), tb.shape())?;
        let data: Vec<f64> = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let oa = kernels::broadcast_offsets(&shape, ta.shape());
            let ob = kernels::broadcast_offsets(&shape, tb.shape());
            oa.iter().zip(&ob).map(|(&i, &j)| f(ta.data()[i], tb.data()[j])).collect()
        };
        let rg = self.rg(ia) || self.rg(ib);
        Ok((Tensor::new(&shape, data)?, ia, ib, rg))
    }

    /// Elementwise sum with same-rank broadcasting over unit axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ia, ib, rg) = self.binary("add", a, b, |x, y| x + y)?;
        self.push(t, Op::Add(ia, ib), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ia, ib, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push(t, Op::Sub(ia, ib), rg)
    }

    /// Elementwise product with same-rank broadcasting over unit axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ia, ib, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push(t, Op::Mul(ia, ib), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.val(ia);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| v * s).collect())?;
        let rg = self.rg(ia);
        self.push(out, Op::Scale(ia, s), rg)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.val(ia).data().iter().sum();
        let rg = self.rg(ia);
        self.push(Tensor::scalar(s), Op::Sum(ia), rg)
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, scale: f64, op: &'static str) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.val(ia);
        let axis = normalize_axis(op, axis, t.rank())?;
        let (outer, n, inner) = split_at_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &t.data()[(o * n + j) * inner..][..inner];
                for (d, s) in out[o * inner..][..inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if scale != 1.0 {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = 1;
        let rg = self.rg(ia);
        self.push(Tensor::new(&shape, out)?, Op::SumAxis { x: ia, axis, scale }, rg)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, 1.0, "sum_axis")
    }

    /// Mean along `axis`, keeping it with extent 1.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = self.try_value(a)?.shape().get(axis).copied().unwrap_or(1);
        self.reduce_axis(a, axis, 1.0 / n as f64, "mean")
    }

    /// Mean of all elements as a `[1]` tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.try_value(a)?.numel();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.val(ia).clone().reshape(shape)?;
        let rg = self.rg(ia);
        self.push(t, Op::Reshape(ia), rg)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.val(ia);
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let strides = t.strides();
        let shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
        let pstrides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
        let data = kernels::strided_offsets(&shape, &pstrides).into_iter().map(|o| t.data()[o]).collect();
        let rg = self.rg(ia);
        self.push(Tensor::new(&shape, data)?, Op::Permute { x: ia, perm: perm.to_vec() }, rg)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat", "no inputs"));
        }
        let idx: Vec<usize> = parts.iter().map(|&v| self.check(v)).collect::<Result<_>>()?;
        let first = self.val(idx[0]).shape().to_vec();
        let axis = normalize_axis("concat", axis, first.len())?;
        let mut total = 0;
        for &i in &idx {
            let s = self.val(i).shape();
            let same =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(ax, (x, y))| ax == axis || x == y);
            if !same {
                return Err(Error::dim("concat", format!("{s:?} incompatible with {first:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &idx {
                let t = self.val(i);
                let n = t.shape()[axis];
                data.extend_from_slice(&t.data()[o * n * inner..][..n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = idx.iter().any(|&i| self.rg(i));
        self.push(Tensor::new(&shape, data)?, Op::Concat { inputs: idx, axis }, rg)
    }

    /// Affine map over the last axis: `x @ w^T + b` with `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let ib = b.map(|b| self.check(b)).transpose()?;
        let (tx, tw) = (self.val(ix), self.val(iw));
        if tw.rank() != 2 {
            return Err(Error::dim("linear", format!("weight must be [out, in], got {:?}", tw.shape())));
        }
        let (fout, fin) = (tw.shape()[0], tw.shape()[1]);
        if *tx.shape().last().unwrap() != fin {
            return Err(Error::dim("linear", format!("input last axis {:?} != weight in-features {fin}", tx.shape())));
        }
        if let Some(ib) = ib {
            if self.val(ib).shape() != [fout] {
                return Err(Error::dim("linear", format!("bias {:?} != [{fout}]", self.val(ib).shape())));
            }
        }
        let rows = tx.numel() / fin;
        let y = kernels::linear_forward(tx.data(), tw.data(), ib.map(|i| self.val(i).data()), rows, fin, fout);
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = fout;
        let rg = self.rg(ix) || self.rg(iw) || ib.is_some_and(|i| self.rg(i));
        self.push(Tensor::new(&shape, y)?, Op::Linear { x: ix, w: iw, b: ib, rows, fin, fout }, rg)
    }

    /// Plain matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.try_value(a)?.shape().to_vec(), self.try_value(b)?.shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim("matmul", format!("expected 2-D operands, got {sa:?} and {sb:?}")));
        }
        let a3 = self.reshape(a, &[1, sa[0], sa[1]])?;
        let b3 = self.reshape(b, &[1, sb[0], sb[1]])?;
        let c = self.bmm(a3, b3, false)?;
        self.reshape(c, &[sa[0], sb[1]])
    }

    /// Batched matrix product of `[B, m, k]` with `[B, k, n]`, or with
    /// `[B, n, k]` when `transpose_b`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.val(ia).shape(), self.val(ib).shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dim("bmm", format!("incompatible operands {sa:?} and {sb:?}")));
        }
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if sa[2] != kb {
            return Err(Error::dim(
                "bmm",
                format!("inner extents differ: {sa:?} x {sb:?} (transpose_b={transpose_b})"),
            ));
        }
        let geom = BmmGeometry { batch: sa[0], m: sa[1], k: sa[2], n, transpose_b };
        let out = kernels::bmm_forward(&geom, self.val(ia).data(), self.val(ib).data());
        let rg = self.rg(ia) || self.rg(ib);
        self.push(Tensor::new(&[geom.batch, geom.m, geom.n], out)?, Op::Bmm { a: ia, b: ib, geom }, rg)
    }

    /// 1-D cross-correlation over `[B, C_in, N]` with weight
    /// `[C_out, C_in/groups, k]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, opts: Conv1dOptions) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let ib = b.map(|b| self.check(b)).transpose()?;
        let (sx, sw) = (self.val(ix).shape(), self.val(iw).shape());
        if sx.len() != 3 {
            return Err(Error::dim("conv1d", format!("input must be [B, C_in, N], got {sx:?}")));
        }
        if sw.len() != 3 {
            return Err(Error::dim("conv1d", format!("weight must be [C_out, C_in/groups, k], got {sw:?}")));
        }
        let Conv1dOptions { stride, padding, groups } = opts;
        if stride == 0 || groups == 0 {
            return Err(Error::Config("conv1d stride and groups must be positive".into()));
        }
        let (batch, cin, n) = (sx[0], sx[1], sx[2]);
        let (cout, cin_g, k) = (sw[0], sw[1], sw[2]);
        if cin % groups != 0 || cout % groups != 0 {
            return Err(Error::Config(format!("conv1d groups={groups} must divide C_in={cin} and C_out={cout}")));
        }
        if cin_g != cin / groups {
            return Err(Error::dim(
                "conv1d",
                format!("weight axis 1 is {cin_g} but C_in/groups = {cin}/{groups} = {}", cin / groups),
            ));
        }
        if n + 2 * padding < k {
            return Err(Error::dim(
                "conv1d",
                format!("time axis N={n} with padding {padding} shorter than kernel {k}"),
            ));
        }
        if let Some(ib) = ib {
            if self.val(ib).shape() != [cout] {
                return Err(Error::dim("conv1d", format!("bias {:?} != [{cout}]", self.val(ib).shape())));
            }
        }
        let geom = ConvGeometry {
            batch,
            in_channels: cin,
            out_channels: cout,
            groups,
            kernel: k,
            stride,
            padding,
            in_len: n,
            out_len: (n + 2 * padding - k) / stride + 1,
        };
        let out =
            kernels::conv1d_forward(&geom, self.val(ix).data(), self.val(iw).data(), ib.map(|i| self.val(i).data()));
        let rg = self.rg(ix) || self.rg(iw) || ib.is_some_and(|i| self.rg(i));
        self.push(Tensor::new(&[batch, cout, geom.out_len], out)?, Op::Conv1d { x: ix, w: iw, b: ib, geom }, rg)
    }

    /// Max pooling over the last axis of `[B, C, N]`.
    pub fn max_pool1d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let t = self.val(ix);
        if t.rank() != 3 {
            return Err(Error::dim("max_pool1d", format!("input must be [B, C, N], got {:?}", t.shape())));
        }
        if kernel == 0 || stride == 0 {
            return Err(Error::Config("max_pool1d kernel and stride must be positive".into()));
        }
        let (b, c, n) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        if n < kernel {
            return Err(Error::DegenerateLength(format!("max_pool1d: length {n} shorter than window {kernel}")));
        }
        let out_len = (n - kernel) / stride + 1;
        let mut out = Vec::with_capacity(b * c * out_len);
        let mut argmax = Vec::with_capacity(b * c * out_len);
        for row in 0..b * c {
            let src = &t.data()[row * n..][..n];
            for o in 0..out_len {
                let start = o * stride;
                let mut best = start;
                for j in start + 1..start + kernel {
                    if src[j] > src[best] {
                        best = j;
                    }
                }
                out.push(src[best]);
                argmax.push(row * n + best);
            }
        }
        let rg = self.rg(ix);
        self.push(Tensor::new(&[b, c, out_len], out)?, Op::MaxPool1d { x: ix, argmax }, rg)
    }

    /// Batch normalization over `[B, C, N]` with per-channel affine
    /// parameters. In train mode `stats` is updated in place.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        cfg: BatchNormConfig,
    ) -> Result<Var> {
        let (ix, ig, ibt) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let t = self.val(ix);
        if t.rank() != 3 {
            return Err(Error::dim("batchnorm1d", format!("input must be [B, C, N], got {:?}", t.shape())));
        }
        let (b, c, n) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        if self.val(ig).shape() != [c] || self.val(ibt).shape() != [c] || stats.mean.len() != c || stats.var.len() != c
        {
            return Err(Error::dim("batchnorm1d", format!("affine/stat extents must equal C={c}")));
        }
        if cfg.eps <= 0.0 {
            return Err(Error::Config("batchnorm eps must be positive".into()));
        }
        let m = b * n;
        let train = cfg.mode == Mode::Train;
        if train && m < 2 {
            return Err(Error::DegenerateBatch {
                op: "batchnorm1d",
                detail: format!("train mode needs B*N >= 2, got {m}"),
            });
        }
        let data = t.data();
        let mut inv_std = vec![0.0; c];
        let mut means = vec![0.0; c];
        for ch in 0..c {
            let (mean, var) = if train {
                let mut s = 0.0;
                for bi in 0..b {
                    s += data[(bi * c + ch) * n..][..n].iter().sum::<f64>();
                }
                let mean = s / m as f64;
                let mut ss = 0.0;
                for bi in 0..b {
                    ss += data[(bi * c + ch) * n..][..n].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                }
                let var = ss / m as f64;
                stats.mean[ch] = (1.0 - cfg.momentum) * stats.mean[ch] + cfg.momentum * mean;
                stats.var[ch] = (1.0 - cfg.momentum) * stats.var[ch] + cfg.momentum * ss / (m - 1) as f64;
                (mean, var)
            } else {
                (stats.mean[ch], stats.var[ch])
            };
            means[ch] = mean;
            inv_std[ch] = 1.0 / (var + cfg.eps).sqrt();
        }
        let (gv, bv) = (self.val(ig).data(), self.val(ibt).data());
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for row in 0..b * c {
            let ch = row % c;
            for j in row * n..(row + 1) * n {
                xhat[j] = (data[j] - means[ch]) * inv_std[ch];
                out[j] = gv[ch] * xhat[j] + bv[ch];
            }
        }
        let rg = self.rg(ix) || self.rg(ig) || self.rg(ibt);
        let shape = [b, c, n];
        self.push(Tensor::new(&shape, out)?, Op::BatchNorm { x: ix, gamma: ig, beta: ibt, xhat, inv_std, train }, rg)
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ibt) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let t = self.val(ix);
        let d = *t.shape().last().unwrap();
        if self.val(ig).shape() != [d] || self.val(ibt).shape() != [d] {
            return Err(Error::dim("layer_norm", format!("affine extents must equal last axis {d}")));
        }
        let rows = t.numel() / d;
        let (gv, bv) = (self.val(ig).data(), self.val(ibt).data());
        let mut xhat = vec![0.0; t.numel()];
        let mut out = vec![0.0; t.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let src = &t.data()[r * d..][..d];
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (src[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gv[j] * h + bv[j];
            }
        }
        let rg = self.rg(ix) || self.rg(ig) || self.rg(ibt);
        let shape = t.shape().to_vec();
        self.push(Tensor::new(&shape, out)?, Op::LayerNorm { x: ix, gamma: ig, beta: ibt, xhat, inv_std }, rg)
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let t = self.val(ix);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&v| gelu_scalar(v)).collect())?;
        let rg = self.rg(ix);
        self.push(out, Op::Gelu(ix), rg)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let t = self.val(ix);
        let axis = normalize_axis("softmax", axis, t.rank())?;
        let (outer, n, inner) = split_at_axis(t.shape(), axis);
        let mut out = vec![0.0; t.numel()];
        let src = t.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        let rg = self.rg(ix);
        let shape = t.shape().to_vec();
        self.push(Tensor::new(&shape, out)?, Op::Softmax { x: ix, axis }, rg)
    }

    /// Mean negative log-likelihood of zero-based `targets` under
    /// `softmax(logits)` for logits `[B, classes]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let t = self.val(il);
        if t.rank() != 2 || t.shape()[0] != targets.len() {
            return Err(Error::dim("cross_entropy", format!("logits {:?} vs {} targets", t.shape(), targets.len())));
        }
        let (b, c) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(Error::Input(format!("target index {bad} out of range for {c} classes")));
        }
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (r, &y) in targets.iter().enumerate() {
            let row = &t.data()[r * c..][..c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            loss += lse - row[y];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        let rg = self.rg(il);
        self.push(
            Tensor::scalar(loss / b as f64),
            Op::CrossEntropy { logits: il, targets: targets.to_vec(), probs },
            rg,
        )
    }

    /// Gradients of the scalar `loss` with respect to every grad-requiring
    /// leaf. May be called once per tape lifetime (see [`Tape::clear`]).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let il = self.check(loss)?;
        if self.backward_done {
            return Err(Error::Accumulation);
        }
        if self.val(il).numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.val(il).shape())));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[il] = Some(vec![1.0]);
        for i in (0..=il).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (&n.op, g) {
                (Op::Leaf, Some(g)) if n.requires_grad => Some(Tensor::new(n.value.shape(), g).expect("grad shape")),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, generation: self.generation })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.rg(a) {
                    accumulate(&mut grads[a], reduce_broadcast(g, out_shape, self.val(a).shape()));
                }
                if self.rg(b) {
                    let mut gb = reduce_broadcast(g, out_shape, self.val(b).shape());
                    if sign < 0.0 {
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    accumulate(&mut grads[b], gb);
                }
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (self.val(a), self.val(b));
                let expand = |t: &Tensor| -> Vec<f64> {
                    if t.shape() == out_shape {
                        t.data().to_vec()
                    } else {
                        kernels::broadcast_offsets(out_shape, t.shape()).into_iter().map(|o| t.data()[o]).collect()
                    }
                };
                if self.rg(a) {
                    let gb: Vec<f64> = g.iter().zip(expand(tb)).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[a], reduce_broadcast(&gb, out_shape, ta.shape()));
                }
                if self.rg(b) {
                    let ga: Vec<f64> = g.iter().zip(expand(ta)).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[b], reduce_broadcast(&ga, out_shape, tb.shape()));
                }
            }
            &Op::Scale(a, s) => {
                if self.rg(a) {
                    accumulate(&mut grads[a], g.iter().map(|v| v * s).collect());
                }
            }
            &Op::Sum(a) => {
                if self.rg(a) {
                    accumulate(&mut grads[a], vec![g[0]; self.val(a).numel()]);
                }
            }
            &Op::SumAxis { x, axis, scale } => {
                if self.rg(x) {
                    let shape = self.val(x).shape();
                    let (outer, n, inner) = split_at_axis(shape, axis);
                    let mut gx = vec![0.0; outer * n * inner];
                    for o in 0..outer {
                        for j in 0..n {
                            for k in 0..inner {
                                gx[(o * n + j) * inner + k] = g[o * inner + k] * scale;
                            }
                        }
                    }
                    accumulate(&mut grads[x], gx);
                }
            }
            &Op::Reshape(a) => {
                if self.rg(a) {
                    accumulate(&mut grads[a], g.to_vec());
                }
            }
            Op::Permute { x, perm } => {
                let x = *x;
                if self.rg(x) {
                    let strides = self.val(x).strides();
                    let pstrides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
                    let mut gx = vec![0.0; g.len()];
                    for (gv, off) in g.iter().zip(kernels::strided_offsets(out_shape, &pstrides)) {
                        gx[off] = *gv;
                    }
                    accumulate(&mut grads[x], gx);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_at_axis(out_shape, *axis);
                let mut start = 0;
                for &inp in inputs {
                    let n = self.val(inp).shape()[*axis];
                    if self.rg(inp) {
                        let mut gi = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            gi.extend_from_slice(&g[(o * total + start) * inner..][..n * inner]);
                        }
                        accumulate(&mut grads[inp], gi);
                    }
                    start += n;
                }
            }
            &Op::Linear { x, w, b, rows, fin, fout } => {
                if self.rg(x) {
                    accumulate(&mut grads[x], kernels::linear_backward_input(g, self.val(w).data(), rows, fin, fout));
                }
                if self.rg(w) {
                    accumulate(&mut grads[w], kernels::linear_backward_weight(g, self.val(x).data(), rows, fin, fout));
                }
                if let Some(b) = b.filter(|&b| self.rg(b)) {
                    accumulate(&mut grads[b], kernels::linear_backward_bias(g, rows, fout));
                }
            }
            &Op::Bmm { a, b, geom } => {
                if self.rg(a) {
                    accumulate(&mut grads[a], kernels::bmm_backward_a(&geom, g, self.val(b).data()));
                }
                if self.rg(b) {
                    accumulate(&mut grads[b], kernels::bmm_backward_b(&geom, g, self.val(a).data()));
                }
            }
            &Op::Conv1d { x, w, b, geom } => {
                if self.rg(x) {
                    accumulate(&mut grads[x], kernels::conv1d_backward_input(&geom, g, self.val(w).data()));
                }
                if self.rg(w) {
                    accumulate(&mut grads[w], kernels::conv1d_backward_weight(&geom, g, self.val(x).data()));
                }
                if let Some(b) = b.filter(|&b| self.rg(b)) {
                    accumulate(&mut grads[b], kernels::conv1d_backward_bias(&geom, g));
                }
            }
            Op::MaxPool1d { x, argmax } => {
                if self.rg(*x) {
                    let mut gx = vec![0.0; self.val(*x).numel()];
                    for (gv, &src) in g.iter().zip(argmax) {
                        gx[src] += gv;
                    }
                    accumulate(&mut grads[*x], gx);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (b, c, n) = (out_shape[0], out_shape[1], out_shape[2]);
                let gv = self.val(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for row in 0..b * c {
                    let ch = row % c;
                    for j in row * n..(row + 1) * n {
                        sum_g[ch] += g[j];
                        sum_gx[ch] += g[j] * xhat[j];
                    }
                }
                if self.rg(*x) {
                    let m = (b * n) as f64;
                    let mut gx = vec![0.0; g.len()];
                    for row in 0..b * c {
                        let ch = row % c;
                        let k = gv[ch] * inv_std[ch];
                        for j in row * n..(row + 1) * n {
                            gx[j] =
                                if *train { k * (g[j] - sum_g[ch] / m - xhat[j] * sum_gx[ch] / m) } else { k * g[j] };
                        }
                    }
                    accumulate(&mut grads[*x], gx);
                }
                if self.rg(*gamma) {
                    accumulate(&mut grads[*gamma], sum_gx);
                }
                if self.rg(*beta) {
                    accumulate(&mut grads[*beta], sum_g);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = *out_shape.last().unwrap();
                let rows = g.len() / d;
                let gv = self.val(*gamma).data();
                if self.rg(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let (gr, hr) = (&g[r * d..][..d], &xhat[r * d..][..d]);
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dyg = gr[j] * gv[j];
                            s1 += dyg;
                            s2 += dyg * hr[j];
                        }
                        for j in 0..d {
                            let dyg = gr[j] * gv[j];
                            gx[r * d + j] = inv_std[r] * (dyg - s1 / d as f64 - hr[j] * s2 / d as f64);
                        }
                    }
                    accumulate(&mut grads[*x], gx);
                }
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                            db[j] += g[r * d + j];
                        }
                    }
                    if self.rg(*gamma) {
                        accumulate(&mut grads[*gamma], dg);
                    }
                    if self.rg(*beta) {
                        accumulate(&mut grads[*beta], db);
                    }
                }
            }
            &Op::Gelu(x) => {
                if self.rg(x) {
                    let gx = g
                        .iter()
                        .zip(self.val(x).data())
                        .map(|(gv, &v)| gv * (std_normal_cdf(v) + v * std_normal_pdf(v)))
                        .collect();
                    accumulate(&mut grads[x], gx);
                }
            }
            &Op::Softmax { x, axis } => {
                if self.rg(x) {
                    let y = node.value.data();
                    let (outer, n, inner) = split_at_axis(out_shape, axis);
                    let mut gx = vec![0.0; g.len()];
                    for o in 0..outer {
                        for k in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + k;
                            let s: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                gx[at(j)] = y[at(j)] * (g[at(j)] - s);
                            }
                        }
                    }
                    accumulate(&mut grads[x], gx);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if self.rg(*logits) {
                    let b = targets.len();
                    let c = probs.len() / b;
                    let scale = g[0] / b as f64;
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &y) in targets.iter().enumerate() {
                        gl[r * c + y] -= scale;
                    }
                    accumulate(&mut grads[*logits], gl);
                }
            }
        }
        Ok(())
    }
}
