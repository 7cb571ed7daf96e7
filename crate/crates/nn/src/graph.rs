//! Computation tape and reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape: every operation evaluates eagerly,
//! stores its result, and records what backward needs. Because nodes can
//! only reference earlier nodes, append order is a topological order and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! Layer kernels (convolution, batch norm, LSTM) are recorded as single fused
//! nodes with hand-written adjoints; see the `kernels` module.

use std::collections::HashMap;

use crate::error::{shape_err, NnError, Result};
use crate::kernels::{self, BnSaved, ConvGeom, LstmSaved};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{matmul_into, Scalar};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op<F> {
    /// Constant or a node whose inputs need no gradient.
    Constant,
    Param,
    Input,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Abs(Var),
    Clamp(Var, F, F),
    LogMeanExp(Var, Var),
    Sum(Var),
    Mean(Var),
    AbsSum(Var),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    SwapLast(Var),
    RepeatFrames(Var, usize),
    Conv1d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<F> },
    BatchNorm { x: Var, gamma: Var, beta: Var, saved: BnSaved<F> },
    Lstm { x: Var, w_ih: Var, w_hh: Var, b: Var, h0: Option<Var>, c0: Option<Var>, saved: LstmSaved<F> },
}

impl<F> Op<F> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Constant | Param | Input => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | LogMeanExp(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Tanh(a) | Sigmoid(a) | Exp(a) | Log(a) | Square(a)
            | Abs(a) | Clamp(a, _, _) | Sum(a) | Mean(a) | AbsSum(a) | Reshape(a) | SwapLast(a)
            | RepeatFrames(a, _) => vec![*a],
            Slice { x, .. } => vec![*x],
            Linear { x, w, b } | Conv1d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Concat { parts, .. } => parts.clone(),
            BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Lstm { x, w_ih, w_hh, b, h0, c0, .. } => {
                let mut v = vec![*x, *w_ih, *w_hh, *b];
                v.extend(h0);
                v.extend(c0);
                v
            }
        }
    }
}

struct Node<F> {
    value: Vec<F>,
    shape: Vec<usize>,
    op: Op<F>,
    requires_grad: bool,
}

/// Batch-norm normalization source.
pub enum BnMode<'a, F> {
    /// Normalize with batch statistics (ε = 1e-5).
    Train,
    /// Normalize with stored running statistics.
    Eval { mean: &'a [F], var: &'a [F] },
}

/// Batch statistics emitted by a training-mode batch norm, for updating
/// running estimates. `var` is the unbiased estimate.
pub struct BnStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
    tanh_adjoint_fault: Option<F>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn ensure_finite<F: Scalar>(values: &[F], op: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NnError::NonFinite(op))
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            tanh_adjoint_fault: None,
        }
    }

    /// Scales the tanh adjoint by `factor`, producing wrong gradients.
    /// Exists only so gradient checks can be shown to catch a broken rule.
    #[doc(hidden)]
    pub fn inject_tanh_adjoint_fault(&mut self, factor: F) {
        self.tanh_adjoint_fault = Some(factor);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<F>, shape: Vec<usize>, op: Op<F>, name: &'static str) -> Result<Var> {
        debug_assert_eq!(value.len(), numel(&shape), "{name}: value/shape mismatch");
        ensure_finite(&value, name)?;
        let requires_grad = match op {
            Op::Param | Op::Input => true,
            _ => op.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        let op = if requires_grad { op } else { Op::Constant };
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check_len(shape: &[usize], values: &[F], op: &'static str) -> Result<()> {
        if numel(shape) != values.len() {
            return shape_err(op, format!("{} values for shape {shape:?}", values.len()));
        }
        Ok(())
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], values: Vec<F>) -> Result<Var> {
        Self::check_len(shape, &values, "constant")?;
        self.push(values, shape.to_vec(), Op::Constant, "constant")
    }

    /// Records a leaf whose gradient is retained after backward.
    pub fn input(&mut self, shape: &[usize], values: Vec<F>) -> Result<Var> {
        Self::check_len(shape, &values, "input")?;
        self.push(values, shape.to_vec(), Op::Input, "input")
    }

    /// Binds a stored parameter to this tape; repeated calls return the
    /// same node. Non-trainable entries become constants.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Result<Var> {
        if let Some(v) = self.params.get(&id) {
            return Ok(*v);
        }
        let p = store.get(id);
        let op = if p.trainable { Op::Param } else { Op::Constant };
        let v = self.push(p.value.clone(), p.shape.clone(), op, "param")?;
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, v: Var) -> F {
        let n = &self.nodes[v.0];
        assert_eq!(n.value.len(), 1, "scalar() on tensor of shape {:?}", n.shape);
        n.value[0]
    }

    /// Which side of every non-differentiable point each differentiable
    /// `abs`, `abs_sum` and `clamp` input lies on. Two evaluations with equal
    /// patterns sit on the same smooth piece of the function.
    pub fn branch_pattern(&self) -> Vec<i8> {
        let side = |x: F, at: F| match x.partial_cmp(&at) {
            Some(std::cmp::Ordering::Less) => -1,
            Some(std::cmp::Ordering::Greater) => 1,
            _ => 0,
        };
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Abs(a) | Op::AbsSum(a) => out.extend(self.value(*a).iter().map(|&x| side(x, F::zero()))),
                Op::Clamp(a, lo, hi) => out.extend(self.value(*a).iter().map(|&x| side(x, *lo) + side(x, *hi))),
                _ => {}
            }
        }
        out
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<F>, name: &'static str, f: impl Fn(F, F) -> F) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(value, shape, op, name)
    }

    fn map(&mut self, a: Var, op: Op<F>, name: &'static str, f: impl Fn(F) -> F) -> Result<Var> {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(value, shape, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Elementwise `log((exp(a) + exp(b)) / 2)`, evaluated stably and
    /// exactly idempotent when `a == b`.
    pub fn log_mean_exp(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::LogMeanExp(a, b), "log_mean_exp", kernels::log_mean_exp)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        self.map(a, Op::Scale(a, c), "scale", |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Result<Var> {
        self.map(a, Op::AddScalar(a), "add_scalar", |x| x + c)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Tanh(a), "tanh", |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a), "sigmoid", kernels::sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Exp(a), "exp", |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Log(a), "log", |x| x.ln())
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Square(a), "square", |x| x * x)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Abs(a), "abs", |x| x.abs())
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: F, hi: F) -> Result<Var> {
        self.map(a, Op::Clamp(a, lo, hi), "clamp", |x| x.max(lo).min(hi))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().copied().sum();
        self.push(vec![s], vec![], Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return shape_err("mean", "empty tensor");
        }
        let s: F = self.value(a).iter().copied().sum();
        self.push(vec![s / F::lit(n as f64)], vec![], Op::Mean(a), "mean")
    }

    /// Sum of absolute values (L1 norm).
    pub fn abs_sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().map(|x| x.abs()).sum();
        self.push(vec![s], vec![], Op::AbsSum(a), "abs_sum")
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", format!("{sa:?} × {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        matmul_into(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        self.push(out, vec![m, n], Op::MatMul(a, b), "matmul")
    }

    /// Affine map over the last axis: `[..., in] → [..., out]` with weight
    /// `[out, in]` and optional bias `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[1] {
            return shape_err("linear", format!("input {sx:?}, weight {sw:?}"));
        }
        let (out_dim, in_dim) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return shape_err("linear", format!("bias {:?} for {out_dim} outputs", self.shape(b)));
            }
        }
        let rows = numel(&sx) / in_dim;
        let mut out = vec![F::zero(); rows * out_dim];
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_mut(out_dim) {
                row.copy_from_slice(bv);
            }
        }
        matmul_into(rows, in_dim, out_dim, self.value(x), false, self.value(w), true, &mut out, b.is_some());
        let mut shape = sx;
        *shape.last_mut().unwrap() = out_dim;
        self.push(out, shape, Op::Linear { x, w, b }, "linear")
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return shape_err("concat", format!("axis {axis} for rank {}", base.len()));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let block = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(out, shape, Op::Concat { parts: parts.to_vec(), axis }, "concat")
    }

    /// Takes indices `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return shape_err("slice", format!("{start}..{end} on axis {axis} of {s:?}"));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(x);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner;
            out.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        self.push(out, shape, Op::Slice { x, axis, start }, "slice")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return shape_err("reshape", format!("{:?} → {shape:?}", self.shape(x)));
        }
        let value = self.value(x).to_vec();
        self.push(value, shape.to_vec(), Op::Reshape(x), "reshape")
    }

    /// Swaps the last two axes: `[..., a, b] → [..., b, a]`.
    pub fn swap_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return shape_err("swap_last", format!("rank {} tensor", s.len()));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let out = kernels::transpose_batched(self.value(x), r, c);
        let mut shape = s;
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        self.push(out, shape, Op::SwapLast(x), "swap_last")
    }

    /// Repeats every frame `factor` times along the second-to-last axis:
    /// `[..., T, C] → [..., T·factor, C]`.
    pub fn repeat_frames(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || factor == 0 {
            return shape_err("repeat_frames", format!("{s:?} × {factor}"));
        }
        let c = s[s.len() - 1];
        let mut out = Vec::with_capacity(self.value(x).len() * factor);
        for frame in self.value(x).chunks(c) {
            for _ in 0..factor {
                out.extend_from_slice(frame);
            }
        }
        let mut shape = s;
        let n = shape.len();
        shape[n - 2] *= factor;
        self.push(out, shape, Op::RepeatFrames(x, factor), "repeat_frames")
    }

    /// 1-D convolution over `[N, C_in, T]` with weight `[C_out, C_in, K]`,
    /// symmetric zero padding and the given stride.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] || stride == 0 {
            return shape_err("conv1d", format!("input {sx:?}, weight {sw:?}, stride {stride}"));
        }
        let span = sx[2] + 2 * padding;
        if span < sw[2] {
            return shape_err("conv1d", format!("{} frames + padding {padding} shorter than kernel {}", sx[2], sw[2]));
        }
        let geom = ConvGeom {
            batch: sx[0],
            c_in: sx[1],
            t_in: sx[2],
            c_out: sw[0],
            kernel: sw[2],
            stride,
            padding,
            t_out: (span - sw[2]) / stride + 1,
        };
        if let Some(b) = b {
            if self.shape(b) != [geom.c_out] {
                return shape_err("conv1d", format!("bias {:?}", self.shape(b)));
            }
        }
        let (out, cols) = kernels::conv1d_forward(&geom, self.value(x), self.value(w), b.map(|b| self.value(b)));
        let shape = vec![geom.batch, geom.c_out, geom.t_out];
        self.push(out, shape, Op::Conv1d { x, w, b, geom, cols }, "conv1d")
    }

    /// Batch normalization over `[N, C, T]` (or `[N, C]`) per channel.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, F>,
    ) -> Result<(Var, Option<BnStats<F>>)> {
        let s = self.shape(x).to_vec();
        if !(s.len() == 2 || s.len() == 3) {
            return shape_err("batch_norm", format!("input {s:?}"));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err("batch_norm", format!("affine params for {c} channels"));
        }
        let t = if s.len() == 3 { s[2] } else { 1 };
        let (out, saved, stats) = kernels::batch_norm_forward(
            self.value(x),
            s[0],
            c,
            t,
            self.value(gamma),
            self.value(beta),
            &mode,
        )?;
        let v = self.push(out, s, Op::BatchNorm { x, gamma, beta, saved }, "batch_norm")?;
        Ok((v, stats))
    }

    /// Single-direction LSTM over `[N, T, I]` producing `[N, T, H]`.
    ///
    /// Gates are packed as `[input, forget, cell, output]` along the `4H`
    /// axis of `w_ih [4H, I]`, `w_hh [4H, H]` and `b [4H]`. When `reverse`
    /// is set the sequence is consumed from the last frame to the first and
    /// outputs stay aligned with their input frames. Absent initial states
    /// are zero.
    #[allow(clippy::too_many_arguments)]
    pub fn lstm(
        &mut self,
        x: Var,
        w_ih: Var,
        w_hh: Var,
        b: Var,
        h0: Option<Var>,
        c0: Option<Var>,
        reverse: bool,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w_ih).to_vec();
        if sx.len() != 3 || sw.len() != 2 || sw[0] % 4 != 0 || sw[1] != sx[2] {
            return shape_err("lstm", format!("input {sx:?}, w_ih {sw:?}"));
        }
        let hidden = sw[0] / 4;
        if self.shape(w_hh) != [4 * hidden, hidden] || self.shape(b) != [4 * hidden] {
            return shape_err("lstm", format!("w_hh {:?}, bias {:?} for hidden {hidden}", self.shape(w_hh), self.shape(b)));
        }
        for s in [h0, c0].into_iter().flatten() {
            if self.shape(s) != [sx[0], hidden] {
                return shape_err("lstm", format!("initial state {:?}, expected [{}, {hidden}]", self.shape(s), sx[0]));
            }
        }
        let dims = kernels::LstmDims {
            batch: sx[0],
            steps: sx[1],
            input: sx[2],
            hidden,
            reverse,
        };
        let (out, saved) = kernels::lstm_forward(
            &dims,
            self.value(x),
            self.value(w_ih),
            self.value(w_hh),
            self.value(b),
            h0.map(|v| self.value(v)),
            c0.map(|v| self.value(v)),
        );
        let shape = vec![dims.batch, dims.steps, hidden];
        self.push(out, shape, Op::Lstm { x, w_ih, w_hh, b, h0, c0, saved }, "lstm")
    }

    /// Cell state after the last processed step of an LSTM node, `[N, H]`.
    pub fn lstm_final_cell(&self, v: Var) -> Option<Vec<F>> {
        match &self.nodes[v.0].op {
            Op::Lstm { saved, .. } => Some(saved.final_cell()),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return shape_err("backward", format!("loss of shape {:?} is not scalar", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Param | Op::Input) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
        }
        let params = self
            .params
            .iter()
            .map(|(id, v)| (*id, *v))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        // Accumulates `f(i)` into the gradient of `v` when it needs one.
        macro_rules! acc {
            ($v:expr, |$i:ident| $e:expr) => {{
                let v = $v;
                if self.wants(v) {
                    let len = self.nodes[v.0].value.len();
                    let dst = grads[v.0].get_or_insert_with(|| vec![F::zero(); len]);
                    for ($i, d) in dst.iter_mut().enumerate() {
                        *d = *d + $e;
                    }
                }
            }};
        }
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        match &node.op {
            Op::Constant | Op::Param | Op::Input => {}
            Op::Add(a, b) => {
                acc!(*a, |i| g[i]);
                acc!(*b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                acc!(*a, |i| g[i]);
                acc!(*b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc!(*a, |i| g[i] * vb[i]);
                acc!(*b, |i| g[i] * va[i]);
            }
            Op::LogMeanExp(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let half = F::lit(0.5);
                acc!(*a, |i| g[i] * half * (va[i] - out[i]).exp());
                acc!(*b, |i| g[i] * half * (vb[i] - out[i]).exp());
            }
            Op::Scale(a, c) => acc!(*a, |i| g[i] * *c),
            Op::AddScalar(a) | Op::Reshape(a) => acc!(*a, |i| g[i]),
            Op::Tanh(a) => {
                let k = self.tanh_adjoint_fault.unwrap_or(F::one());
                acc!(*a, |i| k * g[i] * (F::one() - out[i] * out[i]))
            }
            Op::Sigmoid(a) => acc!(*a, |i| g[i] * out[i] * (F::one() - out[i])),
            Op::Exp(a) => acc!(*a, |i| g[i] * out[i]),
            Op::Log(a) => {
                let va = val(*a);
                acc!(*a, |i| g[i] / va[i]);
            }
            Op::Square(a) => {
                let va = val(*a);
                acc!(*a, |i| g[i] * F::lit(2.0) * va[i]);
            }
            Op::Abs(a) => {
                let va = val(*a);
                acc!(*a, |i| g[i] * kernels::sign(va[i]));
            }
            Op::Clamp(a, lo, hi) => {
                let va = val(*a);
                acc!(*a, |i| if va[i] < *lo || va[i] > *hi { F::zero() } else { g[i] });
            }
            Op::Sum(a) => acc!(*a, |_i| g[0]),
            Op::Mean(a) => {
                let n = F::lit(val(*a).len() as f64);
                acc!(*a, |_i| g[0] / n);
            }
            Op::AbsSum(a) => {
                let va = val(*a);
                acc!(*a, |i| g[0] * kernels::sign(va[i]));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(mut da) = self.take_grad(grads, *a) {
                    matmul_into(m, n, k, g, false, val(*b), true, &mut da, true);
                    Self::put_grad(grads, *a, da);
                }
                if let Some(mut db) = self.take_grad(grads, *b) {
                    matmul_into(k, m, n, val(*a), true, g, false, &mut db, true);
                    Self::put_grad(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (out_dim, in_dim) = (sw[0], sw[1]);
                let rows = val(*x).len() / in_dim;
                if let Some(mut dx) = self.take_grad(grads, *x) {
                    matmul_into(rows, out_dim, in_dim, g, false, val(*w), false, &mut dx, true);
                    Self::put_grad(grads, *x, dx);
                }
                if let Some(mut dw) = self.take_grad(grads, *w) {
                    matmul_into(out_dim, rows, in_dim, g, true, val(*x), false, &mut dw, true);
                    Self::put_grad(grads, *w, dw);
                }
                if let Some(b) = b {
                    if let Some(mut db) = self.take_grad(grads, *b) {
                        for row in g.chunks(out_dim) {
                            for (d, &r) in db.iter_mut().zip(row) {
                                *d = *d + r;
                            }
                        }
                        Self::put_grad(grads, *b, db);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let s = &node.shape;
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let block = self.shape(p)[*axis] * inner;
                    if let Some(mut dst) = self.take_grad(grads, p) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + block];
                            for (d, &v) in dst[o * block..(o + 1) * block].iter_mut().zip(src) {
                                *d = *d + v;
                            }
                        }
                        Self::put_grad(grads, p, dst);
                    }
                    offset += block;
                }
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(*x);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let block = node.shape[*axis] * inner;
                if let Some(mut dst) = self.take_grad(grads, *x) {
                    for o in 0..outer {
                        let base = o * s[*axis] * inner + start * inner;
                        for (d, &v) in dst[base..base + block].iter_mut().zip(&g[o * block..(o + 1) * block]) {
                            *d = *d + v;
                        }
                    }
                    Self::put_grad(grads, *x, dst);
                }
            }
            Op::SwapLast(x) => {
                let s = &node.shape;
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let back = kernels::transpose_batched(g, r, c);
                acc!(*x, |i| back[i]);
            }
            Op::RepeatFrames(x, factor) => {
                let c = *node.shape.last().unwrap();
                if let Some(mut dst) = self.take_grad(grads, *x) {
                    for (j, frame) in g.chunks(c).enumerate() {
                        let src = j / factor;
                        for (d, &v) in dst[src * c..(src + 1) * c].iter_mut().zip(frame) {
                            *d = *d + v;
                        }
                    }
                    Self::put_grad(grads, *x, dst);
                }
            }
            Op::Conv1d { x, w, b, geom, cols } => {
                let mut dx = self.take_grad(grads, *x);
                let mut dw = self.take_grad(grads, *w);
                let mut db = b.and_then(|b| self.take_grad(grads, b));
                kernels::conv1d_backward(geom, g, val(*w), cols, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                Self::put_opt(grads, Some(*x), dx);
                Self::put_opt(grads, Some(*w), dw);
                Self::put_opt(grads, *b, db);
            }
            Op::BatchNorm { x, gamma, beta, saved } => {
                let mut dx = self.take_grad(grads, *x);
                let mut dg = self.take_grad(grads, *gamma);
                let mut db = self.take_grad(grads, *beta);
                kernels::batch_norm_backward(saved, g, val(*gamma), dx.as_deref_mut(), dg.as_deref_mut(), db.as_deref_mut());
                Self::put_opt(grads, Some(*x), dx);
                Self::put_opt(grads, Some(*gamma), dg);
                Self::put_opt(grads, Some(*beta), db);
            }
            Op::Lstm { x, w_ih, w_hh, b, h0, c0, saved } => {
                let mut dx = self.take_grad(grads, *x);
                let mut dw_ih = self.take_grad(grads, *w_ih);
                let mut dw_hh = self.take_grad(grads, *w_hh);
                let mut db = self.take_grad(grads, *b);
                let mut dh0 = h0.and_then(|v| self.take_grad(grads, v));
                let mut dc0 = c0.and_then(|v| self.take_grad(grads, v));
                kernels::lstm_backward(
                    saved,
                    g,
                    val(*x),
                    out,
                    val(*w_ih),
                    val(*w_hh),
                    h0.map(|v| val(v)),
                    kernels::LstmGrads {
                        dx: dx.as_deref_mut(),
                        dw_ih: dw_ih.as_deref_mut(),
                        dw_hh: dw_hh.as_deref_mut(),
                        db: db.as_deref_mut(),
                        dh0: dh0.as_deref_mut(),
                        dc0: dc0.as_deref_mut(),
                    },
                );
                Self::put_opt(grads, Some(*x), dx);
                Self::put_opt(grads, Some(*w_ih), dw_ih);
                Self::put_opt(grads, Some(*w_hh), dw_hh);
                Self::put_opt(grads, Some(*b), db);
                Self::put_opt(grads, *h0, dh0);
                Self::put_opt(grads, *c0, dc0);
            }
        }
    }

    /// Removes the gradient buffer of `v` (zero-filled if absent) so it can be
    /// written while other buffers are borrowed; `None` if `v` needs none.
    fn take_grad(&self, grads: &mut [Option<Vec<F>>], v: Var) -> Option<Vec<F>> {
        if !self.wants(v) {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].take().unwrap_or_else(|| vec![F::zero(); len]))
    }

    /// Returns a buffer taken with `take_grad`, summing if the slot was
    /// refilled in the meantime (an input used twice by one node).
    fn put_grad(grads: &mut [Option<Vec<F>>], v: Var, g: Vec<F>) {
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(g) {
                    *e = *e + x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn put_opt(grads: &mut [Option<Vec<F>>], v: Option<Var>, g: Option<Vec<F>>) {
        if let (Some(v), Some(g)) = (v, g) {
            Self::put_grad(grads, v, g);
        }
    }
}

/// Gradients retained for leaves after [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    params: Vec<(ParamId, Var)>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of a parameter or input leaf. Intermediate nodes are freed
    /// during the sweep and return `None`.
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Stores the gradient of every trainable parameter in `store`.
    /// Parameters the loss does not reach receive zeros.
    pub fn write_to(&self, store: &mut ParamStore<F>) {
        let mut reached: HashMap<ParamId, Var> = HashMap::new();
        for &(id, v) in &self.params {
            reached.insert(id, v);
        }
        for id in store.ids().collect::<Vec<_>>() {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let g = reached
                .get(&id)
                .and_then(|v| self.grads[v.0].clone())
                .unwrap_or_else(|| vec![F::zero(); p.value.len()]);
            p.grad = Some(g);
        }
    }
}
