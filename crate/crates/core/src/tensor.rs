//! Dense row-major `f64` tensors with reverse-mode automatic differentiation.
//!
//! A tensor produced by an operation whose inputs require gradients keeps a
//! [`GraphNode`] describing that operation: its kind, its parents, and any
//! forward values the backward rule needs. [`Tensor::backward`] walks the graph
//! from a scalar loss once, in reverse topological order, and accumulates
//! gradients on every participating tensor that requires them.
//!
//! Tensors are immutable values. Parameters are leaves created with
//! [`Tensor::param`]; optimizers replace them with fresh leaves rather than
//! mutating data in place.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

/// Operation kinds understood by [`Tensor::apply`].
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    /// `[m, k] x [k, n] -> [m, n]`.
    MatMul,
    /// Elementwise with numpy-style broadcasting.
    Add,
    Sub,
    Mul,
    /// `scale * x + shift`.
    Affine { scale: f64, shift: f64 },
    Relu,
    Sigmoid,
    Tanh,
    /// Softmax over the last axis.
    Softmax,
    /// Log-softmax over the last axis.
    LogSoftmax,
    Log,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Reshape { shape: Vec<usize> },
    /// Inputs `x [B,C,H,W]`, `w [O,C,KH,KW]` and optionally `bias [O]`.
    Conv2d { stride: (usize, usize), padding: (usize, usize) },
    /// Input `[B,C,H,W]`, no padding.
    MaxPool2d { kernel: (usize, usize), stride: (usize, usize) },
    /// Mean of all elements, shape `[1]`.
    Mean,
    /// Sum of all elements, shape `[1]`.
    Sum,
    /// Sum over one axis, which is removed from the shape.
    SumAxis { axis: usize },
    /// Cosine similarity of two same-shaped tensors along the last axis.
    /// Rows where either norm is below `1e-12` yield 0 with zero gradient.
    Cosine,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Affine { .. } => "affine",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Log => "log",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Reshape { .. } => "reshape",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::MaxPool2d { .. } => "max_pool2d",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::SumAxis { .. } => "sum_axis",
            OpKind::Cosine => "cosine",
        }
    }
}

/// Forward values kept for a backward rule.
#[derive(Debug)]
enum Saved {
    None,
    Columns(Vec<f64>),
    Argmax(Vec<usize>),
}

/// The record attached to a non-leaf tensor.
#[derive(Debug)]
pub struct GraphNode {
    kind: OpKind,
    parents: Vec<Tensor>,
    saved: Saved,
}

impl GraphNode {
    pub fn kind(&self) -> &OpKind {
        &self.kind
    }

    pub fn parents(&self) -> &[Tensor] {
        &self.parents
    }
}

struct Inner {
    id: usize,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    node: Option<GraphNode>,
    grad: Mutex<Option<Vec<f64>>>,
}

#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("op", &self.inner.node.as_ref().map(|n| n.kind.name()))
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Arc<Vec<f64>>, requires_grad: bool, node: Option<GraphNode>) -> Self {
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                node,
                grad: Mutex::new(None),
            }),
        }
    }

    fn check_shape(shape: &[usize], len: usize) -> Result<()> {
        if shape.is_empty() || shape.contains(&0) || numel(shape) != len {
            return Err(Error::invalid(format!(
                "shape {shape:?} does not describe {len} elements"
            )));
        }
        Ok(())
    }

    /// A constant tensor (no gradient).
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::check_shape(shape, data.len())?;
        Ok(Self::build(shape.to_vec(), Arc::new(data), false, None))
    }

    /// A trainable leaf.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::check_shape(shape, data.len())?;
        Ok(Self::build(shape.to_vec(), Arc::new(data), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), Arc::new(vec![0.0; numel(shape)]), false, None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(vec![1], Arc::new(vec![value]), false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.to_vec()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn id(&self) -> usize {
        self.inner.id
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn graph_node(&self) -> Option<&GraphNode> {
        self.inner.node.as_ref()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.inner.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().expect("grad lock") = None;
    }

    /// Same values, no history, no gradient. Shares the data buffer.
    pub fn detach(&self) -> Tensor {
        Self::build(self.inner.shape.clone(), Arc::clone(&self.inner.data), false, None)
    }

    /// Same values as a fresh trainable leaf. Shares the data buffer.
    pub fn to_param(&self) -> Tensor {
        Self::build(self.inner.shape.clone(), Arc::clone(&self.inner.data), true, None)
    }

    /// Applies `kind` to `inputs`, recording the operation when any input
    /// requires gradients.
    pub fn apply(kind: OpKind, inputs: &[Tensor]) -> Result<Tensor> {
        let (shape, data, saved) = forward(&kind, inputs)?;
        let requires_grad = inputs.iter().any(Tensor::requires_grad);
        let node = requires_grad.then(|| GraphNode {
            kind,
            parents: inputs.to_vec(),
            saved,
        });
        Ok(Self::build(shape, Arc::new(data), requires_grad, node))
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        Self::apply(OpKind::MatMul, &[self.clone(), rhs.clone()])
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        Self::apply(OpKind::Add, &[self.clone(), rhs.clone()])
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        Self::apply(OpKind::Sub, &[self.clone(), rhs.clone()])
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        Self::apply(OpKind::Mul, &[self.clone(), rhs.clone()])
    }

    pub fn affine(&self, scale: f64, shift: f64) -> Tensor {
        Self::apply(OpKind::Affine { scale, shift }, &[self.clone()]).expect("affine is shape-preserving")
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.affine(factor, 0.0)
    }

    /// `1 - x`.
    pub fn one_minus(&self) -> Tensor {
        self.affine(-1.0, 1.0)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(OpKind::Relu)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(OpKind::Sigmoid)
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(OpKind::Tanh)
    }

    pub fn softmax(&self) -> Tensor {
        self.unary(OpKind::Softmax)
    }

    pub fn log_softmax(&self) -> Tensor {
        self.unary(OpKind::LogSoftmax)
    }

    pub fn log(&self) -> Tensor {
        self.unary(OpKind::Log)
    }

    pub fn sum(&self) -> Tensor {
        self.unary(OpKind::Sum)
    }

    pub fn mean(&self) -> Tensor {
        self.unary(OpKind::Mean)
    }

    fn unary(&self, kind: OpKind) -> Tensor {
        Self::apply(kind, &[self.clone()]).expect("unary op accepts any shape")
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        Self::apply(OpKind::SumAxis { axis }, &[self.clone()])
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        Self::apply(OpKind::Concat { axis }, parts)
    }

    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        Self::apply(OpKind::Slice { axis, start, end }, &[self.clone()])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Self::apply(OpKind::Reshape { shape: shape.to_vec() }, &[self.clone()])
    }

    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: (usize, usize), padding: (usize, usize)) -> Result<Tensor> {
        let mut inputs = vec![self.clone(), weight.clone()];
        inputs.extend(bias.cloned());
        Self::apply(OpKind::Conv2d { stride, padding }, &inputs)
    }

    pub fn max_pool2d(&self, kernel: (usize, usize), stride: (usize, usize)) -> Result<Tensor> {
        Self::apply(OpKind::MaxPool2d { kernel, stride }, &[self.clone()])
    }

    pub fn cosine(&self, rhs: &Tensor) -> Result<Tensor> {
        Self::apply(OpKind::Cosine, &[self.clone(), rhs.clone()])
    }

    /// Back-propagates from this scalar, accumulating into `grad` of every
    /// reachable tensor that requires gradients.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = topological_order(self);
        let mut pending: HashMap<usize, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for tensor in order.iter().rev() {
            let Some(upstream) = pending.remove(&tensor.id()) else {
                continue;
            };
            if let Some(node) = &tensor.inner.node {
                let parent_grads = backward_rule(node, tensor, &upstream);
                for (parent, g) in node.parents.iter().zip(parent_grads) {
                    let Some(g) = g else { continue };
                    match pending.get_mut(&parent.id()) {
                        Some(acc) => add_into(acc, &g),
                        None => {
                            pending.insert(parent.id(), g);
                        }
                    }
                }
            }
            let mut slot = tensor.inner.grad.lock().expect("grad lock");
            match slot.as_mut() {
                Some(acc) => add_into(acc, &upstream),
                None => *slot = Some(upstream),
            }
        }
        Ok(())
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// Post-order over tensors that require gradients; parents precede children.
fn topological_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = &t.inner.node {
            for p in &node.parents {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

// ---------------------------------------------------------------------------
// Broadcasting

enum Broadcast {
    Same,
    Cycle(usize),
    Map(Vec<usize>),
}

impl Broadcast {
    fn new(input: &[usize], output: &[usize]) -> Self {
        if input == output {
            return Broadcast::Same;
        }
        let offset = output.len() - input.len();
        let trimmed: Vec<usize> = input.iter().copied().skip_while(|&d| d == 1).collect();
        if output.ends_with(&trimmed) {
            return Broadcast::Cycle(numel(input));
        }
        let mut strides = vec![0usize; output.len()];
        let mut stride = 1;
        for i in (0..input.len()).rev() {
            if input[i] != 1 {
                strides[i + offset] = stride;
            }
            stride *= input[i];
        }
        let total = numel(output);
        let mut map = Vec::with_capacity(total);
        let mut index = vec![0usize; output.len()];
        let mut current = 0usize;
        for _ in 0..total {
            map.push(current);
            for d in (0..output.len()).rev() {
                index[d] += 1;
                current += strides[d];
                if index[d] < output[d] {
                    break;
                }
                current -= strides[d] * output[d];
                index[d] = 0;
            }
        }
        Broadcast::Map(map)
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Cycle(n) => i % n,
            Broadcast::Map(m) => m[i],
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let dim = |s: &[usize], i: usize| if i + s.len() >= n { s[i + s.len() - n] } else { 1 };
    (0..n)
        .map(|i| {
            let (da, db) = (dim(a, i), dim(b, i));
            if da == db || db == 1 {
                Some(da)
            } else if da == 1 {
                Some(db)
            } else {
                None
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Dense kernels

/// `c[m,n] += a[m,k] * b[k,n]`
fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,k] += a[m,n] * b[k,n]^T`
fn gemm_bt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
fn gemm_at(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

struct ConvGeometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    out_channels: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let positions = self.positions();
        for c in 0..self.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * positions..(row + 1) * positions];
                    for oy in 0..self.out_h {
                        let y = (oy * self.sh + ki) as isize - self.ph as isize;
                        for ox in 0..self.out_w {
                            let x = (ox * self.sw + kj) as isize - self.pw as isize;
                            dst[oy * self.out_w + ox] = if y >= 0 && x >= 0 && (y as usize) < self.height && (x as usize) < self.width {
                                image[(c * self.height + y as usize) * self.width + x as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let positions = self.positions();
        for c in 0..self.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * positions..(row + 1) * positions];
                    for oy in 0..self.out_h {
                        let y = (oy * self.sh + ki) as isize - self.ph as isize;
                        if y < 0 || y as usize >= self.height {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let x = (ox * self.sw + kj) as isize - self.pw as isize;
                            if x >= 0 && (x as usize) < self.width {
                                image[(c * self.height + y as usize) * self.width + x as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_geometry(kind: &OpKind, inputs: &[Tensor]) -> Result<ConvGeometry> {
    let OpKind::Conv2d { stride, padding } = kind else {
        unreachable!()
    };
    let shapes: Vec<&[usize]> = inputs.iter().map(Tensor::shape).collect();
    let err = || Error::shape("conv2d", &shapes);
    if !(inputs.len() == 2 || inputs.len() == 3) {
        return Err(err());
    }
    let (x, w) = (inputs[0].shape(), inputs[1].shape());
    if x.len() != 4 || w.len() != 4 || x[1] != w[1] || stride.0 == 0 || stride.1 == 0 {
        return Err(err());
    }
    if let Some(b) = inputs.get(2) {
        if b.shape() != [w[0]] {
            return Err(err());
        }
    }
    let (ph, pw) = *padding;
    if x[2] + 2 * ph < w[2] || x[3] + 2 * pw < w[3] {
        return Err(err());
    }
    Ok(ConvGeometry {
        batch: x[0],
        channels: x[1],
        height: x[2],
        width: x[3],
        out_channels: w[0],
        kh: w[2],
        kw: w[3],
        sh: stride.0,
        sw: stride.1,
        ph,
        pw,
        out_h: (x[2] + 2 * ph - w[2]) / stride.0 + 1,
        out_w: (x[3] + 2 * pw - w[3]) / stride.1 + 1,
    })
}

/// Splits a shape around `axis` into (outer, dim, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn last_axis(shape: &[usize]) -> (usize, usize) {
    let d = *shape.last().expect("non-empty shape");
    (numel(shape) / d, d)
}

// ---------------------------------------------------------------------------
// Forward rules

type Forward = (Vec<usize>, Vec<f64>, Saved);

fn arity(kind: &OpKind, inputs: &[Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        let shapes: Vec<&[usize]> = inputs.iter().map(Tensor::shape).collect();
        return Err(Error::shape(
            format!("{} (expects {n} inputs, got {})", kind.name(), inputs.len()),
            &shapes,
        ));
    }
    Ok(())
}

fn forward(kind: &OpKind, inputs: &[Tensor]) -> Result<Forward> {
    match kind {
        OpKind::MatMul => {
            arity(kind, inputs, 2)?;
            let (a, b) = (inputs[0].shape(), inputs[1].shape());
            if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
                return Err(Error::shape("matmul", &[a, b]));
            }
            let (m, k, n) = (a[0], a[1], b[1]);
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, inputs[0].data(), inputs[1].data(), &mut out);
            Ok((vec![m, n], out, Saved::None))
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            arity(kind, inputs, 2)?;
            let (a, b) = (&inputs[0], &inputs[1]);
            let shape = broadcast_shape(a.shape(), b.shape())
                .ok_or_else(|| Error::shape(kind.name(), &[a.shape(), b.shape()]))?;
            let (ma, mb) = (Broadcast::new(a.shape(), &shape), Broadcast::new(b.shape(), &shape));
            let (ad, bd) = (a.data(), b.data());
            let out: Vec<f64> = (0..numel(&shape))
                .map(|i| {
                    let (x, y) = (ad[ma.at(i)], bd[mb.at(i)]);
                    match kind {
                        OpKind::Add => x + y,
                        OpKind::Sub => x - y,
                        _ => x * y,
                    }
                })
                .collect();
            Ok((shape, out, Saved::None))
        }
        OpKind::Affine { scale, shift } => {
            arity(kind, inputs, 1)?;
            let x = &inputs[0];
            let out = x.data().iter().map(|v| scale * v + shift).collect();
            Ok((x.shape().to_vec(), out, Saved::None))
        }
        OpKind::Relu | OpKind::Sigmoid | OpKind::Tanh | OpKind::Log => {
            arity(kind, inputs, 1)?;
            let x = &inputs[0];
            let f: fn(f64) -> f64 = match kind {
                OpKind::Relu => |v| v.max(0.0),
                OpKind::Sigmoid => |v| 1.0 / (1.0 + (-v).exp()),
                OpKind::Tanh => f64::tanh,
                _ => f64::ln,
            };
            Ok((x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect(), Saved::None))
        }
        OpKind::Softmax | OpKind::LogSoftmax => {
            arity(kind, inputs, 1)?;
            let x = &inputs[0];
            let (rows, d) = last_axis(x.shape());
            let mut out = vec![0.0; x.numel()];
            for r in 0..rows {
                let src = &x.data()[r * d..(r + 1) * d];
                let dst = &mut out[r * d..(r + 1) * d];
                let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = src.iter().map(|v| (v - max).exp()).sum();
                if *kind == OpKind::Softmax {
                    for (o, v) in dst.iter_mut().zip(src) {
                        *o = (v - max).exp() / total;
                    }
                } else {
                    let lse = max + total.ln();
                    for (o, v) in dst.iter_mut().zip(src) {
                        *o = v - lse;
                    }
                }
            }
            Ok((x.shape().to_vec(), out, Saved::None))
        }
        OpKind::Concat { axis } => {
            let axis = *axis;
            let shapes: Vec<&[usize]> = inputs.iter().map(Tensor::shape).collect();
            let first = *shapes.first().ok_or_else(|| Error::shape("concat", &[]))?;
            let compatible = axis < first.len()
                && shapes.iter().all(|s| {
                    s.len() == first.len() && s.iter().zip(first).enumerate().all(|(i, (x, y))| i == axis || x == y)
                });
            if !compatible {
                return Err(Error::shape("concat", &shapes));
            }
            let mut shape = first.to_vec();
            shape[axis] = shapes.iter().map(|s| s[axis]).sum();
            let (outer, _, inner) = split_axis(&shape, axis);
            let mut out = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for t in inputs {
                    let chunk = t.shape()[axis] * inner;
                    out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Ok((shape, out, Saved::None))
        }
        OpKind::Slice { axis, start, end } => {
            arity(kind, inputs, 1)?;
            let x = &inputs[0];
            let (axis, start, end) = (*axis, *start, *end);
            if axis >= x.shape().len() || start >= end || end > x.shape()[axis] {
                return Err(Error::shape(format!("slice [{start}..{end}) on axis {axis}"), &[x.shape()]));
            }
            let (outer, dim, inner) = split_axis(x.shape(), axis);
            let mut out = Vec::with_capacity(outer * (end - start) * inner);
            for o in 0..outer {
                let base = o * dim * inner;
                out.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = end - start;
            Ok((shape, out, Saved::None))
        }
        OpKind::Reshape { shape } => {
            arity(kind, inputs, 1)?;
            let x = &inputs[0];
            if shape.is_empty() || numel(shape) != x.numel() {
                return Err(Error::shape("reshape", &[x.shape(), shape]));
            }
            Ok((shape.clone(), x.data().to_vec(), Saved::None))
        }
        OpKind::Conv2d { .. } => {
            let g = conv_geometry(kind, inputs)?;
            let (rows, positions) = (g.rows(), g.positions());
            let per_image = g.channels * g.height * g.width;
            let per_out = g.out_channels * positions;
            let mut cols = vec![0.0; g.batch * rows * positions];
            let mut out = vec![0.0; g.batch * per_out];
            let (x, w) = (inputs[0].data(), inputs[1].data());
            for b in 0..g.batch {
                let col = &mut cols[b * rows * positions..(b + 1) * rows * positions];
                g.im2col(&x[b * per_image..(b + 1) * per_image], col);
                let dst = &mut out[b * per_out..(b + 1) * per_out];
                if let Some(bias) = inputs.get(2) {
                    for (o, bv) in bias.data().iter().enumerate() {
                        dst[o * positions..(o + 1) * positions].fill(*bv);
                    }
                }
                gemm(g.out_channels, rows, positions, w, col, dst);
            }
            Ok((vec![g.batch, g.out_channels, g.out_h, g.out_w], out, Saved::Columns(cols)))
        }
        OpKind::MaxPool2d { kernel, stride } => {
            arity(kind, inputs, 1)?;
            let x = &inputs[0];
            let s = x.shape();
            let (kh, kw) = *kernel;
            let (sh, sw) = *stride;
            if s.len() != 4 || kh == 0 || kw == 0 || sh == 0 || sw == 0 || s[2] < kh || s[3] < kw {
                return Err(Error::shape(format!("max_pool2d kernel {kernel:?} stride {stride:?}"), &[s]));
            }
            let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
            let (oh, ow) = ((h - kh) / sh + 1, (w - kw) / sw + 1);
            let mut out = Vec::with_capacity(planes * oh * ow);
            let mut argmax = Vec::with_capacity(planes * oh * ow);
            let data = x.data();
            for p in 0..planes {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = usize::MAX;
                        let mut best_v = f64::NEG_INFINITY;
                        for i in 0..kh {
                            for j in 0..kw {
                                let idx = (p * h + oy * sh + i) * w + ox * sw + j;
                                if best == usize::MAX || data[idx] > best_v {
                                    best = idx;
                                    best_v = data[idx];
                                }
                            }
                        }
                        out.push(best_v);
                        argmax.push(best);
                    }
                }
            }
            Ok((vec![s[0], s[1], oh, ow], out, Saved::Argmax(argmax)))
        }
        OpKind::Mean | OpKind::Sum => {
            arity(kind, inputs, 1)?;
            let x = &inputs[0];
            let total: f64 = x.data().iter().sum();
            let v = if *kind == OpKind::Mean { total / x.numel() as f64 } else { total };
            Ok((vec![1], vec![v], Saved::None))
        }
        OpKind::SumAxis { axis } => {
            arity(kind, inputs, 1)?;
            let x = &inputs[0];
            if *axis >= x.shape().len() {
                return Err(Error::shape(format!("sum_axis {axis}"), &[x.shape()]));
            }
            let (outer, dim, inner) = split_axis(x.shape(), *axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for d in 0..dim {
                    let src = &x.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                    add_into(&mut out[o * inner..(o + 1) * inner], src);
                }
            }
            let mut shape: Vec<usize> = x.shape().to_vec();
            shape.remove(*axis);
            if shape.is_empty() {
                shape.push(1);
            }
            Ok((shape, out, Saved::None))
        }
        OpKind::Cosine => {
            arity(kind, inputs, 2)?;
            let (a, b) = (&inputs[0], &inputs[1]);
            if a.shape() != b.shape() {
                return Err(Error::shape("cosine", &[a.shape(), b.shape()]));
            }
            let (rows, d) = last_axis(a.shape());
            let out = (0..rows)
                .map(|r| cosine_row(&a.data()[r * d..(r + 1) * d], &b.data()[r * d..(r + 1) * d]).0)
                .collect();
            let mut shape = a.shape()[..a.shape().len() - 1].to_vec();
            if shape.is_empty() {
                shape.push(1);
            }
            Ok((shape, out, Saved::None))
        }
    }
}

/// Norm threshold below which a cosine is defined as 0.
pub const COSINE_EPS: f64 = 1e-12;

/// Returns (cosine, |a|, |b|); cosine is 0 for degenerate rows.
fn cosine_row(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < COSINE_EPS || nb < COSINE_EPS {
        (0.0, na, nb)
    } else {
        (dot / (na * nb), na, nb)
    }
}

// ---------------------------------------------------------------------------
// Backward rules

fn backward_rule(node: &GraphNode, out: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let parents = &node.parents;
    let wants = |i: usize| parents[i].requires_grad();
    match &node.kind {
        OpKind::MatMul => {
            let (a, b) = (&parents[0], &parents[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ga = wants(0).then(|| {
                let mut ga = vec![0.0; m * k];
                gemm_bt(m, n, k, g, b.data(), &mut ga);
                ga
            });
            let gb = wants(1).then(|| {
                let mut gb = vec![0.0; k * n];
                gemm_at(m, k, n, a.data(), g, &mut gb);
                gb
            });
            vec![ga, gb]
        }
        kind @ (OpKind::Add | OpKind::Sub | OpKind::Mul) => {
            let shape = out.shape();
            (0..2)
                .map(|which| {
                    if !wants(which) {
                        return None;
                    }
                    let me = &parents[which];
                    let other = &parents[1 - which];
                    let map = Broadcast::new(me.shape(), shape);
                    let mut acc = vec![0.0; me.numel()];
                    match kind {
                        OpKind::Add => {
                            for (i, gv) in g.iter().enumerate() {
                                acc[map.at(i)] += gv;
                            }
                        }
                        OpKind::Sub => {
                            let sign = if which == 0 { 1.0 } else { -1.0 };
                            for (i, gv) in g.iter().enumerate() {
                                acc[map.at(i)] += sign * gv;
                            }
                        }
                        _ => {
                            let om = Broadcast::new(other.shape(), shape);
                            let od = other.data();
                            for (i, gv) in g.iter().enumerate() {
                                acc[map.at(i)] += gv * od[om.at(i)];
                            }
                        }
                    }
                    Some(acc)
                })
                .collect()
        }
        OpKind::Affine { scale, .. } => vec![Some(g.iter().map(|v| v * scale).collect())],
        OpKind::Relu => {
            let x = parents[0].data();
            vec![Some(g.iter().zip(x).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect())]
        }
        OpKind::Sigmoid => {
            let y = out.data();
            vec![Some(g.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect())]
        }
        OpKind::Tanh => {
            let y = out.data();
            vec![Some(g.iter().zip(y).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect())]
        }
        OpKind::Log => {
            let x = parents[0].data();
            vec![Some(g.iter().zip(x).map(|(gv, xv)| gv / xv).collect())]
        }
        OpKind::Softmax => {
            let y = out.data();
            let (rows, d) = last_axis(out.shape());
            let mut gx = vec![0.0; y.len()];
            for r in 0..rows {
                let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    gx[r * d + j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(gx)]
        }
        OpKind::LogSoftmax => {
            let y = out.data();
            let (rows, d) = last_axis(out.shape());
            let mut gx = vec![0.0; y.len()];
            for r in 0..rows {
                let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                let total: f64 = gr.iter().sum();
                for j in 0..d {
                    gx[r * d + j] = gr[j] - yr[j].exp() * total;
                }
            }
            vec![Some(gx)]
        }
        OpKind::Concat { axis } => {
            let (outer, _, inner) = split_axis(out.shape(), *axis);
            let mut grads: Vec<Option<Vec<f64>>> = parents
                .iter()
                .map(|p| p.requires_grad().then(|| Vec::with_capacity(p.numel())))
                .collect();
            let mut cursor = 0;
            for _ in 0..outer {
                for (p, slot) in parents.iter().zip(grads.iter_mut()) {
                    let chunk = p.shape()[*axis] * inner;
                    if let Some(v) = slot {
                        v.extend_from_slice(&g[cursor..cursor + chunk]);
                    }
                    cursor += chunk;
                }
            }
            grads
        }
        OpKind::Slice { axis, start, end } => {
            let x = &parents[0];
            let (outer, dim, inner) = split_axis(x.shape(), *axis);
            let width = (end - start) * inner;
            let mut gx = vec![0.0; x.numel()];
            for o in 0..outer {
                let base = o * dim * inner + start * inner;
                gx[base..base + width].copy_from_slice(&g[o * width..(o + 1) * width]);
            }
            vec![Some(gx)]
        }
        OpKind::Reshape { .. } => vec![Some(g.to_vec())],
        OpKind::Conv2d { .. } => {
            let g_geo = conv_geometry(&node.kind, parents).expect("validated in forward");
            let Saved::Columns(cols) = &node.saved else {
                unreachable!("conv2d saves its columns")
            };
            let (rows, positions) = (g_geo.rows(), g_geo.positions());
            let per_image = g_geo.channels * g_geo.height * g_geo.width;
            let per_out = g_geo.out_channels * positions;
            let w = parents[1].data();
            let mut gx = wants(0).then(|| vec![0.0; parents[0].numel()]);
            let mut gw = wants(1).then(|| vec![0.0; parents[1].numel()]);
            let mut gb = (parents.len() == 3 && wants(2)).then(|| vec![0.0; g_geo.out_channels]);
            let mut gcols = vec![0.0; rows * positions];
            for b in 0..g_geo.batch {
                let gout = &g[b * per_out..(b + 1) * per_out];
                let col = &cols[b * rows * positions..(b + 1) * rows * positions];
                if let Some(gw) = gw.as_mut() {
                    gemm_bt(g_geo.out_channels, positions, rows, gout, col, gw);
                }
                if let Some(gb) = gb.as_mut() {
                    for (o, acc) in gb.iter_mut().enumerate() {
                        *acc += gout[o * positions..(o + 1) * positions].iter().sum::<f64>();
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    gcols.fill(0.0);
                    gemm_at(g_geo.out_channels, rows, positions, w, gout, &mut gcols);
                    g_geo.col2im(&gcols, &mut gx[b * per_image..(b + 1) * per_image]);
                }
            }
            let mut grads = vec![gx, gw];
            if parents.len() == 3 {
                grads.push(gb);
            }
            grads
        }
        OpKind::MaxPool2d { .. } => {
            let Saved::Argmax(argmax) = &node.saved else {
                unreachable!("max_pool2d saves argmax indices")
            };
            let mut gx = vec![0.0; parents[0].numel()];
            for (gv, &idx) in g.iter().zip(argmax) {
                gx[idx] += gv;
            }
            vec![Some(gx)]
        }
        OpKind::Sum => vec![Some(vec![g[0]; parents[0].numel()])],
        OpKind::Mean => {
            let n = parents[0].numel();
            vec![Some(vec![g[0] / n as f64; n])]
        }
        OpKind::SumAxis { axis } => {
            let x = &parents[0];
            let (outer, dim, inner) = split_axis(x.shape(), *axis);
            let mut gx = Vec::with_capacity(x.numel());
            for o in 0..outer {
                for _ in 0..dim {
                    gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        }
        OpKind::Cosine => {
            let (a, b) = (&parents[0], &parents[1]);
            let (rows, d) = last_axis(a.shape());
            let mut ga = wants(0).then(|| vec![0.0; a.numel()]);
            let mut gb = wants(1).then(|| vec![0.0; b.numel()]);
            for r in 0..rows {
                let ar = &a.data()[r * d..(r + 1) * d];
                let br = &b.data()[r * d..(r + 1) * d];
                let (c, na, nb) = cosine_row(ar, br);
                if na < COSINE_EPS || nb < COSINE_EPS {
                    continue;
                }
                let gr = g[r];
                if let Some(ga) = ga.as_mut() {
                    for j in 0..d {
                        ga[r * d + j] = gr * (br[j] / (na * nb) - c * ar[j] / (na * na));
                    }
                }
                if let Some(gb) = gb.as_mut() {
                    for j in 0..d {
                        gb[r * d + j] = gr * (ar[j] / (na * nb) - c * br[j] / (nb * nb));
                    }
                }
            }
            vec![ga, gb]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn relu_definition() {
        assert_eq!(t(&[3], vec![-1.0, 0.0, 2.0]).relu().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        assert_eq!(t(&[2], vec![0.0, 0.0]).softmax().data(), &[0.5, 0.5]);
    }

    #[test]
    fn conv_all_ones_matches_direct_summation() {
        let x = t(&[1, 1, 3, 3], vec![1.0; 9]);
        let w = t(&[1, 1, 2, 2], vec![1.0; 4]);
        let y = x.conv2d(&w, None, (1, 1), (0, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[4.0; 4]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::param(&[3], vec![0.3, -1.0, 7.0]).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(x.relu().backward(), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        x.sum().backward().unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn shape_errors_name_the_op() {
        let a = t(&[2, 3], vec![0.0; 6]);
        let b = t(&[2, 3], vec![0.0; 6]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = t(&[4], vec![0.0; 4]);
        let err = a.add(&c).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
    }

    #[test]
    fn no_graph_without_grad() {
        let a = t(&[2], vec![1.0, 2.0]);
        let y = a.tanh();
        assert!(y.graph_node().is_none());
        let p = a.to_param();
        assert_eq!(p.tanh().graph_node().unwrap().kind(), &OpKind::Tanh);
    }

    #[test]
    fn broadcast_middle_axis() {
        let x = t(&[2, 3, 2], (0..12).map(f64::from).collect());
        let b = t(&[2, 1, 2], vec![100.0, 200.0, 300.0, 400.0]);
        let y = x.add(&b).unwrap();
        assert_eq!(y.data()[..4], [100.0, 201.0, 102.0, 203.0]);
        assert_eq!(y.data()[6..8], [306.0, 407.0]);
    }

    #[test]
    fn concat_then_slice_roundtrip() {
        let a = t(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], vec![5.0, 6.0]);
        let c = Tensor::concat(&[a.clone(), b], 1).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        assert_eq!(c.slice(1, 0, 2).unwrap().data(), a.data());
    }

    #[test]
    fn max_pool_picks_maximum() {
        let x = t(&[1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 8.0]);
        let y = x.max_pool2d((2, 2), (2, 2)).unwrap();
        assert_eq!(y.data(), &[5.0, 9.0]);
    }

    #[test]
    fn degenerate_cosine_is_zero() {
        let a = t(&[2], vec![0.0, 0.0]);
        let b = t(&[2], vec![1.0, 0.0]);
        assert_eq!(a.cosine(&b).unwrap().item(), 0.0);
    }
}
