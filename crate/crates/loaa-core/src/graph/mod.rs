//! Reverse-mode autodiff over a creation-ordered tape.
//!
//! Every operation appends a node holding its forward value, its parents, and
//! the op tag; [`Graph::backward`] replays the tape in reverse, visiting each
//! node exactly once. The tape is acyclic by construction because parents must
//! already exist when a node is created.

mod kernels;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::{CoreError, Result};
use crate::tensor::{numel_of, Element, Tensor};

pub(crate) use kernels::{
    conv_grid_backward, conv_grid_forward, gelu_derivative, gelu_value, layer_norm_forward,
    matmul as matmul_kernel, softmax_lanes, transpose as transpose_kernel,
};

static GRAPH_IDS: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of one specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op<T> {
    LeafInput,
    LeafParam,
    Matmul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    AddBias { x: Var, b: Var },
    Gelu { x: Var },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: T },
    ConvGrid { x: Var, w: Var, b: Var },
    CrossEntropySoft { logits: Var, targets: Var },
    Sum { x: Var },
    SliceRows { x: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    SliceCols { x: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    Reshape { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
    op: Op<T>,
}

enum GraphState {
    Recording,
    BackwardDone,
}

/// A single-use forward tape. Build it, run [`Graph::backward`] once, then
/// read gradients off the leaves; a fresh step gets a fresh graph.
pub struct Graph<T: Element> {
    id: u64,
    nodes: Vec<Node<T>>,
    state: GraphState,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: GRAPH_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            state: GraphState::Recording,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, grad: None, needs_grad, op });
        Var { graph: self.id, index: self.nodes.len() - 1 }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(CoreError::Usage(
                "var does not belong to this graph (detached)".into(),
            ));
        }
        Ok(v.index)
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.index].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.index].needs_grad
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        self.check(v)?;
        Ok(&self.nodes[v.index].value)
    }

    /// Accumulated gradient of a node, available after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Result<Option<&[T]>> {
        self.check(v)?;
        Ok(self.nodes[v.index].grad.as_deref())
    }

    /// Registers a leaf that does not track gradients (data, frozen weights).
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.clone(), false, Op::LeafInput)
    }

    /// Registers a trainable leaf; its gradient accumulates during backward.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.clone(), true, Op::LeafParam)
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.val(v).shape();
        if s.len() != 2 {
            return Err(CoreError::Dimension(format!("{what} must be rank 2, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(CoreError::Dimension(format!(
                "matmul inner extents differ: {m}x{k} vs {k2}x{n}"
            )));
        }
        let data = matmul_kernel(self.val(a).data(), self.val(b).data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(value, needs, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (r, c) = self.dims2(x, "transpose")?;
        let data = transpose_kernel(self.val(x).data(), r, c);
        let needs = self.needs(x);
        let value = Tensor::new(vec![c, r], data)?;
        Ok(self.push(value, needs, Op::Transpose { x }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        if self.val(a).shape() != self.val(b).shape() {
            return Err(CoreError::Dimension(format!(
                "add shapes differ: {:?} vs {:?}",
                self.val(a).shape(),
                self.val(b).shape()
            )));
        }
        let data: Vec<T> =
            self.val(a).data().iter().zip(self.val(b).data()).map(|(&x, &y)| x + y).collect();
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::new(self.val(a).shape().to_vec(), data)?;
        Ok(self.push(value, needs, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        if self.val(a).shape() != self.val(b).shape() {
            return Err(CoreError::Dimension(format!(
                "mul shapes differ: {:?} vs {:?}",
                self.val(a).shape(),
                self.val(b).shape()
            )));
        }
        let data: Vec<T> =
            self.val(a).data().iter().zip(self.val(b).data()).map(|(&x, &y)| x * y).collect();
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::new(self.val(a).shape().to_vec(), data)?;
        Ok(self.push(value, needs, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.check(x)?;
        let data: Vec<T> = self.val(x).data().iter().map(|&v| v * c).collect();
        let needs = self.needs(x);
        let value = Tensor::new(self.val(x).shape().to_vec(), data)?;
        Ok(self.push(value, needs, Op::Scale { x, c }))
    }

    /// Adds a rank-1 bias along the last extent of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.check(x)?;
        self.check(b)?;
        let xs = self.val(x).shape().to_vec();
        let bs = self.val(b).shape();
        let d = *xs.last().ok_or_else(|| {
            CoreError::Dimension("add_bias input must have rank >= 1".into())
        })?;
        if bs != [d] {
            return Err(CoreError::Dimension(format!(
                "bias shape {bs:?} does not match last extent {d}"
            )));
        }
        let bias = self.val(b).data().to_vec();
        let data: Vec<T> = self
            .val(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % d])
            .collect();
        let needs = self.needs(x) || self.needs(b);
        let value = Tensor::new(xs, data)?;
        Ok(self.push(value, needs, Op::AddBias { x, b }))
    }

    /// Exact erf-based GELU: `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let data: Vec<T> = self.val(x).data().iter().map(|&v| gelu_value(v)).collect();
        let needs = self.needs(x);
        let value = Tensor::new(self.val(x).shape().to_vec(), data)?;
        Ok(self.push(value, needs, Op::Gelu { x }))
    }

    /// Max-subtracted softmax along `axis`; each lane sums to one.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let shape = self.val(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(CoreError::Dimension(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let data = softmax_lanes(self.val(x).data(), outer, len, inner);
        let needs = self.needs(x);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, needs, Op::Softmax { x, axis }))
    }

    /// Per-row normalization over the last extent, then affine by gamma/beta.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        if eps <= T::zero() {
            return Err(CoreError::Config("layer_norm eps must be positive".into()));
        }
        let shape = self.val(x).shape().to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| CoreError::Dimension("layer_norm input must have rank >= 1".into()))?;
        if self.val(gamma).shape() != [d] || self.val(beta).shape() != [d] {
            return Err(CoreError::Dimension(format!(
                "layer_norm gamma/beta must have shape [{d}], got {:?} and {:?}",
                self.val(gamma).shape(),
                self.val(beta).shape()
            )));
        }
        let rows = self.val(x).numel() / d;
        let data = layer_norm_forward(
            self.val(x).data(),
            rows,
            d,
            self.val(gamma).data(),
            self.val(beta).data(),
            eps,
        );
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, needs, Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// Zero-padded cross-correlation over an `[f, t, c_in]` token grid with an
    /// `[k_f, k_t, c_in, c_out]` kernel and `[c_out]` bias. Kernel extents must
    /// be odd so the output keeps the grid shape.
    pub fn conv_grid(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let xs = self.val(x).shape().to_vec();
        let ws = self.val(w).shape().to_vec();
        if xs.len() != 3 {
            return Err(CoreError::Dimension(format!("conv_grid input must be rank 3, got {xs:?}")));
        }
        if ws.len() != 4 {
            return Err(CoreError::Dimension(format!(
                "conv_grid kernel must be rank 4, got {ws:?}"
            )));
        }
        let (f_ext, t_ext, c_in) = (xs[0], xs[1], xs[2]);
        let (k_f, k_t, kc_in, c_out) = (ws[0], ws[1], ws[2], ws[3]);
        if k_f % 2 == 0 || k_t % 2 == 0 {
            return Err(CoreError::Config(format!(
                "conv_grid kernel extents must be odd, got ({k_f},{k_t})"
            )));
        }
        if f_ext == 0 || t_ext == 0 {
            return Err(CoreError::Dimension("conv_grid grid extents must be >= 1".into()));
        }
        if kc_in != c_in {
            return Err(CoreError::Dimension(format!(
                "conv_grid kernel expects {kc_in} input channels, grid has {c_in}"
            )));
        }
        if self.val(b).shape() != [c_out] {
            return Err(CoreError::Dimension(format!(
                "conv_grid bias must have shape [{c_out}], got {:?}",
                self.val(b).shape()
            )));
        }
        let data = conv_grid_forward(
            self.val(x).data(),
            f_ext,
            t_ext,
            c_in,
            self.val(w).data(),
            k_f,
            k_t,
            c_out,
            self.val(b).data(),
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let value = Tensor::new(vec![f_ext, t_ext, c_out], data)?;
        Ok(self.push(value, needs, Op::ConvGrid { x, w, b }))
    }

    /// Mean over the batch of `-sum_c target * log softmax(logits)`, stabilized
    /// via log-sum-exp. `targets` rows must be probability distributions.
    pub fn cross_entropy_soft(&mut self, logits: Var, targets: Var) -> Result<Var> {
        self.check(logits)?;
        self.check(targets)?;
        let (batch, c) = self.dims2(logits, "cross_entropy logits")?;
        let (tb, tc) = self.dims2(targets, "cross_entropy targets")?;
        if (batch, c) != (tb, tc) {
            return Err(CoreError::Dimension(format!(
                "cross_entropy shapes differ: logits {batch}x{c}, targets {tb}x{tc}"
            )));
        }
        let tol = T::from_f64(1e-6);
        for (r, row) in self.val(targets).data().chunks_exact(c).enumerate() {
            let mut sum = T::zero();
            for &t in row {
                if t < T::zero() {
                    return Err(CoreError::Validation(format!(
                        "target row {r} has a negative entry"
                    )));
                }
                sum = sum + t;
            }
            if (sum - T::one()).abs() > tol {
                return Err(CoreError::Validation(format!(
                    "target row {r} sums to {sum}, expected 1"
                )));
            }
        }
        let mut total = T::zero();
        for (lrow, trow) in self
            .val(logits)
            .data()
            .chunks_exact(c)
            .zip(self.val(targets).data().chunks_exact(c))
        {
            total = total + soft_ce_row(lrow, trow);
        }
        let loss = total / T::from_f64(batch as f64);
        let needs = self.needs(logits) || self.needs(targets);
        Ok(self.push(Tensor::scalar(loss), needs, Op::CrossEntropySoft { logits, targets }))
    }

    /// Sum of all elements; produces a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let mut total = T::zero();
        for &v in self.val(x).data() {
            total = total + v;
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(total), needs, Op::Sum { x }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let (r, c) = self.dims2(x, "slice_rows")?;
        if start + len > r {
            return Err(CoreError::Dimension(format!(
                "slice_rows {start}..{} out of range for {r} rows",
                start + len
            )));
        }
        let data = self.val(x).data()[start * c..(start + len) * c].to_vec();
        let needs = self.needs(x);
        let value = Tensor::new(vec![len, c], data)?;
        Ok(self.push(value, needs, Op::SliceRows { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CoreError::Dimension("concat_rows needs at least one part".into()));
        }
        for &p in parts {
            self.check(p)?;
        }
        let (_, c) = self.dims2(parts[0], "concat_rows part")?;
        let mut data = Vec::new();
        let mut rows = 0;
        let mut needs = false;
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_rows part")?;
            if pc != c {
                return Err(CoreError::Dimension(format!(
                    "concat_rows parts have {c} and {pc} columns"
                )));
            }
            rows += pr;
            needs |= self.needs(p);
            data.extend_from_slice(self.val(p).data());
        }
        let value = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(value, needs, Op::ConcatRows { parts: parts.to_vec() }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start + len > c {
            return Err(CoreError::Dimension(format!(
                "slice_cols {start}..{} out of range for {c} columns",
                start + len
            )));
        }
        let src = self.val(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let needs = self.needs(x);
        let value = Tensor::new(vec![r, len], data)?;
        Ok(self.push(value, needs, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CoreError::Dimension("concat_cols needs at least one part".into()));
        }
        for &p in parts {
            self.check(p)?;
        }
        let (r, _) = self.dims2(parts[0], "concat_cols part")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        let mut needs = false;
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols part")?;
            if pr != r {
                return Err(CoreError::Dimension(format!(
                    "concat_cols parts have {r} and {pr} rows"
                )));
            }
            widths.push(pc);
            total += pc;
            needs |= self.needs(p);
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.val(p).data();
                data.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![r, total], data)?;
        Ok(self.push(value, needs, Op::ConcatCols { parts: parts.to_vec() }))
    }

    /// Reinterprets the row-major buffer under a new shape.
    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.check(x)?;
        let shape = shape.into();
        if numel_of(&shape) != self.val(x).numel() {
            return Err(CoreError::Dimension(format!(
                "cannot reshape {} elements to {:?}",
                self.val(x).numel(),
                shape
            )));
        }
        let data = self.val(x).data().to_vec();
        let needs = self.needs(x);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, needs, Op::Reshape { x }))
    }

    /// Runs the reverse pass from a scalar `loss`. Each reachable node is
    /// visited once; leaves registered with [`Graph::param`] end up holding
    /// their accumulated gradients (query with [`Graph::grad`]). A graph can
    /// run backward only once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.check(loss)?;
        if matches!(self.state, GraphState::BackwardDone) {
            return Err(CoreError::Usage(
                "backward already ran on this graph; build a new graph".into(),
            ));
        }
        if self.nodes[root].value.numel() != 1 {
            return Err(CoreError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        self.state = GraphState::BackwardDone;
        self.nodes[root].grad = Some(vec![T::one()]);
        for idx in (0..=root).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let d_out = self.nodes[idx].grad.clone().expect("grad present");
            self.backward_node(idx, &d_out)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        if !self.nodes[v.index].needs_grad {
            return;
        }
        match &mut self.nodes[v.index].grad {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&mut self, idx: usize, d_out: &[T]) -> Result<()> {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::LeafInput | Op::LeafParam => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.val(a).shape()[0], self.val(a).shape()[1]);
                let n = self.val(b).shape()[1];
                if self.needs(a) {
                    // dA = dC * B^T
                    let bt = transpose_kernel(self.val(b).data(), k, n);
                    let da = matmul_kernel(d_out, &bt, m, n, k);
                    self.accumulate(a, da);
                }
                if self.needs(b) {
                    // dB = A^T * dC
                    let at = transpose_kernel(self.val(a).data(), m, k);
                    let db = matmul_kernel(&at, d_out, k, m, n);
                    self.accumulate(b, db);
                }
            }
            Op::Transpose { x } => {
                let (r, c) = (self.val(x).shape()[0], self.val(x).shape()[1]);
                self.accumulate(x, transpose_kernel(d_out, c, r));
            }
            Op::Add { a, b } => {
                self.accumulate(a, d_out.to_vec());
                self.accumulate(b, d_out.to_vec());
            }
            Op::Mul { a, b } => {
                if self.needs(a) {
                    let da: Vec<T> =
                        d_out.iter().zip(self.val(b).data()).map(|(&g, &v)| g * v).collect();
                    self.accumulate(a, da);
                }
                if self.needs(b) {
                    let db: Vec<T> =
                        d_out.iter().zip(self.val(a).data()).map(|(&g, &v)| g * v).collect();
                    self.accumulate(b, db);
                }
            }
            Op::Scale { x, c } => {
                self.accumulate(x, d_out.iter().map(|&g| g * c).collect());
            }
            Op::AddBias { x, b } => {
                let d = self.val(b).numel();
                if self.needs(x) {
                    self.accumulate(x, d_out.to_vec());
                }
                if self.needs(b) {
                    let mut db = vec![T::zero(); d];
                    for (i, &g) in d_out.iter().enumerate() {
                        db[i % d] = db[i % d] + g;
                    }
                    self.accumulate(b, db);
                }
            }
            Op::Gelu { x } => {
                let dx: Vec<T> = d_out
                    .iter()
                    .zip(self.val(x).data())
                    .map(|(&g, &v)| g * gelu_derivative(v))
                    .collect();
                self.accumulate(x, dx);
            }
            Op::Softmax { x, axis } => {
                let shape = self.val(x).shape().to_vec();
                let (outer, len, inner) = split_axis(&shape, axis);
                let y = self.nodes[idx].value.data();
                let dx = kernels::softmax_backward_lanes(y, d_out, outer, len, inner);
                self.accumulate(x, dx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let d = *self.val(x).shape().last().expect("rank >= 1");
                let rows = self.val(x).numel() / d;
                let grads = kernels::layer_norm_backward(
                    self.val(x).data(),
                    d_out,
                    rows,
                    d,
                    self.val(gamma).data(),
                    eps,
                );
                if self.needs(x) {
                    self.accumulate(x, grads.dx);
                }
                if self.needs(gamma) {
                    self.accumulate(gamma, grads.dgamma);
                }
                if self.needs(beta) {
                    self.accumulate(beta, grads.dbeta);
                }
            }
            Op::ConvGrid { x, w, b } => {
                let xs = self.val(x).shape().to_vec();
                let ws = self.val(w).shape().to_vec();
                let grads = conv_grid_backward(
                    self.val(x).data(),
                    d_out,
                    xs[0],
                    xs[1],
                    xs[2],
                    self.val(w).data(),
                    ws[0],
                    ws[1],
                    ws[3],
                );
                if self.needs(x) {
                    self.accumulate(x, grads.dx);
                }
                if self.needs(w) {
                    self.accumulate(w, grads.dw);
                }
                if self.needs(b) {
                    self.accumulate(b, grads.db);
                }
            }
            Op::CrossEntropySoft { logits, targets } => {
                // Gradient flows to the logits only; targets are treated as
                // constants (mixup targets are data, not parameters).
                if self.needs(logits) {
                    let c = self.val(logits).shape()[1];
                    let batch = self.val(logits).shape()[0];
                    let g = d_out[0] / T::from_f64(batch as f64);
                    let probs = softmax_lanes(self.val(logits).data(), batch, c, 1);
                    let dlogits: Vec<T> = probs
                        .iter()
                        .zip(self.val(targets).data())
                        .map(|(&p, &t)| (p - t) * g)
                        .collect();
                    self.accumulate(logits, dlogits);
                }
            }
            Op::Sum { x } => {
                let g = d_out[0];
                self.accumulate(x, vec![g; self.val(x).numel()]);
            }
            Op::SliceRows { x, start } => {
                let c = self.val(x).shape()[1];
                let mut dx = vec![T::zero(); self.val(x).numel()];
                dx[start * c..start * c + d_out.len()].copy_from_slice(d_out);
                self.accumulate(x, dx);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for p in parts {
                    let n = self.val(p).numel();
                    if self.needs(p) {
                        self.accumulate(p, d_out[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = (self.val(x).shape()[0], self.val(x).shape()[1]);
                let len = d_out.len() / r;
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len]
                        .copy_from_slice(&d_out[i * len..(i + 1) * len]);
                }
                self.accumulate(x, dx);
            }
            Op::ConcatCols { parts } => {
                let r = self.val(parts[0]).shape()[0];
                let total: usize = d_out.len() / r;
                let mut offset = 0;
                for p in parts {
                    let w = self.val(p).shape()[1];
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            dp.extend_from_slice(&d_out[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(p, dp);
                    }
                    offset += w;
                }
            }
            Op::Reshape { x } => {
                self.accumulate(x, d_out.to_vec());
            }
        }
        Ok(())
    }
}

/// Views `shape` as `[outer, shape[axis], inner]`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn soft_ce_row<T: Element>(logits: &[T], targets: &[T]) -> T {
    let mut m = logits[0];
    for &v in &logits[1..] {
        if v > m {
            m = v;
        }
    }
    let mut denom = T::zero();
    for &v in logits {
        denom = denom + (v - m).exp();
    }
    let lse = m + denom.ln();
    let mut dot = T::zero();
    for (&l, &t) in logits.iter().zip(targets) {
        dot = dot + t * l;
    }
    lse - dot
}
