//! Define-by-run expression graph with reverse-mode differentiation.
//!
//! Every operation evaluates eagerly when it is recorded, so node values are
//! available immediately and nodes are stored in topological order. Operation
//! builders panic on shape mismatch; model-level entry points validate their
//! inputs and report contract violations as errors before reaching them.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Real};

use super::Tensor;

/// Sentinel in gather/scatter index maps meaning "no source" (zero fill).
pub const NO_INDEX: u32 = u32::MAX;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    GradScale(Var, T),
    AddRow(Var, Var),
    MatMul { a: Var, b: Var, transpose_b: bool },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Slice { x: Var, axis: Axis, start: usize },
    Concat { parts: Vec<Var>, axis: Axis },
    Gather { x: Var, index: Arc<[u32]> },
    ScatterAdd { x: Var, index: Arc<[u32]> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::GradScale(..) => "grad_scale",
            Op::AddRow(..) => "add_row",
            Op::MatMul { .. } => "matmul",
            Op::Gelu(_) => "gelu",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Abs(_) => "abs",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Gather { .. } => "gather",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Mse(..) => "mse",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. Leaves are inputs (constants) and parameters.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every differentiable leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_row<T: Real>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        assert!(
            self.value(a).len() == self.value(b).len(),
            "{what}: shapes {sa:?} and {sb:?} differ"
        );
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        self.same_shape(a, b, op.name());
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("same length");
        let rg = self.rg(&[a, b]);
        self.push(t, op, rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    /// Identity in the forward pass; multiplies the incoming gradient by `s`.
    pub fn grad_scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v, Op::GradScale(x, s))
    }

    /// `x [m x n] + b [n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(b));
        let n = vx.cols();
        assert_eq!(vb.len(), n, "add_row: bias of {} values for {} columns", vb.len(), n);
        let mut t = vx.clone();
        for r in 0..t.rows() {
            for (o, &bb) in t.row_mut(r).iter_mut().zip(vb.data()) {
                *o += bb;
            }
        }
        let rg = self.rg(&[x, b]);
        self.push(t, Op::AddRow(x, b), rg)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let bm = if transpose_b { vb.as_mat().t() } else { vb.as_mat() };
        let (m, k) = (va.rows(), va.cols());
        let (k2, n) = if transpose_b { (vb.cols(), vb.rows()) } else { (vb.rows(), vb.cols()) };
        assert_eq!(k, k2, "matmul: {:?} by {:?} (transpose_b={})", va.shape(), vb.shape(), transpose_b);
        let mut out = vec![T::zero(); m * n];
        gemm(va.as_mat(), bm, T::zero(), &mut out);
        let t = Tensor::new([m, n], out).expect("matmul size");
        let rg = self.rg(&[a, b]);
        self.push(t, Op::MatMul { a, b, transpose_b }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let mut t = vx.clone();
        for r in 0..vx.rows() {
            softmax_row(vx.row(r), t.row_mut(r));
        }
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` of length `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = self.value(x);
        let (rows, n) = (vx.rows(), vx.cols());
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert!(g.len() == n && b.len() == n, "layer_norm: affine length {} vs {} columns", g.len(), n);
        let nf = T::lit(n as f64);
        let mut xhat = vec![T::zero(); rows * n];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vx.clone();
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + T::lit(LN_EPS)).sqrt();
            rstd[r] = rs;
            let o = out.row_mut(r);
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                o[j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let (rows, n) = (vx.rows(), vx.cols());
        assert!(start + len <= n, "slice_cols: [{start}, {}) of {n}", start + len);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&vx.row(r)[start..start + len]);
        }
        let t = Tensor::new([rows, len], data).expect("slice size");
        let rg = self.rg(&[x]);
        self.push(t, Op::Slice { x, axis: Axis::Cols, start }, rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        assert!(start + len <= vx.rows(), "slice_rows: [{start}, {}) of {}", start + len, vx.rows());
        let t = vx.slice_rows(start, len);
        let rg = self.rg(&[x]);
        self.push(t, Op::Slice { x, axis: Axis::Rows, start }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), n, "concat_rows: column counts differ");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let t = Tensor::new([rows, n], data).expect("concat size");
        let rg = self.rg(parts);
        self.push(t, Op::Concat { parts: parts.to_vec(), axis: Axis::Rows }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let rows = self.value(parts[0]).rows();
        let total: usize = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.value(p).rows(), rows, "concat_cols: row counts differ");
                self.value(p).cols()
            })
            .sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new([rows, total], data).expect("concat size");
        let rg = self.rg(parts);
        self.push(t, Op::Concat { parts: parts.to_vec(), axis: Axis::Cols }, rg)
    }

    /// `out[i] = x[index[i]]`, zero where `index[i] == NO_INDEX`.
    pub fn gather(&mut self, x: Var, index: Arc<[u32]>, shape: &[usize]) -> Var {
        let vx = self.value(x);
        assert_eq!(index.len(), shape.iter().product::<usize>(), "gather: index/shape mismatch");
        let src = vx.data();
        let data = index
            .iter()
            .map(|&i| if i == NO_INDEX { T::zero() } else { src[i as usize] })
            .collect();
        let t = Tensor::new(shape.to_vec(), data).expect("gather size");
        let rg = self.rg(&[x]);
        self.push(t, Op::Gather { x, index }, rg)
    }

    /// `out[index[i]] += x[i]` into a zero tensor of `shape`; adjoint of [`Graph::gather`].
    pub fn scatter_add(&mut self, x: Var, index: Arc<[u32]>, shape: &[usize]) -> Var {
        let vx = self.value(x);
        assert_eq!(index.len(), vx.len(), "scatter_add: index/input mismatch");
        let mut out = Tensor::zeros(shape.to_vec());
        {
            let o = out.data_mut();
            for (&i, &v) in index.iter().zip(vx.data()) {
                if i != NO_INDEX {
                    o[i as usize] += v;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::ScatterAdd { x, index }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape.to_vec()).expect("reshape size");
        let rg = self.rg(&[x]);
        self.push(t, Op::Reshape(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(t, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(&[x]);
        self.push(t, Op::Mean(x), rg)
    }

    /// Mean squared error between two same-sized tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mse");
        let m = self.value(a).mse(self.value(b)).expect("same length");
        let rg = self.rg(&[a, b]);
        self.push(Tensor::scalar(m), Op::Mse(a, b), rg)
    }

    /// `sum_i weights[i] * (-log softmax(logits_i)[targets[i]])` over rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Var {
        let vl = self.value(logits);
        let (rows, c) = (vl.rows(), vl.cols());
        assert!(targets.len() == rows && weights.len() == rows, "cross_entropy: {rows} rows");
        let mut probs = vec![T::zero(); rows * c];
        let mut loss = T::zero();
        for r in 0..rows {
            let row = vl.row(r);
            assert!(targets[r] < c, "cross_entropy: target {} of {} classes", targets[r], c);
            softmax_row(row, &mut probs[r * c..(r + 1) * c]);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            loss += weights[r] * (lse - row[targets[r]]);
        }
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs },
            rg,
        )
    }

    /// Checks the loss contract and every recorded value, then back-propagates.
    ///
    /// Returns gradients for every leaf created with [`Graph::param`].
    pub fn evaluate_with_gradients(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!("loss must be scalar, got shape {:?}", lv.shape())));
        }
        self.check_finite(loss)?;
        let grads = self.backward(loss);
        for (i, g) in grads.grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NumericFault {
                        node: i,
                        op: self.nodes[i].op.name(),
                        detail: "non-finite gradient".into(),
                    });
                }
            }
        }
        Ok(grads)
    }

    /// First node (in evaluation order, up to `last`) holding a non-finite value.
    pub fn check_finite(&self, last: Var) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate().take(last.0 + 1) {
            if !n.value.is_finite() {
                return Err(Error::NumericFault {
                    node: i,
                    op: n.op.name(),
                    detail: format!("non-finite value in tensor of shape {:?}", n.value.shape()),
                });
            }
        }
        Ok(())
    }

    fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(node, gy, &mut grads);
        }
        // Only leaf gradients survive the sweep.
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                let shape = self.value(v).shape().to_vec();
                *slot = Some(g.reshape(shape).expect("gradient shape"));
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, gy: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*b) {
                    self.acc(grads, *b, gy.clone());
                }
                self.acc(grads, *a, gy);
            }
            Op::Sub(a, b) => {
                if self.needs(*b) {
                    self.acc(grads, *b, gy.map(|v| -v));
                }
                self.acc(grads, *a, gy);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = gy.data().iter().zip(vb.data()).map(|(&g, &x)| g * x).collect();
                    self.acc(grads, *a, Tensor::new(gy.shape().to_vec(), d).unwrap());
                }
                if self.needs(*b) {
                    let d = gy.data().iter().zip(va.data()).map(|(&g, &x)| g * x).collect();
                    self.acc(grads, *b, Tensor::new(gy.shape().to_vec(), d).unwrap());
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.acc(grads, *x, gy.map(|v| v * s));
            }
            Op::GradScale(x, s) => {
                let s = *s;
                self.acc(grads, *x, gy.map(|v| v * s));
            }
            Op::AddRow(x, b) => {
                if self.needs(*b) {
                    let n = gy.cols();
                    let mut gb = Tensor::zeros([n]);
                    for r in 0..gy.rows() {
                        for (o, &g) in gb.data_mut().iter_mut().zip(gy.row(r)) {
                            *o += g;
                        }
                    }
                    self.acc(grads, *b, gb);
                }
                self.acc(grads, *x, gy);
            }
            Op::MatMul { a, b, transpose_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let gm = MatRef::new(gy.data(), gy.rows(), gy.cols());
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); va.len()];
                    let bm = if *transpose_b { vb.as_mat() } else { vb.as_mat().t() };
                    gemm(gm, bm, T::zero(), &mut ga);
                    self.acc(grads, *a, Tensor::new(va.shape().to_vec(), ga).unwrap());
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); vb.len()];
                    if *transpose_b {
                        gemm(gm.t(), va.as_mat(), T::zero(), &mut gb);
                    } else {
                        gemm(va.as_mat().t(), gm, T::zero(), &mut gb);
                    }
                    self.acc(grads, *b, Tensor::new(vb.shape().to_vec(), gb).unwrap());
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let d = gy.data().iter().zip(vx.data()).map(|(&g, &v)| g * gelu_grad(v)).collect();
                self.acc(grads, *x, Tensor::new(gy.shape().to_vec(), d).unwrap());
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                let d = gy
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.acc(grads, *x, Tensor::new(gy.shape().to_vec(), d).unwrap());
            }
            Op::Sigmoid(x) => {
                let d = gy.data().iter().zip(y.data()).map(|(&g, &s)| g * s * (T::one() - s)).collect();
                self.acc(grads, *x, Tensor::new(gy.shape().to_vec(), d).unwrap());
            }
            Op::Abs(x) => {
                let vx = self.value(*x);
                let d = gy
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(&g, &v)| {
                        if v > T::zero() {
                            g
                        } else if v < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.acc(grads, *x, Tensor::new(gy.shape().to_vec(), d).unwrap());
            }
            Op::Softmax(x) => {
                let mut gx = gy.clone();
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), gy.row(r));
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (rows, n) = (gy.rows(), gy.cols());
                let g = self.value(*gamma).data();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut gg = Tensor::zeros([n]);
                    let mut gb = Tensor::zeros([n]);
                    for r in 0..rows {
                        let gr = gy.row(r);
                        for j in 0..n {
                            gg.data_mut()[j] += gr[j] * xhat[r * n + j];
                            gb.data_mut()[j] += gr[j];
                        }
                    }
                    self.acc(grads, *gamma, gg);
                    self.acc(grads, *beta, gb);
                }
                if self.needs(*x) {
                    let nf = T::lit(n as f64);
                    let mut gx = Tensor::zeros(gy.shape().to_vec());
                    for r in 0..rows {
                        let gr = gy.row(r);
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..n {
                            let d = gr[j] * g[j];
                            m1 += d;
                            m2 += d * xh[j];
                        }
                        m1 /= nf;
                        m2 /= nf;
                        let o = gx.row_mut(r);
                        for j in 0..n {
                            o[j] = rstd[r] * (gr[j] * g[j] - m1 - xh[j] * m2);
                        }
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::Slice { x, axis, start } => {
                let vx = self.value(*x);
                let mut gx = Tensor::zeros(vx.shape().to_vec());
                match axis {
                    Axis::Rows => {
                        let c = vx.cols();
                        gx.data_mut()[start * c..start * c + gy.len()].copy_from_slice(gy.data());
                    }
                    Axis::Cols => {
                        let w = gy.cols();
                        for r in 0..gy.rows() {
                            gx.row_mut(r)[*start..start + w].copy_from_slice(gy.row(r));
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Concat { parts, axis } => match axis {
                Axis::Rows => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        if self.needs(p) {
                            let d = gy.data()[off..off + len].to_vec();
                            self.acc(grads, p, Tensor::new(self.value(p).shape().to_vec(), d).unwrap());
                        }
                        off += len;
                    }
                }
                Axis::Cols => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.needs(p) {
                            let mut d = Vec::with_capacity(self.value(p).len());
                            for r in 0..gy.rows() {
                                d.extend_from_slice(&gy.row(r)[off..off + w]);
                            }
                            self.acc(grads, p, Tensor::new(self.value(p).shape().to_vec(), d).unwrap());
                        }
                        off += w;
                    }
                }
            },
            Op::Gather { x, index } => {
                let vx = self.value(*x);
                let mut gx = Tensor::zeros(vx.shape().to_vec());
                {
                    let o = gx.data_mut();
                    for (&i, &g) in index.iter().zip(gy.data()) {
                        if i != NO_INDEX {
                            o[i as usize] += g;
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::ScatterAdd { x, index } => {
                let vx = self.value(*x);
                let src = gy.data();
                let d = index
                    .iter()
                    .map(|&i| if i == NO_INDEX { T::zero() } else { src[i as usize] })
                    .collect();
                self.acc(grads, *x, Tensor::new(vx.shape().to_vec(), d).unwrap());
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, gy);
            }
            Op::Sum(x) => {
                let g = gy.data()[0];
                self.acc(grads, *x, Tensor::full(self.value(*x).shape().to_vec(), g));
            }
            Op::Mean(x) => {
                let n = T::lit(self.value(*x).len().max(1) as f64);
                let g = gy.data()[0] / n;
                self.acc(grads, *x, Tensor::full(self.value(*x).shape().to_vec(), g));
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let s = gy.data()[0] * T::lit(2.0) / T::lit(va.len().max(1) as f64);
                let d: Vec<T> = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y) * s).collect();
                if self.needs(*b) {
                    let nd = d.iter().map(|&v| -v).collect();
                    self.acc(grads, *b, Tensor::new(vb.shape().to_vec(), nd).unwrap());
                }
                self.acc(grads, *a, Tensor::new(va.shape().to_vec(), d).unwrap());
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let vl = self.value(*logits);
                let c = vl.cols();
                let g0 = gy.data()[0];
                let mut d = probs.clone();
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    d[r * c + t] -= T::one();
                    for v in &mut d[r * c..(r + 1) * c] {
                        *v *= w * g0;
                    }
                }
                self.acc(grads, *logits, Tensor::new(vl.shape().to_vec(), d).unwrap());
            }
        }
    }
}
