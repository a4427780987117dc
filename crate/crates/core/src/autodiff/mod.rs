//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes; each operation pushes one node
//! whose inputs precede it, so append order is a topological order and
//! [`Graph::backward`] is a single reverse sweep. A fresh graph is built for
//! every forward pass.
//!
//! Shapes are always explicit. The only broadcasting forms are
//! [`Graph::scale`] (scalar) and [`Graph::add_bias`] (last-axis bias).

pub mod kernels;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Real, Result, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale(Var, T),
    AddConst(Var),
    MulConst(Var, Vec<T>),
    Relu(Var),
    NegRelu(Var),
    Sum(Var),
    Mean(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
    NormalizeRows { x: Var, sums: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::MulConst(..) => "mul_const",
            Op::Relu(..) => "relu",
            Op::NegRelu(..) => "neg_relu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Embedding { .. } => "embedding",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::NormalizeRows { .. } => "normalize_rows",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Append-only differentiation graph.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    visits: usize,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            visits: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Every node handle, in creation order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes processed by the most recent [`backward`](Self::backward).
    pub fn backward_visits(&self) -> usize {
        self.visits
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    /// Copy of a value cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn derived(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let rg = self.any_grad(inputs);
        self.push(value, rg, op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---- linear algebra ----

    /// Matrix product of `a: m×k` and `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(&mut out, self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.derived(value, &[a, b], Op::MatMul(a, b)))
    }

    /// Batched product of `a: B×m×k` with `b: B×k×n`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.batch_matmul(a, b, false)
    }

    /// Batched product of `a: B×m×k` with the transpose of `b: B×n×k`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.batch_matmul(a, b, true)
    }

    fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); bs * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..bs {
                let c = &mut out[i * m * n..(i + 1) * m * n];
                let aa = &ad[i * m * k..(i + 1) * m * k];
                let bb = &bd[i * k * n..(i + 1) * k * n];
                if trans_b {
                    kernels::gemm_nt(c, aa, bb, m, k, n);
                } else {
                    kernels::gemm_nn(c, aa, bb, m, k, n);
                }
            }
        }
        let value = Tensor::new(&[bs, m, n], out)?;
        Ok(self.derived(value, &[a, b], Op::BatchMatMul { a, b, trans_b }))
    }

    // ---- elementwise ----

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.derived(value, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        Ok(self.derived(value, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.derived(value, &[a, b], Op::Mul(a, b)))
    }

    /// Adds `bias` (a vector) along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let n = *sx.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != n {
            return Err(Error::shape("add_bias", sx, sb));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(&b) {
                *v = *v + bv;
            }
        }
        Ok(self.derived(value, &[x, bias], Op::AddBias { x, bias }))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.derived(value, &[x], Op::Scale(x, s))
    }

    /// Adds a non-differentiable array of the same shape (masks, positional tables).
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::shape("add_const", self.shape(x), c.shape()));
        }
        let mut value = self.value(x).clone();
        for (v, &cv) in value.data_mut().iter_mut().zip(c.data()) {
            *v = *v + cv;
        }
        Ok(self.derived(value, &[x], Op::AddConst(x)))
    }

    /// Multiplies by a non-differentiable array of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::shape("mul_const", self.shape(x), c.shape()));
        }
        let mut value = self.value(x).clone();
        for (v, &cv) in value.data_mut().iter_mut().zip(c.data()) {
            *v = *v * cv;
        }
        Ok(self.derived(value, &[x], Op::MulConst(x, c.data().to_vec())))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.derived(value, &[x], Op::Relu(x))
    }

    /// `relu(-x)`.
    pub fn neg_relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v < T::zero() { -v } else { T::zero() });
        self.derived(value, &[x], Op::NegRelu(x))
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        self.derived(Tensor::scalar(s), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().fold(T::zero(), |a, &e| a + e);
        let m = s / T::of(v.len() as f64);
        self.derived(Tensor::scalar(m), &[x], Op::Mean(x))
    }

    // ---- shape ----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.derived(value, &[x], Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || core::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", &shape, axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let data = kernels::permute(self.value(x).data(), &shape, axes);
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.derived(value, &[x], Op::Permute(x, axes.to_vec())))
    }

    /// Transpose of a matrix.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::shape("transpose", self.shape(x), &[2]));
        }
        self.permute(x, &[1, 0])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let val = self.value(v);
                let ext = val.shape()[axis];
                data.extend_from_slice(&val.data()[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let value = Tensor::new(&shape, data)?;
        Ok(self.derived(
            value,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::Index {
                op: "slice",
                index: end,
                extent: shape.get(axis).copied().unwrap_or(0),
            });
        }
        let (outer, ext, inner) = kernels::split_axis(&shape, axis);
        let width = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * ext * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.derived(value, &[x], Op::Slice { x, axis, start }))
    }

    /// Rows of `table: V×H` selected by `ids`, as an `ids.len()×H` matrix.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("embedding", &shape, &[2]));
        }
        let (vocab, h) = (shape[0], shape[1]);
        if ids.is_empty() {
            return Err(Error::Contract("embedding lookup of zero ids".into()));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    op: "embedding",
                    index: id,
                    extent: vocab,
                });
            }
            data.extend_from_slice(&src[id * h..(id + 1) * h]);
        }
        let value = Tensor::new(&[ids.len(), h], data)?;
        Ok(self.derived(
            value,
            &[table],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    // ---- normalizations ----

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.data().iter().any(|e| e.is_nan()) {
            return Err(Error::Numeric("NaN input to softmax".into()));
        }
        let n = v.cols();
        let mut out = vec![T::zero(); v.len()];
        for (row, o) in v.data().chunks(n).zip(out.chunks_mut(n)) {
            kernels::softmax_row(row, o);
        }
        if out.iter().any(|e| e.is_nan()) {
            return Err(Error::Numeric("softmax row with no finite entry".into()));
        }
        let value = Tensor::new(v.shape(), out)?;
        Ok(self.derived(value, &[x], Op::Softmax(x)))
    }

    /// Layer normalization over the last axis followed by a per-feature affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let n = *sx.last().unwrap_or(&0);
        for p in [gain, bias] {
            if self.shape(p) != [n] {
                return Err(Error::shape("layer_norm", &sx, self.shape(p)));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let xs = self.value(x).data();
        let rows = xs.len() / n;
        let inv_n = T::one() / T::of(n as f64);
        let mut xhat = vec![T::zero(); xs.len()];
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); xs.len()];
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_n;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..n {
                let xh = (row[j] - mean) * rs;
                xhat[r * n + j] = xh;
                out[r * n + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::new(&sx, out)?;
        Ok(self.derived(
            value,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Row-wise `x_i / (Σ_j x_j + eps)` over the last axis.
    pub fn normalize_rows(&mut self, x: Var, eps: T) -> Var {
        let v = self.value(x);
        let n = v.cols();
        let mut out = v.data().to_vec();
        let mut sums = Vec::with_capacity(v.len() / n);
        for row in out.chunks_mut(n) {
            let s = row.iter().fold(T::zero(), |a, &e| a + e) + eps;
            sums.push(s);
            for e in row.iter_mut() {
                *e = *e / s;
            }
        }
        let value = Tensor::new(v.shape(), out).expect("same shape");
        self.derived(value, &[x], Op::NormalizeRows { x, sums })
    }

    /// Weighted mean negative log-likelihood over the rows of `logits` (last
    /// axis = classes). Rows with zero weight are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let v = self.value(logits);
        let classes = v.cols();
        let rows = v.len() / classes;
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::shape("cross_entropy", v.shape(), &[targets.len(), weights.len()]));
        }
        let total = weights.iter().fold(T::zero(), |a, &w| a + w);
        if total <= T::zero() {
            return Err(Error::Contract("cross-entropy over zero unmasked positions".into()));
        }
        let norm: Vec<T> = weights.iter().map(|&w| w / total).collect();
        let mut probs = vec![T::zero(); v.len()];
        let mut loss = T::zero();
        for r in 0..rows {
            let row = &v.data()[r * classes..(r + 1) * classes];
            kernels::softmax_row(row, &mut probs[r * classes..(r + 1) * classes]);
            if norm[r] == T::zero() {
                continue;
            }
            let t = targets[r];
            if t >= classes {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: t,
                    extent: classes,
                });
            }
            loss = loss + norm[r] * (kernels::log_sum_exp(row) - row[t]);
        }
        Ok(self.derived(
            Tensor::scalar(loss),
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: norm,
                probs,
            },
        ))
    }

    // ---- backward ----

    /// Accumulates `d loss / d leaf` into every reachable leaf that requires a
    /// gradient. Intermediate gradients are recomputed on each call; leaf
    /// gradients keep accumulating until [`zero_grad`](Self::zero_grad).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        self.visits = 0;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        accumulate(&mut self.nodes[loss.0], &[T::one()]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(go) = node.grad.as_deref() else { continue };
            if !node.requires_grad {
                continue;
            }
            self.visits += 1;
            for (input, g) in input_grads(before, node, go) {
                let target = &mut before[input.0];
                if target.requires_grad {
                    accumulate(target, &g);
                }
            }
        }
        Ok(())
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Short description of the graph, one line per node.
    pub fn describe(&self) -> String {
        let mut s = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            s.push_str(&format!("{i}: {} {:?}\n", n.op.name(), n.value.shape()));
        }
        s
    }
}

fn accumulate<T: Real>(node: &mut Node<T>, g: &[T]) {
    match &mut node.grad {
        Some(acc) => {
            for (a, &v) in acc.iter_mut().zip(g) {
                *a = *a + v;
            }
        }
        None => {
            let mut acc = vec![T::zero(); node.value.len()];
            for (a, &v) in acc.iter_mut().zip(g) {
                *a = *a + v;
            }
            node.grad = Some(acc);
        }
    }
}

/// Gradient contributions of `node` to its inputs.
fn input_grads<T: Real>(nodes: &[Node<T>], node: &Node<T>, go: &[T]) -> Vec<(Var, Vec<T>)> {
    let val = |v: Var| &nodes[v.0].value;
    let wants = |v: Var| nodes[v.0].requires_grad;
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if wants(*a) {
                let mut ga = vec![T::zero(); m * k];
                kernels::gemm_nt(&mut ga, go, val(*b).data(), m, n, k);
                out.push((*a, ga));
            }
            if wants(*b) {
                let mut gb = vec![T::zero(); k * n];
                kernels::gemm_tn(&mut gb, val(*a).data(), go, m, k, n);
                out.push((*b, gb));
            }
        }
        Op::BatchMatMul { a, b, trans_b } => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let (bs, m, k) = (sa[0], sa[1], sa[2]);
            let n = if *trans_b { sb[1] } else { sb[2] };
            let (ad, bd) = (val(*a).data(), val(*b).data());
            if wants(*a) {
                let mut ga = vec![T::zero(); bs * m * k];
                for i in 0..bs {
                    let g = &go[i * m * n..(i + 1) * m * n];
                    let bb = &bd[i * k * n..(i + 1) * k * n];
                    let dst = &mut ga[i * m * k..(i + 1) * m * k];
                    if *trans_b {
                        kernels::gemm_nn(dst, g, bb, m, n, k);
                    } else {
                        kernels::gemm_nt(dst, g, bb, m, n, k);
                    }
                }
                out.push((*a, ga));
            }
            if wants(*b) {
                let mut gb = vec![T::zero(); bs * k * n];
                for i in 0..bs {
                    let g = &go[i * m * n..(i + 1) * m * n];
                    let aa = &ad[i * m * k..(i + 1) * m * k];
                    let dst = &mut gb[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        kernels::gemm_tn(dst, g, aa, m, n, k);
                    } else {
                        kernels::gemm_tn(dst, aa, g, m, k, n);
                    }
                }
                out.push((*b, gb));
            }
        }
        Op::Add(a, b) => {
            out.push((*a, go.to_vec()));
            out.push((*b, go.to_vec()));
        }
        Op::Sub(a, b) => {
            out.push((*a, go.to_vec()));
            if wants(*b) {
                out.push((*b, go.iter().map(|&g| -g).collect()));
            }
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                out.push((*a, go.iter().zip(val(*b).data()).map(|(&g, &y)| g * y).collect()));
            }
            if wants(*b) {
                out.push((*b, go.iter().zip(val(*a).data()).map(|(&g, &x)| g * x).collect()));
            }
        }
        Op::AddBias { x, bias } => {
            out.push((*x, go.to_vec()));
            if wants(*bias) {
                let n = val(*bias).len();
                let mut gb = vec![T::zero(); n];
                for row in go.chunks(n) {
                    for (a, &g) in gb.iter_mut().zip(row) {
                        *a = *a + g;
                    }
                }
                out.push((*bias, gb));
            }
        }
        Op::Scale(x, s) => out.push((*x, go.iter().map(|&g| g * *s).collect())),
        Op::AddConst(x) | Op::Reshape(x) => out.push((*x, go.to_vec())),
        Op::MulConst(x, c) => out.push((*x, go.iter().zip(c).map(|(&g, &c)| g * c).collect())),
        Op::Relu(x) => out.push((
            *x,
            go.iter()
                .zip(val(*x).data())
                .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                .collect(),
        )),
        Op::NegRelu(x) => out.push((
            *x,
            go.iter()
                .zip(val(*x).data())
                .map(|(&g, &v)| if v < T::zero() { -g } else { T::zero() })
                .collect(),
        )),
        Op::Sum(x) => out.push((*x, vec![go[0]; val(*x).len()])),
        Op::Mean(x) => {
            let n = val(*x).len();
            out.push((*x, vec![go[0] / T::of(n as f64); n]));
        }
        Op::Permute(x, axes) => {
            let inv = kernels::inverse_axes(axes);
            out.push((*x, kernels::permute(go, node.value.shape(), &inv)));
        }
        Op::Concat { inputs, axis } => {
            let shape = node.value.shape();
            let (outer, total, inner) = kernels::split_axis(shape, *axis);
            let mut offset = 0;
            for &v in inputs {
                let ext = val(v).shape()[*axis];
                if wants(v) {
                    let mut g = Vec::with_capacity(outer * ext * inner);
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        g.extend_from_slice(&go[base..base + ext * inner]);
                    }
                    out.push((v, g));
                }
                offset += ext;
            }
        }
        Op::Slice { x, axis, start } => {
            let shape = val(*x).shape();
            let (outer, ext, inner) = kernels::split_axis(shape, *axis);
            let width = node.value.shape()[*axis];
            let mut g = vec![T::zero(); val(*x).len()];
            for o in 0..outer {
                let dst = o * ext * inner + start * inner;
                g[dst..dst + width * inner].copy_from_slice(&go[o * width * inner..(o + 1) * width * inner]);
            }
            out.push((*x, g));
        }
        Op::Embedding { table, ids } => {
            let h = val(*table).shape()[1];
            let mut g = vec![T::zero(); val(*table).len()];
            for (r, &id) in ids.iter().enumerate() {
                for j in 0..h {
                    g[id * h + j] = g[id * h + j] + go[r * h + j];
                }
            }
            out.push((*table, g));
        }
        Op::Softmax(x) => {
            let y = node.value.data();
            let n = node.value.cols();
            let mut g = vec![T::zero(); y.len()];
            for ((yr, gr), dst) in y.chunks(n).zip(go.chunks(n)).zip(g.chunks_mut(n)) {
                let dotp = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                for j in 0..n {
                    dst[j] = yr[j] * (gr[j] - dotp);
                }
            }
            out.push((*x, g));
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let gv = val(*gain).data();
            let n = gv.len();
            let inv_n = T::one() / T::of(n as f64);
            if wants(*gain) || wants(*bias) {
                let mut gg = vec![T::zero(); n];
                let mut gb = vec![T::zero(); n];
                for (xr, gr) in xhat.chunks(n).zip(go.chunks(n)) {
                    for j in 0..n {
                        gg[j] = gg[j] + gr[j] * xr[j];
                        gb[j] = gb[j] + gr[j];
                    }
                }
                out.push((*gain, gg));
                out.push((*bias, gb));
            }
            if wants(*x) {
                let mut gx = vec![T::zero(); xhat.len()];
                for (r, ((xr, gr), dst)) in xhat.chunks(n).zip(go.chunks(n)).zip(gx.chunks_mut(n)).enumerate() {
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..n {
                        let d = gr[j] * gv[j];
                        mean_d = mean_d + d;
                        mean_dx = mean_dx + d * xr[j];
                    }
                    mean_d = mean_d * inv_n;
                    mean_dx = mean_dx * inv_n;
                    for j in 0..n {
                        let d = gr[j] * gv[j];
                        dst[j] = rstd[r] * (d - mean_d - xr[j] * mean_dx);
                    }
                }
                out.push((*x, gx));
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            probs,
        } => {
            let classes = val(*logits).cols();
            let mut g = vec![T::zero(); probs.len()];
            for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                if w == T::zero() {
                    continue;
                }
                let scale = go[0] * w;
                for j in 0..classes {
                    let p = probs[r * classes + j];
                    let y = if j == t { T::one() } else { T::zero() };
                    g[r * classes + j] = scale * (p - y);
                }
            }
            out.push((*logits, g));
        }
        Op::NormalizeRows { x, sums } => {
            let y = node.value.data();
            let n = node.value.cols();
            let mut g = vec![T::zero(); y.len()];
            for (r, ((yr, gr), dst)) in y.chunks(n).zip(go.chunks(n)).zip(g.chunks_mut(n)).enumerate() {
                let dotp = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                for j in 0..n {
                    dst[j] = (gr[j] - dotp) / sums[r];
                }
            }
            out.push((*x, g));
        }
    }
    out
}
