//! Recorded computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and backward is a single reverse sweep. Leaves are either
//! differentiable (`leaf`) or stop-gradient (`constant`); an operation node
//! requires a gradient iff one of its inputs does, so stop-gradient subgraphs
//! never receive or propagate gradient contributions.

use crate::scalar::Scalar;

use super::tensor::{Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations. Attributes ride along in the variant.
#[derive(Clone, Debug, PartialEq)]
pub enum Op<T> {
    Add,
    Sub,
    ScalarMul(T),
    Mul,
    Div,
    /// `[m,k] x [k,n]`
    MatMul,
    /// `x[N,i] . W[i,o] + b[o]`
    Affine,
    Relu,
    /// `x[N,Ci,H,W]`, `w[Co,Ci,K,K]`, `b[Co]`; zero padding, no dilation.
    Conv2d { stride: usize, padding: usize },
    Flatten,
    SoftmaxTau(T),
    LogSoftmaxTau(T),
    Sum,
    /// Sum over the last axis.
    SumRows,
    Mean,
    Log,
    Exp,
    Abs,
    Square,
    Sqrt,
    Dot,
    Clamp { lo: T, hi: T },
    /// Max over the last axis; ties resolve to the lowest index.
    RowMax,
}

impl<T: Scalar> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::ScalarMul(_) => "scalar_mul",
            Op::Mul => "elementwise_mul",
            Op::Div => "div",
            Op::MatMul => "matmul",
            Op::Affine => "affine",
            Op::Relu => "relu",
            Op::Conv2d { .. } => "conv2d",
            Op::Flatten => "flatten",
            Op::SoftmaxTau(_) => "softmax_tau",
            Op::LogSoftmaxTau(_) => "log_softmax_tau",
            Op::Sum => "sum",
            Op::SumRows => "sum_rows",
            Op::Mean => "mean",
            Op::Log => "log",
            Op::Exp => "exp",
            Op::Abs => "abs",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Dot => "dot",
            Op::Clamp { .. } => "clamp",
            Op::RowMax => "row_max",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::MatMul | Op::Dot => 2,
            Op::Affine | Op::Conv2d { .. } => 3,
            _ => 1,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Option<Op<T>>,
    inputs: Vec<NodeId>,
    requires_grad: bool,
    /// Saved argmax indices for `RowMax`.
    aux: Vec<usize>,
}

/// Single-owner recording of primitive applications.
pub struct Graph<T = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every node that requires one.
#[derive(Debug, Clone)]
pub struct GradientMap<T = f64> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> GradientMap<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn mismatch<T: Scalar>(op: &Op<T>, shapes: &[&[usize]]) -> TensorError {
    TensorError::ShapeMismatch {
        op: op.name(),
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

/// Splits a shape into (rows, last-axis length).
fn rows_of(shape: &[usize]) -> (usize, usize) {
    let c = *shape.last().unwrap_or(&1);
    (shape.iter().product::<usize>() / c, c)
}

fn reduced_shape(shape: &[usize]) -> Vec<usize> {
    if shape.len() <= 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

/// `out[m,n] = a[m,k] b[k,n]`
fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[m,k] = g[m,n] b[k,n]^T`
fn matmul_bt<T: Scalar>(g: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// `out[k,n] = a[m,k]^T g[m,n]`
fn matmul_at<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

/// Row-wise softmax of `z / tau` via max subtraction.
fn softmax_rows<T: Scalar>(z: &[T], c: usize, tau: T) -> Vec<T> {
    let mut out = Vec::with_capacity(z.len());
    for row in z.chunks(c) {
        let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v / tau));
        let start = out.len();
        let mut total = T::zero();
        for &v in row {
            let e = (v / tau - m).exp();
            total += e;
            out.push(e);
        }
        for e in &mut out[start..] {
            *e /= total;
        }
    }
    out
}

fn log_softmax_rows<T: Scalar>(z: &[T], c: usize, tau: T) -> Vec<T> {
    let mut out = Vec::with_capacity(z.len());
    for row in z.chunks(c) {
        let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v / tau));
        let lse = row.iter().map(|&v| (v / tau - m).exp()).sum::<T>().ln() + m;
        out.extend(row.iter().map(|&v| v / tau - lse));
    }
    out
}

pub(crate) fn softmax_values<T: Scalar>(t: &Tensor<T>, tau: T) -> Tensor<T> {
    Tensor::from_parts(t.shape().to_vec(), softmax_rows(t.data(), t.last_dim(), tau))
}

pub(crate) fn log_softmax_values<T: Scalar>(t: &Tensor<T>, tau: T) -> Tensor<T> {
    Tensor::from_parts(
        t.shape().to_vec(),
        log_softmax_rows(t.data(), t.last_dim(), tau),
    )
}

struct ConvDims {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvDims {
    /// Input coordinate for output position `o` and kernel offset `kk`.
    #[inline]
    fn src(&self, o: usize, kk: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + kk) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

fn conv_forward<T: Scalar>(x: &[T], wt: &[T], b: &[T], d: &ConvDims) -> Vec<T> {
    let mut out = vec![T::zero(); d.n * d.co * d.ho * d.wo];
    for n in 0..d.n {
        for o in 0..d.co {
            for oy in 0..d.ho {
                for ox in 0..d.wo {
                    let mut acc = b[o];
                    for c in 0..d.ci {
                        for ky in 0..d.k {
                            let Some(iy) = d.src(oy, ky, d.h) else { continue };
                            for kx in 0..d.k {
                                let Some(ix) = d.src(ox, kx, d.w) else { continue };
                                acc += x[((n * d.ci + c) * d.h + iy) * d.w + ix]
                                    * wt[((o * d.ci + c) * d.k + ky) * d.k + kx];
                            }
                        }
                    }
                    out[((n * d.co + o) * d.ho + oy) * d.wo + ox] = acc;
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)`.
fn conv_backward<T: Scalar>(
    x: &[T],
    wt: &[T],
    g: &[T],
    d: &ConvDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); wt.len()];
    let mut db = vec![T::zero(); d.co];
    for n in 0..d.n {
        for o in 0..d.co {
            for oy in 0..d.ho {
                for ox in 0..d.wo {
                    let gv = g[((n * d.co + o) * d.ho + oy) * d.wo + ox];
                    db[o] += gv;
                    for c in 0..d.ci {
                        for ky in 0..d.k {
                            let Some(iy) = d.src(oy, ky, d.h) else { continue };
                            for kx in 0..d.k {
                                let Some(ix) = d.src(ox, kx, d.w) else { continue };
                                let xi = ((n * d.ci + c) * d.h + iy) * d.w + ix;
                                let wi = ((o * d.ci + c) * d.k + ky) * d.k + kx;
                                dx[xi] += gv * wt[wi];
                                dw[wi] += gv * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Option<Op<T>>, inputs: Vec<NodeId>, rg: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad: rg,
            aux: Vec::new(),
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, None, Vec::new(), true)
    }

    /// Stop-gradient leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, None, Vec::new(), false)
    }

    /// Stop-gradient copy of an existing node's value.
    pub fn detach(&mut self, id: NodeId) -> Result<NodeId, TensorError> {
        let v = self.try_value(id)?.clone();
        Ok(self.constant(v))
    }

    pub fn try_value(&self, id: NodeId) -> Result<&Tensor<T>, TensorError> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or(TensorError::UnknownNode(id.0))
    }

    /// Forward value of a node. Panics on an id from another graph.
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Records `op` applied to `inputs` and returns the output node.
    pub fn apply(&mut self, op: Op<T>, inputs: &[NodeId]) -> Result<NodeId, TensorError> {
        if inputs.len() != op.arity() {
            return Err(TensorError::Arity {
                op: op.name(),
                expected: op.arity(),
                actual: inputs.len(),
            });
        }
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(TensorError::UnknownNode(id.0));
            }
        }
        let (value, aux) = self.forward(&op, inputs)?;
        if !value.is_finite() {
            return Err(TensorError::NonFiniteOutput { op: op.name() });
        }
        let rg = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let id = self.push(value, Some(op), inputs.to_vec(), rg);
        self.nodes[id.0].aux = aux;
        Ok(id)
    }

    fn forward(&self, op: &Op<T>, inputs: &[NodeId]) -> Result<(Tensor<T>, Vec<usize>), TensorError> {
        let v = |i: usize| &self.nodes[inputs[i].0].value;
        let a = v(0);
        let same = |b: &Tensor<T>| {
            if a.shape() == b.shape() {
                Ok(())
            } else {
                Err(mismatch(op, &[a.shape(), b.shape()]))
            }
        };
        let unary = |f: &dyn Fn(T) -> T| Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect());
        let out = match op {
            Op::Add | Op::Sub | Op::Mul | Op::Div => {
                let b = v(1);
                same(b)?;
                let data = match op {
                    Op::Add => zip_map(a.data(), b.data(), |x, y| x + y),
                    Op::Sub => zip_map(a.data(), b.data(), |x, y| x - y),
                    Op::Mul => zip_map(a.data(), b.data(), |x, y| x * y),
                    _ => zip_map(a.data(), b.data(), |x, y| x / y),
                };
                Tensor::from_parts(a.shape().to_vec(), data)
            }
            Op::ScalarMul(c) => unary(&|x| x * *c),
            Op::MatMul => {
                let b = v(1);
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(mismatch(op, &[a.shape(), b.shape()]));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                Tensor::from_parts(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))
            }
            Op::Affine => {
                let (w, b) = (v(1), v(2));
                if a.rank() != 2
                    || w.rank() != 2
                    || b.rank() != 1
                    || a.shape()[1] != w.shape()[0]
                    || w.shape()[1] != b.shape()[0]
                {
                    return Err(mismatch(op, &[a.shape(), w.shape(), b.shape()]));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], w.shape()[1]);
                let mut data = matmul_raw(a.data(), w.data(), m, k, n);
                for row in data.chunks_mut(n) {
                    for (o, &bv) in row.iter_mut().zip(b.data()) {
                        *o += bv;
                    }
                }
                Tensor::from_parts(vec![m, n], data)
            }
            Op::Relu => unary(&|x| if x > T::zero() { x } else { T::zero() }),
            Op::Conv2d { .. } => {
                let d = self.conv_dims(op, inputs)?;
                let data = conv_forward(a.data(), v(1).data(), v(2).data(), &d);
                Tensor::from_parts(vec![d.n, d.co, d.ho, d.wo], data)
            }
            Op::Flatten => {
                if a.rank() < 2 {
                    return Err(mismatch(op, &[a.shape()]));
                }
                let n = a.shape()[0];
                Tensor::from_parts(vec![n, a.numel() / n], a.data().to_vec())
            }
            Op::SoftmaxTau(tau) | Op::LogSoftmaxTau(tau) => {
                if !(*tau > T::zero()) {
                    return Err(TensorError::InvalidTemperature {
                        op: op.name(),
                        tau: tau.as_f64(),
                    });
                }
                if matches!(op, Op::SoftmaxTau(_)) {
                    softmax_values(a, *tau)
                } else {
                    log_softmax_values(a, *tau)
                }
            }
            Op::Sum => Tensor::scalar(a.data().iter().copied().sum()),
            Op::Mean => Tensor::scalar(a.data().iter().copied().sum::<T>() / T::lit(a.numel() as f64)),
            Op::SumRows => {
                let (_, c) = rows_of(a.shape());
                let data = a.data().chunks(c).map(|r| r.iter().copied().sum()).collect();
                Tensor::from_parts(reduced_shape(a.shape()), data)
            }
            Op::RowMax => {
                let (_, c) = rows_of(a.shape());
                let mut arg = Vec::new();
                let mut data = Vec::new();
                for row in a.data().chunks(c) {
                    let mut best = 0;
                    for (j, &x) in row.iter().enumerate() {
                        if x > row[best] {
                            best = j;
                        }
                    }
                    arg.push(best);
                    data.push(row[best]);
                }
                return Ok((Tensor::from_parts(reduced_shape(a.shape()), data), arg));
            }
            Op::Log => unary(&|x| x.ln()),
            Op::Exp => unary(&|x| x.exp()),
            Op::Abs => unary(&|x| x.abs()),
            Op::Square => unary(&|x| x * x),
            Op::Sqrt => unary(&|x| x.sqrt()),
            Op::Dot => {
                let b = v(1);
                same(b)?;
                Tensor::scalar(a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).sum())
            }
            Op::Clamp { lo, hi } => {
                if !(lo <= hi) {
                    return Err(TensorError::InvalidAttr {
                        op: op.name(),
                        detail: format!("empty range [{lo}, {hi}]"),
                    });
                }
                unary(&|x| x.max(*lo).min(*hi))
            }
        };
        Ok((out, Vec::new()))
    }

    fn conv_dims(&self, op: &Op<T>, inputs: &[NodeId]) -> Result<ConvDims, TensorError> {
        let Op::Conv2d { stride, padding } = *op else {
            unreachable!("conv_dims on non-conv op")
        };
        let x = self.nodes[inputs[0].0].value.shape();
        let w = self.nodes[inputs[1].0].value.shape();
        let b = self.nodes[inputs[2].0].value.shape();
        if x.len() != 4 || w.len() != 4 || b.len() != 1 || w[1] != x[1] || b[0] != w[0] || w[2] != w[3] {
            return Err(mismatch(op, &[x, w, b]));
        }
        if stride == 0 {
            return Err(TensorError::InvalidAttr {
                op: op.name(),
                detail: "stride must be at least 1".into(),
            });
        }
        let k = w[2];
        let (h, wd) = (x[2] + 2 * padding, x[3] + 2 * padding);
        if h < k || wd < k {
            return Err(mismatch(op, &[x, w, b]));
        }
        Ok(ConvDims {
            n: x[0],
            ci: x[1],
            h: x[2],
            w: x[3],
            co: w[0],
            k,
            ho: (h - k) / stride + 1,
            wo: (wd - k) / stride + 1,
            stride,
            pad: padding,
        })
    }

    /// Reverse sweep from a single-element root.
    pub fn backward(&self, root: NodeId) -> Result<GradientMap<T>, TensorError> {
        let rv = self.try_value(root)?;
        if rv.numel() != 1 {
            return Err(TensorError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(GradientMap { grads });
        }
        grads[root.0] = Some(Tensor::full(rv.shape().to_vec(), T::one()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = &node.op else { continue };
            let Some(g) = grads[idx].take() else { continue };
            if !g.is_finite() {
                return Err(TensorError::NonFiniteGradient(idx));
            }
            let contribs = self.input_grads(op, node, &g);
            grads[idx] = Some(g);
            for (slot, contrib) in contribs.into_iter().enumerate() {
                let Some(contrib) = contrib else { continue };
                let input = node.inputs[slot];
                assert!(input.0 < idx, "graph is not topologically ordered");
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib) {
                            *a += c;
                        }
                    }
                    empty => {
                        let shape = self.nodes[input.0].value.shape().to_vec();
                        *empty = Some(Tensor::from_parts(shape, contrib));
                    }
                }
            }
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && node.op.is_none() && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
            if let Some(g) = &grads[idx] {
                if !g.is_finite() {
                    return Err(TensorError::NonFiniteGradient(idx));
                }
            }
        }
        Ok(GradientMap { grads })
    }

    /// Gradient contributions to each input (None where the input is stop-gradient).
    fn input_grads(&self, op: &Op<T>, node: &Node<T>, g: &Tensor<T>) -> Vec<Option<Vec<T>>> {
        let inp = |i: usize| &self.nodes[node.inputs[i].0];
        let wants = |i: usize| inp(i).requires_grad;
        let val = |i: usize| inp(i).value.data();
        let gd = g.data();
        let out = node.value.data();
        let mut res: Vec<Option<Vec<T>>> = vec![None; node.inputs.len()];
        let mut set = |i: usize, f: &dyn Fn() -> Vec<T>| {
            if wants(i) {
                res[i] = Some(f());
            }
        };
        match op {
            Op::Add => {
                set(0, &|| gd.to_vec());
                set(1, &|| gd.to_vec());
            }
            Op::Sub => {
                set(0, &|| gd.to_vec());
                set(1, &|| gd.iter().map(|&x| -x).collect());
            }
            Op::ScalarMul(c) => set(0, &|| gd.iter().map(|&x| x * *c).collect()),
            Op::Mul => {
                set(0, &|| zip_map(gd, val(1), |g, b| g * b));
                set(1, &|| zip_map(gd, val(0), |g, a| g * a));
            }
            Op::Div => {
                set(0, &|| zip_map(gd, val(1), |g, b| g / b));
                set(1, &|| {
                    gd.iter()
                        .zip(val(0))
                        .zip(val(1))
                        .map(|((&g, &a), &b)| -g * a / (b * b))
                        .collect()
                });
            }
            Op::MatMul | Op::Affine => {
                let (m, k) = (inp(0).value.shape()[0], inp(0).value.shape()[1]);
                let n = inp(1).value.shape()[1];
                set(0, &|| matmul_bt(gd, val(1), m, k, n));
                set(1, &|| matmul_at(val(0), gd, m, k, n));
                if matches!(op, Op::Affine) {
                    set(2, &|| {
                        let mut db = vec![T::zero(); n];
                        for row in gd.chunks(n) {
                            for (d, &x) in db.iter_mut().zip(row) {
                                *d += x;
                            }
                        }
                        db
                    });
                }
            }
            Op::Relu => set(0, &|| zip_map(gd, val(0), |g, x| if x > T::zero() { g } else { T::zero() })),
            Op::Conv2d { .. } => {
                let d = self
                    .conv_dims(op, &node.inputs)
                    .expect("conv dims validated in forward");
                let (dx, dw, db) = conv_backward(val(0), val(1), gd, &d);
                if wants(0) {
                    res[0] = Some(dx);
                }
                if wants(1) {
                    res[1] = Some(dw);
                }
                if wants(2) {
                    res[2] = Some(db);
                }
            }
            Op::Flatten => set(0, &|| gd.to_vec()),
            Op::SoftmaxTau(tau) => set(0, &|| {
                let c = node.value.last_dim();
                let mut dz = Vec::with_capacity(gd.len());
                for (grow, yrow) in gd.chunks(c).zip(out.chunks(c)) {
                    let s: T = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                    dz.extend(grow.iter().zip(yrow).map(|(&g, &y)| y * (g - s) / *tau));
                }
                dz
            }),
            Op::LogSoftmaxTau(tau) => set(0, &|| {
                let c = node.value.last_dim();
                let mut dz = Vec::with_capacity(gd.len());
                for (grow, yrow) in gd.chunks(c).zip(out.chunks(c)) {
                    let s: T = grow.iter().copied().sum();
                    dz.extend(grow.iter().zip(yrow).map(|(&g, &y)| (g - y.exp() * s) / *tau));
                }
                dz
            }),
            Op::Sum => set(0, &|| vec![gd[0]; inp(0).value.numel()]),
            Op::Mean => set(0, &|| {
                let n = inp(0).value.numel();
                vec![gd[0] / T::lit(n as f64); n]
            }),
            Op::SumRows => set(0, &|| {
                let c = inp(0).value.last_dim();
                gd.iter().flat_map(|&x| std::iter::repeat_n(x, c)).collect()
            }),
            Op::RowMax => set(0, &|| {
                let c = inp(0).value.last_dim();
                let mut dz = vec![T::zero(); inp(0).value.numel()];
                for (r, (&j, &gv)) in node.aux.iter().zip(gd).enumerate() {
                    dz[r * c + j] = gv;
                }
                dz
            }),
            Op::Log => set(0, &|| zip_map(gd, val(0), |g, x| g / x)),
            Op::Exp => set(0, &|| zip_map(gd, out, |g, y| g * y)),
            Op::Abs => set(0, &|| zip_map(gd, val(0), |g, x| g * x.sign0())),
            Op::Square => set(0, &|| zip_map(gd, val(0), |g, x| T::lit(2.0) * x * g)),
            Op::Sqrt => set(0, &|| zip_map(gd, out, |g, y| g / (T::lit(2.0) * y))),
            Op::Dot => {
                set(0, &|| val(1).iter().map(|&b| gd[0] * b).collect());
                set(1, &|| val(0).iter().map(|&a| gd[0] * a).collect());
            }
            Op::Clamp { lo, hi } => set(0, &|| {
                zip_map(gd, val(0), |g, x| if x >= *lo && x <= *hi { g } else { T::zero() })
            }),
        }
        res
    }

    // Convenience wrappers, one per primitive.

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId, TensorError> {
        self.apply(Op::ScalarMul(c), &[a])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Div, &[a, b])
    }
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Affine, &[x, w, b])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Relu, &[a])
    }
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, TensorError> {
        self.apply(Op::Conv2d { stride, padding }, &[x, w, b])
    }
    pub fn flatten(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Flatten, &[a])
    }
    pub fn softmax(&mut self, a: NodeId, tau: T) -> Result<NodeId, TensorError> {
        self.apply(Op::SoftmaxTau(tau), &[a])
    }
    pub fn log_softmax(&mut self, a: NodeId, tau: T) -> Result<NodeId, TensorError> {
        self.apply(Op::LogSoftmaxTau(tau), &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Sum, &[a])
    }
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::SumRows, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Mean, &[a])
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Log, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Exp, &[a])
    }
    pub fn abs(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Abs, &[a])
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Square, &[a])
    }
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Sqrt, &[a])
    }
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::Dot, &[a, b])
    }
    pub fn clamp(&mut self, a: NodeId, lo: T, hi: T) -> Result<NodeId, TensorError> {
        self.apply(Op::Clamp { lo, hi }, &[a])
    }
    pub fn row_max(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.apply(Op::RowMax, &[a])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let z = g.constant(t(&[2], &[0.0, 0.0]));
        let p = g.softmax(z, 1.0).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_with_temperature() {
        let mut g = Graph::new();
        let z = g.constant(t(&[2], &[2.0, 0.0]));
        let p = g.softmax(z, 2.0).unwrap();
        let e = std::f64::consts::E;
        let want = [e / (e + 1.0), 1.0 / (e + 1.0)];
        for (a, b) in g.value(p).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((g.value(p).data()[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn temperature_must_be_positive() {
        let mut g = Graph::new();
        let z = g.constant(t(&[2], &[2.0, 0.0]));
        assert!(matches!(g.softmax(z, 0.0), Err(TensorError::InvalidTemperature { .. })));
        assert!(matches!(g.log_softmax(z, -1.0), Err(TensorError::InvalidTemperature { .. })));
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[-1.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = g.square(x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn relu_gradient_is_zero_at_and_below_zero() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[-1.0, 2.0, 0.0]));
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let m = g.mul(x, c).unwrap();
        let s = g.sum(m).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn detached_branch_propagates_nothing() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let sq = g.square(x).unwrap();
        let d = g.detach(sq).unwrap();
        let m = g.mul(x, d).unwrap();
        let s = g.sum(m).unwrap();
        let grads = g.backward(s).unwrap();
        // d/dx sum(x * stopgrad(x^2)) = x^2
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 4.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let err = g.add(a, b).unwrap_err();
        assert_eq!(err.to_string(), "add: incompatible shapes [[2], [3]]");
        let m = g.constant(t(&[2, 2], &[1.0; 4]));
        assert!(matches!(g.matmul(m, b), Err(TensorError::ShapeMismatch { op: "matmul", .. })));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarRoot(_))));
    }

    #[test]
    fn log_of_zero_is_surfaced() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[0.0, 2.0]));
        assert_eq!(g.log(x), Err(TensorError::NonFiniteOutput { op: "log" }));
    }

    #[test]
    fn row_max_breaks_ties_low() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[1.0, 5.0, 5.0, 2.0, 0.0, -1.0]));
        let m = g.row_max(x).unwrap();
        assert_eq!(g.value(m).data(), &[5.0, 2.0]);
        let s = g.sum(m).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.constant(t(&[1, 1, 3, 3], &k));
        let b = g.constant(t(&[1], &[0.5]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[1.5, 2.5, 3.5, 4.5]);
        let y2 = g.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.value(y2).shape(), &[1, 1, 1, 1]);
    }

    #[test]
    fn gradients_accumulate_over_fanout() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1], &[3.0]));
        let y = g.add(x, x).unwrap();
        let z = g.mul(y, x).unwrap(); // 2x^2
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[12.0]);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let build = || {
            let mut g = Graph::new();
            let x = g.leaf(t(&[2, 3], &[0.1, -0.4, 0.9, 1.3, -2.2, 0.05]));
            let w = g.leaf(t(&[3, 2], &[0.3, -0.1, 0.7, 0.2, -0.5, 0.8]));
            let b = g.leaf(t(&[2], &[0.01, -0.02]));
            let z = g.affine(x, w, b).unwrap();
            let l = g.log_softmax(z, 1.5).unwrap();
            let s = g.sum(l).unwrap();
            let gm = g.backward(s).unwrap();
            (g.value(s).clone(), gm.get(w).unwrap().clone())
        };
        let (a, ga) = build();
        let (b, gb) = build();
        assert!(a.bit_eq(&b) && ga.bit_eq(&gb));
    }

    #[test]
    fn works_in_single_precision() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new([3], vec![1.0f32, 2.0, 3.0]).unwrap());
        let sq = g.square(x).unwrap();
        let s = g.sum(sq).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[2.0f32, 4.0, 6.0]);
    }
}
