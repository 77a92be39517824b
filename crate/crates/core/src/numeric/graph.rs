//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every forward primitive in creation order, which is a
//! topological order, so `backward` is a single reverse sweep. Nodes that do
//! not depend on any trainable leaf keep no backward state.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numeric::kernels::{self, ConvGeom, NormStats};
use crate::numeric::tensor::{numel, Tensor};
use crate::numeric::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Silu,
    Sigmoid,
    Tanh,
    Softplus,
    Exp,
}

impl UnaryKind {
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            UnaryKind::Relu => x.max(T::zero()),
            UnaryKind::Silu => kernels::silu(x),
            UnaryKind::Sigmoid => kernels::sigmoid(x),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Softplus => kernels::softplus(x),
            UnaryKind::Exp => x.exp(),
        }
    }

    fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            UnaryKind::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            UnaryKind::Silu => {
                let s = kernels::sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            UnaryKind::Sigmoid => y * (T::one() - y),
            UnaryKind::Tanh => T::one() - y * y,
            UnaryKind::Softplus => kernels::sigmoid(x),
            UnaryKind::Exp => y,
        }
    }
}

/// Which axes a normalization reduces over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    /// Last axis of a `rows×dim` array; affine parameters have length `dim`.
    Layer,
    /// Spatial axes of a `C×H×W` array; affine parameters have length `C`.
    Instance,
}

/// Normalization epsilon shared by layer and instance norm.
pub const NORM_EPS: f64 = 1e-5;

/// A primitive defined outside this module with its own vector-Jacobian product.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input; entries where `needs[i]` is false may be `None`.
    fn backward(&self, inputs: &[&[T]], output: &[T], grad_out: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Unary(usize, UnaryKind),
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    AddRowBias { x: usize, b: usize, cols: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom, out_c: usize },
    ConvTranspose2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom, in_c: usize },
    CausalConv1d { x: usize, w: usize, b: Option<usize>, len: usize, dim: usize, width: usize },
    Norm { x: usize, gamma: Option<usize>, beta: Option<usize>, kind: NormKind, groups: usize, len: usize, stats: NormStats<T> },
    Resize { x: usize, c: usize, h: usize, w: usize, oh: usize, ow: usize },
    Concat(Vec<usize>),
    Reshape(usize),
    Transpose { x: usize, rows: usize, cols: usize },
    ReverseRows { x: usize, rows: usize, cols: usize },
    MaxPool2 { x: usize, argmax: Vec<usize> },
    ChannelMean { x: usize, c: usize, plane: usize },
    Sum(usize),
    Mean(usize),
    SoftmaxRows { x: usize, rows: usize, cols: usize },
    Custom { inputs: Vec<usize>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Real> {
    shape: Vec<usize>,
    value: Rc<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a forward computation.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Vec<T>>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), grads: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[usize]) -> Var<'_, T> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node { shape, value: Rc::new(value), op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn leaf_raw(&self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, value: Rc::new(value), op: Op::Leaf, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// Adds a leaf whose gradient is tracked iff `tensor.requires_grad`.
    pub fn leaf(&self, tensor: &Tensor<T>) -> Var<'_, T> {
        self.leaf_raw(tensor.shape.clone(), tensor.data.clone(), tensor.requires_grad)
    }

    pub fn constant(&self, shape: &[usize], data: Vec<T>) -> Result<Var<'_, T>> {
        check_len("constant", shape, data.len())?;
        Ok(self.leaf_raw(shape.to_vec(), data, false))
    }

    pub fn param(&self, shape: &[usize], data: Vec<T>) -> Result<Var<'_, T>> {
        check_len("param", shape, data.len())?;
        Ok(self.leaf_raw(shape.to_vec(), data, true))
    }

    /// Records a custom primitive whose forward value was computed by the caller.
    pub fn custom<'g>(
        &'g self,
        inputs: &[Var<'g, T>],
        shape: Vec<usize>,
        value: Vec<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Result<Var<'g, T>> {
        check_len(op.name(), &shape, value.len())?;
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        Ok(self.push(shape, value, Op::Custom { inputs: ids.clone(), op }, &ids))
    }

    fn value(&self, id: usize) -> Rc<Vec<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn shape(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    /// Populates gradients for every leaf reachable from `loss` that requires them.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        let mut grads = self.grads.borrow_mut();
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        if !root.requires_grad {
            return Ok(());
        }
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let Some(gout) = grads[id].take() else { continue };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(gout);
                continue;
            }
            propagate(&nodes, id, &gout, &mut grads);
        }
        Ok(())
    }
}

fn check_len(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if numel(shape) != len {
        return Err(Error::shape(op, format!("shape {shape:?} needs {} elements, got {len}", numel(shape))));
    }
    Ok(())
}

fn accumulate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], id: usize, g: Vec<T>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(g) {
                *e = *e + v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn needs<T: Real>(nodes: &[Node<T>], id: usize) -> bool {
    nodes[id].requires_grad
}

fn propagate<T: Real>(nodes: &[Node<T>], id: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    let val = |i: usize| -> &[T] { nodes[i].value.as_slice() };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, gout.to_vec());
            accumulate(nodes, grads, *b, gout.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, gout.to_vec());
            if needs(nodes, *b) {
                accumulate(nodes, grads, *b, gout.iter().map(|&g| -g).collect());
            }
        }
        Op::Mul(a, b) => {
            if needs(nodes, *a) {
                let g = gout.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect();
                accumulate(nodes, grads, *a, g);
            }
            if needs(nodes, *b) {
                let g = gout.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect();
                accumulate(nodes, grads, *b, g);
            }
        }
        Op::Scale(a, s) => accumulate(nodes, grads, *a, gout.iter().map(|&g| g * *s).collect()),
        Op::AddScalar(a) => accumulate(nodes, grads, *a, gout.to_vec()),
        Op::Unary(a, kind) => {
            let x = val(*a);
            let y = node.value.as_slice();
            let g = gout.iter().zip(x.iter().zip(y)).map(|(&g, (&x, &y))| g * kind.derivative(x, y)).collect();
            accumulate(nodes, grads, *a, g);
        }
        Op::MatMul { a, b, m, k, n } => {
            if needs(nodes, *a) {
                let mut da = vec![T::zero(); m * k];
                T::gemm(false, true, *m, *n, *k, T::one(), gout, val(*b), T::zero(), &mut da);
                accumulate(nodes, grads, *a, da);
            }
            if needs(nodes, *b) {
                let mut db = vec![T::zero(); k * n];
                T::gemm(true, false, *k, *m, *n, T::one(), val(*a), gout, T::zero(), &mut db);
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::AddRowBias { x, b, cols } => {
            accumulate(nodes, grads, *x, gout.to_vec());
            if needs(nodes, *b) {
                let mut db = vec![T::zero(); *cols];
                for row in gout.chunks(*cols) {
                    for (d, &g) in db.iter_mut().zip(row) {
                        *d = *d + g;
                    }
                }
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Conv2d { x, w, b, geom, out_c } => {
            let need = (needs(nodes, *x), needs(nodes, *w), b.is_some_and(|b| needs(nodes, b)));
            let r = kernels::conv2d_backward(val(*x), val(*w), gout, *out_c, geom, need);
            if let Some(dx) = r.dx {
                accumulate(nodes, grads, *x, dx);
            }
            if let Some(dw) = r.dw {
                accumulate(nodes, grads, *w, dw);
            }
            if let (Some(b), Some(db)) = (b, r.db) {
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::ConvTranspose2d { x, w, b, geom, in_c } => {
            let need = (needs(nodes, *x), needs(nodes, *w), b.is_some_and(|b| needs(nodes, b)));
            let r = kernels::conv_transpose2d_backward(val(*x), val(*w), gout, *in_c, geom, need);
            if let Some(dx) = r.dx {
                accumulate(nodes, grads, *x, dx);
            }
            if let Some(dw) = r.dw {
                accumulate(nodes, grads, *w, dw);
            }
            if let (Some(b), Some(db)) = (b, r.db) {
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::CausalConv1d { x, w, b, len, dim, width } => {
            let (dx, dw, db) = kernels::causal_conv1d_backward(val(*x), val(*w), gout, *len, *dim, *width);
            accumulate(nodes, grads, *x, dx);
            accumulate(nodes, grads, *w, dw);
            if let Some(b) = b {
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Norm { x, gamma, beta, kind, groups, len, stats } => {
            let param_len = match kind {
                NormKind::Layer => *len,
                NormKind::Instance => *groups,
            };
            let pidx = |gi: usize, i: usize| match kind {
                NormKind::Layer => i,
                NormKind::Instance => gi,
            };
            let gam = gamma.map(val);
            if needs(nodes, *x) {
                let mut dxhat = gout.to_vec();
                if let Some(gam) = gam {
                    for gi in 0..*groups {
                        for i in 0..*len {
                            let j = gi * len + i;
                            dxhat[j] = dxhat[j] * gam[pidx(gi, i)];
                        }
                    }
                }
                let dx = kernels::normalize_groups_backward(stats, &dxhat, *groups, *len);
                accumulate(nodes, grads, *x, dx);
            }
            if let Some(gid) = gamma {
                let mut dg = vec![T::zero(); param_len];
                for gi in 0..*groups {
                    for i in 0..*len {
                        let j = gi * len + i;
                        let p = pidx(gi, i);
                        dg[p] = dg[p] + gout[j] * stats.xhat[j];
                    }
                }
                accumulate(nodes, grads, *gid, dg);
            }
            if let Some(bid) = beta {
                let mut db = vec![T::zero(); param_len];
                for gi in 0..*groups {
                    for i in 0..*len {
                        let p = pidx(gi, i);
                        db[p] = db[p] + gout[gi * len + i];
                    }
                }
                accumulate(nodes, grads, *bid, db);
            }
        }
        Op::Resize { x, c, h, w, oh, ow } => {
            accumulate(nodes, grads, *x, kernels::bilinear_backward(gout, *c, *h, *w, *oh, *ow));
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.len();
                accumulate(nodes, grads, p, gout[offset..offset + n].to_vec());
                offset += n;
            }
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, gout.to_vec()),
        Op::Transpose { x, rows, cols } => {
            let mut dx = vec![T::zero(); rows * cols];
            for r in 0..*rows {
                for c in 0..*cols {
                    dx[r * cols + c] = gout[c * rows + r];
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::ReverseRows { x, rows, cols } => {
            let mut dx = vec![T::zero(); rows * cols];
            for r in 0..*rows {
                dx[r * cols..(r + 1) * cols].copy_from_slice(&gout[(rows - 1 - r) * cols..(rows - r) * cols]);
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::MaxPool2 { x, argmax } => {
            let mut dx = vec![T::zero(); nodes[*x].value.len()];
            for (&src, &g) in argmax.iter().zip(gout) {
                dx[src] = dx[src] + g;
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::ChannelMean { x, c, plane } => {
            let inv = T::one() / T::from_usize(*c).unwrap();
            let mut dx = Vec::with_capacity(c * plane);
            for _ in 0..*c {
                dx.extend(gout.iter().map(|&g| g * inv));
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Sum(a) => accumulate(nodes, grads, *a, vec![gout[0]; nodes[*a].value.len()]),
        Op::Mean(a) => {
            let n = nodes[*a].value.len();
            let g = gout[0] / T::from_usize(n).unwrap();
            accumulate(nodes, grads, *a, vec![g; n]);
        }
        Op::SoftmaxRows { x, rows, cols } => {
            let y = node.value.as_slice();
            let mut dx = vec![T::zero(); rows * cols];
            for r in 0..*rows {
                let yr = &y[r * cols..(r + 1) * cols];
                let gr = &gout[r * cols..(r + 1) * cols];
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for c in 0..*cols {
                    dx[r * cols + c] = yr[c] * (gr[c] - dot);
                }
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Custom { inputs, op } => {
            let ins: Vec<&[T]> = inputs.iter().map(|&i| val(i)).collect();
            let need: Vec<bool> = inputs.iter().map(|&i| needs(nodes, i)).collect();
            let gs = op.backward(&ins, node.value.as_slice(), gout, &need);
            for ((&i, g), n) in inputs.iter().zip(gs).zip(need) {
                if let (Some(g), true) = (g, n) {
                    debug_assert_eq!(g.len(), nodes[i].value.len(), "{} gradient length", op.name());
                    accumulate(nodes, grads, i, g);
                }
            }
        }
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
    }
    Ok(())
}

fn dims3(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(Error::shape(op, format!("expected C×H×W, got {shape:?}"))),
    }
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::shape(op, format!("expected a 2-D array, got {shape:?}"))),
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.shape(self.id)
    }

    pub fn value(&self) -> Rc<Vec<T>> {
        self.graph.value(self.id)
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor { shape: self.shape(), data: self.value().as_ref().clone(), requires_grad: false, grad: None }
    }

    /// Value of a single-element node.
    pub fn item(&self) -> T {
        self.value()[0]
    }

    /// Gradient populated by the last `backward`, if this node is a tracked leaf.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.graph.grads.borrow().get(self.id).and_then(|g| g.clone())
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[usize]) -> Var<'g, T> {
        self.graph.push(shape, value, op, inputs)
    }

    pub fn add(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        same_shape("add", self, &other)?;
        let (a, b) = (self.value(), other.value());
        let v = a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect();
        Ok(self.push(self.shape(), v, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    pub fn sub(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        same_shape("sub", self, &other)?;
        let (a, b) = (self.value(), other.value());
        let v = a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect();
        Ok(self.push(self.shape(), v, Op::Sub(self.id, other.id), &[self.id, other.id]))
    }

    pub fn mul(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        same_shape("mul", self, &other)?;
        let (a, b) = (self.value(), other.value());
        let v = a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect();
        Ok(self.push(self.shape(), v, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn scale(&self, s: T) -> Var<'g, T> {
        let v = self.value().iter().map(|&x| x * s).collect();
        self.push(self.shape(), v, Op::Scale(self.id, s), &[self.id])
    }

    pub fn add_scalar(&self, s: T) -> Var<'g, T> {
        let v = self.value().iter().map(|&x| x + s).collect();
        self.push(self.shape(), v, Op::AddScalar(self.id), &[self.id])
    }

    pub fn unary(&self, kind: UnaryKind) -> Var<'g, T> {
        let v = self.value().iter().map(|&x| kind.apply(x)).collect();
        self.push(self.shape(), v, Op::Unary(self.id, kind), &[self.id])
    }

    pub fn relu(&self) -> Var<'g, T> {
        self.unary(UnaryKind::Relu)
    }

    pub fn silu(&self) -> Var<'g, T> {
        self.unary(UnaryKind::Silu)
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn tanh(&self) -> Var<'g, T> {
        self.unary(UnaryKind::Tanh)
    }

    pub fn softplus(&self) -> Var<'g, T> {
        self.unary(UnaryKind::Softplus)
    }

    pub fn exp(&self) -> Var<'g, T> {
        self.unary(UnaryKind::Exp)
    }

    /// `rows×k · k×n` matrix product.
    pub fn matmul(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (m, k) = dims2("matmul", &self.shape())?;
        let (k2, n) = dims2("matmul", &other.shape())?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dims {k} vs {k2}")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(false, false, m, k, n, T::one(), &self.value(), &other.value(), T::zero(), &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMul { a: self.id, b: other.id, m, k, n }, &[self.id, other.id]))
    }

    /// Adds a length-`cols` vector to every row of a `rows×cols` array.
    pub fn add_row_bias(&self, bias: Var<'g, T>) -> Result<Var<'g, T>> {
        let (_, cols) = dims2("add_row_bias", &self.shape())?;
        if bias.shape() != [cols] {
            return Err(Error::shape("add_row_bias", format!("bias {:?} for {cols} columns", bias.shape())));
        }
        let b = bias.value();
        let mut v = self.value().as_ref().clone();
        for row in v.chunks_mut(cols) {
            for (x, &bb) in row.iter_mut().zip(b.iter()) {
                *x = *x + bb;
            }
        }
        Ok(self.push(self.shape(), v, Op::AddRowBias { x: self.id, b: bias.id, cols }, &[self.id, bias.id]))
    }

    /// `x·W + b` for a `rows×in` input and `in×out` weight.
    pub fn linear(&self, weight: Var<'g, T>, bias: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let y = self.matmul(weight)?;
        match bias {
            Some(b) => y.add_row_bias(b),
            None => Ok(y),
        }
    }

    /// 2-D convolution of a `C_in×H×W` input with a `C_out×C_in×k×k` kernel.
    pub fn conv2d(&self, kernel: Var<'g, T>, bias: Option<Var<'g, T>>, stride: usize, pad: usize) -> Result<Var<'g, T>> {
        let (c, h, w) = dims3("conv2d", &self.shape())?;
        let ks = kernel.shape();
        let [oc, ic, kh, kw] = ks[..] else {
            return Err(Error::shape("conv2d", format!("kernel must be 4-D, got {ks:?}")));
        };
        if ic != c {
            return Err(Error::shape("conv2d", format!("input channels {c} but kernel expects {ic}")));
        }
        if kh != kw || kh == 0 {
            return Err(Error::shape("conv2d", format!("kernel must be square and non-empty, got {kh}×{kw}")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be ≥ 1"));
        }
        let (Some(oh), Some(ow)) = (kernels::conv_out_dim(h, kh, stride, pad), kernels::conv_out_dim(w, kh, stride, pad)) else {
            return Err(Error::shape("conv2d", format!("kernel {kh} larger than padded input {h}×{w} (pad {pad})")));
        };
        if let Some(b) = &bias {
            if b.shape() != [oc] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {oc} output channels", b.shape())));
            }
        }
        let geom = ConvGeom { channels: c, height: h, width: w, kernel: kh, stride, pad, out_h: oh, out_w: ow };
        let bv = bias.map(|b| b.value());
        let out = kernels::conv2d_forward(&self.value(), &kernel.value(), bv.as_deref().map(|v| v.as_slice()), oc, &geom);
        let mut inputs = vec![self.id, kernel.id];
        inputs.extend(bias.map(|b| b.id));
        let op = Op::Conv2d { x: self.id, w: kernel.id, b: bias.map(|b| b.id), geom, out_c: oc };
        Ok(self.push(vec![oc, oh, ow], out, op, &inputs))
    }

    /// Transposed 2-D convolution of a `C_in×H×W` input with a `C_in×C_out×k×k` kernel.
    /// Output extent is `(H-1)·stride + k - 2·pad`.
    pub fn conv_transpose2d(&self, kernel: Var<'g, T>, bias: Option<Var<'g, T>>, stride: usize, pad: usize) -> Result<Var<'g, T>> {
        let (c, h, w) = dims3("conv_transpose2d", &self.shape())?;
        let ks = kernel.shape();
        let [ic, oc, kh, kw] = ks[..] else {
            return Err(Error::shape("conv_transpose2d", format!("kernel must be 4-D, got {ks:?}")));
        };
        if ic != c {
            return Err(Error::shape("conv_transpose2d", format!("input channels {c} but kernel expects {ic}")));
        }
        if kh != kw || kh == 0 || stride == 0 {
            return Err(Error::shape("conv_transpose2d", format!("bad kernel {kh}×{kw} or stride {stride}")));
        }
        let (Some(oh), Some(ow)) = (
            kernels::conv_transpose_out_dim(h, kh, stride, pad),
            kernels::conv_transpose_out_dim(w, kh, stride, pad),
        ) else {
            return Err(Error::shape("conv_transpose2d", format!("padding {pad} too large for kernel {kh}")));
        };
        if oh == 0 || ow == 0 || kernels::conv_out_dim(oh, kh, stride, pad) != Some(h) {
            return Err(Error::shape("conv_transpose2d", format!("inconsistent geometry for {h}×{w} input")));
        }
        if let Some(b) = &bias {
            if b.shape() != [oc] {
                return Err(Error::shape("conv_transpose2d", format!("bias {:?} for {oc} output channels", b.shape())));
            }
        }
        let geom = ConvGeom { channels: oc, height: oh, width: ow, kernel: kh, stride, pad, out_h: h, out_w: w };
        let bv = bias.map(|b| b.value());
        let out = kernels::conv_transpose2d_forward(&self.value(), &kernel.value(), bv.as_deref().map(|v| v.as_slice()), ic, &geom);
        let mut inputs = vec![self.id, kernel.id];
        inputs.extend(bias.map(|b| b.id));
        let op = Op::ConvTranspose2d { x: self.id, w: kernel.id, b: bias.map(|b| b.id), geom, in_c: ic };
        Ok(self.push(vec![oc, oh, ow], out, op, &inputs))
    }

    /// Per-channel causal convolution of a `T×D` sequence with a `D×width` kernel.
    pub fn causal_conv1d(&self, kernel: Var<'g, T>, bias: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let (len, dim) = dims2("conv1d_causal_depthwise", &self.shape())?;
        let (kd, width) = dims2("conv1d_causal_depthwise", &kernel.shape())?;
        if kd != dim {
            return Err(Error::shape("conv1d_causal_depthwise", format!("kernel has {kd} channels, sequence has {dim}")));
        }
        if width == 0 {
            return Err(Error::invalid("conv1d_causal_depthwise", "kernel width must be ≥ 1"));
        }
        if let Some(b) = &bias {
            if b.shape() != [dim] {
                return Err(Error::shape("conv1d_causal_depthwise", format!("bias {:?} for {dim} channels", b.shape())));
            }
        }
        let bv = bias.map(|b| b.value());
        let out = kernels::causal_conv1d_forward(&self.value(), &kernel.value(), bv.as_deref().map(|v| v.as_slice()), len, dim, width);
        let mut inputs = vec![self.id, kernel.id];
        inputs.extend(bias.map(|b| b.id));
        let op = Op::CausalConv1d { x: self.id, w: kernel.id, b: bias.map(|b| b.id), len, dim, width };
        Ok(self.push(vec![len, dim], out, op, &inputs))
    }

    /// Layer or instance normalization with optional affine gain and bias.
    pub fn normalize(&self, kind: NormKind, gain: Option<Var<'g, T>>, bias: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let (groups, len) = match kind {
            NormKind::Layer => {
                let (r, c) = dims2("layer_norm", &shape)?;
                (r, c)
            }
            NormKind::Instance => {
                let (c, h, w) = dims3("instance_norm", &shape)?;
                (c, h * w)
            }
        };
        if len == 0 {
            return Err(Error::shape("normalize", "normalized axis is empty"));
        }
        let plen = match kind {
            NormKind::Layer => len,
            NormKind::Instance => groups,
        };
        for p in gain.iter().chain(bias.iter()) {
            if p.shape() != [plen] {
                return Err(Error::shape("normalize", format!("affine parameter {:?}, expected [{plen}]", p.shape())));
            }
        }
        let stats = kernels::normalize_groups(&self.value(), groups, len, T::lit(NORM_EPS));
        let gv = gain.map(|g| g.value());
        let bv = bias.map(|b| b.value());
        let mut out = stats.xhat.clone();
        for gi in 0..groups {
            for i in 0..len {
                let p = if kind == NormKind::Layer { i } else { gi };
                let j = gi * len + i;
                if let Some(g) = &gv {
                    out[j] = out[j] * g[p];
                }
                if let Some(b) = &bv {
                    out[j] = out[j] + b[p];
                }
            }
        }
        let mut inputs = vec![self.id];
        inputs.extend(gain.map(|g| g.id));
        inputs.extend(bias.map(|b| b.id));
        let op = Op::Norm { x: self.id, gamma: gain.map(|g| g.id), beta: bias.map(|b| b.id), kind, groups, len, stats };
        Ok(self.push(shape, out, op, &inputs))
    }

    /// Bilinear resize of a `C×H×W` array with half-pixel centers.
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Result<Var<'g, T>> {
        let (c, h, w) = dims3("bilinear_resize", &self.shape())?;
        if oh == 0 || ow == 0 {
            return Err(Error::invalid("bilinear_resize", "target size must be ≥ 1"));
        }
        let out = kernels::bilinear_forward(&self.value(), c, h, w, oh, ow);
        Ok(self.push(vec![c, oh, ow], out, Op::Resize { x: self.id, c, h, w, oh, ow }, &[self.id]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        if numel(shape) != numel(&self.shape()) {
            return Err(Error::shape("reshape", format!("{:?} into {shape:?}", self.shape())));
        }
        Ok(self.push(shape.to_vec(), self.value().as_ref().clone(), Op::Reshape(self.id), &[self.id]))
    }

    pub fn transpose(&self) -> Result<Var<'g, T>> {
        let (rows, cols) = dims2("transpose", &self.shape())?;
        let v = self.value();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = v[r * cols + c];
            }
        }
        Ok(self.push(vec![cols, rows], out, Op::Transpose { x: self.id, rows, cols }, &[self.id]))
    }

    /// Reverses the order of rows (sequence positions) of a `T×D` array.
    pub fn reverse_rows(&self) -> Result<Var<'g, T>> {
        let (rows, cols) = dims2("reverse_rows", &self.shape())?;
        let v = self.value();
        let mut out = Vec::with_capacity(rows * cols);
        for r in (0..rows).rev() {
            out.extend_from_slice(&v[r * cols..(r + 1) * cols]);
        }
        Ok(self.push(vec![rows, cols], out, Op::ReverseRows { x: self.id, rows, cols }, &[self.id]))
    }

    /// 2×2 max pooling with stride 2 on a `C×H×W` array with even `H`, `W`.
    pub fn max_pool2(&self) -> Result<Var<'g, T>> {
        let (c, h, w) = dims3("max_pool2", &self.shape())?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("max_pool2", format!("spatial dims {h}×{w} must be even")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let v = self.value();
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = ch * h * w + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ch * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                        if v[idx] > v[best] {
                            best = idx;
                        }
                    }
                    out.push(v[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.push(vec![c, oh, ow], out, Op::MaxPool2 { x: self.id, argmax }, &[self.id]))
    }

    /// Mean over the leading (channel) axis of a `C×H×W` array, giving `1×H×W`.
    pub fn channel_mean(&self) -> Result<Var<'g, T>> {
        let (c, h, w) = dims3("channel_mean", &self.shape())?;
        if c == 0 {
            return Err(Error::shape("channel_mean", "no channels"));
        }
        let plane = h * w;
        let v = self.value();
        let inv = T::one() / T::from_usize(c).unwrap();
        let out = (0..plane)
            .map(|i| (0..c).map(|ch| v[ch * plane + i]).sum::<T>() * inv)
            .collect();
        Ok(self.push(vec![1, h, w], out, Op::ChannelMean { x: self.id, c, plane }, &[self.id]))
    }

    pub fn sum(&self) -> Var<'g, T> {
        let s = self.value().iter().copied().sum();
        self.push(vec![], vec![s], Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Var<'g, T> {
        let v = self.value();
        let s = v.iter().copied().sum::<T>() / T::from_usize(v.len().max(1)).unwrap();
        self.push(vec![], vec![s], Op::Mean(self.id), &[self.id])
    }

    /// Row-wise softmax of a 2-D array.
    pub fn softmax_rows(&self) -> Result<Var<'g, T>> {
        let (rows, cols) = dims2("softmax", &self.shape())?;
        let v = self.value();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &v[r * cols..(r + 1) * cols];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for c in 0..cols {
                let e = (row[c] - mx).exp();
                out[r * cols + c] = e;
                s = s + e;
            }
            for c in 0..cols {
                out[r * cols + c] = out[r * cols + c] / s;
            }
        }
        Ok(self.push(vec![rows, cols], out, Op::SoftmaxRows { x: self.id, rows, cols }, &[self.id]))
    }
}

/// Concatenates along the leading axis; all trailing dims must agree.
pub fn concat<'g, T: Real>(parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
    let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
    let tail = first.shape()[1..].to_vec();
    let mut lead = 0;
    let mut data = Vec::new();
    for p in parts {
        let s = p.shape();
        if s.is_empty() || s[1..] != tail[..] {
            return Err(Error::shape("concat", format!("{s:?} does not match trailing dims {tail:?}")));
        }
        lead += s[0];
        data.extend_from_slice(&p.value());
    }
    let mut shape = vec![lead];
    shape.extend(tail);
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    Ok(first.graph.push(shape, data, Op::Concat(ids.clone()), &ids))
}
