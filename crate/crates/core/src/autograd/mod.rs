//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes. Nodes are
//! appended in evaluation order, so node ids are already a topological
//! order and [`Graph::backward`] simply walks them in reverse. Gradients
//! flowing into a node from several consumers are summed in that fixed
//! order, which keeps results bit-reproducible.
//!
//! Named leaves created with [`Graph::param`] are the trainable parameters;
//! `backward` returns one gradient per name.

mod gradcheck;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::kernels::{self, Grouping};
use crate::scalar::Scalar;
use crate::tensor::{binary_kernel, broadcast_kind, BinaryOp, Broadcast, Shape, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Binary {
        op: BinaryOp,
        a: Var,
        b: Var,
        kind: Broadcast,
    },
    AddScalar(Var),
    MulScalar(Var, T),
    Neg(Var),
    Exp(Var),
    Sigmoid(Var),
    Clip01(Var),
    /// `e^{r0} / (e^{r0} + e^{r1})` of a `(1,1,1,2)` input.
    SoftmaxFirst(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    ConvTranspose2 {
        x: Var,
        w: Var,
        b: Var,
    },
    MaxPool2 {
        x: Var,
        arg: Vec<u8>,
    },
    Concat(Vec<Var>),
    Normalize {
        x: Var,
        grouping: Grouping,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    name: Option<String>,
}

/// Gradients keyed by parameter name, in registration order.
pub type Gradients<T> = IndexMap<String, Tensor<T>>;

/// Named parameter tensors in a fixed (insertion) order.
pub type ParamStore<T> = IndexMap<String, Tensor<T>>;

/// Records operations for a single forward/backward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, Var>,
    track_kinks: bool,
    kink_hash: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_PRIME: u64 = 0x100_0000_01b3;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: IndexMap::new(),
            track_kinks: false,
            kink_hash: 0xcbf2_9ce4_8422_2325,
        }
    }

    /// A graph that fingerprints every piecewise decision (ReLU sign,
    /// max-pool winner, clip region) so callers can tell whether two
    /// evaluations took the same smooth branch.
    pub fn with_kink_tracking() -> Self {
        Graph {
            track_kinks: true,
            ..Self::new()
        }
    }

    pub fn kink_signature(&self) -> u64 {
        self.kink_hash
    }

    fn mix_kink(&mut self, v: u64) {
        self.kink_hash = (self.kink_hash ^ v).wrapping_mul(FNV_PRIME);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a named trainable leaf.
    /// A named trainable leaf. Asking again for a name already in the graph
    /// returns the existing leaf and ignores `value`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        let name = name.into();
        if let Some(&v) = self.params.get(&name) {
            return v;
        }
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].name = Some(name.clone());
        self.params.insert(name, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let kind = broadcast_kind(av.shape(), bv.shape())?;
        if op == BinaryOp::Div && bv.data().iter().any(|v| v.is_zero()) {
            return Err(Error::DivisionByZero);
        }
        let out = Tensor::from_parts(av.shape(), binary_kernel(op, av.data(), bv.data(), kind));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Binary { op, a, b, kind }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::MulScalar(x, c), rg)
    }

    /// `c - x`.
    pub fn rsub_scalar(&mut self, c: T, x: Var) -> Var {
        let neg = self.neg(x);
        self.add_scalar(neg, c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| -v);
        let rg = self.rg(x);
        self.push(out, Op::Neg(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(T::exp);
        let rg = self.rg(x);
        self.push(out, Op::Exp(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// `min(max(x, 0), 1)`. The derivative is 1 strictly inside (0, 1) and 0
    /// elsewhere, including at the breakpoints themselves.
    pub fn clip01(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()).min(T::one()));
        if self.track_kinks {
            let sig: Vec<u64> = self
                .value(x)
                .data()
                .iter()
                .map(|&v| {
                    if v <= T::zero() {
                        0
                    } else if v >= T::one() {
                        2
                    } else {
                        1
                    }
                })
                .collect();
            for s in sig {
                self.mix_kink(s);
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Clip01(x), rg)
    }

    /// First softmax weight of a two-element `(1,1,1,2)` tensor.
    pub fn softmax_first(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != Shape::channels(2) {
            return Err(Error::InvalidShape {
                shape: xv.shape(),
                reason: "softmax weight expects a (1,1,1,2) pair".into(),
            });
        }
        let (r0, r1) = (xv.data()[0].as_f64(), xv.data()[1].as_f64());
        let w = softmax_first(r0, r1);
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(T::of(w)), Op::SoftmaxFirst(x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        if self.track_kinks {
            let mut h = self.kink_hash;
            for &v in self.value(x).data() {
                h = (h ^ (v > T::zero()) as u64).wrapping_mul(FNV_PRIME);
            }
            self.kink_hash = h;
        }
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Sum of all elements as a `(1,1,1,1)` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(T::of(s)), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / v.shape().numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(T::of(s)), Op::Mean(x), rg)
    }

    /// Same-padded stride-1 convolution; `w` is `(k,k,C_in,C_out)` with odd
    /// `k`, `b` is `(1,1,1,C_out)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = kernels::conv2d_forward(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Conv2d { x, w, b }, rg))
    }

    /// 2x2 stride-2 transposed convolution doubling H and W.
    pub fn conv_transpose2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = kernels::conv_transpose2_forward(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::ConvTranspose2 { x, w, b }, rg))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (out, arg) = kernels::max_pool2(self.value(x))?;
        if self.track_kinks {
            // ties are a kink too: record how many window entries hit the max
            let xv = self.value(x).clone();
            let s = xv.shape();
            let mut sig = Vec::with_capacity(arg.len());
            let mut idx = 0;
            for n in 0..s.n() {
                for i in 0..s.h() / 2 {
                    for j in 0..s.w() / 2 {
                        for c in 0..s.c() {
                            let m = out.data()[idx];
                            let ties = (0..4)
                                .filter(|k| xv.get(n, 2 * i + k / 2, 2 * j + k % 2, c) == m)
                                .count();
                            sig.push(arg[idx] as u64 | ((ties as u64) << 8));
                            idx += 1;
                        }
                    }
                }
            }
            for v in sig {
                self.mix_kink(v);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxPool2 { x, arg }, rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_channels(&tensors)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Population-statistics normalization `(x - mean) / sqrt(var + eps)`
    /// over the elements selected by `grouping`.
    pub fn normalize(&mut self, x: Var, grouping: Grouping, eps: f64) -> Result<Var> {
        let out = kernels::normalize_forward(self.value(x), grouping, eps)?;
        let rg = self.rg(x);
        Ok(self.push(
            out.y,
            Op::Normalize {
                x,
                grouping,
                inv_std: out.inv_std,
            },
            rg,
        ))
    }

    /// Mean per-pixel cross-entropy between `logits` `(N,H,W,K)` and integer
    /// `labels` (one per pixel, `N*H*W` of them).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = kernels::cross_entropy_forward(self.value(logits), labels)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(T::of(loss)),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Back-propagates from a scalar `loss`. Every named parameter gets an
    /// entry; parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_shape = self.shape(loss);
        if !loss_shape.is_scalar() {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let mut by_id: Vec<(usize, Tensor<T>)> = Vec::new();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if node.name.is_some() {
                by_id.push((id, g));
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        let mut out = Gradients::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.name {
                let g = by_id
                    .iter()
                    .position(|(i, _)| *i == id)
                    .map(|p| by_id.swap_remove(p).1)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, contrib: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                slot @ None => *slot = Some(contrib),
                Some(existing) => {
                    for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                        *e = *e + *c;
                    }
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary { op, a, b, kind } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (da, db_full) = match op {
                    BinaryOp::Add => (g.clone(), self.rg(*b).then(|| g.clone())),
                    BinaryOp::Sub => (g.clone(), self.rg(*b).then(|| g.map(|v| -v))),
                    BinaryOp::Mul => (
                        Tensor::from_parts(g.shape(), binary_kernel(BinaryOp::Mul, g.data(), bv.data(), *kind)),
                        self.rg(*b)
                            .then(|| Tensor::from_parts(g.shape(), zip(g.data(), av.data(), |gi, ai| gi * ai))),
                    ),
                    BinaryOp::Div => {
                        let da = Tensor::from_parts(g.shape(), binary_kernel(BinaryOp::Div, g.data(), bv.data(), *kind));
                        // d(a/b)/db = -out/b, with out = a/b
                        let db = self.rg(*b).then(|| {
                            let ob = binary_kernel(BinaryOp::Div, node.value.data(), bv.data(), *kind);
                            Tensor::from_parts(g.shape(), zip(g.data(), &ob, |gi, q| -gi * q))
                        });
                        (da, db)
                    }
                };
                acc(*a, da);
                if let Some(db_full) = db_full {
                    acc(*b, reduce_broadcast(&db_full, bv.shape(), *kind));
                }
            }
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::MulScalar(x, c) => acc(*x, g.map(|v| v * *c)),
            Op::Neg(x) => acc(*x, g.map(|v| -v)),
            Op::Exp(x) => acc(*x, Tensor::from_parts(g.shape(), zip(g.data(), node.value.data(), |gi, y| gi * y))),
            Op::Sigmoid(x) => acc(
                *x,
                Tensor::from_parts(g.shape(), zip(g.data(), node.value.data(), |gi, y| gi * y * (T::one() - y))),
            ),
            Op::Clip01(x) => {
                let xv = self.value(*x);
                acc(
                    *x,
                    Tensor::from_parts(
                        g.shape(),
                        zip(g.data(), xv.data(), |gi, v| {
                            if v > T::zero() && v < T::one() {
                                gi
                            } else {
                                T::zero()
                            }
                        }),
                    ),
                )
            }
            Op::SoftmaxFirst(x) => {
                let w = node.value.item();
                let d = g.item() * w * (T::one() - w);
                acc(*x, Tensor::from_parts(Shape::channels(2), vec![d, -d]));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                acc(
                    *x,
                    Tensor::from_parts(
                        g.shape(),
                        zip(g.data(), xv.data(), |gi, v| if v > T::zero() { gi } else { T::zero() }),
                    ),
                )
            }
            Op::Sum(x) => acc(*x, Tensor::full(self.shape(*x), g.item())),
            Op::Mean(x) => {
                let s = self.shape(*x);
                acc(*x, Tensor::full(s, g.item() / T::of(s.numel() as f64)))
            }
            Op::Conv2d { x, w, b } => {
                let grads = kernels::conv2d_backward(self.value(*x), self.value(*w), g, self.rg(*x));
                if let Some(dx) = grads.dx {
                    acc(*x, dx);
                }
                acc(*w, grads.dw);
                acc(*b, grads.db);
            }
            Op::ConvTranspose2 { x, w, b } => {
                let grads = kernels::conv_transpose2_backward(self.value(*x), self.value(*w), g, self.rg(*x));
                if let Some(dx) = grads.dx {
                    acc(*x, dx);
                }
                acc(*w, grads.dw);
                acc(*b, grads.db);
            }
            Op::MaxPool2 { x, arg } => acc(*x, kernels::max_pool2_backward(self.shape(*x), arg, g)),
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.shape(p).c();
                    if self.rg(p) {
                        acc(p, g.slice_channels(start, c).expect("concat slice in range"));
                    }
                    start += c;
                }
            }
            Op::Normalize { x, grouping, inv_std } => {
                acc(*x, kernels::normalize_backward(&node.value, inv_std, *grouping, g))
            }
            Op::CrossEntropy { logits, labels, probs } => acc(
                *logits,
                kernels::cross_entropy_backward(self.shape(*logits), probs, labels, g.item().as_f64()),
            ),
        }
    }
}

fn zip<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn reduce_broadcast<T: Scalar>(g: &Tensor<T>, target: Shape, kind: Broadcast) -> Tensor<T> {
    match kind {
        Broadcast::Same => g.clone(),
        Broadcast::Scalar => Tensor::scalar(T::of(g.sum())),
        Broadcast::Channel => {
            let c = target.c();
            let mut acc = vec![0.0f64; c];
            for row in g.data().chunks_exact(c) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v.as_f64();
                }
            }
            Tensor::from_parts(target, acc.into_iter().map(T::of).collect())
        }
    }
}

/// Logistic function `1 / (e^{-x} + 1)`.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / ((-x).exp() + T::one())
}

/// `e^{a} / (e^{a} + e^{b})`, evaluated without overflow.
pub fn softmax_first(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    let ea = (a - m).exp();
    ea / (ea + (b - m).exp())
}
