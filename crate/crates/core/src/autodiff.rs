//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only list of nodes. Every op pushes a node whose
//! inputs already exist, so node order is a topological order and backward is
//! a single reverse sweep.
//!
//! ```
//! use early_exit::autodiff::Graph;
//! use early_exit::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let p = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let sq = g.mul(p, p).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(p).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::{broadcast_kind, softmax, Broadcast, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    CrossEntropyRows(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    SumRows(Var),
    Sum(Var),
    Mean(Var),
    Scale(Var, f64),
    AddScalar(Var),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
}

/// A single-threaded computation graph. Separate graphs share nothing.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value from {op:?}");
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated adjoint of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Accumulated adjoint of `v`, or zeros shaped like its value.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), value, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.needs(a);
        self.push(Op::Relu(a), value, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.needs(a);
        self.push(Op::Tanh(a), value, rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_rows();
        let rg = self.needs(a);
        self.push(Op::SoftmaxRows(a), value, rg)
    }

    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).logsumexp_rows()?;
        let rg = self.needs(a);
        Ok(self.push(Op::LogSumExpRows(a), value, rg))
    }

    /// Per-row negative log-likelihood of `labels[i]` under `softmax(a[i])`.
    pub fn cross_entropy_rows(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let c = x.last_dim();
        if x.outer() != labels.len() {
            return Err(Error::Shape(format!(
                "{} label(s) for {} row(s)",
                labels.len(),
                x.outer()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {c})"
            )));
        }
        let lse = x.logsumexp_rows()?;
        let data = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| lse.data()[i] - x.row(i)[y])
            .collect();
        let value = Tensor::new(lse.shape().to_vec(), data)?;
        let rg = self.needs(logits);
        Ok(self.push(Op::CrossEntropyRows(logits, labels.to_vec()), value, rg))
    }

    /// Picks `a[i, idx[i]]` from every row.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let c = x.last_dim();
        if x.outer() != idx.len() || idx.iter().any(|&j| j >= c) {
            return Err(Error::Shape(format!(
                "gather of {} index(es) from {:?}",
                idx.len(),
                x.shape()
            )));
        }
        let data = idx.iter().enumerate().map(|(i, &j)| x.row(i)[j]).collect();
        let shape = x.shape()[..x.shape().len().saturating_sub(1)].to_vec();
        let value = Tensor::new(shape, data)?;
        let rg = self.needs(a);
        Ok(self.push(Op::Gather(a, idx.to_vec()), value, rg))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_rows();
        let rg = self.needs(a);
        self.push(Op::SumRows(a), value, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(a);
        self.push(Op::Sum(a), value, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        let rg = self.needs(a);
        self.push(Op::Mean(a), value, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.needs(a);
        self.push(Op::Scale(a, c), value, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.needs(a);
        self.push(Op::AddScalar(a), value, rg)
    }

    /// Propagates d`root`/d(node) to every node that requires a gradient and
    /// adds it to that node's stored adjoint.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got {:?}",
                self.value(root).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj)?;
            let node = &mut self.nodes[i];
            node.grad = Some(match node.grad.take() {
                Some(prev) => prev.add(&g)?,
                None => g,
            });
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let bt = self.value(*b).transpose()?;
                    accumulate(adj, *a, g.matmul(&bt)?)?;
                }
                if self.needs(*b) {
                    let at = self.value(*a).transpose()?;
                    accumulate(adj, *b, at.matmul(g)?)?;
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.needs(*a) {
                    accumulate(adj, *a, g.clone())?;
                }
                if self.needs(*b) {
                    let rhs = self.value(*b).shape();
                    let reduced = reduce_broadcast(g, node.value.shape(), rhs)?;
                    accumulate(adj, *b, reduced.map(|x| sign * x))?;
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accumulate(adj, *a, g.mul(self.value(*b))?)?;
                }
                if self.needs(*b) {
                    let full = g.mul(self.value(*a))?;
                    let rhs = self.value(*b).shape();
                    accumulate(adj, *b, reduce_broadcast(&full, node.value.shape(), rhs)?)?;
                }
            }
            Op::Relu(a) => {
                let d = g.broadcast_with(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 })?;
                accumulate(adj, *a, d)?;
            }
            Op::Tanh(a) => {
                let d = g.broadcast_with(&node.value, |g, y| g * (1.0 - y * y))?;
                accumulate(adj, *a, d)?;
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let c = y.last_dim();
                let mut d = Vec::with_capacity(y.numel());
                for r in 0..y.outer() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    d.extend((0..c).map(|j| yr[j] * (gr[j] - dot)));
                }
                accumulate(adj, *a, Tensor::new(y.shape().to_vec(), d)?)?;
            }
            Op::LogSumExpRows(a) => {
                let x = self.value(*a);
                let mut d = Vec::with_capacity(x.numel());
                for r in 0..x.outer() {
                    d.extend(softmax(x.row(r)).into_iter().map(|p| p * g.data()[r]));
                }
                accumulate(adj, *a, Tensor::new(x.shape().to_vec(), d)?)?;
            }
            Op::CrossEntropyRows(a, labels) => {
                let x = self.value(*a);
                let mut d = Vec::with_capacity(x.numel());
                for (r, &y) in labels.iter().enumerate() {
                    let gr = g.data()[r];
                    let mut p = softmax(x.row(r));
                    p[y] -= 1.0;
                    d.extend(p.into_iter().map(|v| v * gr));
                }
                accumulate(adj, *a, Tensor::new(x.shape().to_vec(), d)?)?;
            }
            Op::Gather(a, idx) => {
                let x = self.value(*a);
                let c = x.last_dim();
                let mut d = Tensor::zeros(x.shape());
                for (r, &j) in idx.iter().enumerate() {
                    d.data_mut()[r * c + j] += g.data()[r];
                }
                accumulate(adj, *a, d)?;
            }
            Op::SumRows(a) => {
                let x = self.value(*a);
                let c = x.last_dim();
                let d = (0..x.numel()).map(|k| g.data()[k / c]).collect();
                accumulate(adj, *a, Tensor::new(x.shape().to_vec(), d)?)?;
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                accumulate(adj, *a, Tensor::full(x.shape(), g.item()))?;
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let v = g.item() / x.numel() as f64;
                accumulate(adj, *a, Tensor::full(x.shape(), v))?;
            }
            Op::Scale(a, c) => accumulate(adj, *a, g.map(|x| x * c))?,
            Op::AddScalar(a) => accumulate(adj, *a, g.clone())?,
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, d: Tensor) -> Result<()> {
    let slot = &mut adj[v.0];
    *slot = Some(match slot.take() {
        Some(prev) => prev.add(&d)?,
        None => d,
    });
    Ok(())
}

/// Sums `g` (shaped like the broadcast result) back down to `rhs`'s shape.
fn reduce_broadcast(g: &Tensor, lhs: &[usize], rhs: &[usize]) -> Result<Tensor> {
    match broadcast_kind(lhs, rhs)? {
        Broadcast::Same => Ok(g.clone()),
        Broadcast::Scalar => Tensor::new(rhs.to_vec(), vec![g.sum()]),
        Broadcast::Row => {
            let c = g.last_dim();
            let mut out = vec![0.0; c];
            for (k, v) in g.data().iter().enumerate() {
                out[k % c] += v;
            }
            Tensor::new(rhs.to_vec(), out)
        }
    }
}
