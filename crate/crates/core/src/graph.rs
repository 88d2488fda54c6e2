//! Reverse-mode differentiation over a dynamically recorded graph.
//!
//! Every operation evaluates eagerly and appends a node, so node indices are
//! already a topological order. [`Graph::backward`] walks them once in
//! reverse, accumulating gradients only into nodes that depend on a
//! parameter.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddColumn(NodeId, NodeId),
    Relu(NodeId),
    Conv2d(NodeId, NodeId, NodeId),
    MaxPool2(NodeId, Vec<usize>),
    Flatten(NodeId),
    RowNormalize(NodeId, Vec<T>),
    ColNormalize(NodeId, Vec<T>),
    Softmax(NodeId),
    CrossEntropy(NodeId, Vec<usize>),
    SoftmaxCrossEntropy(NodeId, Vec<usize>, Tensor<T>),
    SqNorm(NodeId),
    Sum(NodeId),
    SliceRows(NodeId, usize),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddColumn(a, b) => vec![*a, *b],
            Conv2d(a, b, c) => vec![*a, *b, *c],
            Scale(a, _)
            | Relu(a)
            | MaxPool2(a, _)
            | Flatten(a)
            | RowNormalize(a, _)
            | ColNormalize(a, _)
            | Softmax(a)
            | CrossEntropy(a, _)
            | SoftmaxCrossEntropy(a, _, _)
            | SqNorm(a)
            | Sum(a)
            | SliceRows(a, _) => vec![*a],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recorded computation.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar loss with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
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

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        let rg = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.push(value, op, rg)
    }

    /// Tags an error with the index the failing node would have received.
    fn tag<V>(&self, r: Result<V>) -> Result<V> {
        let next = self.nodes.len();
        r.map_err(|e| match e {
            Error::Shape { op, detail, .. } => Error::Shape {
                op,
                node: Some(next),
                detail,
            },
            other => other,
        })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.tag(self.value(a).matmul(self.value(b)))?;
        Ok(self.derived(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.tag(self.value(a).add(self.value(b)))?;
        Ok(self.derived(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.tag(self.value(a).sub(self.value(b)))?;
        Ok(self.derived(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.tag(self.value(a).mul(self.value(b)))?;
        Ok(self.derived(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).scale(c);
        self.derived(v, Op::Scale(a, c))
    }

    /// Broadcast-adds an `r × 1` bias to every column of an `r × c` matrix.
    pub fn add_column(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.tag(self.value(a).add_column(self.value(bias)))?;
        Ok(self.derived(v, Op::AddColumn(a, bias)))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).relu();
        self.derived(v, Op::Relu(a))
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.tag(tensor::conv2d(
            self.value(input),
            self.value(kernel),
            self.value(bias),
        ))?;
        Ok(self.derived(v, Op::Conv2d(input, kernel, bias)))
    }

    pub fn max_pool2(&mut self, input: NodeId) -> Result<NodeId> {
        let (v, arg) = self.tag(tensor::max_pool2(self.value(input)))?;
        Ok(self.derived(v, Op::MaxPool2(input, arg)))
    }

    pub fn flatten(&mut self, input: NodeId) -> Result<NodeId> {
        let v = self.tag(tensor::flatten_samples(self.value(input)))?;
        Ok(self.derived(v, Op::Flatten(input)))
    }

    /// Scales every row to unit L2 norm.
    pub fn row_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let norms = self.tag(x.row_norms())?;
        if let Some(i) = norms.iter().position(|&n| n == T::zero()) {
            return Err(Error::ZeroRow(i));
        }
        let c = x.cols();
        let mut v = x.clone();
        for (i, row) in v.data_mut().chunks_mut(c).enumerate() {
            for e in row {
                *e /= norms[i];
            }
        }
        Ok(self.derived(v, Op::RowNormalize(a, norms)))
    }

    /// Scales every column to unit L2 norm.
    pub fn col_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let norms = self.tag(x.col_norms())?;
        if let Some(j) = norms.iter().position(|&n| n == T::zero()) {
            return Err(Error::ZeroColumn(j));
        }
        let c = x.cols();
        let mut v = x.clone();
        for row in v.data_mut().chunks_mut(c) {
            for (e, &n) in row.iter_mut().zip(&norms) {
                *e /= n;
            }
        }
        Ok(self.derived(v, Op::ColNormalize(a, norms)))
    }

    /// Column-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.tag(self.value(a).softmax_cols())?;
        Ok(self.derived(v, Op::Softmax(a)))
    }

    fn check_labels(&self, a: NodeId, labels: &[usize], op: &'static str) -> Result<()> {
        let (r, c) = self.tag(self.value(a).dims2())?;
        if labels.len() != c || labels.iter().any(|&l| l >= r) {
            return self.tag(Err(Error::Shape {
                op,
                node: None,
                detail: format!("{} labels for {r}×{c} input", labels.len()),
            }));
        }
        Ok(())
    }

    /// Mean negative log-probability of the labelled class; `probs` holds
    /// one distribution per column.
    pub fn cross_entropy(&mut self, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.check_labels(probs, labels, "cross_entropy")?;
        let p = self.value(probs);
        let q = T::lit(labels.len() as f64);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(j, &l)| -p.at(l, j).ln())
            .sum::<T>()
            / q;
        Ok(self.derived(
            Tensor::scalar(loss),
            Op::CrossEntropy(probs, labels.to_vec()),
        ))
    }

    /// Fused softmax + cross-entropy over columns of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.check_labels(logits, labels, "softmax_cross_entropy")?;
        let z = self.value(logits);
        let c = z.cols();
        let mut probs = z.clone();
        let mut loss = T::zero();
        for j in 0..c {
            let mut max = T::neg_infinity();
            for i in 0..z.rows() {
                max = max.max(z.at(i, j));
            }
            let mut sum = T::zero();
            for i in 0..z.rows() {
                sum += (z.at(i, j) - max).exp();
            }
            let lse = max + sum.ln();
            for i in 0..z.rows() {
                probs.set(i, j, (z.at(i, j) - lse).exp());
            }
            loss += lse - z.at(labels[j], j);
        }
        loss /= T::lit(c as f64);
        Ok(self.derived(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy(logits, labels.to_vec(), probs),
        ))
    }

    /// Sum of squared entries.
    pub fn sq_norm(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sq_norm());
        self.derived(v, Op::SqNorm(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.derived(v, Op::Sum(a))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = self.tag(self.value(a).slice_rows(start, end))?;
        Ok(self.derived(v, Op::SliceRows(a, start)))
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss {
                node: loss.0,
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            for (input, gi) in self.local_grads(node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi)?,
                    slot @ None => *slot = Some(gi),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        use Op::*;
        let val = |id: NodeId| self.value(id);
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        Ok(match &node.op {
            Leaf => vec![],
            MatMul(a, b) => {
                let mut out = Vec::new();
                if wants(*a) {
                    out.push((*a, g.matmul(&val(*b).transpose()?)?));
                }
                if wants(*b) {
                    out.push((*b, val(*a).transpose()?.matmul(g)?));
                }
                out
            }
            Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-T::one()))],
            Mul(a, b) => vec![(*a, g.mul(val(*b))?), (*b, g.mul(val(*a))?)],
            Scale(a, c) => vec![(*a, g.scale(*c))],
            AddColumn(a, bias) => {
                let c = g.cols();
                let sums: Vec<T> = g.data().chunks(c).map(|r| r.iter().copied().sum()).collect();
                vec![(*a, g.clone()), (*bias, Tensor::column(sums)?)]
            }
            Relu(a) => {
                let x = val(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![(*a, Tensor::new(x.shape().to_vec(), d)?)]
            }
            Conv2d(i, k, b) => {
                let (gi, gk, gb) = tensor::conv2d_backward(val(*i), val(*k), g)?;
                vec![(*i, gi), (*k, gk), (*b, gb)]
            }
            MaxPool2(a, arg) => {
                let x = val(*a);
                let mut d = vec![T::zero(); x.len()];
                for (&src, &gv) in arg.iter().zip(g.data()) {
                    d[src] += gv;
                }
                vec![(*a, Tensor::new(x.shape().to_vec(), d)?)]
            }
            Flatten(a) => {
                let shape = val(*a).shape().to_vec();
                vec![(*a, g.transpose()?.reshape(&shape)?)]
            }
            RowNormalize(a, norms) => {
                let y = &node.value;
                let c = y.cols();
                let mut d = g.clone();
                for (i, row) in d.data_mut().chunks_mut(c).enumerate() {
                    let yr = y.row(i);
                    let dot: T = row.iter().zip(yr).map(|(&gv, &yv)| gv * yv).sum();
                    for (e, &yv) in row.iter_mut().zip(yr) {
                        *e = (*e - yv * dot) / norms[i];
                    }
                }
                vec![(*a, d)]
            }
            ColNormalize(a, norms) => {
                let y = &node.value;
                let (r, c) = y.dims2()?;
                let mut dots = vec![T::zero(); c];
                for i in 0..r {
                    for (j, dj) in dots.iter_mut().enumerate() {
                        *dj += g.at(i, j) * y.at(i, j);
                    }
                }
                let mut d = g.clone();
                for i in 0..r {
                    for j in 0..c {
                        d.set(i, j, (g.at(i, j) - y.at(i, j) * dots[j]) / norms[j]);
                    }
                }
                vec![(*a, d)]
            }
            Softmax(a) => {
                let s = &node.value;
                let (r, c) = s.dims2()?;
                let mut d = g.clone();
                for j in 0..c {
                    let dot: T = (0..r).map(|i| s.at(i, j) * g.at(i, j)).sum();
                    for i in 0..r {
                        d.set(i, j, s.at(i, j) * (g.at(i, j) - dot));
                    }
                }
                vec![(*a, d)]
            }
            CrossEntropy(p, labels) => {
                let pv = val(*p);
                let q = T::lit(labels.len() as f64);
                let up = g.item();
                let mut d = Tensor::zeros(pv.shape());
                for (j, &l) in labels.iter().enumerate() {
                    d.set(l, j, -up / (q * pv.at(l, j)));
                }
                vec![(*p, d)]
            }
            SoftmaxCrossEntropy(z, labels, probs) => {
                let q = T::lit(labels.len() as f64);
                let up = g.item();
                let mut d = probs.clone();
                for (j, &l) in labels.iter().enumerate() {
                    d.set(l, j, d.at(l, j) - T::one());
                }
                vec![(*z, d.scale(up / q))]
            }
            SqNorm(a) => vec![(*a, val(*a).scale(T::lit(2.0) * g.item()))],
            Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            SliceRows(a, start) => {
                let x = val(*a);
                let c = x.cols();
                let mut d = Tensor::zeros(x.shape());
                d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                vec![(*a, d)]
            }
        })
    }
}
