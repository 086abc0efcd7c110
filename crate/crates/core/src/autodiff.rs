//! Reverse-mode automatic differentiation on a dynamically recorded tape.
//!
//! Every operation appends a [`Node`] holding its forward value and the rule
//! needed to push an upstream gradient back to its parents. Nodes are only
//! ever appended, so tape order is a topological order and `backward` simply
//! walks the tape in reverse.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::conv::{self, ConvGeometry};
use crate::nn::pattern::{self, ExtendSpec, PatternMatch};
use crate::scalar::Scalar;
use crate::tensor::{BinaryOp, ReduceOp, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded operation.
#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    /// `a op b` with `b` broadcast onto `a`.
    Binary(Var, Var, BinaryOp),
    Scale(Var, S),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Abs(Var),
    /// Multiplier per element: 0 for dropped, `1 / keep` for kept.
    Dropout(Var, Tensor<S>),
    Sum(Var),
    Mean(Var),
    /// Mean over `axis`, kept as extent 1.
    MeanAxis(Var, usize),
    Slice(Var, usize, usize),
    Concat(Vec<Var>),
    Conv1d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    Conv1dTransposed { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    ExtendMix { q: Var, k: Var, v: Var, spec: ExtendSpec },
    Smape(Var, Var),
}

impl<S: Scalar> Op<S> {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Binary(a, b, _) | Op::MatMul(a, b) | Op::Smape(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Relu(a)
            | Op::Abs(a)
            | Op::Dropout(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanAxis(a, _)
            | Op::Slice(a, _, _) => vec![*a],
            Op::Concat(parts) => parts.clone(),
            Op::Conv1d { x, w, b, .. } | Op::Conv1dTransposed { x, w, b, .. } => {
                let mut p = vec![*x, *w];
                p.extend(b);
                p
            }
            Op::ExtendMix { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

/// One vertex of the computation graph.
#[derive(Debug, Clone)]
pub struct Node<S: Scalar = f64> {
    value: Tensor<S>,
    grad: Option<Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
}

impl<S: Scalar> Node<S> {
    pub fn value(&self) -> &Tensor<S> {
        &self.value
    }

    pub fn grad(&self) -> Option<&Tensor<S>> {
        self.grad.as_ref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.op, Op::Leaf)
    }

    pub fn parents(&self) -> Vec<Var> {
        self.op.parents()
    }
}

/// Dropout behaviour for one forward pass.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn rand::RngCore),
}

#[derive(Debug, Clone, Default)]
pub struct Tape<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &Node<S> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn nonleaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| !n.is_leaf()).count()
    }

    /// Input or parameter.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        // constants collapse: nothing to propagate through them
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, grad: None, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let value = self.value(a).elementwise(self.value(b), op)?;
        Ok(self.push(value, Op::Binary(a, b, op)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Div)
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Var {
        let value = self.value(a).scale(factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    /// `max(0, x)`; the subgradient at 0 is taken as 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v > S::zero() { v } else { S::zero() });
        self.push(value, Op::Relu(a))
    }

    /// `|x|`; the subgradient at 0 is taken as 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.abs());
        self.push(value, Op::Abs(a))
    }

    /// Inverted dropout: in training each element is zeroed with probability
    /// `p` and survivors are scaled by `1 / (1 - p)`. Evaluation is the identity.
    pub fn dropout(&mut self, a: Var, p: f64, mode: &mut Mode<'_>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidProbability(p));
        }
        match mode {
            Mode::Train(rng) if p > 0.0 => {
                let keep = S::of(1.0 / (1.0 - p));
                let mask_data =
                    (0..self.value(a).numel()).map(|_| if rng.gen::<f64>() < p { S::zero() } else { keep }).collect();
                let mask = Tensor::new(self.value(a).dims().to_vec(), mask_data)?;
                let value = self.value(a).mul(&mask)?;
                Ok(self.push(value, Op::Dropout(a, mask)))
            }
            _ => Ok(a),
        }
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum_all());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean_all());
        self.push(value, Op::Mean(a))
    }

    /// Mean over `axis`, keeping it as extent 1.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = self.value(a).reduce(axis, ReduceOp::Mean, true)?;
        Ok(self.push(value, Op::MeanAxis(a, axis)))
    }

    /// Subtracts the per-column mean over the leading (time) axis.
    pub fn center_time(&mut self, a: Var) -> Result<Var> {
        let m = self.mean_axis(a, 0)?;
        self.sub(a, m)
    }

    pub fn slice_time(&mut self, a: Var, start: usize, stop: usize) -> Result<Var> {
        let value = self.value(a).slice_time(start, stop)?;
        Ok(self.push(value, Op::Slice(a, start, stop)))
    }

    pub fn concat_time(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_time(&values)?;
        Ok(self.push(value, Op::Concat(parts.to_vec())))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let value = conv::conv1d(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom)?;
        Ok(self.push(value, Op::Conv1d { x, w, b, geom }))
    }

    pub fn conv1d_transposed(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    ) -> Result<Var> {
        let value =
            conv::conv1d_transposed(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom)?;
        Ok(self.push(value, Op::Conv1dTransposed { x, w, b, geom }))
    }

    /// Pattern matching of `q` against `k` followed by the weighted extension
    /// mix over `v`. Also returns the per-delay match statistics.
    pub fn extend_mix(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        spec: ExtendSpec,
    ) -> Result<(Var, PatternMatch<S>)> {
        if !(spec.scale > 0.0 && spec.scale.is_finite()) {
            return Err(Error::InvalidScale(spec.scale));
        }
        let (value, pm) = pattern::extend_and_mix(self.value(q), self.value(k), self.value(v), &spec)?;
        Ok((self.push(value, Op::ExtendMix { q, k, v, spec }), pm))
    }

    /// `200 / count * sum |target - pred| / max(|target| + |pred|, 1e-8)`.
    pub fn smape(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        p.require_same_shape(t)?;
        let floor = S::of(SMAPE_FLOOR);
        let total: S = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&p, &t)| (t - p).abs() / (t.abs() + p.abs()).max(floor))
            .sum();
        let value = Tensor::scalar(S::of(200.0) * total / S::of_usize(p.numel()));
        Ok(self.push(value, Op::Smape(pred, target)))
    }

    /// Clears gradients of the given leaves.
    pub fn zero_grad(&mut self, vars: &[Var]) {
        for v in vars {
            self.nodes[v.0].grad = None;
        }
    }

    /// Back-propagates from a scalar `loss`. Gradients are added to whatever
    /// the leaves already hold, so repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).dims().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NotScalarLoss(shape));
        }
        let mut upstream: Vec<Option<Tensor<S>>> = vec![None; loss.0 + 1];
        upstream[loss.0] = Some(Tensor::full(&shape, S::one())?);
        for i in (0..=loss.0).rev() {
            let Some(g) = upstream[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if self.nodes[i].is_leaf() {
                let node = &mut self.nodes[i];
                node.grad = Some(match node.grad.take() {
                    Some(prev) => prev.add(&g)?,
                    None => g,
                });
                continue;
            }
            for (parent, contribution) in self.vjp(i, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                let slot = &mut upstream[parent.0];
                *slot = Some(match slot.take() {
                    Some(prev) => prev.add(&contribution)?,
                    None => contribution,
                });
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn vjp(&self, i: usize, g: &Tensor<S>) -> Result<Vec<(Var, Tensor<S>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Binary(a, b, op) => {
                let (av, bv) = (val(*a), val(*b));
                let bshape = bv.shape();
                match op {
                    BinaryOp::Add => vec![(*a, g.clone()), (*b, g.sum_to_shape(bshape)?)],
                    BinaryOp::Sub => {
                        vec![(*a, g.clone()), (*b, g.scale(-S::one()).sum_to_shape(bshape)?)]
                    }
                    BinaryOp::Mul => {
                        vec![(*a, g.mul(bv)?), (*b, g.mul(av)?.sum_to_shape(bshape)?)]
                    }
                    BinaryOp::Div => {
                        let da = g.div(bv)?;
                        // d(a/b)/db = -a/b^2 = -(a/b)/b
                        let db = g.mul(&node.value)?.div(bv)?.scale(-S::one()).sum_to_shape(bshape)?;
                        vec![(*a, da), (*b, db)]
                    }
                }
            }
            Op::Scale(a, f) => vec![(*a, g.scale(*f))],
            Op::MatMul(a, b) => {
                let da = g.matmul(&val(*b).transpose()?)?;
                let db = val(*a).transpose()?.matmul(g)?;
                vec![(*a, da), (*b, db)]
            }
            Op::Transpose(a) => vec![(*a, g.transpose()?)],
            Op::Relu(a) => {
                let mask = val(*a).map(|v| if v > S::zero() { S::one() } else { S::zero() });
                vec![(*a, g.mul(&mask)?)]
            }
            Op::Abs(a) => {
                let signs = val(*a).map(sign);
                vec![(*a, g.mul(&signs)?)]
            }
            Op::Dropout(a, mask) => vec![(*a, g.mul(mask)?)],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).dims(), g.data()[0])?)],
            Op::Mean(a) => {
                let n = S::of_usize(val(*a).numel());
                vec![(*a, Tensor::full(val(*a).dims(), g.data()[0] / n)?)]
            }
            Op::MeanAxis(a, axis) => {
                let av = val(*a);
                let n = S::of_usize(av.dims()[*axis]);
                vec![(*a, Tensor::zeros(av.dims())?.add(&g.scale(S::one() / n))?)]
            }
            Op::Slice(a, start, stop) => {
                let av = val(*a);
                let w = av.cols();
                let mut data = vec![S::zero(); av.numel()];
                data[start * w..stop * w].copy_from_slice(g.data());
                vec![(*a, Tensor::new(av.dims().to_vec(), data)?)]
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let rows = val(*p).rows();
                    out.push((*p, g.slice_time(offset, offset + rows)?));
                    offset += rows;
                }
                out
            }
            Op::Conv1d { x, w, b, geom } => {
                let mut out = vec![
                    (*x, conv::conv1d_transposed(g, val(*w), None, geom)?),
                    (*w, conv::conv1d_weight_grad(val(*x), g, geom)),
                ];
                if let Some(b) = b {
                    out.push((*b, conv::bias_grad(g).reshape(val(*b).dims().to_vec())?));
                }
                out
            }
            Op::Conv1dTransposed { x, w, b, geom } => {
                let mut out = vec![
                    (*x, conv::conv1d(g, val(*w), None, geom)?),
                    (*w, conv::conv1d_weight_grad(g, val(*x), geom)),
                ];
                if let Some(b) = b {
                    out.push((*b, conv::bias_grad(g).reshape(val(*b).dims().to_vec())?));
                }
                out
            }
            Op::ExtendMix { q, k, v, spec } => {
                let (dq, dk, dv) =
                    pattern::extend_and_mix_backward(val(*q), val(*k), val(*v), spec, g)?;
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::Smape(pred, target) => {
                let (p, t) = (val(*pred), val(*target));
                let floor = S::of(SMAPE_FLOOR);
                let factor = S::of(200.0) / S::of_usize(p.numel()) * g.data()[0];
                let dp = p.zip_map(t, |p, t| {
                    let den = t.abs() + p.abs();
                    let err = p - t;
                    if den <= floor {
                        return sign(err) / floor * factor;
                    }
                    (sign(err) / den - err.abs() * sign(p) / (den * den)) * factor
                })?;
                let dt = p.zip_map(t, |p, t| {
                    let den = t.abs() + p.abs();
                    let err = t - p;
                    if den <= floor {
                        return sign(err) / floor * factor;
                    }
                    (sign(err) / den - err.abs() * sign(t) / (den * den)) * factor
                })?;
                vec![(*pred, dp), (*target, dt)]
            }
        })
    }
}

const SMAPE_FLOOR: f64 = 1e-8;

fn sign<S: Scalar>(v: S) -> S {
    if v > S::zero() {
        S::one()
    } else if v < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}
