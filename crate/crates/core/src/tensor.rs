//! Dense row-major tensors.
//!
//! Series are stored time-major: a `(len, channels)` tensor keeps the channels
//! of one time step contiguous, so a time step is one row.

use std::fmt;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("division by zero")]
    DivisionByZero,
    #[error("invalid axis {axis} for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("index range {start}..{stop} out of bounds for extent {len}")]
    IndexOutOfRange { start: usize, stop: usize, len: usize },
    #[error("invalid shape {0:?}: extents must be non-empty and positive")]
    InvalidShape(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Ordered, non-empty list of positive extents.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(TensorError::InvalidShape(dims));
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.0[i + 1];
        }
        strides
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    #[inline]
    fn apply<S: Scalar>(self, x: S, y: S) -> S {
        match self {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    /// Population standard deviation (divides by the count).
    Std,
}

#[derive(Clone, PartialEq)]
pub struct Tensor<S: Scalar = f64> {
    shape: Shape,
    data: Vec<S>,
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape.0)
            .field("data", &self.data)
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn new(dims: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {} holds {} elements, got {}",
                shape,
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(dims: &[usize], value: S) -> Result<Self> {
        let shape = Shape::new(dims.to_vec())?;
        let n = shape.numel();
        Ok(Tensor { shape, data: vec![value; n] })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, S::zero())
    }

    pub fn ones(dims: &[usize]) -> Result<Self> {
        Self::full(dims, S::one())
    }

    /// A one-element tensor of shape `[1]`.
    pub fn scalar(value: S) -> Self {
        Tensor { shape: Shape(vec![1]), data: vec![value] }
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        Ok(t)
    }

    /// Builds a 2-D tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::ShapeMismatch("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&v| S::of(v)).collect())
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Leading extent (time for series tensors).
    pub fn rows(&self) -> usize {
        self.dims()[0]
    }

    /// Product of the trailing extents (channels for series tensors).
    pub fn cols(&self) -> usize {
        self.dims()[1..].iter().product()
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> S {
        self.data[row * self.cols() + col]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, dims: Vec<usize>) -> Result<Self> {
        Self::new(dims, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.require_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&self, factor: S) -> Self {
        self.map(|v| v * factor)
    }

    pub fn add_scalar(&self, offset: S) -> Self {
        self.map(|v| v + offset)
    }

    pub fn sum_all(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn mean_all(&self) -> S {
        self.sum_all() / S::of_usize(self.numel())
    }

    pub fn dot(&self, other: &Self) -> Result<S> {
        self.require_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn norm(&self) -> S {
        self.data.iter().map(|&v| v * v).sum::<S>().sqrt()
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, v| m.max(v.abs()))
    }

    pub(crate) fn require_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch(format!("{} vs {}", self.shape, other.shape)));
        }
        Ok(())
    }

    /// Checks that `other` broadcasts onto `self` by trailing-axis rules:
    /// aligned from the right, each extent of `other` is 1 or equal.
    fn broadcast_strides(&self, other: &Shape) -> Result<Vec<usize>> {
        let (a, b) = (self.dims(), other.dims());
        if b.len() > a.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "{} does not broadcast onto {}",
                other, self.shape
            )));
        }
        let offset = a.len() - b.len();
        let b_strides = other.strides();
        let mut strides = vec![0; a.len()];
        for (i, &bd) in b.iter().enumerate() {
            let ad = a[offset + i];
            if bd == ad {
                strides[offset + i] = b_strides[i];
            } else if bd != 1 {
                return Err(TensorError::ShapeMismatch(format!(
                    "{} does not broadcast onto {}",
                    other, self.shape
                )));
            }
        }
        Ok(strides)
    }

    /// Elementwise `op(self, other)`; the result has `self`'s shape.
    pub fn elementwise(&self, other: &Self, op: BinaryOp) -> Result<Self> {
        if op == BinaryOp::Div && other.data.iter().any(|v| v.is_zero()) {
            return Err(TensorError::DivisionByZero);
        }
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&x, &y)| op.apply(x, y)).collect();
            return Ok(Tensor { shape: self.shape.clone(), data });
        }
        let strides = self.broadcast_strides(&other.shape)?;
        let mut data = Vec::with_capacity(self.numel());
        for_each_broadcast_index(self.dims(), &strides, |i, j| {
            data.push(op.apply(self.data[i], other.data[j]));
        });
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.elementwise(other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.elementwise(other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.elementwise(other, BinaryOp::Mul)
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        self.elementwise(other, BinaryOp::Div)
    }

    /// Sums `self` (shaped like a broadcast result) back down to `target`.
    /// The reverse of broadcasting, used by gradient rules.
    pub fn sum_to_shape(&self, target: &Shape) -> Result<Self> {
        if &self.shape == target {
            return Ok(self.clone());
        }
        let strides = self.broadcast_strides(target)?;
        let mut data = vec![S::zero(); target.numel()];
        for_each_broadcast_index(self.dims(), &strides, |i, j| data[j] += self.data[i]);
        Ok(Tensor { shape: target.clone(), data })
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.dims()[1] != other.dims()[0] {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul {} x {}",
                self.shape, other.shape
            )));
        }
        let (p, q, r) = (self.dims()[0], self.dims()[1], other.dims()[1]);
        let mut out = vec![S::zero(); p * r];
        for i in 0..p {
            let row = &mut out[i * r..(i + 1) * r];
            for k in 0..q {
                let a = self.data[i * q + k];
                if a.is_zero() {
                    continue;
                }
                let b_row = &other.data[k * r..(k + 1) * r];
                for (o, &b) in row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![p, r], out)
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(TensorError::ShapeMismatch(format!("transpose of rank {}", self.rank())));
        }
        let (p, q) = (self.dims()[0], self.dims()[1]);
        let mut out = Vec::with_capacity(p * q);
        for j in 0..q {
            for i in 0..p {
                out.push(self.data[i * q + j]);
            }
        }
        Tensor::new(vec![q, p], out)
    }

    /// Reduces along `axis`. With `keep_dims` the axis stays as extent 1,
    /// otherwise it is dropped (a rank-1 input reduces to shape `[1]`).
    pub fn reduce(&self, axis: usize, op: ReduceOp, keep_dims: bool) -> Result<Self> {
        let rank = self.rank();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { axis, rank });
        }
        let dims = self.dims();
        let outer: usize = dims[..axis].iter().product();
        let len = dims[axis];
        let inner: usize = dims[axis + 1..].iter().product();
        let count = S::of_usize(len);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let lane = (0..len).map(|k| self.data[(o * len + k) * inner + i]);
                let sum: S = lane.clone().sum();
                out.push(match op {
                    ReduceOp::Sum => sum,
                    ReduceOp::Mean => sum / count,
                    ReduceOp::Std => {
                        let mean = sum / count;
                        let var = lane.map(|v| (v - mean) * (v - mean)).sum::<S>() / count;
                        var.sqrt()
                    }
                });
            }
        }
        let mut new_dims = dims.to_vec();
        if keep_dims {
            new_dims[axis] = 1;
        } else {
            new_dims.remove(axis);
            if new_dims.is_empty() {
                new_dims.push(1);
            }
        }
        Tensor::new(new_dims, out)
    }

    /// Copies rows `start..stop` along the leading (time) axis.
    pub fn slice_time(&self, start: usize, stop: usize) -> Result<Self> {
        let len = self.rows();
        if start >= stop || stop > len {
            return Err(TensorError::IndexOutOfRange { start, stop, len });
        }
        let w = self.cols();
        let mut dims = self.dims().to_vec();
        dims[0] = stop - start;
        Tensor::new(dims, self.data[start * w..stop * w].to_vec())
    }

    /// Splices parts end to end along the leading (time) axis.
    pub fn concat_time(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::ShapeMismatch("concat of zero parts".into()))?;
        let tail = &first.dims()[1..];
        let mut rows = 0;
        for p in parts {
            if &p.dims()[1..] != tail {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat {} with {}",
                    first.shape, p.shape
                )));
            }
            rows += p.rows();
        }
        let mut data = Vec::with_capacity(rows * first.cols());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        let mut dims = first.dims().to_vec();
        dims[0] = rows;
        Tensor::new(dims, data)
    }

    /// Elementwise conversion to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Walks every flat index `i` of a tensor with `dims`, paired with the flat
/// index `j` of a broadcast operand described by `strides` (0 on broadcast axes).
fn for_each_broadcast_index(dims: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = dims.len();
    let total: usize = dims.iter().product();
    let mut idx = vec![0usize; rank];
    let mut j = 0usize;
    for i in 0..total {
        f(i, j);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            j += strides[ax];
            if idx[ax] < dims[ax] {
                break;
            }
            j -= strides[ax] * dims[ax];
            idx[ax] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    fn random(dims: &[usize], rng: &mut impl Rng) -> Tensor {
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn add_componentwise() {
        assert_eq!(t(&[2], &[1., 2.]).add(&t(&[2], &[3., 4.])).unwrap().data(), &[4., 6.]);
    }

    #[test]
    fn sub_self_is_zero() {
        let x = t(&[2, 3], &[1., -2., 3., 0.5, 7., 9.]);
        let z = x.sub(&x).unwrap();
        assert_eq!(z.dims(), &[2, 3]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mul_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[3, 2], &mut rng);
        let b = random(&[3, 2], &mut rng);
        let got = a.mul(&b).unwrap();
        for i in 0..6 {
            assert_eq!(got.data()[i], a.data()[i] * b.data()[i]);
        }
    }

    #[test]
    fn broadcast_row_and_column() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let row = t(&[1, 3], &[10., 20., 30.]);
        assert_eq!(a.add(&row).unwrap().data(), &[11., 22., 33., 14., 25., 36.]);
        let col = t(&[2, 1], &[100., 200.]);
        assert_eq!(a.add(&col).unwrap().data(), &[101., 102., 103., 204., 205., 206.]);
        let trailing = t(&[3], &[1., 1., 1.]);
        assert_eq!(a.sub(&trailing).unwrap().data(), &[0., 1., 2., 3., 4., 5.]);
        assert!(matches!(a.add(&t(&[2], &[1., 2.])), Err(TensorError::ShapeMismatch(_))));
    }

    #[test]
    fn sum_to_shape_reverses_broadcast() {
        let g = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let s = g.sum_to_shape(&Shape::new(vec![1, 3]).unwrap()).unwrap();
        assert_eq!(s.data(), &[5., 7., 9.]);
        let s = g.sum_to_shape(&Shape::new(vec![2, 1]).unwrap()).unwrap();
        assert_eq!(s.data(), &[6., 15.]);
    }

    #[test]
    fn div_by_zero_rejected() {
        let a = t(&[2], &[1., 2.]);
        assert_eq!(a.div(&t(&[2], &[1., 0.])), Err(TensorError::DivisionByZero));
    }

    #[test]
    fn invalid_shapes() {
        assert!(matches!(Tensor::<f64>::zeros(&[]), Err(TensorError::InvalidShape(_))));
        assert!(matches!(Tensor::<f64>::zeros(&[2, 0]), Err(TensorError::InvalidShape(_))));
        assert!(matches!(Tensor::new(vec![2, 2], vec![1.0; 3]), Err(TensorError::ShapeMismatch(_))));
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let m = t(&[3, 2], &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(Tensor::identity(3).unwrap().matmul(&m).unwrap(), m);
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 1], &[1., 1.]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[3., 7.]);
        assert!(a.matmul(&m).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&[5, 4], &mut rng);
        let b = random(&[4, 3], &mut rng);
        let got = a.matmul(&b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.at(i, k) * b.at(k, j);
                }
                let rel = (got.at(i, j) - acc).abs() / acc.abs().max(1e-300);
                assert!(rel <= 1e-12, "rel err {rel}");
            }
        }
    }

    #[test]
    fn reductions() {
        let x = t(&[3], &[2., 4., 6.]);
        assert_eq!(x.reduce(0, ReduceOp::Mean, false).unwrap().data(), &[4.]);
        let c = Tensor::full(&[4, 2], 3.5).unwrap();
        assert!(c.reduce(0, ReduceOp::Std, false).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(x.reduce(1, ReduceOp::Sum, false), Err(TensorError::InvalidAxis { axis: 1, rank: 1 }));

        // two-pass population variance oracle
        let v = [1., 2., 3., 4.];
        let mean = v.iter().sum::<f64>() / 4.0;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
        let std = t(&[4], &v).reduce(0, ReduceOp::Std, false).unwrap();
        assert!((std.data()[0] - var.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn reduce_keep_dims_and_inner_axis() {
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let m = x.reduce(0, ReduceOp::Mean, true).unwrap();
        assert_eq!(m.dims(), &[1, 3]);
        assert_eq!(m.data(), &[2.5, 3.5, 4.5]);
        let s = x.reduce(1, ReduceOp::Sum, false).unwrap();
        assert_eq!(s.dims(), &[2]);
        assert_eq!(s.data(), &[6., 15.]);
    }

    #[test]
    fn slice_and_concat() {
        let x = t(&[6, 2], &(0..12).map(f64::from).collect::<Vec<_>>());
        let s = x.slice_time(2, 5).unwrap();
        assert_eq!(s.dims(), &[3, 2]);
        assert_eq!(s.data(), &[4., 5., 6., 7., 8., 9.]);
        assert!(matches!(x.slice_time(4, 4), Err(TensorError::IndexOutOfRange { .. })));
        assert!(matches!(x.slice_time(0, 7), Err(TensorError::IndexOutOfRange { .. })));

        let y = t(&[7, 2], &(0..14).map(f64::from).collect::<Vec<_>>());
        let parts = [y.slice_time(0, 3).unwrap(), y.slice_time(3, 6).unwrap(), y.slice_time(6, 7).unwrap()];
        let back = Tensor::concat_time(&parts.iter().collect::<Vec<_>>()).unwrap();
        assert_eq!(back, y);
        assert!(Tensor::concat_time(&[&x, &t(&[1, 3], &[0., 0., 0.])]).is_err());
    }

    fn arb_shape() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..5, 1..4)
    }

    proptest! {
        #[test]
        fn add_is_associative_under_broadcast(dims in arb_shape(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&dims, &mut rng);
            let b = random(&dims, &mut rng);
            let c = random(&dims[dims.len() - 1..], &mut rng);
            let lhs = a.add(&b).unwrap().add(&c).unwrap();
            let rhs = a.add(&b.add(&c).unwrap()).unwrap();
            for (x, y) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn output_shape_depends_only_on_input_shapes(dims in arb_shape(), s1 in any::<u64>(), s2 in any::<u64>()) {
            let mut r1 = ChaCha8Rng::seed_from_u64(s1);
            let mut r2 = ChaCha8Rng::seed_from_u64(s2);
            let (a1, b1) = (random(&dims, &mut r1), random(&dims, &mut r1));
            let (a2, b2) = (random(&dims, &mut r2), random(&dims, &mut r2));
            prop_assert_eq!(a1.mul(&b1).unwrap().dims().to_vec(), a2.mul(&b2).unwrap().dims().to_vec());
            for axis in 0..dims.len() {
                prop_assert_eq!(
                    a1.reduce(axis, ReduceOp::Std, true).unwrap().dims().to_vec(),
                    a2.reduce(axis, ReduceOp::Sum, true).unwrap().dims().to_vec()
                );
            }
        }

        #[test]
        fn slice_concat_round_trip(len in 2usize..40, cols in 1usize..4, cuts in prop::collection::vec(1usize..40, 0..5)) {
            let x = Tensor::new(vec![len, cols], (0..len * cols).map(|v| v as f64).collect()).unwrap();
            let mut bounds: Vec<usize> = cuts.into_iter().filter(|&c| c < len).collect();
            bounds.push(0);
            bounds.push(len);
            bounds.sort_unstable();
            bounds.dedup();
            let parts: Vec<Tensor> = bounds.windows(2).map(|w| x.slice_time(w[0], w[1]).unwrap()).collect();
            let back = Tensor::concat_time(&parts.iter().collect::<Vec<_>>()).unwrap();
            prop_assert_eq!(back, x);
        }
    }
}
