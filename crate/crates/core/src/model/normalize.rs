//! Per-window, per-channel z-scoring.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ReduceOp, Tensor};

pub const STD_FLOOR: f64 = 1e-8;

/// Statistics of one history window, both shaped `(1, D)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationState<S: Scalar = f64> {
    pub mean: Tensor<S>,
    pub std: Tensor<S>,
}

/// `(x - mean) / max(std, 1e-8)` per channel over the time axis.
pub fn normalize<S: Scalar>(input: &Tensor<S>) -> Result<(Tensor<S>, NormalizationState<S>)> {
    if input.rank() != 2 || input.rows() < 2 {
        return Err(Error::TooShort(input.rows()));
    }
    if !input.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    let mean = input.reduce(0, ReduceOp::Mean, true)?;
    let floor = S::of(STD_FLOOR);
    let std = input.reduce(0, ReduceOp::Std, true)?.map(|s| s.max(floor));
    let normed = input.sub(&mean)?.div(&std)?;
    Ok((normed, NormalizationState { mean, std }))
}

impl<S: Scalar> NormalizationState<S> {
    /// `y * std + mean`.
    pub fn denormalize(&self, y: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(y.mul(&self.std)?.add(&self.mean)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_channel_maps_to_zero() {
        let x = Tensor::new(vec![4, 2], vec![3., 1., 3., 2., 3., 3., 3., 4.]).unwrap();
        let (n, st) = normalize(&x).unwrap();
        assert!((0..4).all(|t| n.at(t, 0) == 0.0));
        assert_eq!(st.std.data()[0], STD_FLOOR);
    }

    #[test]
    fn unit_moments_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let data: Vec<f64> = (0..40 * 3).map(|_| rng.gen_range(-50.0..80.0)).collect();
        let x = Tensor::new(vec![40, 3], data).unwrap();
        let (n, st) = normalize(&x).unwrap();
        let mean = n.reduce(0, ReduceOp::Mean, false).unwrap();
        let std = n.reduce(0, ReduceOp::Std, false).unwrap();
        assert!(mean.data().iter().all(|m| m.abs() <= 1e-10));
        assert!(std.data().iter().all(|s| (s - 1.0).abs() <= 1e-9));
        let back = st.denormalize(&n).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn errors() {
        let short = Tensor::new(vec![1, 2], vec![1., 2.]).unwrap();
        assert!(matches!(normalize(&short), Err(Error::TooShort(1))));
        let bad = Tensor::new(vec![2, 1], vec![1., f64::NAN]).unwrap();
        assert!(matches!(normalize(&bad), Err(Error::NonFiniteInput)));
    }
}
