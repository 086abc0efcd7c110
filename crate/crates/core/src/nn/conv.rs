//! Length-preserving dilated 1-D convolution and its adjoint.
//!
//! Inputs are `(len, channels)`; weights are `(out_channels, in_channels / groups, kernel)`.
//! Stride is 1 and both ends are zero-padded by `(kernel - 1) * dilation / 2`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        dilation: usize,
        groups: usize,
    ) -> Result<Self> {
        if kernel_size.is_multiple_of(2) {
            return Err(Error::EvenKernel(kernel_size));
        }
        if groups == 0 || !in_channels.is_multiple_of(groups) || !out_channels.is_multiple_of(groups) {
            return Err(Error::InvalidGroups { groups, in_channels, out_channels });
        }
        if in_channels == 0 || out_channels == 0 || dilation == 0 {
            return Err(Error::ConfigInvalid("conv extents and dilation must be positive".into()));
        }
        Ok(ConvGeometry { in_channels, out_channels, kernel_size, dilation, groups })
    }

    pub fn weight_dims(&self) -> [usize; 3] {
        [self.out_channels, self.in_channels / self.groups, self.kernel_size]
    }

    pub fn padding(&self) -> usize {
        (self.kernel_size - 1) * self.dilation / 2
    }

    /// Time offset of kernel tap `r` relative to the output step.
    #[inline]
    fn shift(&self, r: usize) -> isize {
        (r * self.dilation) as isize - self.padding() as isize
    }

    fn check_weight<S: Scalar>(&self, weight: &Tensor<S>) -> Result<()> {
        if weight.dims() != self.weight_dims() {
            return Err(TensorError::ShapeMismatch(format!(
                "conv weight {:?}, expected {:?}",
                weight.dims(),
                self.weight_dims()
            ))
            .into());
        }
        Ok(())
    }

    fn check_input<S: Scalar>(&self, x: &Tensor<S>, channels: usize) -> Result<()> {
        if x.rank() != 2 || x.cols() != channels {
            return Err(TensorError::ShapeMismatch(format!(
                "conv input {:?}, expected (len, {channels})",
                x.dims()
            ))
            .into());
        }
        Ok(())
    }

    /// Calls `f(out_channel, in_channel, weight_index, shift)` for every tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, isize)) {
        let cin_g = self.in_channels / self.groups;
        let cout_g = self.out_channels / self.groups;
        for o in 0..self.out_channels {
            let g = o / cout_g;
            for ci in 0..cin_g {
                let ic = g * cin_g + ci;
                for r in 0..self.kernel_size {
                    f(o, ic, (o * cin_g + ci) * self.kernel_size + r, self.shift(r));
                }
            }
        }
    }
}

/// Output steps `t` with `0 <= t + shift < len`.
#[inline]
fn valid_range(len: usize, shift: isize) -> std::ops::Range<usize> {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift).clamp(0, len as isize) as usize;
    lo..hi.max(lo)
}

fn add_bias<S: Scalar>(out: &mut [S], bias: Option<&Tensor<S>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.numel() != channels {
            return Err(TensorError::ShapeMismatch(format!(
                "bias of {} elements for {channels} channels",
                b.numel()
            ))
            .into());
        }
        for row in out.chunks_mut(channels) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    Ok(())
}

/// `y[t, o] = bias[o] + sum_{ci, r} w[o, ci, r] * x[t + r*dilation - pad, group(o) + ci]`.
pub fn conv1d<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    geom: &ConvGeometry,
) -> Result<Tensor<S>> {
    geom.check_input(x, geom.in_channels)?;
    geom.check_weight(weight)?;
    let len = x.rows();
    let (cin, cout) = (geom.in_channels, geom.out_channels);
    let (xs, ws) = (x.data(), weight.data());
    let mut out = vec![S::zero(); len * cout];
    geom.for_each_tap(|o, ic, wi, shift| {
        let w = ws[wi];
        for t in valid_range(len, shift) {
            let src = (t as isize + shift) as usize;
            out[t * cout + o] += w * xs[src * cin + ic];
        }
    });
    add_bias(&mut out, bias, cout)?;
    Ok(Tensor::new(vec![len, cout], out)?)
}

/// Adjoint of the linear part of [`conv1d`] with the same weights:
/// maps `(len, out_channels)` back to `(len, in_channels)`, then adds `bias`
/// (one entry per input channel).
pub fn conv1d_transposed<S: Scalar>(
    y: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    geom: &ConvGeometry,
) -> Result<Tensor<S>> {
    geom.check_input(y, geom.out_channels)?;
    geom.check_weight(weight)?;
    let len = y.rows();
    let (cin, cout) = (geom.in_channels, geom.out_channels);
    let (ys, ws) = (y.data(), weight.data());
    let mut out = vec![S::zero(); len * cin];
    geom.for_each_tap(|o, ic, wi, shift| {
        let w = ws[wi];
        for t in valid_range(len, shift) {
            let dst = (t as isize + shift) as usize;
            out[dst * cin + ic] += w * ys[t * cout + o];
        }
    });
    add_bias(&mut out, bias, cin)?;
    Ok(Tensor::new(vec![len, cin], out)?)
}

/// `dw[o, ci, r] = sum_t upstream[t, o] * input[t + shift(r), ic]`, where
/// `input` lives on the in-channel side and `upstream` on the out-channel side.
pub(crate) fn conv1d_weight_grad<S: Scalar>(
    input: &Tensor<S>,
    upstream: &Tensor<S>,
    geom: &ConvGeometry,
) -> Tensor<S> {
    let len = input.rows();
    let (cin, cout) = (geom.in_channels, geom.out_channels);
    let (xs, gs) = (input.data(), upstream.data());
    let dims = geom.weight_dims();
    let mut dw = vec![S::zero(); dims.iter().product()];
    geom.for_each_tap(|o, ic, wi, shift| {
        let mut acc = S::zero();
        for t in valid_range(len, shift) {
            let src = (t as isize + shift) as usize;
            acc += gs[t * cout + o] * xs[src * cin + ic];
        }
        dw[wi] += acc;
    });
    Tensor::new(dims.to_vec(), dw).expect("weight dims are consistent")
}

/// Column sums of a `(len, channels)` tensor.
pub(crate) fn bias_grad<S: Scalar>(upstream: &Tensor<S>) -> Tensor<S> {
    upstream.reduce(0, crate::tensor::ReduceOp::Sum, false).expect("rank-2 upstream")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: &[usize], rng: &mut impl Rng) -> Tensor {
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct evaluation of the padded, dilated sum with explicit bounds checks.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, g: &ConvGeometry) -> Tensor {
        let len = x.rows();
        let cin_g = g.in_channels / g.groups;
        let cout_g = g.out_channels / g.groups;
        let pad = ((g.kernel_size - 1) * g.dilation / 2) as i64;
        let mut out = vec![0.0; len * g.out_channels];
        for t in 0..len {
            for o in 0..g.out_channels {
                let mut acc = b.data()[o];
                for ci in 0..cin_g {
                    for r in 0..g.kernel_size {
                        let src = t as i64 + (r * g.dilation) as i64 - pad;
                        if src < 0 || src >= len as i64 {
                            continue;
                        }
                        let ic = (o / cout_g) * cin_g + ci;
                        acc += w.data()[(o * cin_g + ci) * g.kernel_size + r]
                            * x.at(src as usize, ic);
                    }
                }
                out[t * g.out_channels + o] = acc;
            }
        }
        Tensor::new(vec![len, g.out_channels], out).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let g = ConvGeometry::new(1, 1, 3, 1, 1).unwrap();
        let x = Tensor::new(vec![5, 1], vec![1., -2., 3., 4., 0.5]).unwrap();
        let w = Tensor::new(vec![1, 1, 3], vec![0., 1., 0.]).unwrap();
        assert_eq!(conv1d(&x, &w, None, &g).unwrap(), x);
        assert_eq!(conv1d_transposed(&x, &w, None, &g).unwrap(), x);
    }

    #[test]
    fn zero_weights_give_bias() {
        let g = ConvGeometry::new(2, 3, 3, 2, 1).unwrap();
        let x = Tensor::new(vec![4, 2], vec![1.; 8]).unwrap();
        let w = Tensor::zeros(&g.weight_dims()).unwrap();
        let b = Tensor::new(vec![3], vec![0.5, -1., 2.]).unwrap();
        let y = conv1d(&x, &w, Some(&b), &g).unwrap();
        for t in 0..4 {
            assert_eq!(&y.data()[t * 3..t * 3 + 3], b.data());
        }
        let gt = ConvGeometry::new(3, 2, 3, 1, 1).unwrap();
        let bt = Tensor::new(vec![3], vec![0.25, 0.5, 0.75]).unwrap();
        let z = conv1d_transposed(&x, &Tensor::zeros(&gt.weight_dims()).unwrap(), Some(&bt), &gt).unwrap();
        assert!(z.data().chunks(3).all(|row| row == bt.data()));
    }

    #[test]
    fn matches_naive_oracle_both_group_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for groups in [1, 3] {
            let g = ConvGeometry::new(3, 3, 3, 2, groups).unwrap();
            let x = random(&[9, 3], &mut rng);
            let w = random(&g.weight_dims(), &mut rng);
            let b = random(&[3], &mut rng);
            let got = conv1d(&x, &w, Some(&b), &g).unwrap();
            let want = naive_conv(&x, &w, &b, &g);
            for (a, e) in got.data().iter().zip(want.data()) {
                assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0));
            }
        }
    }

    #[test]
    fn adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (cin, cout, k, d, groups) in [(3, 3, 3, 1, 1), (2, 4, 5, 2, 2), (4, 4, 3, 4, 4), (1, 2, 7, 3, 1)] {
            let g = ConvGeometry::new(cin, cout, k, d, groups).unwrap();
            let w = random(&g.weight_dims(), &mut rng);
            let x = random(&[11, cin], &mut rng);
            let y = random(&[11, cout], &mut rng);
            let lhs = conv1d(&x, &w, None, &g).unwrap().dot(&y).unwrap();
            let rhs = x.dot(&conv1d_transposed(&y, &w, None, &g).unwrap()).unwrap();
            assert!((lhs - rhs).abs() <= 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn group_locality() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g = ConvGeometry::new(3, 3, 3, 1, 3).unwrap();
        let w = random(&g.weight_dims(), &mut rng);
        let x = random(&[8, 3], &mut rng);
        let base = conv1d(&x, &w, None, &g).unwrap();
        let mut bumped = x.to_f64_vec();
        bumped[4 * 3 + 1] += 1.0;
        let y = conv1d(&Tensor::new(vec![8, 3], bumped).unwrap(), &w, None, &g).unwrap();
        for t in 0..8 {
            assert_eq!(y.at(t, 0), base.at(t, 0));
            assert_eq!(y.at(t, 2), base.at(t, 2));
        }
        assert_ne!(y.at(4, 1), base.at(4, 1));
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(matches!(ConvGeometry::new(2, 2, 4, 1, 1), Err(Error::EvenKernel(4))));
        assert!(matches!(ConvGeometry::new(3, 2, 3, 1, 2), Err(Error::InvalidGroups { .. })));
        let g = ConvGeometry::new(2, 2, 3, 1, 1).unwrap();
        let x = Tensor::<f64>::zeros(&[4, 3]).unwrap();
        let w = Tensor::zeros(&g.weight_dims()).unwrap();
        assert!(matches!(conv1d(&x, &w, None, &g), Err(Error::Tensor(TensorError::ShapeMismatch(_)))));
    }

    #[test]
    fn dilation_wider_than_input() {
        let g = ConvGeometry::new(1, 1, 3, 8, 1).unwrap();
        let x = Tensor::new(vec![3, 1], vec![1., 2., 3.]).unwrap();
        let w = Tensor::new(vec![1, 1, 3], vec![5., 1., 7.]).unwrap();
        assert_eq!(conv1d(&x, &w, None, &g).unwrap(), x);
    }
}
