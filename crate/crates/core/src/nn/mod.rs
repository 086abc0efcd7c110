//! Differentiable building blocks: convolutions, linear maps and
//! correlation attention, each owning its parameters in a [`ParamStore`].

pub mod conv;
pub mod pattern;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use conv::ConvGeometry;
pub use pattern::{ExtendSpec, PatternMatch, Weighting};

fn uniform<S: Scalar>(dims: &[usize], bound: f64, rng: &mut impl Rng) -> Result<Tensor<S>> {
    let n = dims.iter().product();
    let data = (0..n).map(|_| S::of(rng.gen_range(-bound..=bound))).collect();
    Ok(Tensor::new(dims.to_vec(), data)?)
}

/// Dilated convolution with its weight `(out, in / groups, kernel)` and bias.
#[derive(Debug, Clone, Copy)]
pub struct Conv1dSpec {
    pub geometry: ConvGeometry,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv1dSpec {
    /// Registers `{prefix}.weight` and `{prefix}.bias`, uniform in `±1/sqrt(fan_in)`.
    /// For transposed use the bias is sized to the input channels.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        geometry: ConvGeometry,
        transposed: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let dims = geometry.weight_dims();
        let fan_in = if transposed {
            geometry.out_channels / geometry.groups * geometry.kernel_size
        } else {
            dims[1] * dims[2]
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let bias_len = if transposed { geometry.in_channels } else { geometry.out_channels };
        let weight = store.register(format!("{prefix}.weight"), uniform(&dims, bound, rng)?)?;
        let bias = store.register(format!("{prefix}.bias"), uniform(&[bias_len], bound, rng)?)?;
        Ok(Conv1dSpec { geometry, weight, bias })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Binding, x: Var) -> Result<Var> {
        tape.conv1d(x, p.var(self.weight), Some(p.var(self.bias)), self.geometry)
    }

    pub fn forward_transposed<S: Scalar>(&self, tape: &mut Tape<S>, p: &Binding, x: Var) -> Result<Var> {
        tape.conv1d_transposed(x, p.var(self.weight), Some(p.var(self.bias)), self.geometry)
    }
}

/// Map along the trailing axis: `x (len, in) -> x W + b`, `W` is `(in, out)`.
#[derive(Debug, Clone, Copy)]
pub struct LinearSpec {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearSpec {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight =
            store.register(format!("{prefix}.weight"), uniform(&[in_features, out_features], bound, rng)?)?;
        let bias = store.register(format!("{prefix}.bias"), uniform(&[out_features], bound, rng)?)?;
        Ok(LinearSpec { in_features, out_features, weight, bias })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Binding, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, p.var(self.weight))?;
        tape.add(xw, p.var(self.bias))
    }
}

/// Map along the leading (time) axis, shared by all channels:
/// `x (in_len, D) -> W x + b` with `W` of shape `(out_len, in_len)` and `b` of `(out_len, 1)`.
#[derive(Debug, Clone, Copy)]
pub struct TimeLinearSpec {
    pub in_len: usize,
    pub out_len: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl TimeLinearSpec {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        in_len: usize,
        out_len: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (in_len as f64).sqrt();
        let weight = store.register(format!("{prefix}.weight"), uniform(&[out_len, in_len], bound, rng)?)?;
        let bias = store.register(format!("{prefix}.bias"), uniform(&[out_len, 1], bound, rng)?)?;
        Ok(TimeLinearSpec { in_len, out_len, weight, bias })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Binding, x: Var) -> Result<Var> {
        let wx = tape.matmul(p.var(self.weight), x)?;
        tape.add(wx, p.var(self.bias))
    }
}

/// Channel-dimension attention with mean-centred queries and keys.
///
/// With time-major features `X (len, D)`, `Q = centre(q(X))`, `K = centre(k(X))`
/// and `V = v(X)`, the `D x D` weight matrix is `Q^T K / scale` and the output
/// is `V W^T`, i.e. `(W V^T)^T`: each channel becomes a covariance-weighted mix
/// of all channels' values.
#[derive(Debug, Clone, Copy)]
pub struct CorrelationAttention {
    pub query: LinearSpec,
    pub key: LinearSpec,
    pub value: LinearSpec,
}

impl CorrelationAttention {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(CorrelationAttention {
            query: LinearSpec::new(store, &format!("{prefix}.query"), channels, channels, rng)?,
            key: LinearSpec::new(store, &format!("{prefix}.key"), channels, channels, rng)?,
            value: LinearSpec::new(store, &format!("{prefix}.value"), channels, channels, rng)?,
        })
    }

    /// The `D x D` weight matrix `Q^T K / scale`.
    pub fn weights<S: Scalar>(&self, tape: &mut Tape<S>, p: &Binding, x: Var, scale: f64) -> Result<Var> {
        check_scale(scale)?;
        let q = self.query.forward(tape, p, x)?;
        let q = tape.center_time(q)?;
        let k = self.key.forward(tape, p, x)?;
        let k = tape.center_time(k)?;
        let qt = tape.transpose(q)?;
        let w = tape.matmul(qt, k)?;
        Ok(tape.scale(w, S::one() / S::of(scale)))
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Binding, x: Var, scale: f64) -> Result<Var> {
        let w = self.weights(tape, p, x, scale)?;
        let v = self.value.forward(tape, p, x)?;
        let wt = tape.transpose(w)?;
        tape.matmul(v, wt)
    }
}

fn check_scale(scale: f64) -> Result<()> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidScale(scale));
    }
    Ok(())
}

/// Elementwise `max(0, x)`.
pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| v.max(S::zero()))
}

/// Inverted dropout on a plain tensor; `train = false` is the identity.
pub fn dropout<S: Scalar>(x: &Tensor<S>, p: f64, train: bool, rng: &mut impl Rng) -> Result<Tensor<S>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidProbability(p));
    }
    if !train || p == 0.0 {
        return Ok(x.clone());
    }
    let keep = S::of(1.0 / (1.0 - p));
    let data = x.data().iter().map(|&v| if rng.gen::<f64>() < p { S::zero() } else { v * keep }).collect();
    Ok(Tensor::new(x.dims().to_vec(), data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn attention_fixture(rng: &mut ChaCha8Rng, d: usize) -> (ParamStore, CorrelationAttention) {
        let mut store = ParamStore::new();
        let att = CorrelationAttention::new(&mut store, "att", d, rng).unwrap();
        (store, att)
    }

    fn run(store: &ParamStore, att: &CorrelationAttention, x: &Tensor, scale: f64) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let w = att.weights(&mut tape, &b, xv, scale).unwrap();
        let y = att.forward(&mut tape, &b, xv, scale).unwrap();
        (tape.value(y).clone(), tape.value(w).clone())
    }

    fn random(dims: &[usize], rng: &mut impl Rng) -> Tensor {
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn constant_features_give_zero_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (store, att) = attention_fixture(&mut rng, 3);
        let x = Tensor::new(vec![5, 3], [1.0, -2.0, 0.5].repeat(5)).unwrap();
        let (y, _) = run(&store, &att, &x, 2.0);
        assert!(y.max_abs() < 1e-12);
    }

    #[test]
    fn doubling_scale_halves_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (store, att) = attention_fixture(&mut rng, 2);
        let x = random(&[6, 2], &mut rng);
        let (y1, _) = run(&store, &att, &x, 1.5);
        let (y2, _) = run(&store, &att, &x, 3.0);
        for (a, b) in y1.data().iter().zip(y2.data()) {
            assert!((a * 0.5 - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (store, att) = attention_fixture(&mut rng, 2);
        let x = random(&[4, 2], &mut rng);
        let scale = 2.0 * 2.0f64.sqrt();
        let (y, _) = run(&store, &att, &x, scale);

        let map = |spec: &LinearSpec| {
            let w = store.value(spec.weight);
            let b = store.value(spec.bias);
            let mut out = vec![vec![0.0; 2]; 4];
            for t in 0..4 {
                for o in 0..2 {
                    out[t][o] = b.data()[o] + (0..2).map(|i| x.at(t, i) * w.at(i, o)).sum::<f64>();
                }
            }
            out
        };
        let centre = |m: Vec<Vec<f64>>| {
            let mut m = m;
            for c in 0..2 {
                let mean = (0..4).map(|t| m[t][c]).sum::<f64>() / 4.0;
                for row in m.iter_mut() {
                    row[c] -= mean;
                }
            }
            m
        };
        let (q, k, v) = (centre(map(&att.query)), centre(map(&att.key)), map(&att.value));
        for t in 0..4 {
            for i in 0..2 {
                // channel i mixes channel j's values with covariance weight w[i][j]
                let mut acc = 0.0;
                for j in 0..2 {
                    let cov: f64 = (0..4).map(|s| q[s][i] * k[s][j]).sum();
                    acc += cov / scale * v[t][j];
                }
                assert!((y.at(t, i) - acc).abs() <= 1e-12, "{} vs {acc}", y.at(t, i));
            }
        }
    }

    #[test]
    fn weights_invariant_to_level_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (store, att) = attention_fixture(&mut rng, 3);
        let x = random(&[7, 3], &mut rng);
        let shift = Tensor::new(vec![3], vec![5.0, -3.0, 0.25]).unwrap();
        let (_, w1) = run(&store, &att, &x, 1.0);
        let (_, w2) = run(&store, &att, &x.add(&shift).unwrap(), 1.0);
        for (a, b) in w1.data().iter().zip(w2.data()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn relu_and_dropout() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(dropout(&x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(dropout(&x, 0.4, false, &mut rng).unwrap(), x);
        assert!(matches!(dropout(&x, -0.1, true, &mut rng), Err(Error::InvalidProbability(_))));
    }

    #[test]
    fn rejects_non_positive_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (store, att) = attention_fixture(&mut rng, 2);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[3, 2]).unwrap());
        assert!(matches!(att.forward(&mut tape, &b, x, 0.0), Err(Error::InvalidScale(_))));
    }
}
