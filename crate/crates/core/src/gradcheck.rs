//! Central finite-difference checks for recorded operations.
//!
//! The relative error between an analytic value `a` and a numeric value `n`
//! is `|a - n| / max(|a|, |n|, ERROR_FLOOR)`. The floor keeps entries whose
//! true derivative is zero from turning rounding noise into large ratios.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

pub const ERROR_FLOOR: f64 = 1e-6;
pub const DEFAULT_STEP: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element `i`.
pub fn central_difference(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    step: f64,
) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe = set(probe, i, orig + step)?;
        let up = f(&probe)?;
        probe = set(probe, i, orig - step)?;
        let down = f(&probe)?;
        probe = set(probe, i, orig)?;
        grad.push((up - down) / (2.0 * step));
    }
    Ok(Tensor::new(x.dims().to_vec(), grad)?)
}

fn set(t: Tensor, i: usize, v: f64) -> Result<Tensor> {
    let dims = t.dims().to_vec();
    let mut data = t.into_data();
    data[i] = v;
    Ok(Tensor::new(dims, data)?)
}

/// Worst relative error over all elements.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Checks the gradient of `build` with respect to every input.
///
/// The graph output is reduced to a scalar through a fixed random projection,
/// `sum(out * r)`, so every output element contributes. Returns the worst
/// relative error across all inputs.
pub fn check_op(
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    seed: u64,
) -> Result<f64> {
    let project = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let out = build(tape, vars)?;
        let mut rng = stream_rng(seed, Stream::Data);
        let dims = tape.value(out).dims().to_vec();
        let r: Vec<f64> = (0..tape.value(out).numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = tape.constant(Tensor::new(dims, r)?);
        let weighted = tape.mul(out, r)?;
        Ok(tape.sum(weighted))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let loss = project(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = match tape.grad(vars[i]) {
            Some(g) => g.clone(),
            None => Tensor::zeros(x.dims())?,
        };
        let numeric = central_difference(
            |probe| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, v)| t.constant(if k == i { probe.clone() } else { v.clone() }))
                    .collect();
                let l = project(&mut t, &vs)?;
                Ok(t.value(l).data()[0])
            },
            x,
            DEFAULT_STEP,
        )?;
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn random(rng: &mut impl Rng, dims: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("dims match data")
}

/// Runs [`check_op`] on every differentiable tape primitive with seeded
/// random inputs. Returns `(name, worst relative error)` per primitive.
pub fn primitive_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    use crate::nn::{ConvGeometry, ExtendSpec, Weighting};
    use crate::tensor::BinaryOp;

    let mut rng = stream_rng(seed, Stream::Data);
    let mut out = Vec::new();
    let a = random(&mut rng, &[5, 3], -2.0, 2.0);
    let b = random(&mut rng, &[5, 3], -2.0, 2.0);
    let row = random(&mut rng, &[1, 3], 0.5, 2.0);
    let pos = random(&mut rng, &[5, 3], 0.5, 2.0);

    for (name, op) in [
        ("add", BinaryOp::Add),
        ("sub", BinaryOp::Sub),
        ("mul", BinaryOp::Mul),
        ("div", BinaryOp::Div),
    ] {
        let rhs = if op == BinaryOp::Div { pos.clone() } else { b.clone() };
        out.push((name, check_op(&[a.clone(), rhs], |t, v| t.binary(v[0], v[1], op), seed)?));
    }
    out.push(("broadcast_mul", check_op(&[a.clone(), row.clone()], |t, v| t.mul(v[0], v[1]), seed)?));
    out.push(("broadcast_div", check_op(&[a.clone(), row], |t, v| t.div(v[0], v[1]), seed)?));
    out.push(("scale", check_op(std::slice::from_ref(&a), |t, v| Ok(t.scale(v[0], -1.7)), seed)?));
    let m = random(&mut rng, &[3, 4], -1.0, 1.0);
    out.push(("matmul", check_op(&[a.clone(), m], |t, v| t.matmul(v[0], v[1]), seed)?));
    out.push(("transpose", check_op(std::slice::from_ref(&a), |t, v| t.transpose(v[0]), seed)?));
    out.push(("relu", check_op(std::slice::from_ref(&a), |t, v| Ok(t.relu(v[0])), seed)?));
    out.push(("abs", check_op(std::slice::from_ref(&a), |t, v| Ok(t.abs(v[0])), seed)?));
    out.push(("sum", check_op(std::slice::from_ref(&a), |t, v| Ok(t.sum(v[0])), seed)?));
    out.push(("mean", check_op(std::slice::from_ref(&a), |t, v| Ok(t.mean(v[0])), seed)?));
    out.push(("mean_axis", check_op(std::slice::from_ref(&a), |t, v| t.mean_axis(v[0], 0), seed)?));
    out.push(("center_time", check_op(std::slice::from_ref(&a), |t, v| t.center_time(v[0]), seed)?));
    out.push(("slice_time", check_op(std::slice::from_ref(&a), |t, v| t.slice_time(v[0], 1, 4), seed)?));
    out.push(("concat_time", check_op(&[a.clone(), b.clone()], |t, v| t.concat_time(v), seed)?));

    for (name, groups, dilation) in [("conv1d", 1, 1), ("conv1d_grouped", 3, 2)] {
        let geom = ConvGeometry::new(3, 3, 3, dilation, groups)?;
        let x = random(&mut rng, &[9, 3], -1.0, 1.0);
        let w = random(&mut rng, &geom.weight_dims(), -1.0, 1.0);
        let bias = random(&mut rng, &[1, 3], -1.0, 1.0);
        out.push((name, check_op(&[x.clone(), w.clone(), bias.clone()], |t, v| t.conv1d(v[0], v[1], Some(v[2]), geom), seed)?));
        let tname = if groups == 1 { "conv1d_transposed" } else { "conv1d_transposed_grouped" };
        out.push((tname, check_op(&[x, w, bias], |t, v| t.conv1d_transposed(v[0], v[1], Some(v[2]), geom), seed)?));
    }

    for (name, weighting) in [("extend_mix", Weighting::Raw), ("extend_mix_softmax", Weighting::Softmax)] {
        let spec = ExtendSpec { query_len: 3, horizon: 7, scale: 4.0, weighting };
        let q = random(&mut rng, &[3, 2], -1.0, 1.0);
        let k = random(&mut rng, &[8, 2], -1.0, 1.0);
        let v = random(&mut rng, &[10, 2], -1.0, 1.0);
        out.push((name, check_op(&[q, k, v], |t, vs| Ok(t.extend_mix(vs[0], vs[1], vs[2], spec)?.0), seed)?));
    }
    out.push(("smape", check_op(&[a, b], |t, v| t.smape(v[0], v[1]), seed)?));
    Ok(out)
}

/// Compares every parameter gradient of the evaluation-mode MSE between the
/// model forecast and `target` against central differences. Returns the worst
/// relative error per parameter name.
pub fn model_check(
    model: &crate::model::MprNet,
    input: &Tensor,
    target: &Tensor,
) -> Result<Vec<(String, f64)>> {
    use crate::autodiff::Mode;
    use crate::training::{loss, loss_value, LossKind};

    let mut tape = Tape::new();
    let binding = model.params().bind(&mut tape);
    let fwd = model.forward(&mut tape, &binding, input, &mut Mode::Eval)?;
    let t = tape.constant(target.clone());
    let l = loss(&mut tape, fwd.output, t, LossKind::Mse)?;
    tape.backward(l)?;

    let mut probe = model.clone();
    let mut out = Vec::with_capacity(model.params().len());
    for id in model.params().ids() {
        let param = model.params().get(id);
        let analytic = match tape.grad(binding.var(id)) {
            Some(g) => g.clone(),
            None => Tensor::zeros(param.value.dims())?,
        };
        let numeric = central_difference(
            |v| {
                probe.params_mut().set_value(id, v.clone())?;
                loss_value(&probe.predict(input)?, target, LossKind::Mse)
            },
            &param.value,
            DEFAULT_STEP,
        )?;
        probe.params_mut().set_value(id, param.value.clone())?;
        out.push((param.name.clone(), max_relative_error(&analytic, &numeric)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn difference_of_cubic() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.5, 2.0]).unwrap();
        let g = central_difference(|t| Ok(t.data().iter().map(|v| v * v * v).sum()), &x, 1e-5).unwrap();
        for (gi, xi) in g.data().iter().zip(x.data()) {
            assert!(relative_error(3.0 * xi * xi, *gi) < 1e-8);
        }
    }

    #[test]
    fn every_primitive_matches_differences() {
        for seed in 0..3 {
            for (name, err) in primitive_suite(seed).unwrap() {
                assert!(err <= 1e-4, "{name}: relative error {err:e} (seed {seed})");
            }
        }
    }

    #[test]
    fn floor_absorbs_rounding_noise() {
        assert!(relative_error(0.0, 1e-12) < 1e-5);
        assert!(relative_error(1.0, 1.1) > 0.09);
    }
}
