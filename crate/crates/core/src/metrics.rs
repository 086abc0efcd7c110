//! Point-forecast accuracy metrics and the M4 naive-2 benchmark.
//!
//! Percentage metrics floor their denominators at `1e-8`. MASE scales by the
//! mean absolute seasonal difference of the in-sample series.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DENOMINATOR_FLOOR: f64 = 1e-8;

/// Overall naive-2 scores of the M4 competition, `(sMAPE, MASE)`.
pub const M4_NAIVE2_OVERALL: (f64, f64) = (13.564, 1.912);

fn pairs<'a, S: Scalar>(pred: &'a Tensor<S>, truth: &'a Tensor<S>) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    pred.require_same_shape(truth)?;
    Ok(pred.data().iter().zip(truth.data()).map(|(p, t)| (p.as_f64(), t.as_f64())))
}

fn mean_of(it: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn mse<S: Scalar>(pred: &Tensor<S>, truth: &Tensor<S>) -> Result<f64> {
    Ok(mean_of(pairs(pred, truth)?.map(|(p, t)| (p - t) * (p - t))))
}

pub fn mae<S: Scalar>(pred: &Tensor<S>, truth: &Tensor<S>) -> Result<f64> {
    Ok(mean_of(pairs(pred, truth)?.map(|(p, t)| (p - t).abs())))
}

/// `200 / n * sum |t - p| / (|t| + |p|)`, in `[0, 200]`.
pub fn smape<S: Scalar>(pred: &Tensor<S>, truth: &Tensor<S>) -> Result<f64> {
    Ok(200.0 * mean_of(pairs(pred, truth)?.map(|(p, t)| (t - p).abs() / (t.abs() + p.abs()).max(DENOMINATOR_FLOOR))))
}

/// `100 / n * sum |t - p| / |t|`.
pub fn mape<S: Scalar>(pred: &Tensor<S>, truth: &Tensor<S>) -> Result<f64> {
    Ok(100.0 * mean_of(pairs(pred, truth)?.map(|(p, t)| (t - p).abs() / t.abs().max(DENOMINATOR_FLOOR))))
}

/// Mean absolute difference at lag `period` over the in-sample series.
pub fn seasonal_scale(insample: &[f64], period: usize) -> Result<f64> {
    if period == 0 || insample.len() <= period {
        return Err(Error::InsampleTooShort { len: insample.len(), period });
    }
    Ok(mean_of(insample.windows(period + 1).map(|w| (w[period] - w[0]).abs())))
}

pub fn mase<S: Scalar>(pred: &Tensor<S>, truth: &Tensor<S>, insample: &[f64], period: usize) -> Result<f64> {
    let scale = seasonal_scale(insample, period)?;
    if scale == 0.0 {
        return Err(Error::ZeroScale(period));
    }
    Ok(mae(pred, truth)? / scale)
}

/// `(smape / smape_ref + mase / mase_ref) / 2`.
pub fn owa(smape: f64, mase: f64, smape_ref: f64, mase_ref: f64) -> Result<f64> {
    for r in [smape_ref, mase_ref] {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::InvalidReference(r));
        }
    }
    Ok(0.5 * (smape / smape_ref + mase / mase_ref))
}

fn acf(x: &[f64], lag: usize) -> f64 {
    let mean = mean_of(x.iter().copied());
    let den: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    if den == 0.0 {
        return 0.0;
    }
    let num: f64 = (lag..x.len()).map(|i| (x[i] - mean) * (x[i - lag] - mean)).sum();
    num / den
}

/// 90% autocorrelation test for seasonality at lag `period`.
pub fn is_seasonal(insample: &[f64], period: usize) -> bool {
    if period <= 1 || insample.len() < 3 * period {
        return false;
    }
    let lower: f64 = (1..period).map(|k| acf(insample, k).powi(2)).sum();
    let limit = 1.645 * ((1.0 + 2.0 * lower) / insample.len() as f64).sqrt();
    acf(insample, period).abs() > limit
}

/// Multiplicative seasonal indices from a classical decomposition, one per
/// phase, normalized to mean 1. Phase `i` is the phase of `insample[i]`.
pub fn seasonal_indices(insample: &[f64], period: usize) -> Vec<f64> {
    let n = insample.len();
    // centred moving average of order `period` (2 x period when even)
    let half = period / 2;
    let mut ratios: Vec<Vec<f64>> = vec![Vec::new(); period];
    for i in half..n.saturating_sub(half) {
        let trend = if period % 2 == 1 {
            insample[i - half..=i + half].iter().sum::<f64>() / period as f64
        } else {
            if i + half >= n {
                continue;
            }
            let inner: f64 = insample[i - half + 1..i + half].iter().sum();
            (inner + 0.5 * (insample[i - half] + insample[i + half])) / period as f64
        };
        if trend != 0.0 {
            ratios[i % period].push(insample[i] / trend);
        }
    }
    let raw: Vec<f64> = ratios.iter().map(|r| if r.is_empty() { 1.0 } else { mean_of(r.iter().copied()) }).collect();
    let norm = mean_of(raw.iter().copied());
    raw.iter().map(|v| v / norm).collect()
}

/// Seasonally adjusted naive forecast: the last deseasonalized value
/// re-seasonalized over the horizon. Plain naive when the seasonality test
/// fails or `period <= 1`.
pub fn naive2(insample: &[f64], horizon: usize, period: usize) -> Vec<f64> {
    let Some(&last) = insample.last() else {
        return vec![0.0; horizon];
    };
    if !is_seasonal(insample, period) {
        return vec![last; horizon];
    }
    let idx = seasonal_indices(insample, period);
    let n = insample.len();
    let level = last / idx[(n - 1) % period];
    (0..horizon).map(|h| level * idx[(n + h) % period]).collect()
}

/// Repeats the last history row over the horizon.
pub fn repeat_last<S: Scalar>(history: &Tensor<S>, horizon: usize) -> Result<Tensor<S>> {
    let last = history.slice_time(history.rows() - 1, history.rows())?;
    let parts = vec![&last; horizon];
    Ok(Tensor::concat_time(&parts)?)
}

/// Aggregate scores over a forecast set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub mae: f64,
    pub smape: f64,
    pub mape: f64,
    /// Mean per-window MASE; present when in-sample series were supplied.
    pub mase: Option<f64>,
    /// Present when naive-2 references were supplied.
    pub owa: Option<f64>,
    pub windows: usize,
    /// Seasonal period used for MASE.
    pub period: Option<usize>,
}

impl MetricsReport {
    /// Pooled MSE, MAE, sMAPE and MAPE over all elements of all windows.
    pub fn from_forecasts<S: Scalar>(preds: &[Tensor<S>], truths: &[Tensor<S>]) -> Result<Self> {
        if preds.len() != truths.len() {
            return Err(crate::tensor::TensorError::ShapeMismatch(format!(
                "{} forecasts vs {} targets",
                preds.len(),
                truths.len()
            ))
            .into());
        }
        let flat = |xs: &[Tensor<S>]| -> Result<Tensor<S>> {
            let data: Vec<S> = xs.iter().flat_map(|x| x.data().iter().copied()).collect();
            Ok(Tensor::new(vec![data.len()], data)?)
        };
        for (p, t) in preds.iter().zip(truths) {
            p.require_same_shape(t)?;
        }
        let (p, t) = (flat(preds)?, flat(truths)?);
        Ok(MetricsReport {
            mse: mse(&p, &t)?,
            mae: mae(&p, &t)?,
            smape: smape(&p, &t)?,
            mape: mape(&p, &t)?,
            mase: None,
            owa: None,
            windows: preds.len(),
            period: None,
        })
    }

    /// Adds the mean MASE over windows, each scaled by its own in-sample series.
    pub fn with_mase<S: Scalar>(
        mut self,
        preds: &[Tensor<S>],
        truths: &[Tensor<S>],
        insamples: &[Vec<f64>],
        period: usize,
    ) -> Result<Self> {
        let per: Vec<f64> = preds
            .iter()
            .zip(truths)
            .zip(insamples)
            .map(|((p, t), x)| mase(p, t, x, period))
            .collect::<Result<_>>()?;
        self.mase = Some(mean_of(per.into_iter()));
        self.period = Some(period);
        Ok(self)
    }

    pub fn with_owa(mut self, smape_ref: f64, mase_ref: f64) -> Result<Self> {
        let m = self.mase.ok_or_else(|| Error::ConfigInvalid("OWA needs MASE".into()))?;
        self.owa = Some(owa(self.smape, m, smape_ref, mase_ref)?);
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> Tensor {
        Tensor::new(vec![x.len()], x.to_vec()).unwrap()
    }

    #[test]
    fn perfect_and_antipodal() {
        let t = v(&[1.0, -2.0, 3.5]);
        for f in [mse::<f64>, mae, smape, mape] {
            assert_eq!(f(&t, &t).unwrap(), 0.0);
        }
        assert_eq!(smape(&t.scale(-1.0), &t).unwrap(), 200.0);
        assert_eq!(mase(&t, &t, &[1.0, 3.0, 2.0], 1).unwrap(), 0.0);
    }

    #[test]
    fn hand_values() {
        assert_eq!(mse(&v(&[0.0]), &v(&[2.0])).unwrap(), 4.0);
        // |1-2|/3 + |4-2|/6 = 2/3, times 200/2
        assert!((smape(&v(&[2.0, 2.0]), &v(&[1.0, 4.0])).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        // |1-2|/1 + |4-2|/4 = 1.5, times 100/2
        assert!((mape(&v(&[2.0, 2.0]), &v(&[1.0, 4.0])).unwrap() - 75.0).abs() < 1e-12);
        // scale: lag-1 diffs of [1,2,4] are 1 and 2 -> 1.5; mae 1 -> 2/3
        assert!((mase(&v(&[2.0, 2.0]), &v(&[1.0, 3.0]), &[1.0, 2.0, 4.0], 1).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn random_pairs_match_loop_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.gen_range(1..40);
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let t: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let x: Vec<f64> = (0..30).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let (mut s, mut m, mut a) = (0.0, 0.0, 0.0);
            for i in 0..n {
                s += (t[i] - p[i]).abs() / (t[i].abs() + p[i].abs());
                m += (t[i] - p[i]).abs() / t[i].abs();
                a += (t[i] - p[i]).abs();
            }
            let mut scale = 0.0;
            for j in 4..30 {
                scale += (x[j] - x[j - 4]).abs();
            }
            scale /= 26.0;
            let (pt, tt) = (v(&p), v(&t));
            assert!((smape(&pt, &tt).unwrap() - 200.0 * s / n as f64).abs() <= 1e-10);
            assert!((mape(&pt, &tt).unwrap() - 100.0 * m / n as f64).abs() <= 1e-10);
            assert!((mase(&pt, &tt, &x, 4).unwrap() - a / n as f64 / scale).abs() <= 1e-10);
        }
    }

    #[test]
    fn mase_degenerate_cases() {
        let x: Vec<f64> = (0..24).map(|i| [1.0, 5.0, 2.0, 7.0][i % 4]).collect();
        let naive = v(&[1.0, 5.0, 2.0, 7.0]);
        let truth = v(&[1.0, 5.0, 2.0, 7.0]);
        assert!(matches!(mase(&naive, &truth, &x, 4), Err(Error::ZeroScale(4))));
        assert!(matches!(mase(&naive, &truth, &x[..4], 4), Err(Error::InsampleTooShort { len: 4, period: 4 })));
    }

    #[test]
    fn owa_contracts() {
        assert_eq!(owa(13.0, 1.5, 13.0, 1.5).unwrap(), 1.0);
        assert_eq!(owa(6.5, 0.75, 13.0, 1.5).unwrap(), 0.5);
        assert!(matches!(owa(1.0, 1.0, 0.0, 1.0), Err(Error::InvalidReference(_))));
        let (s2, m2) = M4_NAIVE2_OVERALL;
        assert!((owa(11.774, 1.571, s2, m2).unwrap() - 0.845).abs() < 5e-4);
    }

    #[test]
    fn naive2_plain_and_seasonal() {
        assert_eq!(naive2(&[1.0, 2.0, 3.0], 3, 1), vec![3.0; 3]);
        // strongly seasonal level-10 series with indices 0.5, 1.5
        let x: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { 5.0 } else { 15.0 }).collect();
        assert!(is_seasonal(&x, 2));
        let f = naive2(&x, 4, 2);
        for (a, b) in f.iter().zip([5.0, 15.0, 5.0, 15.0]) {
            assert!((a - b).abs() < 1e-9, "{f:?}");
        }
    }

    #[test]
    fn repeat_last_tiles_final_row() {
        let h = Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(repeat_last(&h, 2).unwrap().data(), &[5., 6., 5., 6.]);
    }

    #[test]
    fn report_pools_windows() {
        let p = vec![v(&[1.0, 2.0]), v(&[3.0, 4.0])];
        let t = vec![v(&[1.0, 1.0]), v(&[3.0, 2.0])];
        let r = MetricsReport::from_forecasts(&p, &t).unwrap();
        assert_eq!(r.windows, 2);
        assert!((r.mse - 5.0 / 4.0).abs() < 1e-12);
        assert!((r.mae - 0.75).abs() < 1e-12);
        assert!(r.owa.is_none());
        let r = r.with_mase(&p, &t, &[vec![0.0, 1.0], vec![0.0, 2.0]], 1).unwrap();
        assert!((r.mase.unwrap() - 0.5).abs() < 1e-12);
        assert!(r.with_owa(1.0, 1.0).unwrap().owa.is_some());
    }

    proptest! {
        #[test]
        fn permutation_invariant_and_nonnegative(
            pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..30),
            rot in 0usize..30,
        ) {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let k = rot % p.len();
            let mut p2 = p.clone();
            let mut t2 = t.clone();
            p2.rotate_left(k);
            t2.rotate_left(k);
            for f in [mse::<f64>, mae, smape, mape] {
                let a = f(&v(&p), &v(&t)).unwrap();
                let b = f(&v(&p2), &v(&t2)).unwrap();
                prop_assert!(a >= 0.0);
                prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
            }
            prop_assert!(smape(&v(&p), &v(&t)).unwrap() <= 200.0 + 1e-9);
        }
    }
}
