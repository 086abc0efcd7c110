//! Sliding pattern matching and pattern extension kernels.
//!
//! A query window `q` (`n x D`) slides over a key region `k` (`m x D`). At
//! delay `j` the score is the inner product of the mean-centred query with the
//! mean-centred key window `k[j..j+n]`, summed over time and channels. Each
//! delay then proposes a continuation: the value rows that followed the
//! matched window, tiled out to the horizon and lifted by the level gap
//! between query and window at every repetition.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// Scores and window statistics for every delay `j in 0..m - n`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternMatch<S: Scalar = f64> {
    pub scores: Vec<S>,
    pub query_mean: S,
    pub window_means: Vec<S>,
}

impl<S: Scalar> PatternMatch<S> {
    /// Level gap `query_mean - window_mean` per delay.
    pub fn trend_gaps(&self) -> Vec<S> {
        self.window_means.iter().map(|&w| self.query_mean - w).collect()
    }

    /// Delay with the highest score (first one on ties).
    pub fn best_delay(&self) -> Option<usize> {
        let mut best: Option<(usize, S)> = None;
        for (j, &r) in self.scores.iter().enumerate() {
            if best.is_none_or(|(_, b)| r > b) {
                best = Some((j, r));
            }
        }
        best.map(|(j, _)| j)
    }
}

fn check_pair<S: Scalar>(query: &Tensor<S>, keys: &Tensor<S>) -> Result<(usize, usize, usize)> {
    if query.rank() != 2 || keys.rank() != 2 || query.cols() != keys.cols() {
        return Err(TensorError::ShapeMismatch(format!(
            "query {:?} vs keys {:?}",
            query.dims(),
            keys.dims()
        ))
        .into());
    }
    let (n, m) = (query.rows(), keys.rows());
    if m <= n {
        return Err(Error::ConfigInvalid(format!(
            "key span {m} must exceed query length {n} by at least one delay"
        )));
    }
    Ok((n, m, query.cols()))
}

pub fn match_patterns<S: Scalar>(query: &Tensor<S>, keys: &Tensor<S>) -> Result<PatternMatch<S>> {
    let (n, m, d) = check_pair(query, keys)?;
    let width = S::of_usize(n * d);
    let query_mean = query.mean_all();
    let centred: Vec<S> = query.data().iter().map(|&v| v - query_mean).collect();

    // window means from prefix sums of row totals
    let mut prefix = Vec::with_capacity(m + 1);
    prefix.push(S::zero());
    for row in keys.data().chunks(d) {
        let last = *prefix.last().unwrap();
        prefix.push(last + row.iter().copied().sum::<S>());
    }

    let delays = m - n;
    let mut scores = Vec::with_capacity(delays);
    let mut window_means = Vec::with_capacity(delays);
    for j in 0..delays {
        let mean = (prefix[j + n] - prefix[j]) / width;
        let window = &keys.data()[j * d..(j + n) * d];
        let r = centred.iter().zip(window).map(|(&qc, &kv)| qc * (kv - mean)).sum();
        scores.push(r);
        window_means.push(mean);
    }
    Ok(PatternMatch { scores, query_mean, window_means })
}

/// Tiles `values[delay + query_len..]` to `horizon` rows; copy `l` (1-based)
/// is lifted by `l * gap`, and the trailing partial copy by `(a + 1) * gap`
/// where `a = horizon / cut_len`.
pub fn pattern_extend<S: Scalar>(
    values: &Tensor<S>,
    delay: usize,
    gap: S,
    horizon: usize,
    query_len: usize,
) -> Result<Tensor<S>> {
    let len = values.rows();
    let start = delay + query_len;
    if start >= len {
        return Err(Error::EmptyCut { delay, query_len, len });
    }
    let cut = len - start;
    let d = values.cols();
    let mut out = Vec::with_capacity(horizon * d);
    for t in 0..horizon {
        let lift = S::of_usize(t / cut + 1) * gap;
        let src = &values.data()[(start + t % cut) * d..(start + t % cut + 1) * d];
        out.extend(src.iter().map(|&v| v + lift));
    }
    Ok(Tensor::new(vec![horizon, d], out)?)
}

/// How delay scores become mixing weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `score / scale`, no normalisation across delays.
    Raw,
    /// `softmax(score / scale)` over delays.
    Softmax,
}

/// Geometry shared by forward and backward of the extension mix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtendSpec {
    pub query_len: usize,
    pub horizon: usize,
    pub scale: f64,
    pub weighting: Weighting,
}

pub(crate) fn mixing_weights<S: Scalar>(scores: &[S], scale: S, weighting: Weighting) -> Vec<S> {
    match weighting {
        Weighting::Raw => scores.iter().map(|&r| r / scale).collect(),
        Weighting::Softmax => {
            let z: Vec<S> = scores.iter().map(|&r| r / scale).collect();
            let top = z.iter().copied().fold(S::neg_infinity(), S::max);
            let e: Vec<S> = z.iter().map(|&v| (v - top).exp()).collect();
            let total: S = e.iter().copied().sum();
            e.into_iter().map(|v| v / total).collect()
        }
    }
}

fn check_values<S: Scalar>(values: &Tensor<S>, d: usize, m: usize) -> Result<()> {
    if values.rank() != 2 || values.cols() != d || values.rows() < m {
        return Err(TensorError::ShapeMismatch(format!(
            "values {:?} must be (len >= {m}, {d})",
            values.dims()
        ))
        .into());
    }
    Ok(())
}

/// Weighted sum of every delay's extension: `sum_j w_j * extend_j`.
pub fn extend_and_mix<S: Scalar>(
    query: &Tensor<S>,
    keys: &Tensor<S>,
    values: &Tensor<S>,
    spec: &ExtendSpec,
) -> Result<(Tensor<S>, PatternMatch<S>)> {
    let (n, m, d) = check_pair(query, keys)?;
    check_values(values, d, m)?;
    if n != spec.query_len {
        return Err(Error::ConfigInvalid(format!("query has {n} rows, spec says {}", spec.query_len)));
    }
    let pm = match_patterns(query, keys)?;
    let weights = mixing_weights(&pm.scores, S::of(spec.scale), spec.weighting);
    let len = values.rows();
    let horizon = spec.horizon;
    let mut out = vec![S::zero(); horizon * d];
    for (j, (&w, gap)) in weights.iter().zip(pm.trend_gaps()).enumerate() {
        let start = j + n;
        let cut = len - start;
        for t in 0..horizon {
            let lift = S::of_usize(t / cut + 1) * gap;
            let src = (start + t % cut) * d;
            let row = &mut out[t * d..(t + 1) * d];
            for (c, o) in row.iter_mut().enumerate() {
                *o += w * (values.data()[src + c] + lift);
            }
        }
    }
    Ok((Tensor::new(vec![horizon, d], out)?, pm))
}

/// Gradients of [`extend_and_mix`] with respect to query, keys and values.
pub(crate) fn extend_and_mix_backward<S: Scalar>(
    query: &Tensor<S>,
    keys: &Tensor<S>,
    values: &Tensor<S>,
    spec: &ExtendSpec,
    upstream: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let (n, _, d) = check_pair(query, keys)?;
    let pm = match_patterns(query, keys)?;
    let scale = S::of(spec.scale);
    let weights = mixing_weights(&pm.scores, scale, spec.weighting);
    let gaps = pm.trend_gaps();
    let len = values.rows();
    let horizon = spec.horizon;
    let g = upstream.data();
    let row_sums: Vec<S> = g.chunks(d).map(|r| r.iter().copied().sum()).collect();

    let mut dv = vec![S::zero(); values.numel()];
    let mut weight_grads = Vec::with_capacity(weights.len());
    let mut gap_grads = Vec::with_capacity(weights.len());
    for (j, &w) in weights.iter().enumerate() {
        let start = j + n;
        let cut = len - start;
        let mut dw = S::zero();
        let mut lift_sum = S::zero();
        for t in 0..horizon {
            let src = (start + t % cut) * d;
            let grow = &g[t * d..(t + 1) * d];
            for c in 0..d {
                dw += grow[c] * values.data()[src + c];
                dv[src + c] += w * grow[c];
            }
            lift_sum += row_sums[t] * S::of_usize(t / cut + 1);
        }
        dw += gaps[j] * lift_sum;
        weight_grads.push(dw);
        gap_grads.push(w * lift_sum);
    }

    let score_grads: Vec<S> = match spec.weighting {
        Weighting::Raw => weight_grads.iter().map(|&g| g / scale).collect(),
        Weighting::Softmax => {
            let mean: S = weights.iter().zip(&weight_grads).map(|(&a, &g)| a * g).sum();
            weights.iter().zip(&weight_grads).map(|(&a, &g)| a * (g - mean) / scale).collect()
        }
    };

    let width = S::of_usize(n * d);
    let centred_q: Vec<S> = query.data().iter().map(|&v| v - pm.query_mean).collect();
    let mut dq = vec![S::zero(); query.numel()];
    let mut dk = vec![S::zero(); keys.numel()];
    for j in 0..weights.len() {
        let (dr, dgap) = (score_grads[j], gap_grads[j] / width);
        let mean = pm.window_means[j];
        let base = j * d;
        for i in 0..n * d {
            dq[i] += dr * (keys.data()[base + i] - mean) + dgap;
            dk[base + i] += dr * centred_q[i] - dgap;
        }
    }
    Ok((
        Tensor::new(query.dims().to_vec(), dq)?,
        Tensor::new(keys.dims().to_vec(), dk)?,
        Tensor::new(values.dims().to_vec(), dv)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extension_counts() {
        // C = 3, T = 7: a = 2 full copies and b = 1 trailing row
        let v = Tensor::new(vec![5, 1], vec![9., 9., 1., 2., 3.]).unwrap();
        let out = pattern_extend(&v, 0, 10.0, 7, 2).unwrap();
        assert_eq!(out.data(), &[11., 12., 13., 21., 22., 23., 31.]);
    }

    #[test]
    fn zero_gap_single_copy_is_cut() {
        let v = Tensor::new(vec![6, 2], (0..12).map(f64::from).collect()).unwrap();
        let out = pattern_extend(&v, 1, 0.0, 3, 2).unwrap();
        assert_eq!(out, v.slice_time(3, 6).unwrap());
    }

    #[test]
    fn hand_traced_lift() {
        let v = Tensor::new(vec![3, 1], vec![7., 0., 0.]).unwrap();
        let out = pattern_extend(&v, 0, 1.0, 5, 1).unwrap();
        assert_eq!(out.data(), &[1., 1., 2., 2., 3.]);
    }

    #[test]
    fn empty_cut_rejected() {
        let v = Tensor::<f64>::zeros(&[4, 1]).unwrap();
        assert!(matches!(pattern_extend(&v, 2, 0.0, 3, 2), Err(Error::EmptyCut { .. })));
    }

    #[test]
    fn constant_input_scores_zero() {
        let q = Tensor::full(&[3, 2], 4.0).unwrap();
        let k = Tensor::full(&[10, 2], 4.0).unwrap();
        let pm = match_patterns(&q, &k).unwrap();
        assert_eq!(pm.scores.len(), 7);
        assert!(pm.scores.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn key_span_must_exceed_query() {
        let q = Tensor::<f64>::zeros(&[4, 1]).unwrap();
        let k = Tensor::zeros(&[4, 1]).unwrap();
        assert!(matches!(match_patterns(&q, &k), Err(Error::ConfigInvalid(_))));
    }

    #[test]
    fn softmax_weights_sum_to_one() {
        let w = mixing_weights(&[1.0, -3.0, 2.5, 0.0], 2.0, Weighting::Softmax);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(w[2] > w[0] && w[0] > w[3] && w[3] > w[1]);
    }
}
