//! Wall-clock scaling of the forward pass with history length.

use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{ModelConfig, MprNet};

/// How the query window length follows the history length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QueryScaling {
    /// Same `query_len` at every history length.
    Fixed(usize),
    /// `query_len = round(fraction * history_len)`, at least 1.
    Proportional(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeRow {
    pub history_len: usize,
    pub query_len: usize,
    pub median_secs: f64,
}

/// Times `repeats` evaluation forwards of a freshly built model per history
/// length and reports the median. Everything but `history_len` and
/// `query_len` is taken from `template`; the key region spans the history.
pub fn runtime_scaling_probe<S: Scalar>(
    template: &ModelConfig,
    lengths: &[usize],
    query: QueryScaling,
    repeats: usize,
    seed: u64,
) -> Result<Vec<ProbeRow>> {
    let repeats = repeats.max(1);
    let mut rows = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let mut cfg = template.clone();
        cfg.history_len = len;
        cfg.key_span = None;
        cfg.query_len = Some(match query {
            QueryScaling::Fixed(n) => n,
            QueryScaling::Proportional(f) => ((f * len as f64).round() as usize).max(1),
        });
        let model = MprNet::<S>::new(cfg.clone(), seed)?;
        let mut rng = stream_rng(seed, Stream::Data);
        let data = (0..len * cfg.channels).map(|_| S::of(rng.gen_range(-1.0..1.0))).collect();
        let input = Tensor::new(vec![len, cfg.channels], data)?;

        // One untimed warm-up pass.
        model.predict(&input)?;
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let start = Instant::now();
            std::hint::black_box(model.predict(&input)?);
            times.push(start.elapsed().as_secs_f64());
        }
        rows.push(ProbeRow {
            history_len: len,
            query_len: cfg.query_len(),
            median_secs: median(&mut times),
        });
    }
    Ok(rows)
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_row_per_length() {
        let cfg = ModelConfig::new(32, 8, 2, 1);
        let rows = runtime_scaling_probe::<f64>(&cfg, &[16, 32, 64], QueryScaling::Fixed(4), 2, 0).unwrap();
        assert_eq!(rows.iter().map(|r| r.history_len).collect::<Vec<_>>(), vec![16, 32, 64]);
        assert!(rows.iter().all(|r| r.query_len == 4 && r.median_secs > 0.0));
        let rows = runtime_scaling_probe::<f64>(&cfg, &[40], QueryScaling::Proportional(0.25), 1, 0).unwrap();
        assert_eq!(rows[0].query_len, 10);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    }
}
