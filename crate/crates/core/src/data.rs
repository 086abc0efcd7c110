//! Dataset ingestion, chronological splits and sliding windows.
//!
//! Split borders follow the long-horizon benchmark convention: the train
//! segment is `[0, n_train)`, and the validation and test segments start `L`
//! rows before their first target so their earliest histories reach back
//! across the border. Targets never leave their own split.

use std::io::Read;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::tensor::{ReduceOp, Tensor};

/// Random access to `(history (L, D), target (T, D))` pairs.
pub trait WindowSource<S: Scalar> {
    fn name(&self) -> &'static str;
    fn len(&self) -> usize;
    fn window(&self, index: usize) -> Result<(Tensor<S>, Tensor<S>)>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Which leading column, if any, holds timestamps.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestampColumn {
    /// The first column when its header is `date`, `time` or `timestamp`
    /// (any case) or its first cell is not a number.
    #[default]
    Auto,
    Named(String),
    None,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    #[serde(default)]
    pub timestamp: TimestampColumn,
    /// Value columns to keep, in this order; every non-timestamp column when absent.
    #[serde(default)]
    pub columns: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries<S: Scalar = f64> {
    /// `(rows, D)`.
    pub values: Tensor<S>,
    pub columns: Vec<String>,
    pub timestamps: Option<Vec<String>>,
    /// Rows dropped because a selected cell was empty or a missing marker.
    pub rejected_rows: usize,
}

impl<S: Scalar> RawSeries<S> {
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }
}

fn is_gap(cell: &str) -> bool {
    matches!(cell.trim().to_ascii_lowercase().as_str(), "" | "nan" | "na" | "n/a" | "null")
}

pub fn load_csv<S: Scalar>(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<RawSeries<S>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

/// Parses headered comma-separated text. Row numbers in errors count data
/// records from 1, excluding the header.
pub fn read_csv<S: Scalar>(reader: impl Read, schema: &CsvSchema) -> Result<RawSeries<S>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let records = rdr.records().collect::<std::result::Result<Vec<_>, _>>()?;

    let ts_index = match &schema.timestamp {
        TimestampColumn::None => None,
        TimestampColumn::Named(name) => {
            Some(headers.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn(name.clone()))?)
        }
        TimestampColumn::Auto => {
            let named = headers
                .first()
                .is_some_and(|h| matches!(h.to_ascii_lowercase().as_str(), "date" | "time" | "timestamp"));
            let textual = records.first().and_then(|r| r.get(0)).is_some_and(|c| !is_gap(c) && c.parse::<f64>().is_err());
            (named || textual).then_some(0)
        }
    };
    let value_idx: Vec<usize> = match &schema.columns {
        Some(cols) => cols
            .iter()
            .map(|c| headers.iter().position(|h| h == c).ok_or_else(|| Error::MissingColumn(c.clone())))
            .collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|&i| Some(i) != ts_index).collect(),
    };
    if value_idx.is_empty() {
        return Err(Error::MissingColumn("<any value column>".into()));
    }

    let mut data = Vec::with_capacity(records.len() * value_idx.len());
    let mut stamps = ts_index.map(|_| Vec::with_capacity(records.len()));
    let mut rejected = 0;
    'rows: for (r, rec) in records.iter().enumerate() {
        let mut row = Vec::with_capacity(value_idx.len());
        for &c in &value_idx {
            let cell = rec.get(c).unwrap_or("");
            if is_gap(cell) {
                rejected += 1;
                continue 'rows;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row: r + 1,
                column: headers[c].clone(),
                message: format!("`{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { row: r + 1, column: headers[c].clone(), message: format!("`{cell}` is not finite") });
            }
            row.push(S::of(v));
        }
        data.extend(row);
        if let (Some(s), Some(i)) = (stamps.as_mut(), ts_index) {
            s.push(rec.get(i).unwrap_or("").to_string());
        }
    }
    let rows = data.len() / value_idx.len();
    Ok(RawSeries {
        values: Tensor::new(vec![rows, value_idx.len()], data)?,
        columns: value_idx.iter().map(|&i| headers[i].clone()).collect(),
        timestamps: stamps,
        rejected_rows: rejected,
    })
}

/// How rows are divided into train, validation and test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Fixed row counts.
    Counts { train: usize, val: usize, test: usize },
    /// `train = floor(rows * train)`, `test = floor(rows * test)`, the rest validates.
    Ratio { train: f64, test: f64 },
}

impl Protocol {
    /// Hourly ETT: 12 / 4 / 4 months of 30 days.
    pub const ETT_HOURLY: Protocol = Protocol::Counts { train: 8640, val: 2880, test: 2880 };
    /// Quarter-hourly ETT: the hourly borders times four.
    pub const ETT_MINUTE: Protocol = Protocol::Counts { train: 34560, val: 11520, test: 11520 };
    pub const DEFAULT_RATIO: Protocol = Protocol::Ratio { train: 0.7, test: 0.2 };

    /// Standard protocol for a dataset name such as `ETTh1` or `electricity`.
    pub fn for_dataset(name: &str) -> Protocol {
        let lower = name.to_ascii_lowercase();
        if lower.starts_with("etth") {
            Protocol::ETT_HOURLY
        } else if lower.starts_with("ettm") {
            Protocol::ETT_MINUTE
        } else {
            Protocol::DEFAULT_RATIO
        }
    }

    /// Row counts `(train, val, test)` for a series of `rows` rows.
    pub fn counts(&self, rows: usize) -> (usize, usize, usize) {
        match *self {
            Protocol::Counts { train, val, test } => (train, val, test),
            Protocol::Ratio { train, test } => {
                let tr = (rows as f64 * train) as usize;
                let te = (rows as f64 * test) as usize;
                (tr, rows.saturating_sub(tr + te), te)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "validation",
            Split::Test => "test",
        }
    }
}

/// Per-channel standardization fitted on the training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler<S: Scalar = f64> {
    pub mean: Tensor<S>,
    pub std: Tensor<S>,
}

impl<S: Scalar> Scaler<S> {
    pub fn fit(values: &Tensor<S>) -> Result<Self> {
        let mean = values.reduce(0, ReduceOp::Mean, true)?;
        let floor = S::of(crate::model::STD_FLOOR);
        let std = values.reduce(0, ReduceOp::Std, true)?.map(|s| s.max(floor));
        Ok(Scaler { mean, std })
    }

    pub fn transform(&self, values: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(values.sub(&self.mean)?.div(&self.std)?)
    }

    pub fn inverse(&self, values: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(values.mul(&self.std)?.add(&self.mean)?)
    }
}

/// A series cut into three chronological segments, windowed lazily.
#[derive(Debug, Clone)]
pub struct WindowedDataset<S: Scalar = f64> {
    values: Tensor<S>,
    history: usize,
    horizon: usize,
    segments: [Range<usize>; 3],
    scaler: Option<Scaler<S>>,
}

/// Splits `raw` by `protocol` and, when `standardize` is set, scales every
/// row with statistics of the training segment.
pub fn split_and_window<S: Scalar>(
    raw: &RawSeries<S>,
    history: usize,
    horizon: usize,
    protocol: Protocol,
    standardize: bool,
) -> Result<WindowedDataset<S>> {
    let rows = raw.rows();
    if history == 0 || horizon == 0 {
        return Err(Error::ConfigInvalid("history and horizon must be positive".into()));
    }
    let (n_train, n_val, n_test) = protocol.counts(rows);
    let used = n_train + n_val + n_test;
    if used > rows || n_train < history + horizon {
        return Err(Error::SeriesTooShort { rows, history, horizon });
    }
    let val_end = n_train + n_val;
    let segment = |start: usize, end: usize| if end > start { start.saturating_sub(history)..end } else { end..end };
    let segments = [0..n_train, segment(n_train, val_end), segment(val_end, used)];
    let (values, scaler) = if standardize {
        let scaler = Scaler::fit(&raw.values.slice_time(0, n_train)?)?;
        (scaler.transform(&raw.values)?, Some(scaler))
    } else {
        (raw.values.clone(), None)
    };
    Ok(WindowedDataset { values, history, horizon, segments, scaler })
}

impl<S: Scalar> WindowedDataset<S> {
    pub fn history(&self) -> usize {
        self.history
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn scaler(&self) -> Option<&Scaler<S>> {
        self.scaler.as_ref()
    }

    /// Row range of a split, including the `L` look-back rows of val and test.
    pub fn segment(&self, split: Split) -> Range<usize> {
        self.segments[split as usize].clone()
    }

    /// Complete `(history, target)` windows of a split.
    pub fn count(&self, split: Split) -> usize {
        (self.segment(split).len() + 1).saturating_sub(self.history + self.horizon)
    }

    /// Forecast origins of a split: positions with a full history, ignoring
    /// whether the horizon fits. This is the count listed in dataset tables.
    pub fn origin_count(&self, split: Split) -> usize {
        (self.segment(split).len() + 1).saturating_sub(self.history)
    }

    pub fn split(&self, split: Split) -> SplitView<'_, S> {
        SplitView { data: self, split }
    }

    /// First row of the history of window `index` in `split`.
    pub fn window_start(&self, split: Split, index: usize) -> usize {
        self.segment(split).start + index
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SplitView<'a, S: Scalar = f64> {
    data: &'a WindowedDataset<S>,
    split: Split,
}

impl<S: Scalar> SplitView<'_, S> {
    pub fn split(&self) -> Split {
        self.split
    }
}

impl<S: Scalar> WindowSource<S> for SplitView<'_, S> {
    fn name(&self) -> &'static str {
        self.split.name()
    }

    fn len(&self) -> usize {
        self.data.count(self.split)
    }

    fn window(&self, index: usize) -> Result<(Tensor<S>, Tensor<S>)> {
        let len = self.len();
        if index >= len {
            return Err(crate::tensor::TensorError::IndexOutOfRange { start: index, stop: index + 1, len }.into());
        }
        let start = self.data.window_start(self.split, index);
        let mid = start + self.data.history;
        Ok((self.data.values.slice_time(start, mid)?, self.data.values.slice_time(mid, mid + self.data.horizon)?))
    }
}

/// `input + S * alpha * N(0, 1)` with `S` the per-channel population standard
/// deviation of `input` over time.
pub fn inject_noise<S: Scalar>(input: &Tensor<S>, alpha: f64, rng: &mut impl Rng) -> Result<Tensor<S>> {
    if alpha == 0.0 {
        return Ok(input.clone());
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::ConfigInvalid(format!("noise alpha {alpha} must be non-negative")));
    }
    let std = input.reduce(0, ReduceOp::Std, false)?;
    let d = input.cols();
    let data = input
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let z: f64 = rng.sample(StandardNormal);
            v + std.data()[i % d] * S::of(alpha * z)
        })
        .collect();
    Ok(Tensor::new(input.dims().to_vec(), data)?)
}

/// Adds [`inject_noise`] to the histories of another source. Each window's
/// noise is a pure function of `(seed, index)`.
pub struct NoisySource<'a, S: Scalar> {
    pub inner: &'a dyn WindowSource<S>,
    pub alpha: f64,
    pub seed: u64,
}

impl<S: Scalar> WindowSource<S> for NoisySource<'_, S> {
    fn name(&self) -> &'static str {
        self.inner.name()
    }

    fn len(&self) -> usize {
        self.inner.len()
    }

    fn window(&self, index: usize) -> Result<(Tensor<S>, Tensor<S>)> {
        let (history, target) = self.inner.window(index)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(Stream::Noise as u64);
        Ok((inject_noise(&history, self.alpha, &mut rng)?, target))
    }
}

/// Windows held in memory, e.g. drawn from many short series.
#[derive(Debug, Clone)]
pub struct WindowList<S: Scalar = f64> {
    pub name: &'static str,
    pub windows: Vec<(Tensor<S>, Tensor<S>)>,
}

impl<S: Scalar> WindowSource<S> for WindowList<S> {
    fn name(&self) -> &'static str {
        self.name
    }

    fn len(&self) -> usize {
        self.windows.len()
    }

    fn window(&self, index: usize) -> Result<(Tensor<S>, Tensor<S>)> {
        self.windows.get(index).cloned().ok_or_else(|| {
            crate::tensor::TensorError::IndexOutOfRange { start: index, stop: index + 1, len: self.windows.len() }.into()
        })
    }
}

/// Sampling frequency of an M4 subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum M4Frequency {
    Yearly,
    Quarterly,
    Monthly,
    Weekly,
    Daily,
    Hourly,
}

impl M4Frequency {
    pub const ALL: [M4Frequency; 6] = [
        M4Frequency::Yearly,
        M4Frequency::Quarterly,
        M4Frequency::Monthly,
        M4Frequency::Weekly,
        M4Frequency::Daily,
        M4Frequency::Hourly,
    ];

    pub fn horizon(self) -> usize {
        match self {
            M4Frequency::Yearly => 6,
            M4Frequency::Quarterly => 8,
            M4Frequency::Monthly => 18,
            M4Frequency::Weekly => 13,
            M4Frequency::Daily => 14,
            M4Frequency::Hourly => 48,
        }
    }

    /// Seasonal period used by MASE and the naive-2 benchmark.
    pub fn period(self) -> usize {
        match self {
            M4Frequency::Yearly | M4Frequency::Weekly | M4Frequency::Daily => 1,
            M4Frequency::Quarterly => 4,
            M4Frequency::Monthly => 12,
            M4Frequency::Hourly => 24,
        }
    }

    /// Parses a subset name such as `Monthly` or `monthly-train.csv`.
    pub fn from_name(name: &str) -> Option<Self> {
        let lower = name.to_ascii_lowercase();
        M4Frequency::ALL.into_iter().find(|f| lower.contains(&format!("{f:?}").to_ascii_lowercase()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct M4Series {
    pub id: String,
    pub train: Vec<f64>,
    pub test: Vec<f64>,
}

fn read_m4_file(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut out = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or("").to_string();
        let mut values = Vec::new();
        for (c, cell) in rec.iter().enumerate().skip(1) {
            if cell.trim().is_empty() {
                break;
            }
            let v = cell.trim().parse::<f64>().map_err(|_| Error::Parse {
                row: r + 1,
                column: headers.get(c).cloned().unwrap_or_else(|| format!("#{c}")),
                message: format!("`{cell}` is not a number"),
            })?;
            values.push(v);
        }
        out.push((id, values));
    }
    Ok(out)
}

/// Reads the competition's paired files: one row per series, the id in the
/// first column and values left-aligned with trailing empty cells.
pub fn load_m4(train_path: impl AsRef<Path>, test_path: impl AsRef<Path>) -> Result<Vec<M4Series>> {
    let train = read_m4_file(train_path.as_ref())?;
    let test = read_m4_file(test_path.as_ref())?;
    if train.len() != test.len() {
        return Err(Error::ConfigInvalid(format!("{} training series but {} test series", train.len(), test.len())));
    }
    train
        .into_iter()
        .zip(test)
        .map(|((id, tr), (tid, te))| {
            if id != tid {
                return Err(Error::ConfigInvalid(format!("series `{id}` paired with `{tid}`")));
            }
            Ok(M4Series { id, train: tr, test: te })
        })
        .collect()
}

fn column<S: Scalar>(values: &[f64]) -> Result<Tensor<S>> {
    Ok(Tensor::new(vec![values.len(), 1], values.iter().map(|&v| S::of(v)).collect())?)
}

/// Last `len` points of `values`, left-padded with the first value when the
/// series is shorter.
pub fn padded_history(values: &[f64], len: usize) -> Vec<f64> {
    if values.len() >= len {
        return values[values.len() - len..].to_vec();
    }
    let first = values.first().copied().unwrap_or(0.0);
    std::iter::repeat_n(first, len - values.len()).chain(values.iter().copied()).collect()
}

/// Every stride-1 training window of the in-sample parts. The final
/// `horizon` points of each in-sample series are held out as validation
/// targets.
pub fn m4_windows<S: Scalar>(series: &[M4Series], history: usize, horizon: usize) -> Result<(WindowList<S>, WindowList<S>)> {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for s in series {
        let n = s.train.len();
        if n < horizon + 2 {
            continue;
        }
        let fit = &s.train[..n - horizon];
        for end in history..=fit.len().saturating_sub(horizon) {
            train.push((column(&fit[end - history..end])?, column(&fit[end..end + horizon])?));
        }
        val.push((column(&padded_history(fit, history))?, column(&s.train[n - horizon..])?));
    }
    Ok((WindowList { name: "train", windows: train }, WindowList { name: "validation", windows: val }))
}

/// Noisy multi-channel sine: channel `c` is `sin(2 pi (t + c * period / 4) / period)`
/// plus Gaussian noise with standard deviation `noise_std`.
pub fn sine_series<S: Scalar>(rows: usize, channels: usize, period: f64, noise_std: f64, seed: u64) -> RawSeries<S> {
    let mut rng = crate::rng::stream_rng(seed, Stream::Data);
    let mut data = Vec::with_capacity(rows * channels);
    for t in 0..rows {
        for c in 0..channels {
            let phase = 2.0 * std::f64::consts::PI * (t as f64 + c as f64 * period / 4.0) / period;
            let z: f64 = rng.sample(StandardNormal);
            data.push(S::of(phase.sin() + noise_std * z));
        }
    }
    RawSeries {
        values: Tensor::new(vec![rows, channels], data).expect("dims match data"),
        columns: (0..channels).map(|c| format!("ch{c}")).collect(),
        timestamps: None,
        rejected_rows: 0,
    }
}
