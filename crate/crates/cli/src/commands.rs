//! The five subcommands. Each writes the resolved config next to its outputs.

use std::fmt::Write as _;
use std::path::PathBuf;

use mprnet::data::{load_csv, split_and_window, NoisySource, RawSeries, Split, WindowSource, WindowedDataset};
use mprnet::metrics::{repeat_last, MetricsReport};
use mprnet::model::probe::{runtime_scaling_probe, ProbeRow, QueryScaling};
use mprnet::model::Ablation;
use mprnet::rng::{stream_rng, Stream};
use mprnet::training::{forecast_all, history_jsonl, train, TrainOutcome};
use mprnet::{MprNet, Tensor};
use rand::Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::io::{write, write_json};

pub const CHECKPOINT: &str = "checkpoint.bin";
pub const HISTORY: &str = "history.jsonl";
pub const REPORT: &str = "report.json";
pub const FORECASTS: &str = "forecasts.csv";
pub const FORECAST: &str = "forecast.csv";
pub const PROBE: &str = "probe.csv";
pub const ABLATION: &str = "ablation.csv";

struct Loaded {
    raw: RawSeries,
    data: WindowedDataset,
}

/// Reads the dataset and fixes `model.channels` to its width.
fn load(cfg: &mut RunConfig) -> Result<Loaded, CliError> {
    let ds = cfg.dataset.as_ref().expect("resolved with a dataset");
    let raw = load_csv::<f64>(&ds.path, &ds.schema())?;
    if raw.rejected_rows > 0 {
        eprintln!("note: rejected {} rows with missing values", raw.rejected_rows);
    }
    cfg.model.channels = raw.channels();
    cfg.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let data = split_and_window(&raw, cfg.model.history_len, cfg.model.horizon, ds.protocol(), ds.standardize)?;
    Ok(Loaded { raw, data })
}

/// Runs `f` on the train, validation and test sources, with noise on every
/// history when `noise_alpha > 0`.
fn with_sources<T>(
    cfg: &RunConfig,
    data: &WindowedDataset,
    f: impl FnOnce([&dyn WindowSource<f64>; 3]) -> Result<T, CliError>,
) -> Result<T, CliError> {
    let views = Split::ALL.map(|s| data.split(s));
    if cfg.noise_alpha == 0.0 {
        return f([&views[0], &views[1], &views[2]]);
    }
    let base: u64 = stream_rng(cfg.seed, Stream::Noise).gen();
    let noisy: Vec<NoisySource<f64>> = views
        .iter()
        .enumerate()
        .map(|(k, v)| NoisySource { inner: v, alpha: cfg.noise_alpha, seed: base.wrapping_add(k as u64) })
        .collect();
    f([&noisy[0], &noisy[1], &noisy[2]])
}

fn fit(cfg: &RunConfig, train_set: &dyn WindowSource<f64>, val_set: &dyn WindowSource<f64>) -> Result<(MprNet, TrainOutcome), CliError> {
    let mut model = MprNet::new(cfg.model.clone(), cfg.seed)?;
    let outcome = train(&mut model, train_set, val_set, &cfg.train)?;
    Ok((model, outcome))
}

fn load_model(cfg: &RunConfig, checkpoint: &Option<PathBuf>) -> Result<MprNet, CliError> {
    let path = checkpoint.clone().unwrap_or_else(|| cfg.out.join(CHECKPOINT));
    let mut model = MprNet::new(cfg.model.clone(), cfg.seed)?;
    model.params_mut().load(&path)?;
    Ok(model)
}

pub fn train_cmd(mut cfg: RunConfig) -> Result<(), CliError> {
    let loaded = load(&mut cfg)?;
    let (model, outcome) = with_sources(&cfg, &loaded.data, |[tr, va, _]| fit(&cfg, tr, va))?;
    cfg.write()?;
    model.params().save(cfg.out.join(CHECKPOINT))?;
    write(&cfg.out.join(HISTORY), history_jsonl(&outcome.history).as_bytes())?;
    println!(
        "trained {} epochs ({} steps); best epoch {} with validation loss {:.6}; outputs in {}",
        outcome.history.len(),
        outcome.steps,
        outcome.best_epoch,
        outcome.best_val_loss,
        cfg.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    dataset: String,
    split: &'static str,
    model: MetricsReport,
    repeat_last: MetricsReport,
}

fn evaluate(model: &MprNet, source: &dyn WindowSource<f64>) -> Result<(MetricsReport, MetricsReport, Vec<Tensor>, Vec<Tensor>), CliError> {
    let (preds, truths) = forecast_all(model, source)?;
    let horizon = model.config().horizon;
    let baseline = (0..source.len())
        .map(|i| repeat_last(&source.window(i)?.0, horizon))
        .collect::<mprnet::Result<Vec<_>>>()?;
    let report = MetricsReport::from_forecasts(&preds, &truths)?;
    let naive = MetricsReport::from_forecasts(&baseline, &truths)?;
    Ok((report, naive, preds, truths))
}

fn print_reports(rows: &[(&str, &MetricsReport)]) {
    println!("{:<12} {:>10} {:>10} {:>10} {:>10}", "forecaster", "mse", "mae", "smape", "mape");
    for (name, r) in rows {
        println!("{name:<12} {:>10.6} {:>10.6} {:>10.4} {:>10.4}", r.mse, r.mae, r.smape, r.mape);
    }
}

pub fn eval_cmd(mut cfg: RunConfig, checkpoint: Option<PathBuf>, split: Split) -> Result<(), CliError> {
    let loaded = load(&mut cfg)?;
    let model = load_model(&cfg, &checkpoint)?;
    let (report, naive, preds, truths) = with_sources(&cfg, &loaded.data, |sources| evaluate(&model, sources[split as usize]))?;

    let mut csv = String::from("window_id,step,channel,y_true,y_pred\n");
    for (w, (p, t)) in preds.iter().zip(&truths).enumerate() {
        for step in 0..p.rows() {
            for (c, name) in loaded.raw.columns.iter().enumerate() {
                writeln!(csv, "{w},{step},{name},{},{}", t.at(step, c), p.at(step, c)).expect("writing to a String");
            }
        }
    }
    cfg.write()?;
    write(&cfg.out.join(FORECASTS), csv.as_bytes())?;
    let dataset = cfg.dataset.as_ref().map(|d| d.name()).unwrap_or_default();
    write_json(&cfg.out.join(REPORT), &EvalReport { dataset, split: split.name(), model: report.clone(), repeat_last: naive.clone() })?;
    println!("{} windows of the {} split", report.windows, split.name());
    print_reports(&[("mprnet", &report), ("repeat_last", &naive)]);
    Ok(())
}

/// Forecasts the `horizon` steps after the end of the series, in data units.
pub fn forecast_cmd(mut cfg: RunConfig, checkpoint: Option<PathBuf>) -> Result<(), CliError> {
    let loaded = load(&mut cfg)?;
    let model = load_model(&cfg, &checkpoint)?;
    let rows = loaded.raw.rows();
    let history = loaded.raw.values.slice_time(rows - cfg.model.history_len, rows).map_err(mprnet::Error::from)?;
    let pred = match loaded.data.scaler() {
        Some(s) => s.inverse(&model.predict(&s.transform(&history)?)?)?,
        None => model.predict(&history)?,
    };
    let mut csv = format!("step,{}\n", loaded.raw.columns.join(","));
    for t in 0..pred.rows() {
        let cells: Vec<String> = (0..pred.cols()).map(|c| pred.at(t, c).to_string()).collect();
        writeln!(csv, "{},{}", t + 1, cells.join(",")).expect("writing to a String");
    }
    cfg.write()?;
    write(&cfg.out.join(FORECAST), csv.as_bytes())?;
    println!("wrote {} steps to {}", pred.rows(), cfg.out.join(FORECAST).display());
    Ok(())
}

pub fn probe_cmd(mut cfg: RunConfig, lengths: &[usize], repeats: usize) -> Result<Vec<ProbeRow>, CliError> {
    if cfg.dataset.is_some() {
        cfg.model.channels = load(&mut cfg)?.raw.channels();
    }
    let query = cfg.model.query_len();
    if let Some(&short) = lengths.iter().find(|&&l| l <= query) {
        return Err(CliError::Usage(format!("history length {short} must exceed the query length {query}")));
    }
    let rows = runtime_scaling_probe::<f64>(&cfg.model, lengths, QueryScaling::Fixed(query), repeats, cfg.seed)?;
    let mut csv = String::from("history_len,query_len,median_secs\n");
    println!("{:>12} {:>10} {:>14} {:>8}", "history_len", "query_len", "median_ms", "ratio");
    for (i, r) in rows.iter().enumerate() {
        writeln!(csv, "{},{},{}", r.history_len, r.query_len, r.median_secs).expect("writing to a String");
        let ratio = if i == 0 { String::from("-") } else { format!("{:.2}", r.median_secs / rows[i - 1].median_secs) };
        println!("{:>12} {:>10} {:>14.4} {:>8}", r.history_len, r.query_len, 1e3 * r.median_secs, ratio);
    }
    cfg.write()?;
    write(&cfg.out.join(PROBE), csv.as_bytes())?;
    Ok(rows)
}

pub fn ablate_cmd(mut cfg: RunConfig) -> Result<Vec<(Ablation, MetricsReport)>, CliError> {
    let loaded = load(&mut cfg)?;
    let mut results = Vec::with_capacity(Ablation::ALL.len());
    for variant in Ablation::ALL {
        let mut run = cfg.clone();
        run.model.ablation = variant;
        let report = with_sources(&run, &loaded.data, |[tr, va, te]| {
            let (model, _) = fit(&run, tr, va)?;
            Ok(evaluate(&model, te)?.0)
        })?;
        eprintln!("variant {}: test mse {:.6}", variant.label(), report.mse);
        results.push((variant, report));
    }
    cfg.write()?;
    let mut csv = String::from("variant,mse,mae,smape,mape\n");
    for (variant, report) in &results {
        write_json(&cfg.out.join(format!("report_{}.json", variant.label())), report)?;
        writeln!(csv, "{},{},{},{},{}", variant.label(), report.mse, report.mae, report.smape, report.mape).expect("writing to a String");
    }
    write(&cfg.out.join(ABLATION), csv.as_bytes())?;
    let rows: Vec<(&str, &MetricsReport)> = results.iter().map(|(v, r)| (v.label(), r)).collect();
    print_reports(&rows);
    Ok(results)
}
