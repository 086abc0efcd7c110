//! Run configuration: a TOML file merged with command-line overrides.
//!
//! The file mirrors the resolved form written next to every run's outputs, so
//! a written `config.toml` can be passed back with `--config` unchanged.

use std::path::{Path, PathBuf};

use mprnet::data::{CsvSchema, Protocol, TimestampColumn};
use mprnet::model::Ablation;
use mprnet::nn::Weighting;
use mprnet::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub noise_alpha: Option<f64>,
    pub out: Option<PathBuf>,
    pub dataset: Option<DatasetSection>,
    #[serde(default)]
    pub model: ModelSection,
    pub train: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub path: PathBuf,
    /// Selects the split protocol, e.g. `ETTh1`; the file stem when absent.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "yes")]
    pub standardize: bool,
    #[serde(default)]
    pub columns: Option<Vec<String>>,
    #[serde(default)]
    pub timestamp: TimestampColumn,
    /// Overrides the protocol implied by `name`.
    #[serde(default)]
    pub protocol: Option<Protocol>,
}

fn yes() -> bool {
    true
}

impl DatasetSection {
    fn from_path(path: PathBuf) -> Self {
        DatasetSection { path, name: None, standardize: true, columns: None, timestamp: TimestampColumn::Auto, protocol: None }
    }

    pub fn name(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            self.path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
        })
    }

    pub fn protocol(&self) -> Protocol {
        self.protocol.unwrap_or_else(|| Protocol::for_dataset(&self.name()))
    }

    pub fn schema(&self) -> CsvSchema {
        CsvSchema { timestamp: self.timestamp.clone(), columns: self.columns.clone() }
    }
}

/// Every model field is optional here; `channels` comes from the data when
/// a dataset is configured.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub history_len: Option<usize>,
    pub horizon: Option<usize>,
    pub channels: Option<usize>,
    pub layers: Option<usize>,
    pub kernel_size: Option<usize>,
    pub dilations: Option<Vec<usize>>,
    pub query_len: Option<usize>,
    pub key_span: Option<usize>,
    pub dropout: Option<f64>,
    pub ablation: Option<Ablation>,
    pub weighting: Option<Weighting>,
}

/// Flags shared by every subcommand; each wins over the file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV file with one row per time step.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub history_len: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Noise level added to every input history.
    #[arg(long)]
    pub noise_alpha: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Fully resolved settings of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub noise_alpha: f64,
    pub out: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSection>,
    /// Holds everything but `channels` until the data is read.
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub fn read_file(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {}", path.display(), one_line(&e.to_string()))))
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl RunConfig {
    /// Merges file and flags, then checks everything that can be checked
    /// before the data is read.
    pub fn resolve(flags: &Overrides, needs_dataset: bool) -> Result<Self, CliError> {
        let file = match &flags.config {
            Some(p) => read_file(p)?,
            None => FileConfig::default(),
        };
        let mut train = file.train.unwrap_or_default();
        let seed = flags.seed.or(file.seed).unwrap_or(train.seed);
        train.seed = seed;

        let m = file.model;
        let mut model = ModelConfig::new(
            flags.history_len.or(m.history_len).unwrap_or(96),
            flags.horizon.or(m.horizon).unwrap_or(96),
            m.channels.unwrap_or(1),
            flags.layers.or(m.layers).unwrap_or(2),
        );
        if let Some(k) = m.kernel_size {
            model.kernel_size = k;
        }
        model.dilations = m.dilations;
        model.query_len = m.query_len;
        model.key_span = m.key_span;
        if let Some(p) = m.dropout {
            model.dropout = p;
        }
        model.ablation = m.ablation.unwrap_or_default();
        if let Some(w) = m.weighting {
            model.weighting = w;
        }

        let dataset = match (&flags.dataset, file.dataset) {
            (Some(path), Some(mut section)) => {
                section.path = path.clone();
                Some(section)
            }
            (Some(path), None) => Some(DatasetSection::from_path(path.clone())),
            (None, section) => section,
        };
        if needs_dataset {
            match &dataset {
                None => return Err(CliError::Usage("no dataset given: pass --dataset or set [dataset] path".into())),
                Some(d) if !d.path.is_file() => {
                    return Err(CliError::Usage(format!("dataset not found: {}", d.path.display())))
                }
                Some(_) => {}
            }
        }

        let noise_alpha = flags.noise_alpha.or(file.noise_alpha).unwrap_or(0.0);
        if !(noise_alpha >= 0.0 && noise_alpha.is_finite()) {
            return Err(CliError::Usage(format!("noise_alpha must be non-negative, got {noise_alpha}")));
        }
        let out = flags.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from("runs/latest"));
        train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let cfg = RunConfig { seed, noise_alpha, out, dataset, model, train };
        cfg.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is plain data")
    }

    /// Writes `config.toml` into the output directory, creating it.
    pub fn write(&self) -> Result<(), CliError> {
        crate::io::create_dir(&self.out)?;
        crate::io::write(&self.out.join("config.toml"), self.to_toml().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_temp(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn flags_win_over_file() {
        let f = write_temp("seed = 3\nnoise_alpha = 0.2\n[model]\nhistory_len = 48\nhorizon = 12\nlayers = 3\n[train]\nepochs = 2\n");
        let flags = Overrides { config: Some(f.path().into()), seed: Some(9), horizon: Some(6), ..Default::default() };
        let cfg = RunConfig::resolve(&flags, false).unwrap();
        assert_eq!((cfg.seed, cfg.train.seed), (9, 9));
        assert_eq!((cfg.model.history_len, cfg.model.horizon, cfg.model.layers), (48, 6, 3));
        assert_eq!((cfg.noise_alpha, cfg.train.epochs), (0.2, 2));
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in ["bogus = 1\n", "[model]\nhistory = 4\n", "[train]\nlr = 0.1\n"] {
            let f = write_temp(text);
            let flags = Overrides { config: Some(f.path().into()), ..Default::default() };
            let err = RunConfig::resolve(&flags, false).unwrap_err();
            assert!(matches!(err, CliError::Usage(ref m) if !m.contains('\n')), "{text}: {err}");
        }
    }

    #[test]
    fn resolved_config_reads_back() {
        let data = write_temp("a,b\n1,2\n");
        let flags = Overrides { dataset: Some(data.path().into()), history_len: Some(32), horizon: Some(8), ..Default::default() };
        let mut cfg = RunConfig::resolve(&flags, true).unwrap();
        cfg.model.channels = 2;
        cfg.model.ablation = Ablation::FcForecaster;
        let f = write_temp(&cfg.to_toml());
        let again = RunConfig::resolve(&Overrides { config: Some(f.path().into()), ..Default::default() }, true).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn missing_dataset_names_path() {
        let flags = Overrides { dataset: Some("/no/such/file.csv".into()), ..Default::default() };
        let err = RunConfig::resolve(&flags, true).unwrap_err();
        assert!(err.to_string().contains("/no/such/file.csv"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn invalid_model_is_usage_error() {
        let flags = Overrides { history_len: Some(1), ..Default::default() };
        assert_eq!(RunConfig::resolve(&flags, false).unwrap_err().exit_code(), 2);
    }
}
