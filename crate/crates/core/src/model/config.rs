use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Weighting;

/// Which parts of the network are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Channel-independent convolutions only: no fusion path, no attention.
    #[serde(alias = "a")]
    NoMultivariate,
    /// A dense time-axis map replaces pattern matching and extension.
    #[serde(alias = "b")]
    FcForecaster,
    /// Both of the above.
    #[serde(alias = "c")]
    Both,
}

impl Ablation {
    pub const ALL: [Ablation; 4] =
        [Ablation::Full, Ablation::NoMultivariate, Ablation::FcForecaster, Ablation::Both];

    pub fn multivariate(self) -> bool {
        matches!(self, Ablation::Full | Ablation::FcForecaster)
    }

    pub fn pattern_extension(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoMultivariate)
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoMultivariate => "a",
            Ablation::FcForecaster => "b",
            Ablation::Both => "c",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub history_len: usize,
    pub horizon: usize,
    pub channels: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    /// Per-layer dilation; `2^(i-1)` at layer `i` when absent.
    #[serde(default)]
    pub dilations: Option<Vec<usize>>,
    /// Query window length; `min(history_len / 8, 16)` (at least 1) when absent.
    #[serde(default)]
    pub query_len: Option<usize>,
    /// Key region length; the whole history when absent.
    #[serde(default)]
    pub key_span: Option<usize>,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default = "default_weighting")]
    pub weighting: Weighting,
}

fn default_layers() -> usize {
    2
}
fn default_kernel() -> usize {
    3
}
fn default_dropout() -> f64 {
    0.1
}
fn default_weighting() -> Weighting {
    Weighting::Raw
}

impl ModelConfig {
    pub fn new(history_len: usize, horizon: usize, channels: usize, layers: usize) -> Self {
        ModelConfig {
            history_len,
            horizon,
            channels,
            layers,
            kernel_size: default_kernel(),
            dilations: None,
            query_len: None,
            key_span: None,
            dropout: default_dropout(),
            ablation: Ablation::Full,
            weighting: default_weighting(),
        }
    }

    pub fn query_len(&self) -> usize {
        self.query_len.unwrap_or_else(|| (self.history_len / 8).clamp(1, 16))
    }

    pub fn key_span(&self) -> usize {
        self.key_span.unwrap_or(self.history_len)
    }

    /// Dilation of 1-based layer `layer`.
    pub fn dilation(&self, layer: usize) -> usize {
        match &self.dilations {
            Some(d) => d[layer - 1],
            None => 1 << (layer - 1),
        }
    }

    /// Number of matching delays, `key_span - query_len`.
    pub fn delays(&self) -> usize {
        self.key_span().saturating_sub(self.query_len())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.history_len < 2 {
            return bad(format!("history_len {} must be at least 2", self.history_len));
        }
        if self.horizon == 0 || self.channels == 0 || self.layers == 0 {
            return bad("horizon, channels and layers must be positive".into());
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::EvenKernel(self.kernel_size));
        }
        if let Some(d) = &self.dilations {
            if d.len() != self.layers || d.contains(&0) {
                return bad(format!("need {} positive dilations, got {d:?}", self.layers));
            }
        }
        let (n, m) = (self.query_len(), self.key_span());
        if n == 0 {
            return bad("query_len must be at least 1".into());
        }
        if m > self.history_len {
            return bad(format!("key_span {m} exceeds history_len {}", self.history_len));
        }
        if m <= n {
            return bad(format!("key_span {m} must exceed query_len {n} by at least one delay"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidProbability(self.dropout));
        }
        Ok(())
    }

    /// Attention scale in the history blocks, `D * sqrt(L)`.
    pub fn history_attention_scale(&self) -> f64 {
        self.channels as f64 * (self.history_len as f64).sqrt()
    }

    /// Attention scale in the reconstruction blocks, `D * sqrt(T)`.
    pub fn future_attention_scale(&self) -> f64 {
        self.channels as f64 * (self.horizon as f64).sqrt()
    }

    /// Scale of the pattern extension mix, `L * sqrt(D)`.
    pub fn extension_scale(&self) -> f64 {
        self.history_len as f64 * (self.channels as f64).sqrt()
    }
}
