//! The three per-layer blocks: history pattern extraction, pattern extension
//! forecasting and future series reconstruction.

use rand::Rng;

use crate::autodiff::{Mode, Tape, Var};
use crate::error::Result;
use crate::nn::{
    Conv1dSpec, ConvGeometry, CorrelationAttention, ExtendSpec, LinearSpec, PatternMatch,
    TimeLinearSpec,
};
use crate::params::{Binding, ParamStore};
use crate::scalar::Scalar;

use super::config::ModelConfig;

/// Two stacked `Drop(Relu(conv(.)))` stages.
#[derive(Debug, Clone, Copy)]
pub struct ConvPair {
    pub first: Conv1dSpec,
    pub second: Conv1dSpec,
    pub transposed: bool,
}

impl ConvPair {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        geometry: ConvGeometry,
        transposed: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let first = Conv1dSpec::new(store, &format!("{prefix}1"), geometry, transposed, rng)?;
        let second = Conv1dSpec::new(store, &format!("{prefix}2"), geometry, transposed, rng)?;
        Ok(ConvPair { first, second, transposed })
    }

    fn stage<S: Scalar>(
        &self,
        spec: &Conv1dSpec,
        tape: &mut Tape<S>,
        p: &Binding,
        x: Var,
        dropout: f64,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let y = if self.transposed {
            spec.forward_transposed(tape, p, x)?
        } else {
            spec.forward(tape, p, x)?
        };
        let y = tape.relu(y);
        tape.dropout(y, dropout, mode)
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &Binding,
        x: Var,
        dropout: f64,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let h = self.stage(&self.first, tape, p, x, dropout, mode)?;
        self.stage(&self.second, tape, p, h, dropout, mode)
    }
}

/// Fusion convolutions (all channels mix), interaction convolutions
/// (one kernel per channel) and correlation attention over the interaction
/// features. Shared shape by the history and reconstruction blocks; the
/// latter runs its convolutions transposed.
#[derive(Debug, Clone, Copy)]
pub struct PatternBlock {
    pub fusion: Option<ConvPair>,
    pub interaction: ConvPair,
    pub attention: Option<CorrelationAttention>,
    pub attention_scale: f64,
    pub dropout: f64,
}

impl PatternBlock {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        cfg: &ModelConfig,
        layer: usize,
        transposed: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = cfg.channels;
        let dilation = cfg.dilation(layer);
        let conv = if transposed { "tconv" } else { "conv" };
        let multivariate = cfg.ablation.multivariate();
        let fusion = if multivariate {
            let g = ConvGeometry::new(d, d, cfg.kernel_size, dilation, 1)?;
            Some(ConvPair::new(store, &format!("{prefix}.fusion_{conv}"), g, transposed, rng)?)
        } else {
            None
        };
        let g = ConvGeometry::new(d, d, cfg.kernel_size, dilation, d)?;
        let interaction = ConvPair::new(store, &format!("{prefix}.interact_{conv}"), g, transposed, rng)?;
        let attention = if multivariate {
            Some(CorrelationAttention::new(store, &format!("{prefix}.attention"), d, rng)?)
        } else {
            None
        };
        let attention_scale =
            if transposed { cfg.future_attention_scale() } else { cfg.history_attention_scale() };
        Ok(PatternBlock { fusion, interaction, attention, attention_scale, dropout: cfg.dropout })
    }

    /// Extracted pattern without the residual: `F_fusion + CorAttention`, or
    /// the interaction features alone when the multivariate paths are off.
    pub fn pattern<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &Binding,
        x: Var,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let interact = self.interaction.forward(tape, p, x, self.dropout, mode)?;
        let (Some(fusion), Some(attention)) = (&self.fusion, &self.attention) else {
            return Ok(interact);
        };
        let fused = fusion.forward(tape, p, x, self.dropout, mode)?;
        let att = attention.forward(tape, p, interact, self.attention_scale)?;
        tape.add(fused, att)
    }

    /// Returns `(pattern + x, pattern)`.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &Binding,
        x: Var,
        mode: &mut Mode<'_>,
    ) -> Result<(Var, Var)> {
        let pattern = self.pattern(tape, p, x, mode)?;
        let out = tape.add(pattern, x)?;
        Ok((out, pattern))
    }
}

/// Forecasts a `(T, D)` future pattern from a `(L, D)` history pattern.
#[derive(Debug, Clone, Copy)]
pub enum ForecastBlock {
    /// Sliding match of the latest `query_len` steps against the first
    /// `key_span` steps, then weighted pattern extension.
    Extension { query: LinearSpec, key: LinearSpec, value: LinearSpec, spec: ExtendSpec, key_span: usize },
    /// Dense map over the time axis.
    Dense(TimeLinearSpec),
}

impl ForecastBlock {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = cfg.channels;
        if !cfg.ablation.pattern_extension() {
            let dense =
                TimeLinearSpec::new(store, &format!("{prefix}.dense"), cfg.history_len, cfg.horizon, rng)?;
            return Ok(ForecastBlock::Dense(dense));
        }
        Ok(ForecastBlock::Extension {
            query: LinearSpec::new(store, &format!("{prefix}.query"), d, d, rng)?,
            key: LinearSpec::new(store, &format!("{prefix}.key"), d, d, rng)?,
            value: LinearSpec::new(store, &format!("{prefix}.value"), d, d, rng)?,
            spec: ExtendSpec {
                query_len: cfg.query_len(),
                horizon: cfg.horizon,
                scale: cfg.extension_scale(),
                weighting: cfg.weighting,
            },
            key_span: cfg.key_span(),
        })
    }

    /// Query, key and value regions of the history pattern after their maps.
    pub fn regions<S: Scalar>(&self, tape: &mut Tape<S>, p: &Binding, pattern: Var) -> Result<Option<(Var, Var, Var)>> {
        let ForecastBlock::Extension { query, key, value, spec, key_span } = self else {
            return Ok(None);
        };
        let len = tape.value(pattern).rows();
        let q = tape.slice_time(pattern, len - spec.query_len, len)?;
        let q = query.forward(tape, p, q)?;
        let k = tape.slice_time(pattern, 0, *key_span)?;
        let k = key.forward(tape, p, k)?;
        let v = value.forward(tape, p, pattern)?;
        Ok(Some((q, k, v)))
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &Binding,
        pattern: Var,
    ) -> Result<(Var, Option<PatternMatch<S>>)> {
        match self {
            ForecastBlock::Dense(dense) => Ok((dense.forward(tape, p, pattern)?, None)),
            ForecastBlock::Extension { spec, .. } => {
                let (q, k, v) = self.regions(tape, p, pattern)?.expect("extension block");
                let (out, pm) = tape.extend_mix(q, k, v, *spec)?;
                Ok((out, Some(pm)))
            }
        }
    }
}

/// Parameters of one layer.
#[derive(Debug, Clone, Copy)]
pub struct Layer {
    pub extract: PatternBlock,
    pub forecast: ForecastBlock,
    pub reconstruct: PatternBlock,
}

impl Layer {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        cfg: &ModelConfig,
        layer: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let prefix = format!("layer{layer}");
        Ok(Layer {
            extract: PatternBlock::new(store, &format!("{prefix}.hpe"), cfg, layer, false, rng)?,
            forecast: ForecastBlock::new(store, &format!("{prefix}.pef"), cfg, rng)?,
            reconstruct: PatternBlock::new(store, &format!("{prefix}.fsr"), cfg, layer, true, rng)?,
        })
    }
}
