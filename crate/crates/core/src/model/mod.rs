//! The multi-scale pattern reproduction network.
//!
//! A forward pass normalizes the history, climbs `N` layers of pattern
//! extraction (each layer's pattern also feeds its own forecast block), then
//! descends from layer `N` to 1 reconstructing the forecast patterns. Each
//! reconstruction block receives its layer's forecast plus the output of the
//! layer above. A dense time-axis map of the top-level history features is
//! added at layer 1 before denormalizing.

mod blocks;
mod config;
mod normalize;
pub mod probe;

pub use blocks::{ConvPair, ForecastBlock, Layer, PatternBlock};
pub use config::{Ablation, ModelConfig};
pub use normalize::{normalize, NormalizationState, STD_FLOOR};

use crate::autodiff::{Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{PatternMatch, TimeLinearSpec};
use crate::params::{Binding, ParamStore};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct MprNet<S: Scalar = f64> {
    config: ModelConfig,
    params: ParamStore<S>,
    layers: Vec<Layer>,
    residual: TimeLinearSpec,
}

/// Result of one recorded forward pass.
#[derive(Debug, Clone)]
pub struct Forward<S: Scalar = f64> {
    /// Denormalized forecast, `(T, D)`.
    pub output: Var,
    /// Match statistics of each layer's forecast block (`None` for dense blocks).
    pub matches: Vec<Option<PatternMatch<S>>>,
    pub state: NormalizationState<S>,
}

impl<S: Scalar> MprNet<S> {
    /// Builds a model with weights drawn from the seed's init stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, Stream::Init);
        let mut params = ParamStore::new();
        let layers = (1..=config.layers)
            .map(|i| Layer::new(&mut params, &config, i, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let residual =
            TimeLinearSpec::new(&mut params, "residual_linear", config.history_len, config.horizon, &mut rng)?;
        Ok(MprNet { config, params, layers, residual })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn residual(&self) -> &TimeLinearSpec {
        &self.residual
    }

    fn check_input(&self, input: &Tensor<S>) -> Result<()> {
        let want = [self.config.history_len, self.config.channels];
        if input.dims() != want {
            return Err(TensorError::ShapeMismatch(format!(
                "input {:?}, model expects {:?}",
                input.dims(),
                want
            ))
            .into());
        }
        if !input.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        Ok(())
    }

    /// Records a full forward pass of one `(L, D)` history on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        p: &Binding,
        input: &Tensor<S>,
        mode: &mut Mode<'_>,
    ) -> Result<Forward<S>> {
        self.check_input(input)?;
        let (normed, state) = normalize(input)?;
        let mut x = tape.constant(normed);

        let mut forecasts = Vec::with_capacity(self.layers.len());
        let mut matches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (x_out, pattern) = layer.extract.forward(tape, p, x, mode)?;
            let (p_out, pm) = layer.forecast.forward(tape, p, pattern)?;
            forecasts.push(p_out);
            matches.push(pm);
            x = x_out;
        }

        let mut y: Option<Var> = None;
        for (layer, &p_out) in self.layers.iter().zip(&forecasts).rev() {
            let z = match y {
                Some(y_in) => tape.add(p_out, y_in)?,
                None => p_out,
            };
            y = Some(layer.reconstruct.forward(tape, p, z, mode)?.0);
        }
        let residual = self.residual.forward(tape, p, x)?;
        let y = tape.add(y.expect("at least one layer"), residual)?;

        let std = tape.constant(state.std.clone());
        let mean = tape.constant(state.mean.clone());
        let scaled = tape.mul(y, std)?;
        let output = tape.add(scaled, mean)?;
        Ok(Forward { output, matches, state })
    }

    /// Evaluation-mode forecast for one history window.
    pub fn predict(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.predict_traced(input)?.0)
    }

    /// Evaluation-mode forecast together with every layer's match statistics.
    pub fn predict_traced(&self, input: &Tensor<S>) -> Result<(Tensor<S>, Vec<Option<PatternMatch<S>>>)> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let f = self.forward(&mut tape, &p, input, &mut Mode::Eval)?;
        Ok((tape.value(f.output).clone(), f.matches))
    }

    fn bind_frozen(&self, tape: &mut Tape<S>) -> Binding {
        self.params.bind_constants(tape)
    }

    /// History block of 1-based `layer` in evaluation mode: `(X_out, P_in)`.
    pub fn hpe_forward(&self, layer: usize, x: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let (out, pattern) = self.layers[layer - 1].extract.forward(&mut tape, &p, xv, &mut Mode::Eval)?;
        Ok((tape.value(out).clone(), tape.value(pattern).clone()))
    }

    /// Forecast block of 1-based `layer`: `P_out` and the match statistics.
    pub fn pef_forward(&self, layer: usize, pattern: &Tensor<S>) -> Result<(Tensor<S>, Option<PatternMatch<S>>)> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let pv = tape.constant(pattern.clone());
        let (out, pm) = self.layers[layer - 1].forecast.forward(&mut tape, &p, pv)?;
        Ok((tape.value(out).clone(), pm))
    }

    /// Sliding-match statistics of 1-based `layer` for a history pattern.
    pub fn pma_match(&self, layer: usize, pattern: &Tensor<S>) -> Result<Option<PatternMatch<S>>> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let pv = tape.constant(pattern.clone());
        let Some((q, k, _)) = self.layers[layer - 1].forecast.regions(&mut tape, &p, pv)? else {
            return Ok(None);
        };
        Ok(Some(crate::nn::pattern::match_patterns(tape.value(q), tape.value(k))?))
    }

    /// Reconstruction block of 1-based `layer` applied to `Y_in + P_out`.
    pub fn fsr_forward(&self, layer: usize, z: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape);
        let zv = tape.constant(z.clone());
        let (out, _) = self.layers[layer - 1].reconstruct.forward(&mut tape, &p, zv, &mut Mode::Eval)?;
        Ok(tape.value(out).clone())
    }
}
