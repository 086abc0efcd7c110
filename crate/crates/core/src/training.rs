//! Losses, the Adam optimizer and the epoch loop with validation-based
//! model selection.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape, Var};
use crate::data::WindowSource;
use crate::error::{Error, Result};
use crate::model::MprNet;
use crate::params::ParamStore;
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Mse,
    Mae,
    Smape,
}

/// Records a scalar loss between two equally shaped tensors.
pub fn loss<S: Scalar>(tape: &mut Tape<S>, pred: Var, target: Var, kind: LossKind) -> Result<Var> {
    tape.value(pred).require_same_shape(tape.value(target))?;
    match kind {
        LossKind::Mse => {
            let e = tape.sub(pred, target)?;
            let sq = tape.mul(e, e)?;
            Ok(tape.mean(sq))
        }
        LossKind::Mae => {
            let e = tape.sub(pred, target)?;
            let a = tape.abs(e);
            Ok(tape.mean(a))
        }
        LossKind::Smape => tape.smape(pred, target),
    }
}

/// Loss value without recording gradients.
pub fn loss_value<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>, kind: LossKind) -> Result<S> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let t = tape.constant(target.clone());
    let l = loss(&mut tape, p, t, kind)?;
    Ok(tape.value(l).data()[0])
}

/// Bias-corrected Adam with per-parameter moment estimates.
#[derive(Debug, Clone)]
pub struct Adam<S: Scalar = f64> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor<S>>,
    second: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>, lr: f64) -> Result<Self> {
        let zeros = store.iter().map(|p| Tensor::zeros(p.value.dims())).collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: zeros.clone(), second: zeros })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients held by `store`. Every parameter
    /// must carry a gradient; none is modified otherwise.
    pub fn step(&mut self, store: &mut ParamStore<S>) -> Result<()> {
        if let Some(p) = store.iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        self.step += 1;
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let one = S::one();
        let c1 = one - b1.powi(self.step as i32);
        let c2 = one - b2.powi(self.step as i32);
        let (lr, eps) = (S::of(self.lr), S::of(self.eps));
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let g = p.grad.as_ref().expect("checked above");
            *m = m.zip_map(g, |m, g| b1 * m + (one - b1) * g)?;
            *v = v.zip_map(g, |v, g| b2 * v + (one - b2) * g * g)?;
            let update = m.zip_map(v, |m, v| lr * (m / c1) / ((v / c2).sqrt() + eps))?;
            p.value = p.value.sub(&update)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss: LossKind,
    /// Stop after this many epochs without a validation improvement.
    #[serde(default)]
    pub patience: Option<usize>,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
}

fn default_batch() -> usize {
    32
}
fn default_epochs() -> usize {
    10
}
fn default_lr() -> f64 {
    1e-3
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: default_batch(),
            epochs: default_epochs(),
            seed: 0,
            loss: LossKind::Mse,
            patience: None,
            learning_rate: default_lr(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::ConfigInvalid("batch_size and epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::ConfigInvalid(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

/// One line of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were restored into the model.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub steps: u64,
}

/// Mean evaluation-mode loss over every window of `source`.
pub fn evaluate_loss<S: Scalar>(model: &MprNet<S>, source: &dyn WindowSource<S>, kind: LossKind) -> Result<f64> {
    let n = source.len();
    if n == 0 {
        return Err(Error::EmptySplit(source.name()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let (history, target) = source.window(i)?;
        total += loss_value(&model.predict(&history)?, &target, kind)?.as_f64();
    }
    Ok(total / n as f64)
}

/// Evaluation-mode forecasts and targets for every window of `source`.
pub fn forecast_all<S: Scalar>(
    model: &MprNet<S>,
    source: &dyn WindowSource<S>,
) -> Result<(Vec<Tensor<S>>, Vec<Tensor<S>>)> {
    let n = source.len();
    let mut preds = Vec::with_capacity(n);
    let mut truths = Vec::with_capacity(n);
    for i in 0..n {
        let (history, target) = source.window(i)?;
        preds.push(model.predict(&history)?);
        truths.push(target);
    }
    Ok((preds, truths))
}

/// One JSON object per line, in epoch order.
pub fn history_jsonl(history: &[EpochRecord]) -> String {
    history
        .iter()
        .map(|r| serde_json::to_string(r).expect("records are plain numbers") + "\n")
        .collect()
}

/// Trains `model` in place and leaves it holding the parameters of the epoch
/// with the lowest validation loss.
///
/// Each mini-batch records one subgraph per window on a shared tape and
/// back-propagates the batch-mean loss.
pub fn train<S: Scalar>(
    model: &mut MprNet<S>,
    train_set: &dyn WindowSource<S>,
    val_set: &dyn WindowSource<S>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptySplit(train_set.name()));
    }
    if val_set.is_empty() {
        return Err(Error::EmptySplit(val_set.name()));
    }
    let mut shuffle_rng = stream_rng(cfg.seed, Stream::Shuffle);
    let mut dropout_rng = stream_rng(cfg.seed, Stream::Dropout);
    let mut adam = Adam::new(model.params(), cfg.learning_rate)?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore<S>)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            debug_assert!(model.params().iter().all(|p| p.grad.is_none()), "stale gradients");
            let mut tape = Tape::new();
            let binding = model.params().bind(&mut tape);
            let mut mode = Mode::Train(&mut dropout_rng);
            let mut total: Option<Var> = None;
            for &i in batch {
                let (history, target) = train_set.window(i)?;
                let fwd = model.forward(&mut tape, &binding, &history, &mut mode)?;
                let target = tape.constant(target);
                let l = loss(&mut tape, fwd.output, target, cfg.loss)?;
                total = Some(match total {
                    Some(t) => tape.add(t, l)?,
                    None => l,
                });
            }
            let total = total.expect("chunks are never empty");
            let batch_loss = tape.scale(total, S::one() / S::of_usize(batch.len()));
            epoch_loss += tape.value(batch_loss).data()[0].as_f64() * batch.len() as f64;
            tape.backward(batch_loss)?;
            model.params_mut().collect_grads(&tape, &binding)?;
            adam.step(model.params_mut())?;
            model.params_mut().zero_grad();
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let val_loss = evaluate_loss(model, val_set, cfg.loss)?;
        history.push(EpochRecord { epoch, train_loss, val_loss });

        let improved = best.as_ref().is_none_or(|(_, b, _)| val_loss < *b);
        if improved {
            best = Some((epoch, val_loss, model.params().clone()));
        }
        if let (Some(patience), Some((best_epoch, _, _))) = (cfg.patience, &best) {
            if epoch - best_epoch >= patience {
                break;
            }
        }
    }

    let (best_epoch, best_val_loss, params) = best.expect("at least one epoch ran");
    *model.params_mut() = params;
    Ok(TrainOutcome { history, best_epoch, best_val_loss, steps: adam.steps() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sine_series, split_and_window, Protocol, Split, WindowList};
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(x: &[f64]) -> Tensor {
        Tensor::new(vec![x.len(), 1], x.to_vec()).unwrap()
    }

    #[test]
    fn history_lines_round_trip() {
        let h = vec![EpochRecord { epoch: 1, train_loss: 0.5, val_loss: 0.25 }, EpochRecord { epoch: 2, train_loss: 0.125, val_loss: 0.2 }];
        let text = history_jsonl(&h);
        let back: Vec<EpochRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(back, h);
    }

    #[test]
    fn loss_hand_values() {
        let a = t(&[1.0, -2.0]);
        for kind in [LossKind::Mse, LossKind::Mae, LossKind::Smape] {
            assert_eq!(loss_value(&a, &a, kind).unwrap(), 0.0);
        }
        assert_eq!(loss_value(&t(&[0.0]), &t(&[2.0]), LossKind::Mse).unwrap(), 4.0);
        assert_eq!(loss_value(&t(&[0.0, 1.0]), &t(&[2.0, 2.0]), LossKind::Mae).unwrap(), 1.5);
        assert!(loss_value(&t(&[0.0]), &t(&[1.0, 2.0]), LossKind::Mse).is_err());
    }

    #[test]
    fn smape_loss_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: Vec<f64> = (0..37).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let y: Vec<f64> = (0..37).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut acc = 0.0;
        for i in 0..37 {
            acc += (y[i] - p[i]).abs() / (y[i].abs() + p[i].abs());
        }
        let want = 200.0 / 37.0 * acc;
        assert!((loss_value(&t(&p), &t(&y), LossKind::Smape).unwrap() - want).abs() <= 1e-10);
    }

    fn one_param(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.register("w", Tensor::scalar(w)).unwrap();
        s
    }

    fn set_grad(s: &mut ParamStore, g: f64) {
        for p in s.iter_mut() {
            p.grad = Some(Tensor::scalar(g));
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut s = one_param(1.5);
        let mut adam = Adam::new(&s, 1e-3).unwrap();
        for _ in 0..5 {
            set_grad(&mut s, 0.0);
            adam.step(&mut s).unwrap();
        }
        assert_eq!(s.iter().next().unwrap().value.data()[0], 1.5);
        assert_eq!(adam.steps(), 5);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [-40.0, -0.3, 0.02, 7.0] {
            let mut s = one_param(0.0);
            let mut adam = Adam::new(&s, 1e-3).unwrap();
            set_grad(&mut s, g);
            adam.step(&mut s).unwrap();
            let w = s.iter().next().unwrap().value.data()[0];
            // bias-corrected moments are g and g^2, so the step is lr * g / (|g| + eps)
            assert!((w + 1e-3 * g.signum()).abs() < 1e-9, "{g}: {w}");
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut s = one_param(0.0);
        let mut adam = Adam::new(&s, 0.1).unwrap();
        for _ in 0..100 {
            let w = s.iter().next().unwrap().value.data()[0];
            set_grad(&mut s, 2.0 * (w - 3.0));
            adam.step(&mut s).unwrap();
        }
        let w = s.iter().next().unwrap().value.data()[0];
        assert!((w - 3.0).abs() < 0.1, "w = {w}");
    }

    #[test]
    fn adam_requires_gradients() {
        let mut s = one_param(0.0);
        let mut adam = Adam::new(&s, 1e-3).unwrap();
        assert!(matches!(adam.step(&mut s), Err(Error::MissingGrad(n)) if n == "w"));
        assert_eq!(adam.steps(), 0);
    }

    fn small_sine() -> crate::data::WindowedDataset {
        let raw = sine_series(260, 1, 12.0, 0.05, 3);
        split_and_window(&raw, 24, 6, Protocol::DEFAULT_RATIO, false).unwrap()
    }

    fn small_cfg() -> (ModelConfig, TrainConfig) {
        let model = ModelConfig::new(24, 6, 1, 2);
        let train = TrainConfig { batch_size: 16, epochs: 3, seed: 4, learning_rate: 3e-3, ..TrainConfig::default() };
        (model, train)
    }

    #[test]
    fn same_seed_same_curves() {
        let ds = small_sine();
        let (mc, tc) = small_cfg();
        let run = || {
            let mut m = MprNet::new(mc.clone(), 1).unwrap();
            let out = train(&mut m, &ds.split(Split::Train), &ds.split(Split::Val), &tc).unwrap();
            (out.history, m.params().to_bytes())
        };
        let (h1, b1) = run();
        let (h2, b2) = run();
        assert_eq!(h1, h2);
        assert_eq!(b1, b2);
        assert!(h1.last().unwrap().train_loss <= h1[0].train_loss);
    }

    #[test]
    fn best_validation_epoch_is_restored() {
        let ds = small_sine();
        let (mc, tc) = small_cfg();
        let mut m = MprNet::new(mc, 1).unwrap();
        let out = train(&mut m, &ds.split(Split::Train), &ds.split(Split::Val), &tc).unwrap();
        let best = out.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_val_loss, best);
        assert_eq!(out.history[out.best_epoch - 1].val_loss, best);
        let again = evaluate_loss(&m, &ds.split(Split::Val), LossKind::Mse).unwrap();
        assert_eq!(again, best);
        assert!(m.params().iter().all(|p| p.grad.is_none()));
    }

    #[test]
    fn patience_stops_early() {
        let ds = small_sine();
        let (mc, mut tc) = small_cfg();
        tc.epochs = 50;
        tc.patience = Some(1);
        tc.learning_rate = 0.5;
        let mut m = MprNet::new(mc, 1).unwrap();
        let out = train(&mut m, &ds.split(Split::Train), &ds.split(Split::Val), &tc).unwrap();
        assert!(out.history.len() < 50);
    }

    #[test]
    fn empty_splits_are_rejected() {
        let (mc, tc) = small_cfg();
        let mut m = MprNet::new(mc, 1).unwrap();
        let empty = WindowList { name: "validation", windows: vec![] };
        let ds = small_sine();
        assert!(matches!(
            train(&mut m, &ds.split(Split::Train), &empty, &tc),
            Err(Error::EmptySplit("validation"))
        ));
        let bad = TrainConfig { batch_size: 0, ..tc };
        assert!(matches!(train(&mut m, &ds.split(Split::Train), &ds.split(Split::Val), &bad), Err(Error::ConfigInvalid(_))));
    }
}
