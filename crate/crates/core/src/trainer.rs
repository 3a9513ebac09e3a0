//! Training loop: MAE on the normalized scale, Adam with decoupled weight
//! decay, a separate learning rate for the fusion gate, global-norm
//! clipping and early stopping on denormalized validation MAE.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{make_windows, split_622, FrameSeries, NormStats, TrafficGraph, WindowBatch};
use crate::error::{Result, StumError};
use crate::eval;
use crate::mlrf::{dropout_stream, ForwardMode};
use crate::model::Stum;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_theta: f64,
    pub lr_alpha: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_theta: 0.001,
            lr_alpha: 0.001,
            weight_decay: 0.0005,
            max_epochs: 150,
            patience: 10,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(5.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_theta", self.lr_theta),
            ("lr_alpha", self.lr_alpha),
            ("eps", self.eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(StumError::Config(format!("train.{name} must be positive, got {v}")));
            }
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(StumError::Config("train.weight_decay must be ≥ 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(StumError::Config(
                "train.beta1 and train.beta2 must lie in [0, 1)".into(),
            ));
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(StumError::Config(
                "train.patience, train.batch_size and train.max_epochs must be at least 1".into(),
            ));
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return Err(StumError::Config(format!("train.grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Normalized train/val/test segments with the statistics fitted on train.
#[derive(Clone, Debug)]
pub struct DataSplits {
    pub train: FrameSeries,
    pub val: FrameSeries,
    pub test: FrameSeries,
    pub stats: NormStats,
    pub graph: Option<TrafficGraph>,
}

/// 6:2:2 chronological split, z-scored with training statistics.
pub fn prepare(series: &FrameSeries, graph: Option<TrafficGraph>) -> Result<DataSplits> {
    let splits = split_622(series)?;
    let stats = NormStats::fit(&splits.train);
    Ok(DataSplits {
        train: stats.apply(&splits.train),
        val: stats.apply(&splits.val),
        test: stats.apply(&splits.test),
        stats,
        graph,
    })
}

/// Mean absolute error over every element.
pub fn mae_loss(tape: &mut Tape, z: Var, y: Var) -> Result<Var> {
    if tape.shape(z) != tape.shape(y) {
        return Err(StumError::shape("mae_loss", tape.shape(z), tape.shape(y)));
    }
    let diff = tape.sub(z, y)?;
    Ok(tape.abs_mean(diff))
}

/// Adam moments for trainable parameters only.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    step: u64,
    moments: HashMap<ParamId, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new() -> Self {
        Adam::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn has_state(&self, id: ParamId) -> bool {
        self.moments.contains_key(&id)
    }

    /// One update from the gradients held in `store`. Every trainable
    /// parameter must carry a gradient.
    pub fn step(&mut self, store: &mut ParamStore, cfg: &TrainConfig) -> Result<()> {
        let ids: Vec<ParamId> = store.trainable().map(|(id, _)| id).collect();
        for &id in &ids {
            if store.get(id).grad().is_none() {
                return Err(StumError::MissingGrad(store.get(id).name().to_string()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for id in ids {
            let p = store.get(id);
            let group = p.group();
            let grad = p.grad().expect("checked above").clone();
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape())));
            let (lr, decay) = match group {
                ParamGroup::Theta => (cfg.lr_theta, cfg.weight_decay),
                ParamGroup::FusionGate => (cfg.lr_alpha, 0.0),
            };
            let value = store.value_mut(id).data_mut();
            for (((w, g), mi), vi) in value.iter_mut().zip(grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
                *w -= lr * (update + decay * *w);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let ids: Vec<ParamId> = store.ids().collect();
    let norm = ids
        .iter()
        .filter_map(|&id| store.get(id).grad())
        .flat_map(|g| g.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for id in ids {
            if let Some(g) = store.grad_mut(id) {
                g.data_mut().iter_mut().for_each(|v| *v *= factor);
            }
        }
    }
    norm
}

/// Stops once `patience` epochs pass without a strict improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_improve: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_improve: 0,
        }
    }

    /// Records a validation value; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, val: f64) -> (bool, bool) {
        if val < self.best {
            self.best = val;
            self.best_epoch = epoch;
            self.since_improve = 0;
            (true, false)
        } else {
            self.since_improve += 1;
            (false, self.since_improve >= self.patience)
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// 1-based epoch of the best value, 0 before any observation.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_mae,val_mae,seconds\n");
        for r in &self.epochs {
            writeln!(out, "{},{:?},{:?},{:.6}", r.epoch, r.train_mae, r.val_mae, r.seconds).expect("string write");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| StumError::io(path, e))
    }

    /// Loss columns only; wall-clock time is excluded from comparisons.
    pub fn losses(&self) -> Vec<(f64, f64)> {
        self.epochs.iter().map(|r| (r.train_mae, r.val_mae)).collect()
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Model carrying the best-validation parameters.
    pub model: Stum,
    pub history: History,
    pub best_val_mae: f64,
    pub steps: u64,
}

/// Per-epoch progress callback: `(record, improved)`.
pub type EpochHook<'a> = &'a mut dyn FnMut(&EpochRecord, bool);

/// One optimization step on a batch; returns the normalized loss and the
/// batch's denormalized absolute-error sum.
pub fn train_step(
    model: &mut Stum,
    adam: &mut Adam,
    batch: &WindowBatch,
    data: &DataSplits,
    cfg: &TrainConfig,
    step: u64,
) -> Result<(f64, f64)> {
    let mut rng = dropout_stream(cfg.seed, step);
    let mut tape = Tape::new();
    let x = tape.constant(batch.inputs.clone());
    let y = tape.constant(batch.targets.clone());
    let out = model.forward(&mut tape, x, data.graph.as_ref(), &mut ForwardMode::training(&mut rng))?;
    let loss = mae_loss(&mut tape, out.z, y)?;
    let loss_value = tape.value(loss).item();
    let abs_sum = eval::denormalized_abs_error_sum(tape.value(out.z), &batch.targets, &data.stats);
    if !loss_value.is_finite() {
        return Ok((loss_value, abs_sum));
    }
    tape.backward(loss)?;
    let store = model.params_mut();
    store.zero_grads();
    store.accumulate_grads(&tape);
    drop(tape);
    if let Some(c) = cfg.grad_clip {
        clip_grad_norm(store, c);
    }
    adam.step(store, cfg)?;
    Ok((loss_value, abs_sum))
}

pub fn train(model: Stum, data: &DataSplits, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_hook(model, data, cfg, &mut |_, _| {})
}

pub fn train_with_hook(
    mut model: Stum,
    data: &DataSplits,
    cfg: &TrainConfig,
    hook: EpochHook<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (s, h) = (model.config().input_len, model.config().horizon);
    let mut adam = Adam::new();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = History::default();
    let mut best: Option<ParamStore> = None;
    let mut step = 0u64;

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let shuffle = cfg.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64);
        let windows = make_windows(&data.train, s, h, cfg.batch_size, Some(shuffle))?;
        let (mut abs_sum, mut count) = (0.0, 0usize);
        for (i, batch) in windows.enumerate() {
            let (loss, batch_abs) = train_step(&mut model, &mut adam, &batch, data, cfg, step)?;
            if !loss.is_finite() {
                return Err(StumError::NonFiniteLoss { epoch, step: i });
            }
            step += 1;
            abs_sum += batch_abs;
            count += batch.targets.len();
        }
        let train_mae = abs_sum / count as f64;
        let val_mae = eval::split_mae(&model, &data.val, &data.stats, data.graph.as_ref(), cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_mae,
            val_mae,
            seconds: start.elapsed().as_secs_f64(),
        };
        history.epochs.push(record);
        let (improved, stop) = stopper.observe(epoch, val_mae);
        if improved {
            best = Some(model.params().clone());
        }
        log::info!("epoch {epoch}: train_mae {train_mae:.4} val_mae {val_mae:.4}");
        hook(&record, improved);
        if stop {
            break;
        }
    }
    if let Some(best) = best {
        model.params_mut().copy_values_from(&best)?;
    }
    history.best_epoch = stopper.best_epoch();
    Ok(TrainOutcome {
        model,
        history,
        best_val_mae: stopper.best(),
        steps: step,
    })
}

/// Relative error between the autodiff gradient of the MAE loss with
/// respect to the raw fusion gate and a central finite difference.
pub fn alpha_gradient_check(model: &Stum, batch: &WindowBatch, graph: Option<&TrafficGraph>) -> Result<f64> {
    let gate = model
        .fusion_gate()
        .ok_or_else(|| StumError::Config("model has no fusion gate".into()))?;
    let id = gate.logit_param();
    let loss_at = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::inference();
        let x = tape.constant(batch.inputs.clone());
        let y = tape.constant(batch.targets.clone());
        let out = model.forward_with(&mut tape, store, x, graph, &mut ForwardMode::inference())?;
        let l = mae_loss(&mut tape, out.z, y)?;
        Ok(tape.value(l).item())
    };

    let analytic = alpha_gradient(model, batch, graph)?;
    let mut store = model.params().clone();

    let step = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..analytic.len() {
        let orig = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = orig + step;
        let plus = loss_at(&store)?;
        store.value_mut(id).data_mut()[i] = orig - step;
        let minus = loss_at(&store)?;
        store.value_mut(id).data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// The analytic gradient of the MAE loss with respect to the raw gate.
pub fn alpha_gradient(model: &Stum, batch: &WindowBatch, graph: Option<&TrafficGraph>) -> Result<Tensor> {
    let gate = model
        .fusion_gate()
        .ok_or_else(|| StumError::Config("model has no fusion gate".into()))?;
    let mut store = model.params().clone();
    let mut tape = Tape::new();
    let x = tape.constant(batch.inputs.clone());
    let y = tape.constant(batch.targets.clone());
    let out = model.forward_with(&mut tape, &store, x, graph, &mut ForwardMode::inference())?;
    let l = mae_loss(&mut tape, out.z, y)?;
    tape.backward(l)?;
    store.zero_grads();
    store.accumulate_grads(&tape);
    Ok(store
        .get(gate.logit_param())
        .grad()
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(store.value(gate.logit_param()).shape())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;

    #[test]
    fn mae_examples_and_gradient() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::vector(&[1.0, 2.0]), true);
        let y = tape.constant(Tensor::vector(&[2.0, 4.0]));
        let l = mae_loss(&mut tape, z, y).unwrap();
        assert_eq!(tape.value(l).item(), 1.5);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(z).unwrap().data(), &[-0.5, -0.5]);

        let mut tape = Tape::new();
        let z = tape.constant(Tensor::vector(&[3.0, -1.0]));
        let l = mae_loss(&mut tape, z, z).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let target = Tensor::vector(&[0.3, -0.2, 1.1]);
        let err = finite_diff_check(
            |tape, z| {
                let y = tape.constant(target.clone());
                mae_loss(tape, z, y)
            },
            &Tensor::vector(&[1.0, 0.5, -0.4]),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6);
    }

    fn scalar_store(value: f64, grad: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(&[value]), true);
        let mut tape = Tape::new();
        let v = tape.param(&store, id);
        let l = tape.scale(v, grad);
        let l = tape.sum(l);
        tape.backward(l).unwrap();
        store.accumulate_grads(&tape);
        (store, id)
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let (mut store, id) = scalar_store(0.7, 1.0);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        Adam::new().step(&mut store, &cfg).unwrap();
        let expect = 0.7 - 0.001 / (1.0 + 1e-8);
        assert!((store.value(id).item() - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let (mut store, id) = scalar_store(0.7, 0.0);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut adam = Adam::new();
        for _ in 0..3 {
            adam.step(&mut store, &cfg).unwrap();
        }
        assert_eq!(store.value(id).item(), 0.7);
    }

    #[test]
    fn decay_skips_the_fusion_gate_and_frozen_params() {
        let mut store = ParamStore::new();
        let theta = store.add("w", Tensor::vector(&[1.0]), true);
        let gate = store.add_grouped("g", Tensor::vector(&[1.0]), true, ParamGroup::FusionGate);
        let frozen = store.add("f", Tensor::vector(&[1.0]), false);
        let mut tape = Tape::new();
        let vars = [theta, gate, frozen].map(|id| tape.param(&store, id));
        let a = tape.add(vars[0], vars[1]).unwrap();
        let a = tape.add(a, vars[2]).unwrap();
        let l = tape.scale(a, 0.0);
        let l = tape.sum(l);
        tape.backward(l).unwrap();
        store.accumulate_grads(&tape);
        let cfg = TrainConfig {
            weight_decay: 0.1,
            ..TrainConfig::default()
        };
        let mut adam = Adam::new();
        adam.step(&mut store, &cfg).unwrap();
        assert!((store.value(theta).item() - (1.0 - 0.001 * 0.1)).abs() < 1e-15);
        assert_eq!(store.value(gate).item(), 1.0);
        assert_eq!(store.value(frozen).item(), 1.0);
        assert!(!adam.has_state(frozen));
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut store = ParamStore::new();
        store.add("unused", Tensor::vector(&[1.0]), true);
        let err = Adam::new().step(&mut store, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, StumError::MissingGrad(name) if name == "unused"));
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let (mut store, id) = scalar_store(0.0, 12.0);
        assert_eq!(clip_grad_norm(&mut store, 5.0), 12.0);
        assert!((store.get(id).grad().unwrap().item() - 5.0).abs() < 1e-12);
        assert_eq!(clip_grad_norm(&mut store, 10.0), store.get(id).grad().unwrap().item());
    }

    #[test]
    fn early_stopping_rule() {
        let mut es = EarlyStopping::new(1);
        assert_eq!(es.observe(1, 5.0), (true, false));
        assert_eq!(es.observe(2, 6.0), (false, true));
        assert_eq!(es.best_epoch(), 1);

        let mut es = EarlyStopping::new(3);
        let curve = [4.0, 3.0, 3.5, 3.0, 2.9, 3.1, 3.2, 3.3];
        let stopped = curve
            .iter()
            .enumerate()
            .position(|(i, &v)| es.observe(i + 1, v).1)
            .map(|i| i + 1);
        assert_eq!(stopped, Some(8));
        assert_eq!(es.best_epoch(), 5);
    }

    #[test]
    fn history_csv_layout() {
        let h = History {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_mae: 0.5,
                val_mae: 0.25,
                seconds: 1.0,
            }],
            best_epoch: 1,
        };
        assert_eq!(h.to_csv(), "epoch,train_mae,val_mae,seconds\n1,0.5,0.25,1.000000\n");
    }

    #[test]
    fn invalid_train_config() {
        assert!(TrainConfig {
            patience: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lr_theta: 0.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            grad_clip: Some(-1.0),
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }
}
