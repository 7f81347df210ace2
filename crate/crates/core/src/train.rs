//! Minibatch training with early stopping and plateau learning-rate decay.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batching::BatchSet;
use crate::error::{shape_err, Error, Result};
use crate::loss::LossKind;
use crate::optim::{EarlyStopping, OptimizerKind, OptimizerState, PlateauScheduler, StopDecision};
use crate::seqnet::{model_backward, model_forward, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub loss: LossKind,
    pub optimizer: OptimizerKind,
    #[serde(default = "default_early_stop")]
    pub early_stop_patience: usize,
    #[serde(default = "default_plateau")]
    pub plateau_patience: usize,
    #[serde(default = "default_factor")]
    pub plateau_factor: f64,
    #[serde(default = "default_min_lr")]
    pub min_lr: f64,
}

fn default_early_stop() -> usize {
    10
}
fn default_plateau() -> usize {
    6
}
fn default_factor() -> f64 {
    0.1
}
fn default_min_lr() -> f64 {
    1e-6
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            loss: LossKind::Bce { weights: None },
            optimizer: OptimizerKind::adam(),
            early_stop_patience: default_early_stop(),
            plateau_patience: default_plateau(),
            plateau_factor: default_factor(),
            min_lr: default_min_lr(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.optimizer.validate()?;
        EarlyStopping::new(self.early_stop_patience)?;
        PlateauScheduler::new(self.plateau_patience, self.plateau_factor, self.min_lr)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when no validation batches were given.
    pub val_loss: Option<f64>,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainHistory {
    /// One JSON object per epoch, newline separated.
    pub fn to_json_lines(&self) -> String {
        self.epochs.iter().map(|e| serde_json::to_string(e).expect("plain record") + "\n").collect()
    }

    /// Equality ignoring wall-clock time.
    pub fn same_trajectory(&self, other: &TrainHistory) -> bool {
        let strip = |h: &TrainHistory| {
            let mut h = h.clone();
            h.epochs.iter_mut().for_each(|e| e.wall_seconds = 0.0);
            h
        };
        strip(self) == strip(other)
    }
}

/// Sample-weighted mean loss of `set` in evaluation mode.
pub fn evaluate_loss(model: &ModelParams, set: &BatchSet, loss: &LossKind) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut total, mut n) = (0.0, 0usize);
    for (i, b) in set.batches.iter().enumerate() {
        if b.is_empty() {
            continue;
        }
        let (p, _) = model_forward(model, &b.features, &b.mask, false, &mut rng)?;
        let (l, _) = loss.evaluate(&p, &b.labels)?;
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: 0, batch: i });
        }
        total += l * b.len() as f64;
        n += b.len();
    }
    if n == 0 {
        return Err(Error::Empty("no samples to evaluate".into()));
    }
    Ok(total / n as f64)
}

fn check_width(model: &ModelParams, set: &BatchSet, what: &str) -> Result<()> {
    match set.feature_width() {
        Some(w) if w != model.config.input_width => Err(shape_err(format!(
            "{what} batches have feature width {w} but the model expects {}",
            model.config.input_width
        ))),
        _ => Ok(()),
    }
}

/// Trains `model` and returns the weights of the best monitored epoch.
/// The monitored quantity is the validation loss, or the training loss when
/// `val` is empty. Batch order in epoch `e` is shuffled with `seed ^ e`.
pub fn train(
    mut model: ModelParams,
    train_set: &BatchSet,
    val: &BatchSet,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    check_width(&model, train_set, "training")?;
    check_width(&model, val, "validation")?;
    let mut history = TrainHistory::default();
    if cfg.epochs == 0 {
        return Ok((model, history));
    }
    if train_set.n_samples() == 0 {
        return Err(Error::Empty("no training samples".into()));
    }
    let mut opt = OptimizerState::new(cfg.optimizer)?;
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience)?;
    let mut plateau = PlateauScheduler::new(cfg.plateau_patience, cfg.plateau_factor, cfg.min_lr)?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed.rotate_left(32) ^ 0x5eed);
    let mut best = model.clone();
    let mut order: Vec<usize> = (0..train_set.batches.len()).collect();

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ epoch as u64));
        let lr = opt.lr;
        let (mut total, mut n) = (0.0, 0usize);
        for &bi in &order {
            let b = &train_set.batches[bi];
            if b.is_empty() {
                continue;
            }
            let (p, cache) = model_forward(&model, &b.features, &b.mask, true, &mut dropout_rng)?;
            let (l, dp) = cfg.loss.evaluate(&p, &b.labels)?;
            if !l.is_finite() || dp.iter().any(|d| !d.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            let grads = model_backward(&model, &cache, &dp)?;
            opt.apply_model(&mut model, &grads)?;
            total += l * b.len() as f64;
            n += b.len();
        }
        let train_loss = total / n as f64;
        let val_loss = if val.n_samples() > 0 {
            Some(evaluate_loss(&model, val, &cfg.loss).map_err(|e| match e {
                Error::NonFiniteLoss { batch, .. } => Error::NonFiniteLoss { epoch, batch },
                e => e,
            })?)
        } else {
            None
        };
        let monitored = val_loss.unwrap_or(train_loss);
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        log::info!("epoch {epoch}: train {train_loss:.5} monitored {monitored:.5} lr {lr:e}");
        opt.lr = plateau.update(monitored, opt.lr);
        match stopper.update(epoch, monitored) {
            StopDecision::Continue { improved: true } => best = model.clone(),
            StopDecision::Continue { improved: false } => {}
            StopDecision::Stop => {
                history.stopped_early = true;
                break;
            }
        }
    }
    history.best_epoch = stopper.best_epoch;
    Ok((best, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batching::{Batch, SampleRef};
    use crate::seqnet::ModelConfig;
    use crate::tensor::{MaskMatrix, Tensor3};
    use rand::Rng;

    /// Label is 1 exactly when the first feature of the last step is positive.
    fn separable(n_batches: usize, seed: u64) -> BatchSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batches = (0..n_batches)
            .map(|i| {
                let (b, t, f) = (8, 4, 2);
                let mut x = Tensor3::zeros(b, t, f);
                let mut labels = Vec::new();
                for s in 0..b {
                    x.sample_mut(s).iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
                    let last = x.step(s, t - 1)[0];
                    labels.push(u8::from(last > 0.0));
                }
                Batch {
                    features: x,
                    mask: MaskMatrix::all_valid(b, t),
                    labels,
                    sample_refs: (0..b).map(|s| SampleRef { encounter_id: format!("e{i}"), step: s }).collect(),
                }
            })
            .collect();
        BatchSet { batches }
    }

    fn model() -> ModelParams {
        ModelParams::init(&ModelConfig::lstm(2, 1, 6, 0.0), 3).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let m = model();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let (out, h) = train(m.clone(), &separable(2, 0), &BatchSet::default(), &cfg, 1).unwrap();
        assert_eq!(out, m);
        assert!(h.epochs.is_empty());
    }

    #[test]
    fn loss_decreases_on_separable_data() {
        let data = separable(16, 1);
        let cfg = TrainConfig { epochs: 30, optimizer: OptimizerKind::Adam { lr: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8 }, ..Default::default() };
        let (_, h) = train(model(), &data, &BatchSet::default(), &cfg, 1).unwrap();
        let first = h.epochs.first().unwrap().train_loss;
        let last = h.epochs.last().unwrap().train_loss;
        assert!(last < first * 0.8, "{first} -> {last}");
    }

    #[test]
    fn same_seed_same_history() {
        let data = separable(4, 2);
        let val = separable(2, 3);
        let mut cfg = TrainConfig { epochs: 5, ..Default::default() };
        cfg.loss = LossKind::Focal(crate::loss::FocalConfig { gamma: 2.0, weights: None });
        let mut m = ModelConfig::lstm(2, 1, 4, 0.3);
        m.head_dropout = 0.2;
        let m = ModelParams::init(&m, 0).unwrap();
        let (a, ha) = train(m.clone(), &data, &val, &cfg, 9).unwrap();
        let (b, hb) = train(m, &data, &val, &cfg, 9).unwrap();
        assert!(ha.same_trajectory(&hb));
        assert_eq!(a, b);
        assert_eq!(ha.to_json_lines().lines().count(), 5);
    }

    #[test]
    fn restores_best_weights() {
        let data = separable(4, 4);
        let val = separable(2, 5);
        let cfg = TrainConfig {
            epochs: 12,
            early_stop_patience: 2,
            optimizer: OptimizerKind::Adam { lr: 0.5, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            ..Default::default()
        };
        let (best, h) = train(model(), &data, &val, &cfg, 3).unwrap();
        let best_val = h.epochs.iter().filter_map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        let got = evaluate_loss(&best, &val, &cfg.loss).unwrap();
        assert!((got - best_val).abs() < 1e-12, "{got} vs {best_val}");
    }

    #[test]
    fn width_mismatch_names_widths() {
        let m = ModelParams::init(&ModelConfig::lstm(5, 1, 4, 0.0), 0).unwrap();
        let err = train(m, &separable(1, 0), &BatchSet::default(), &TrainConfig::default(), 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('2') && msg.contains('5'), "{msg}");
    }

    #[test]
    fn non_finite_loss_aborts_with_location() {
        let mut data = separable(3, 0);
        data.batches[1].features.values_mut()[0] = f64::NAN;
        let cfg = TrainConfig { epochs: 2, ..Default::default() };
        let err = train(model(), &data, &BatchSet::default(), &cfg, 0).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { epoch: 0, batch: 1 }), "{err}");
    }
}
