//! Mini-batch training with early stopping on the training set.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowSample;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{stack_targets, ForecastModel};
use crate::optim::AdamState;

/// Upper bound on epochs per retrain.
pub const MAX_EPOCHS: usize = 40;

/// Keeps the shuffling stream apart from the initialization stream even
/// though both derive from the same seed.
const SHUFFLE_STREAM: u64 = 0x5eed_5eed_5eed_5eed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    /// Weight of the VQ auxiliary loss.
    pub vq_weight: f64,
    /// Epochs without improvement before stopping.
    pub patience: usize,
    /// Smallest decrease that counts as improvement.
    pub min_delta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            max_epochs: MAX_EPOCHS,
            batch_size: 32,
            seeds: vec![0, 1, 2],
            vq_weight: 1.0,
            patience: 5,
            min_delta: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if self.max_epochs == 0 || self.max_epochs > MAX_EPOCHS {
            return fail("max_epochs must be in 1..=40");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.seeds.is_empty() {
            return fail("at least one seed is required");
        }
        if !(self.vq_weight >= 0.0 && self.vq_weight.is_finite()) {
            return fail("vq_weight must be finite and non-negative");
        }
        if self.patience == 0 {
            return fail("patience must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingTrace {
    /// Mean mini-batch objective per epoch.
    pub train_losses: Vec<f64>,
    /// Full-pass objective after each epoch.
    pub validation_losses: Vec<f64>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

/// Objective of one batch and its gradients written into the store.
fn batch_step(model: &mut ForecastModel, batch: &[&WindowSample], vq_weight: f64) -> Result<f64> {
    let target = stack_targets(batch)?;
    let (value, grads) = {
        let mut g = Graph::with_params(&model.store);
        let out = model.forward_batch(&mut g, batch)?;
        let y = g.constant(target);
        let mut loss = g.mse_loss(out.prediction, y)?;
        if let Some(aux) = out.aux_loss {
            let aux = g.scale(aux, vq_weight);
            loss = g.add(loss, aux)?;
        }
        (g.value(loss).data()[0], g.backward(loss)?)
    };
    model.store.zero_grad();
    grads.accumulate_into(&mut model.store);
    Ok(value)
}

/// Objective over `samples` without gradients, averaged per sample.
pub fn evaluate_objective(
    model: &ForecastModel,
    samples: &[WindowSample],
    batch_size: usize,
    vq_weight: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&WindowSample> = chunk.iter().collect();
        let target = stack_targets(&refs)?;
        let mut g = Graph::with_params(&model.store);
        let out = model.forward_batch(&mut g, &refs)?;
        let y = g.constant(target);
        let mut loss = g.mse_loss(out.prediction, y)?;
        if let Some(aux) = out.aux_loss {
            let aux = g.scale(aux, vq_weight);
            loss = g.add(loss, aux)?;
        }
        total += g.value(loss).data()[0] * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Trains `model` in place. The validation set is the training set; the
/// parameters of the best validation epoch are restored at the end.
pub fn run_training(
    model: &mut ForecastModel,
    samples: &[WindowSample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainingTrace> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Contract("training needs at least one sample".into()));
    }
    let mut adam = AdamState::new(&model.store, cfg.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut trace = TrainingTrace {
        train_losses: Vec::new(),
        validation_losses: Vec::new(),
        best_epoch: 0,
    };
    let mut best = f64::INFINITY;
    let mut best_params = model.store.flat_values();
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&WindowSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let loss = batch_step(model, &batch, cfg.vq_weight)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    message: format!("non-finite training loss {loss}"),
                });
            }
            adam.step(&mut model.store)?;
            sum += loss;
            batches += 1;
        }
        trace.train_losses.push(sum / batches as f64);
        let val = evaluate_objective(model, samples, cfg.batch_size, cfg.vq_weight)?;
        if !val.is_finite() {
            return Err(Error::Training {
                epoch,
                message: format!("non-finite validation loss {val}"),
            });
        }
        trace.validation_losses.push(val);
        if val < best - cfg.min_delta {
            best = val;
            best_params = model.store.flat_values();
            trace.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    model.store.load_flat(&best_params)?;
    model.store.zero_grad();
    Ok(trace)
}
