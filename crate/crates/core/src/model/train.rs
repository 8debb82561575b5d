//! Plain SGD on the noise-prediction loss.

use serde::{Deserialize, Serialize};

use crate::error::{AidError, Result};
use crate::numerics::{randn, SeededRng};
use crate::scheduler::NoiseSchedule;

use super::{loss_and_grads, DenoiserWeights, ModelConfig, ShapeDataset, TrainBatch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Held-out samples used to report the loss before and after training.
    pub heldout: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            lr: 1e-3,
            batch: 16,
            seed: 0,
            heldout: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: DenoiserWeights,
    pub initial_heldout_loss: f64,
    pub final_heldout_loss: f64,
}

fn sample_batch(
    data: &ShapeDataset,
    n: usize,
    train_steps: usize,
    rng: &mut SeededRng,
) -> TrainBatch {
    let idx: Vec<usize> = (0..n).map(|_| rng.below(data.len())).collect();
    let size = data.images()[0].rows();
    TrainBatch {
        x0: idx.iter().map(|&i| data.images()[i].clone()).collect(),
        labels: idx.iter().map(|&i| data.labels()[i]).collect(),
        eps: (0..n).map(|_| randn(rng, &[size, size])).collect(),
        steps: (0..n).map(|_| rng.below(train_steps)).collect(),
    }
}

/// Seeds are split as: initialization, batch sampling, held-out batch.
pub fn train(
    dataset: &ShapeDataset,
    cfg: &TrainConfig,
    model: ModelConfig,
    sched: &NoiseSchedule,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(AidError::Config("empty dataset".into()));
    }
    if cfg.batch == 0 || cfg.heldout == 0 {
        return Err(AidError::Config("batch and held-out sizes must be positive".into()));
    }
    if !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(AidError::Config(format!("learning rate {} must be positive", cfg.lr)));
    }
    if model.train_steps != sched.train_steps() {
        return Err(AidError::Config("model and noise schedule disagree on train_steps".into()));
    }
    let mut root = SeededRng::new(cfg.seed);
    let mut init_rng = root.fork();
    let mut batch_rng = root.fork();
    let mut heldout_rng = root.fork();

    let mut weights = DenoiserWeights::init(model, &mut init_rng)?;
    let heldout_data = ShapeDataset::generate(cfg.heldout.div_ceil(6).max(1), heldout_rng.next_u64())?;
    let heldout = sample_batch(&heldout_data, cfg.heldout, model.train_steps, &mut heldout_rng);
    let (initial, _) = loss_and_grads(&heldout, &weights, sched)?;

    for step in 0..cfg.steps {
        let batch = sample_batch(dataset, cfg.batch, model.train_steps, &mut batch_rng);
        let (loss, grads) = loss_and_grads(&batch, &weights, sched)?;
        if !loss.is_finite() {
            return Err(AidError::Diverged { step, loss });
        }
        for (w, g) in weights.tensors_mut().into_iter().zip(grads.tensors()) {
            w.axpy(-cfg.lr, g.1)?;
        }
        if !weights.is_finite() {
            return Err(AidError::Diverged { step, loss });
        }
    }
    let (final_loss, _) = loss_and_grads(&heldout, &weights, sched)?;
    Ok(TrainOutcome {
        weights,
        initial_heldout_loss: initial,
        final_heldout_loss: final_loss,
    })
}
