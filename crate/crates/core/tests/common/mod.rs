#![allow(dead_code)]

use std::sync::OnceLock;

use aidkit::model::{loss_and_grads, train, DenoiserWeights, ModelConfig, ShapeDataset, TrainBatch, TrainConfig};
use aidkit::numerics::randn;
use aidkit::pipeline::Denoiser;
use aidkit::scheduler::{NoiseSchedule, SamplerConfig};
use aidkit::SeededRng;

/// Briefly trained weights plus the default sampler. The pipeline properties
/// under test hold for any weights; a little training just makes classes differ.
pub struct Fixture {
    pub weights: DenoiserWeights,
    pub schedule: NoiseSchedule,
    pub sampler: SamplerConfig,
}

impl Fixture {
    pub fn model(&self) -> Denoiser<'_> {
        Denoiser {
            weights: &self.weights,
            schedule: &self.schedule,
            sampler: &self.sampler,
        }
    }
}

pub fn quick_model() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let schedule = NoiseSchedule::default();
        let data = ShapeDataset::generate(20, 7).unwrap();
        let cfg = TrainConfig {
            steps: 300,
            ..TrainConfig::default()
        };
        let weights = train(&data, &cfg, ModelConfig::default(), &schedule).unwrap().weights;
        Fixture {
            weights,
            schedule,
            sampler: SamplerConfig::default(),
        }
    })
}

pub struct GradSample {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    /// Relative error with a floor on the denominator so coordinates whose
    /// true gradient is ~0 are judged by absolute error instead.
    pub fn rel_error(&self) -> f64 {
        let denom = self.analytic.abs().max(self.numeric.abs()).max(1e-6);
        (self.analytic - self.numeric).abs() / denom
    }
}

pub fn perturbed_weights(seed: u64) -> DenoiserWeights {
    let mut rng = SeededRng::new(seed);
    let mut w = DenoiserWeights::init(ModelConfig::default(), &mut rng).unwrap();
    for t in w.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.3 * rng.normal();
        }
    }
    w
}

pub fn small_batch(seed: u64, n: usize) -> TrainBatch {
    let data = ShapeDataset::generate(2, seed).unwrap();
    let mut rng = SeededRng::new(seed ^ 0xabcdef);
    let idx: Vec<usize> = (0..n).map(|_| rng.below(data.len())).collect();
    TrainBatch {
        x0: idx.iter().map(|&i| data.images()[i].clone()).collect(),
        labels: idx.iter().map(|&i| data.labels()[i]).collect(),
        eps: (0..n).map(|_| randn(&mut rng, &[16, 16])).collect(),
        steps: (0..n).map(|_| rng.below(100)).collect(),
    }
}

/// Central differences with step `h` on `per_tensor` random coordinates of
/// every parameter tensor. Embedding-table coordinates are drawn only from
/// rows the batch touches.
pub fn finite_difference_check(seed: u64, per_tensor: usize, h: f64) -> Vec<GradSample> {
    let sched = NoiseSchedule::default();
    let w = perturbed_weights(seed);
    let batch = small_batch(seed + 1, 2);
    let (_, grads) = loss_and_grads(&batch, &w, &sched).unwrap();
    let grad_tensors: Vec<(String, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.data().to_vec()))
        .collect();
    let mut rng = SeededRng::new(seed + 2);
    let mut out = Vec::new();
    for (ti, (name, g)) in grad_tensors.iter().enumerate() {
        let shape = w.tensors()[ti].1.shape().to_vec();
        for _ in 0..per_tensor {
            let index = match name.as_str() {
                "time_embed" | "class_embed" => {
                    let rows: &[usize] = if name == "time_embed" { &batch.steps } else { &batch.labels };
                    let r = rows[rng.below(rows.len())];
                    r * shape[1] + rng.below(shape[1])
                }
                _ => rng.below(g.len()),
            };
            let eval = |delta: f64| {
                let mut wp = w.clone();
                wp.tensors_mut()[ti].data_mut()[index] += delta;
                loss_and_grads(&batch, &wp, &sched).unwrap().0
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            out.push(GradSample {
                tensor: name.clone(),
                index,
                analytic: g[index],
                numeric,
            });
        }
    }
    out
}
