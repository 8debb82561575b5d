//! Forward noising and deterministic DDIM sampling.

use serde::{Deserialize, Serialize};

use crate::error::{AidError, Result};
use crate::numerics::Tensor;

pub const DEFAULT_TRAIN_STEPS: usize = 100;
pub const DEFAULT_INFERENCE_STEPS: usize = 25;

/// Linear beta schedule and its cumulative products `ᾱ_j = ∏_{k≤j} (1 − β_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linear from `beta_start` to `beta_end` inclusive.
    pub fn linear(train_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if train_steps == 0 {
            return Err(AidError::Config("train_steps must be positive".into()));
        }
        let betas: Vec<f64> = if train_steps == 1 {
            vec![beta_start]
        } else {
            let step = (beta_end - beta_start) / (train_steps - 1) as f64;
            (0..train_steps).map(|i| beta_start + step * i as f64).collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(AidError::Config("empty beta schedule".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(AidError::Config(format!("beta {b} outside (0, 1)")));
        }
        let mut alphas_cumprod = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alphas_cumprod.push(acc);
        }
        debug_assert!(alphas_cumprod.windows(2).all(|w| w[1] < w[0]));
        Ok(Self {
            betas,
            alphas_cumprod,
        })
    }

    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    pub fn alpha_bar(&self, j: usize) -> Result<f64> {
        self.alphas_cumprod.get(j).copied().ok_or_else(|| {
            AidError::Index(format!("step {j} outside [0, {})", self.train_steps()))
        })
    }

    /// `ᾱ` for an optional previous index; `None` is the clean end of the chain with `ᾱ = 1`.
    fn alpha_bar_prev(&self, j_prev: Option<usize>) -> Result<f64> {
        j_prev.map_or(Ok(1.0), |j| self.alpha_bar(j))
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_TRAIN_STEPS, 1e-4, 0.02).expect("default schedule is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub inference_steps: usize,
    pub eta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            inference_steps: DEFAULT_INFERENCE_STEPS,
            eta: 0.0,
        }
    }
}

impl SamplerConfig {
    pub fn new(inference_steps: usize) -> Self {
        Self {
            inference_steps,
            eta: 0.0,
        }
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.inference_steps == 0 {
            return Err(AidError::Config("inference_steps must be positive".into()));
        }
        if self.inference_steps > sched.train_steps() {
            return Err(AidError::Config(format!(
                "inference_steps {} exceeds train_steps {}",
                self.inference_steps,
                sched.train_steps()
            )));
        }
        if self.eta != 0.0 {
            return Err(AidError::Config("only deterministic sampling (eta = 0) is supported".into()));
        }
        Ok(())
    }
}

/// `√ᾱ_j·x0 + √(1−ᾱ_j)·eps`
pub fn add_noise(x0: &Tensor, eps: &Tensor, j: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    let ab = sched.alpha_bar(j)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = x0.scale(a);
    out.axpy(b, eps)?;
    Ok(out)
}

/// Clean-sample estimate implied by a noise prediction at step `j`.
pub fn predict_x0(z_j: &Tensor, eps_pred: &Tensor, j: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    let ab = sched.alpha_bar(j)?;
    if ab <= 0.0 {
        return Err(AidError::Domain(format!("alpha_bar at step {j} is not positive")));
    }
    let mut x0 = z_j.clone();
    x0.axpy(-(1.0 - ab).sqrt(), eps_pred)?;
    Ok(x0.scale(1.0 / ab.sqrt()))
}

/// One deterministic DDIM update from `j` to `j_prev` (`None` = fully denoised).
pub fn ddim_step(
    z_j: &Tensor,
    eps_pred: &Tensor,
    j: usize,
    j_prev: Option<usize>,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if cfg.eta != 0.0 {
        return Err(AidError::Config("only deterministic sampling (eta = 0) is supported".into()));
    }
    if let Some(p) = j_prev {
        if p >= j {
            return Err(AidError::Index(format!("previous step {p} is not before {j}")));
        }
    }
    let x0 = predict_x0(z_j, eps_pred, j, sched)?;
    let ab_prev = sched.alpha_bar_prev(j_prev)?;
    if ab_prev <= 0.0 {
        return Err(AidError::Domain("alpha_bar of the previous step is not positive".into()));
    }
    let mut out = x0.scale(ab_prev.sqrt());
    out.axpy((1.0 - ab_prev).sqrt(), eps_pred)?;
    Ok(out)
}

/// Evenly spaced, strictly decreasing timesteps starting at `train_steps − 1`.
pub fn make_timesteps(cfg: &SamplerConfig, sched: &NoiseSchedule) -> Result<Vec<usize>> {
    cfg.validate(sched)?;
    let n = sched.train_steps();
    let stride = n / cfg.inference_steps;
    Ok((0..cfg.inference_steps).map(|i| n - 1 - i * stride).collect())
}

/// Pairs each timestep with its successor; the last one maps to `None`.
pub fn step_pairs(timesteps: &[usize]) -> Vec<(usize, Option<usize>)> {
    timesteps
        .iter()
        .enumerate()
        .map(|(i, &j)| (j, timesteps.get(i + 1).copied()))
        .collect()
}
