//! Interpolation sequences: the two baselines and attention interpolation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionSite, ProcessorMode, ProcessorSelector, Route};
use crate::error::{AidError, Result};
use crate::metrics::{evaluate, FeatureExtractor, MetricsReport, PerceptualDistance};
use crate::model::{forward, forward_traced, ConditionEmbedding, ConditionSource, DenoiserWeights, PeerContext};
use crate::numerics::{randn, slerp, SeededRng, Tensor};
use crate::scheduler::{ddim_step, make_timesteps, step_pairs, NoiseSchedule, SamplerConfig};
use crate::selection::{
    bayes_opt, beta_schedule, uniform_schedule, BetaPrior, BoConfig, BoObjective, BoResult,
    CoefficientSchedule,
};

pub const DEFAULT_SEQUENCE_LENGTH: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "text_embed_baseline")]
    TextEmbed,
    #[serde(rename = "denoise_baseline")]
    Denoise,
    #[serde(rename = "aid_inner")]
    AidInner,
    #[serde(rename = "aid_outer")]
    AidOuter,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::TextEmbed, Method::Denoise, Method::AidInner, Method::AidOuter];

    pub fn name(self) -> &'static str {
        match self {
            Method::TextEmbed => "text_embed_baseline",
            Method::Denoise => "denoise_baseline",
            Method::AidInner => "aid_inner",
            Method::AidOuter => "aid_outer",
        }
    }

    /// Short command-line spelling.
    pub fn flag(self) -> &'static str {
        match self {
            Method::TextEmbed => "text",
            Method::Denoise => "denoise",
            Method::AidInner => "aid-i",
            Method::AidOuter => "aid-o",
        }
    }

    pub fn is_aid(self) -> bool {
        matches!(self, Method::AidInner | Method::AidOuter)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = AidError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.flag() == s || m.name() == s)
            .ok_or_else(|| AidError::Config(format!("unknown method '{s}'")))
    }
}

/// Which condition the denoising baseline uses for the first ⌊t·T⌋ steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiseOrientation {
    /// First ⌊t·T⌋ steps on c_1, the rest on c_m.
    #[default]
    FirstSource,
    /// First ⌊t·T⌋ steps on c_m, the rest on c_1.
    LastSource,
}

/// Trained weights plus the sampler they run under.
#[derive(Debug, Clone, Copy)]
pub struct Denoiser<'a> {
    pub weights: &'a DenoiserWeights,
    pub schedule: &'a NoiseSchedule,
    pub sampler: &'a SamplerConfig,
}

impl Denoiser<'_> {
    fn check(&self) -> Result<Vec<(usize, Option<usize>)>> {
        if !self.weights.is_finite() {
            return Err(AidError::NonFinite("model weights".into()));
        }
        if self.weights.config.train_steps != self.schedule.train_steps() {
            return Err(AidError::Config(format!(
                "model has {} timestep embeddings but the schedule has {} steps",
                self.weights.config.train_steps,
                self.schedule.train_steps()
            )));
        }
        Ok(step_pairs(&make_timesteps(self.sampler, self.schedule)?))
    }

    fn image_shape(&self) -> [usize; 2] {
        [self.weights.config.image_size; 2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationConfig {
    pub method: Method,
    pub fused: bool,
    pub schedule: CoefficientSchedule,
    pub guidance: Option<ConditionEmbedding>,
    /// `None` picks [`default_warmup`].
    pub warmup_steps: Option<usize>,
    pub seeds: (u64, u64),
    pub denoise_orientation: DenoiseOrientation,
}

impl InterpolationConfig {
    /// Uniform schedule of length `m`; fusion on for the attention methods.
    pub fn new(method: Method, m: usize) -> Result<Self> {
        Ok(Self {
            method,
            fused: method.is_aid(),
            schedule: uniform_schedule(m)?,
            guidance: None,
            warmup_steps: None,
            seeds: (0, 1),
            denoise_orientation: DenoiseOrientation::default(),
        })
    }

    pub fn m(&self) -> usize {
        self.schedule.len()
    }

    /// Warmup length for a sampler with `steps` iterations.
    pub fn warmup(&self, steps: usize) -> usize {
        self.warmup_steps
            .unwrap_or_else(|| default_warmup(steps, self.guidance.is_some()))
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.guidance.is_some() && !self.method.is_aid() {
            return Err(AidError::Config(format!(
                "guidance is only available for attention interpolation, not {}",
                self.method
            )));
        }
        if self.fused && !self.method.is_aid() {
            return Err(AidError::Config(format!("fusion does not apply to {}", self.method)));
        }
        if let Some(w) = self.warmup_steps {
            if w > steps {
                return Err(AidError::Config(format!(
                    "warmup of {w} steps exceeds the {steps}-step sampler"
                )));
            }
        }
        Ok(())
    }
}

/// All steps without guidance; 10 of every 50 steps (rounded) with guidance.
pub fn default_warmup(steps: usize, guided: bool) -> usize {
    if guided {
        ((steps * 10) as f64 / 50.0).round() as usize
    } else {
        steps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemRole {
    Source,
    Interior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemProvenance {
    pub index: usize,
    pub role: ItemRole,
    pub coefficient: f64,
    pub condition: ConditionSource,
    /// Denoising baseline only: steps run on the first condition.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub switch_step: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationSequence {
    pub images: Vec<Tensor>,
    pub coefficients: CoefficientSchedule,
    pub method: Method,
    pub fused: bool,
    pub warmup_steps: Option<usize>,
    pub seeds: (u64, u64),
    pub provenance: Vec<ItemProvenance>,
}

impl AsRef<[Tensor]> for InterpolationSequence {
    fn as_ref(&self) -> &[Tensor] {
        &self.images
    }
}

/// Initial noise for one seed.
pub fn source_latent(seed: u64, shape: [usize; 2]) -> Tensor {
    randn(&mut SeededRng::new(seed), &shape)
}

/// Per-item initial noise: the two seeds' latents at the ends, spherical
/// interpolation between them elsewhere.
pub fn item_latents(cfg: &InterpolationConfig, shape: [usize; 2]) -> Result<Vec<Tensor>> {
    let z1 = source_latent(cfg.seeds.0, shape);
    let zm = source_latent(cfg.seeds.1, shape);
    let t = cfg.schedule.values();
    let last = t.len() - 1;
    (0..t.len())
        .map(|i| match i {
            0 => Ok(z1.clone()),
            i if i == last => Ok(zm.clone()),
            i => slerp(&z1, &zm, t[i]),
        })
        .collect()
}

/// Deterministic DDIM sampling from `z_t` under one condition.
pub fn generate_single(z_t: &Tensor, cond: &ConditionEmbedding, model: &Denoiser<'_>) -> Result<Tensor> {
    generate_switched(z_t, cond, cond, usize::MAX, model)
}

/// Samples with `first` for the first `switch` steps and `second` afterwards.
fn generate_switched(
    z_t: &Tensor,
    first: &ConditionEmbedding,
    second: &ConditionEmbedding,
    switch: usize,
    model: &Denoiser<'_>,
) -> Result<Tensor> {
    let pairs = model.check()?;
    let mut z = z_t.clone();
    for (s, &(j, j_prev)) in pairs.iter().enumerate() {
        let cond = if s < switch { first } else { second };
        let eps = forward(&z, cond, j, model.weights, &Route::PLAIN, None)?;
        z = ddim_step(&z, &eps, j, j_prev, model.sampler, model.schedule)?;
    }
    Ok(z)
}

/// ⌊t·T⌋, tolerant of the representation error in coefficients such as 3/5.
pub fn denoise_switch_step(t: f64, steps: usize) -> usize {
    ((t * steps as f64 + 1e-9).floor() as usize).min(steps)
}

fn check_method(cfg: &InterpolationConfig, allowed: &[Method], steps: usize) -> Result<()> {
    if !allowed.contains(&cfg.method) {
        return Err(AidError::Config(format!("{} config passed to the wrong generator", cfg.method)));
    }
    cfg.validate(steps)
}

/// Conditions for each item of the text-embedding baseline.
pub fn text_embedding_conditions(
    cfg: &InterpolationConfig,
    c1: &ConditionEmbedding,
    cm: &ConditionEmbedding,
) -> Result<Vec<ConditionEmbedding>> {
    let t = cfg.schedule.values();
    let last = t.len() - 1;
    (0..t.len())
        .map(|i| match i {
            0 => Ok(c1.clone()),
            i if i == last => Ok(cm.clone()),
            i => ConditionEmbedding::lerp(c1, cm, t[i]),
        })
        .collect()
}

fn provenance(index: usize, last: usize, coefficient: f64, condition: ConditionSource) -> ItemProvenance {
    ItemProvenance {
        index,
        role: if index == 0 || index == last {
            ItemRole::Source
        } else {
            ItemRole::Interior
        },
        coefficient,
        condition,
        switch_step: None,
    }
}

fn sequence(cfg: &InterpolationConfig, images: Vec<Tensor>, provenance: Vec<ItemProvenance>, steps: usize) -> InterpolationSequence {
    InterpolationSequence {
        images,
        coefficients: cfg.schedule.clone(),
        method: cfg.method,
        fused: cfg.fused,
        warmup_steps: cfg.method.is_aid().then(|| cfg.warmup(steps)),
        seeds: cfg.seeds,
        provenance,
    }
}

/// Item i samples from slerp(z_1, z_m, t_i) under lerp(c_1, c_m, t_i).
pub fn interpolate_text_embedding(
    cfg: &InterpolationConfig,
    c1: &ConditionEmbedding,
    cm: &ConditionEmbedding,
    model: &Denoiser<'_>,
) -> Result<InterpolationSequence> {
    let steps = model.sampler.inference_steps;
    check_method(cfg, &[Method::TextEmbed], steps)?;
    let latents = item_latents(cfg, model.image_shape())?;
    let conds = text_embedding_conditions(cfg, c1, cm)?;
    let last = cfg.m() - 1;
    let mut images = Vec::with_capacity(cfg.m());
    let mut prov = Vec::with_capacity(cfg.m());
    for (i, (z, c)) in latents.iter().zip(&conds).enumerate() {
        images.push(generate_single(z, c, model)?);
        prov.push(provenance(i, last, cfg.schedule.values()[i], c.source.clone()));
    }
    Ok(sequence(cfg, images, prov, steps))
}

/// Item i switches conditions after ⌊t_i·T⌋ steps; the two ends are the plain
/// source generations.
pub fn interpolate_denoising(
    cfg: &InterpolationConfig,
    c1: &ConditionEmbedding,
    cm: &ConditionEmbedding,
    model: &Denoiser<'_>,
) -> Result<InterpolationSequence> {
    let steps = model.sampler.inference_steps;
    check_method(cfg, &[Method::Denoise], steps)?;
    let latents = item_latents(cfg, model.image_shape())?;
    let (first, second) = match cfg.denoise_orientation {
        DenoiseOrientation::FirstSource => (c1, cm),
        DenoiseOrientation::LastSource => (cm, c1),
    };
    let last = cfg.m() - 1;
    let mut images = Vec::with_capacity(cfg.m());
    let mut prov = Vec::with_capacity(cfg.m());
    for (i, z) in latents.iter().enumerate() {
        let t = cfg.schedule.values()[i];
        if i == 0 || i == last {
            let c = if i == 0 { c1 } else { cm };
            images.push(generate_single(z, c, model)?);
            prov.push(provenance(i, last, t, c.source.clone()));
        } else {
            let switch = denoise_switch_step(t, steps);
            images.push(generate_switched(z, first, second, switch, model)?);
            let mut p = provenance(i, last, t, ConditionSource::Interpolated { t });
            p.switch_step = Some(switch);
            prov.push(p);
        }
    }
    Ok(sequence(cfg, images, prov, steps))
}

/// Attention routing of one interior item.
pub fn interior_selectors(cfg: &InterpolationConfig, t: f64, steps: usize) -> Result<Vec<ProcessorSelector>> {
    let mode = match (cfg.method, cfg.fused) {
        (Method::AidInner, false) => ProcessorMode::Inner,
        (Method::AidInner, true) => ProcessorMode::FusedInner,
        (Method::AidOuter, false) => ProcessorMode::Outer,
        (Method::AidOuter, true) => ProcessorMode::FusedOuter,
        (m, _) => return Err(AidError::Config(format!("{m} does not route attention"))),
    };
    let warmup = cfg.warmup(steps);
    let selectors = if cfg.guidance.is_some() {
        vec![
            ProcessorSelector::new(ProcessorMode::Guided, t, AttentionSite::CrossAttention, 0..steps)?,
            ProcessorSelector::new(mode, t, AttentionSite::SelfAttention, 0..warmup)?,
        ]
    } else {
        vec![ProcessorSelector::new(mode, t, AttentionSite::Both, 0..warmup)?]
    };
    for s in &selectors {
        s.validate_for(steps)?;
    }
    Ok(selectors)
}

/// All branches advance in lockstep; each step the two source branches run
/// plain attention and hand their keys/values to the interior branches.
pub fn interpolate_aid(
    cfg: &InterpolationConfig,
    c1: &ConditionEmbedding,
    cm: &ConditionEmbedding,
    model: &Denoiser<'_>,
) -> Result<InterpolationSequence> {
    let pairs = model.check()?;
    let steps = pairs.len();
    check_method(cfg, &[Method::AidInner, Method::AidOuter], steps)?;
    let m = cfg.m();
    let last = m - 1;
    let t = cfg.schedule.values();
    let mut latents = item_latents(cfg, model.image_shape())?;

    let mut conds = Vec::with_capacity(m);
    let mut routes = Vec::with_capacity(m);
    for (i, &ti) in t.iter().enumerate() {
        if i == 0 || i == last {
            conds.push(if i == 0 { c1.clone() } else { cm.clone() });
            routes.push(Vec::new());
        } else {
            conds.push(match &cfg.guidance {
                Some(g) => g.clone(),
                None => ConditionEmbedding::lerp(c1, cm, ti)?,
            });
            routes.push(interior_selectors(cfg, ti, steps)?);
        }
    }

    for (s, &(j, j_prev)) in pairs.iter().enumerate() {
        let (eps_1, kv_1) = forward_traced(&latents[0], &conds[0], j, model.weights)?;
        let (eps_m, kv_m) = forward_traced(&latents[last], &conds[last], j, model.weights)?;
        let peers = PeerContext {
            source_1: &kv_1,
            source_m: &kv_m,
        };
        let mut eps = Vec::with_capacity(m);
        eps.push(eps_1);
        for i in 1..last {
            let route = Route::resolve(&routes[i], s);
            eps.push(forward(&latents[i], &conds[i], j, model.weights, &route, Some(&peers))?);
        }
        if last > 0 {
            eps.push(eps_m);
        }
        for (z, e) in latents.iter_mut().zip(&eps) {
            *z = ddim_step(z, e, j, j_prev, model.sampler, model.schedule)?;
        }
    }

    let prov = (0..m)
        .map(|i| provenance(i, last, t[i], conds[i].source.clone()))
        .collect();
    Ok(sequence(cfg, latents, prov, steps))
}

/// Dispatches on `cfg.method`.
pub fn interpolate(
    cfg: &InterpolationConfig,
    c1: &ConditionEmbedding,
    cm: &ConditionEmbedding,
    model: &Denoiser<'_>,
) -> Result<InterpolationSequence> {
    match cfg.method {
        Method::TextEmbed => interpolate_text_embedding(cfg, c1, cm, model),
        Method::Denoise => interpolate_denoising(cfg, c1, cm, model),
        Method::AidInner | Method::AidOuter => interpolate_aid(cfg, c1, cm, model),
    }
}

/// Searches the Beta prior whose schedule maximizes smoothness (or minimizes
/// consistency) of the sequence `cfg` generates.
pub fn optimize_prior(
    cfg: &InterpolationConfig,
    c1: &ConditionEmbedding,
    cm: &ConditionEmbedding,
    model: &Denoiser<'_>,
    p: &dyn PerceptualDistance,
    bo: &BoConfig,
) -> Result<BoResult> {
    let m = cfg.m();
    let objective = |alpha: f64, beta: f64| -> Result<f64> {
        let mut c = cfg.clone();
        c.schedule = beta_schedule(m, &BetaPrior::new(alpha, beta)?)?;
        let seq = interpolate(&c, c1, cm, model)?;
        match bo.objective {
            BoObjective::Smoothness => crate::metrics::smoothness(&seq.images, p),
            BoObjective::Consistency => Ok(-crate::metrics::consistency(&seq.images, p)?),
        }
    };
    bayes_opt(objective, bo)
}

/// Runs every config on the same class pair and seeds and evaluates each
/// sequence on its own.
pub fn compare_methods(
    pair: (usize, usize),
    seeds: (u64, u64),
    configs: &[InterpolationConfig],
    model: &Denoiser<'_>,
    p: &dyn PerceptualDistance,
    fx: &dyn FeatureExtractor,
) -> Result<Vec<(Method, InterpolationSequence, MetricsReport)>> {
    let c1 = model.weights.class_condition(pair.0)?;
    let cm = model.weights.class_condition(pair.1)?;
    configs
        .iter()
        .map(|cfg| {
            let mut cfg = cfg.clone();
            cfg.seeds = seeds;
            let seq = interpolate(&cfg, &c1, &cm, model)?;
            let report = evaluate(std::slice::from_ref(&seq), p, fx)?;
            Ok((cfg.method, seq, report))
        })
        .collect()
}
