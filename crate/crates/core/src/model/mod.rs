//! Toy conditional noise predictor: patch tokens, pre-norm transformer blocks
//! with self- and cross-attention, and a tanh MLP.
//!
//! Every attention site can be re-routed through an interpolating processor
//! (see [`crate::attention::Route`]); source branches export their per-block
//! keys/values through [`forward_traced`] so interior branches can read them
//! at the same step.

mod checkpoint;
mod data;
mod grad;
mod train;

pub use checkpoint::{content_hash, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use data::{ShapeClass, ShapeDataset};
pub use grad::{loss_and_grads, TrainBatch};
pub use train::{train, TrainConfig, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::attention::{attend_with_probs, run_processor, AttentionParams, Route, SiteInputs};
use crate::error::{AidError, Result};
use crate::numerics::{lerp, matmul, SeededRng, Tensor};

/// Architecture constants. The defaults are the smallest configuration that
/// still exercises both attention types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub width: usize,
    pub blocks: usize,
    pub hidden: usize,
    pub cond_tokens: usize,
    pub classes: usize,
    pub train_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch: 4,
            width: 16,
            blocks: 2,
            hidden: 32,
            cond_tokens: 2,
            classes: 6,
            train_steps: 100,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.image_size,
            self.patch,
            self.width,
            self.blocks,
            self.hidden,
            self.cond_tokens,
            self.classes,
            self.train_steps,
        ];
        if positive.contains(&0) {
            return Err(AidError::Config("model dimensions must be positive".into()));
        }
        if !self.image_size.is_multiple_of(self.patch) {
            return Err(AidError::Config(format!(
                "patch {} does not tile image {}",
                self.patch, self.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub self_attn: AttentionParams,
    pub cross_attn: AttentionParams,
    pub mlp_w1: Tensor,
    pub mlp_w2: Tensor,
    pub norm1_scale: Tensor,
    pub norm1_shift: Tensor,
    pub norm2_scale: Tensor,
    pub norm2_shift: Tensor,
    pub norm3_scale: Tensor,
    pub norm3_shift: Tensor,
}

/// All trainable parameters of the denoiser.
///
/// `class_embed` is the condition table: row `c` holds the `cond_tokens × width`
/// tokens of class `c`, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserWeights {
    pub config: ModelConfig,
    pub patch_embed: Tensor,
    pub pos_embed: Tensor,
    pub time_embed: Tensor,
    pub class_embed: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub patch_unembed: Tensor,
}

impl DenoiserWeights {
    pub fn zeros(config: ModelConfig) -> Self {
        let d = config.width;
        let block = || BlockWeights {
            self_attn: AttentionParams {
                w_q: Tensor::zeros(&[d, d]),
                w_k: Tensor::zeros(&[d, d]),
                w_v: Tensor::zeros(&[d, d]),
            },
            cross_attn: AttentionParams {
                w_q: Tensor::zeros(&[d, d]),
                w_k: Tensor::zeros(&[d, d]),
                w_v: Tensor::zeros(&[d, d]),
            },
            mlp_w1: Tensor::zeros(&[d, config.hidden]),
            mlp_w2: Tensor::zeros(&[config.hidden, d]),
            norm1_scale: Tensor::zeros(&[d]),
            norm1_shift: Tensor::zeros(&[d]),
            norm2_scale: Tensor::zeros(&[d]),
            norm2_shift: Tensor::zeros(&[d]),
            norm3_scale: Tensor::zeros(&[d]),
            norm3_shift: Tensor::zeros(&[d]),
        };
        Self {
            config,
            patch_embed: Tensor::zeros(&[config.patch_dim(), d]),
            pos_embed: Tensor::zeros(&[config.tokens(), d]),
            time_embed: Tensor::zeros(&[config.train_steps, d]),
            class_embed: Tensor::zeros(&[config.classes, config.cond_tokens * d]),
            blocks: (0..config.blocks).map(|_| block()).collect(),
            patch_unembed: Tensor::zeros(&[d, config.patch_dim()]),
        }
    }

    /// Seeded initialization: projections ~ N(0, 1/fan_in), unit norm scales,
    /// small embeddings, and an unembedding scaled down so the untrained
    /// prediction starts near zero.
    pub fn init(config: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let mut w = Self::zeros(config);
        let mut fill = |t: &mut Tensor, std: f64| {
            for v in t.data_mut() {
                *v = std * rng.normal();
            }
        };
        let d = config.width as f64;
        fill(&mut w.patch_embed, 1.0 / (config.patch_dim() as f64).sqrt());
        fill(&mut w.pos_embed, 0.1);
        fill(&mut w.time_embed, 0.1);
        fill(&mut w.class_embed, 1.0);
        for b in &mut w.blocks {
            for p in [&mut b.self_attn, &mut b.cross_attn] {
                fill(&mut p.w_q, 1.0 / d.sqrt());
                fill(&mut p.w_k, 1.0 / d.sqrt());
                fill(&mut p.w_v, 1.0 / d.sqrt());
            }
            fill(&mut b.mlp_w1, 1.0 / d.sqrt());
            fill(&mut b.mlp_w2, 1.0 / (config.hidden as f64).sqrt());
            for s in [&mut b.norm1_scale, &mut b.norm2_scale, &mut b.norm3_scale] {
                *s = Tensor::filled(&[config.width], 1.0);
            }
        }
        fill(&mut w.patch_unembed, 0.1 / d.sqrt());
        Ok(w)
    }

    /// Parameter tensors in a fixed order with stable names.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch_embed".into(), &self.patch_embed),
            ("pos_embed".into(), &self.pos_embed),
            ("time_embed".into(), &self.time_embed),
            ("class_embed".into(), &self.class_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let n = |s: &str| format!("blocks.{i}.{s}");
            out.extend([
                (n("self_attn.w_q"), &b.self_attn.w_q),
                (n("self_attn.w_k"), &b.self_attn.w_k),
                (n("self_attn.w_v"), &b.self_attn.w_v),
                (n("cross_attn.w_q"), &b.cross_attn.w_q),
                (n("cross_attn.w_k"), &b.cross_attn.w_k),
                (n("cross_attn.w_v"), &b.cross_attn.w_v),
                (n("mlp_w1"), &b.mlp_w1),
                (n("mlp_w2"), &b.mlp_w2),
                (n("norm1_scale"), &b.norm1_scale),
                (n("norm1_shift"), &b.norm1_shift),
                (n("norm2_scale"), &b.norm2_scale),
                (n("norm2_shift"), &b.norm2_shift),
                (n("norm3_scale"), &b.norm3_scale),
                (n("norm3_shift"), &b.norm3_shift),
            ]);
        }
        out.push(("patch_unembed".into(), &self.patch_unembed));
        out
    }

    /// Mutable counterpart of [`Self::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.patch_embed,
            &mut self.pos_embed,
            &mut self.time_embed,
            &mut self.class_embed,
        ];
        for b in &mut self.blocks {
            out.extend([
                &mut b.self_attn.w_q,
                &mut b.self_attn.w_k,
                &mut b.self_attn.w_v,
                &mut b.cross_attn.w_q,
                &mut b.cross_attn.w_k,
                &mut b.cross_attn.w_v,
                &mut b.mlp_w1,
                &mut b.mlp_w2,
                &mut b.norm1_scale,
                &mut b.norm1_shift,
                &mut b.norm2_scale,
                &mut b.norm2_shift,
                &mut b.norm3_scale,
                &mut b.norm3_shift,
            ]);
        }
        out.push(&mut self.patch_unembed);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Condition tokens of one class.
    pub fn class_condition(&self, class: usize) -> Result<ConditionEmbedding> {
        if class >= self.config.classes {
            return Err(AidError::Index(format!(
                "class {class} outside [0, {})",
                self.config.classes
            )));
        }
        let tokens = Tensor::new(
            vec![self.config.cond_tokens, self.config.width],
            self.class_embed.row(class).to_vec(),
        )?;
        Ok(ConditionEmbedding {
            tokens,
            source: ConditionSource::Class(class),
        })
    }

    /// Mean of several class embeddings (a compositional guidance condition).
    pub fn mean_condition(&self, classes: &[usize]) -> Result<ConditionEmbedding> {
        if classes.is_empty() {
            return Err(AidError::Config("empty class list".into()));
        }
        let mut acc = Tensor::zeros(&[self.config.cond_tokens, self.config.width]);
        for &c in classes {
            acc.add_assign(&self.class_condition(c)?.tokens)?;
        }
        Ok(ConditionEmbedding {
            tokens: acc.scale(1.0 / classes.len() as f64),
            source: ConditionSource::Mixture(classes.to_vec()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionSource {
    Class(usize),
    Mixture(Vec<usize>),
    Interpolated { t: f64 },
}

/// Condition tokens handed to every cross-attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    pub tokens: Tensor,
    pub source: ConditionSource,
}

impl ConditionEmbedding {
    pub fn lerp(a: &ConditionEmbedding, b: &ConditionEmbedding, t: f64) -> Result<Self> {
        Ok(Self {
            tokens: lerp(&a.tokens, &b.tokens, t)?,
            source: ConditionSource::Interpolated { t },
        })
    }
}

/// Splits an image into non-overlapping square patches, row-major, each flattened row-major.
pub fn patchify(img: &Tensor, patch: usize) -> Result<Tensor> {
    if img.shape().len() != 2 || img.rows() != img.cols() || !img.rows().is_multiple_of(patch) {
        return Err(AidError::Dimension(format!(
            "cannot patchify image of shape {:?} with patch {patch}",
            img.shape()
        )));
    }
    let size = img.rows();
    let grid = size / patch;
    let mut out = Vec::with_capacity(size * size);
    for gy in 0..grid {
        for gx in 0..grid {
            for py in 0..patch {
                let row = img.row(gy * patch + py);
                out.extend_from_slice(&row[gx * patch..(gx + 1) * patch]);
            }
        }
    }
    Tensor::new(vec![grid * grid, patch * patch], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, patch: usize) -> Result<Tensor> {
    let n = tokens.rows();
    let grid = (n as f64).sqrt().round() as usize;
    if tokens.shape().len() != 2 || grid * grid != n || tokens.cols() != patch * patch {
        return Err(AidError::Dimension(format!(
            "cannot unpatchify tokens of shape {:?} with patch {patch}",
            tokens.shape()
        )));
    }
    let size = grid * patch;
    let mut out = vec![0.0; size * size];
    for gy in 0..grid {
        for gx in 0..grid {
            let tok = tokens.row(gy * grid + gx);
            for py in 0..patch {
                let dst = (gy * patch + py) * size + gx * patch;
                out[dst..dst + patch].copy_from_slice(&tok[py * patch..(py + 1) * patch]);
            }
        }
    }
    Tensor::new(vec![size, size], out)
}

pub(crate) const NORM_EPS: f64 = 1e-5;

/// Per-token normalization. Returns the output, the normalized input and the
/// per-token inverse standard deviations.
pub(crate) fn layer_norm(x: &Tensor, scale: &Tensor, shift: &Tensor) -> (Tensor, Tensor, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut y = vec![0.0; n * d];
    let mut xhat = vec![0.0; n * d];
    let mut inv = Vec::with_capacity(n);
    let (g, b) = (scale.data(), shift.data());
    for r in 0..n {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        inv.push(is);
        for c in 0..d {
            let h = (row[c] - mean) * is;
            xhat[r * d + c] = h;
            y[r * d + c] = h * g[c] + b[c];
        }
    }
    (
        Tensor::new(vec![n, d], y).expect("norm shape"),
        Tensor::new(vec![n, d], xhat).expect("norm shape"),
        inv,
    )
}

/// Token embedding: `patchify(z)·patch_embed + pos_embed + time_embed[j]`.
pub(crate) fn embed(w: &DenoiserWeights, z: &Tensor, j: usize) -> Result<(Tensor, Tensor)> {
    let cfg = &w.config;
    if z.shape() != [cfg.image_size, cfg.image_size] {
        return Err(AidError::Dimension(format!(
            "expected a {0}×{0} image, got {1:?}",
            cfg.image_size,
            z.shape()
        )));
    }
    if j >= w.time_embed.rows() {
        return Err(AidError::Index(format!(
            "timestep {j} outside [0, {})",
            w.time_embed.rows()
        )));
    }
    let tokens = patchify(z, cfg.patch)?;
    let mut x = matmul(&tokens, &w.patch_embed)?;
    x.add_assign(&w.pos_embed)?;
    let time = w.time_embed.row(j);
    for r in 0..x.rows() {
        for (v, t) in x.row_mut(r).iter_mut().zip(time) {
            *v += t;
        }
    }
    Ok((tokens, x))
}

pub(crate) fn check_condition(w: &DenoiserWeights, cond: &ConditionEmbedding) -> Result<()> {
    if cond.tokens.shape() != [w.config.cond_tokens, w.config.width] {
        return Err(AidError::Dimension(format!(
            "condition shape {:?} does not match model ({}×{})",
            cond.tokens.shape(),
            w.config.cond_tokens,
            w.config.width
        )));
    }
    Ok(())
}

/// Keys and values one block computed for a branch at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockKv {
    pub self_k: Tensor,
    pub self_v: Tensor,
    pub cross_k: Tensor,
    pub cross_v: Tensor,
}

/// Per-block keys/values of one branch at one step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BranchKv {
    pub blocks: Vec<BlockKv>,
}

/// The two source branches' keys/values at the current step.
#[derive(Debug, Clone, Copy)]
pub struct PeerContext<'a> {
    pub source_1: &'a BranchKv,
    pub source_m: &'a BranchKv,
}

/// Predicts the noise in `z` at timestep `j` with attention routed per `route`.
pub fn forward(
    z: &Tensor,
    cond: &ConditionEmbedding,
    j: usize,
    w: &DenoiserWeights,
    route: &Route,
    peers: Option<&PeerContext<'_>>,
) -> Result<Tensor> {
    if route.needs_peers() && peers.is_none() {
        return Err(AidError::MissingPeers(format!(
            "route {route:?} interpolates but no source keys/values were supplied"
        )));
    }
    run(z, cond, j, w, route, peers, None)
}

/// Plain forward pass that also exports every block's keys and values.
pub fn forward_traced(
    z: &Tensor,
    cond: &ConditionEmbedding,
    j: usize,
    w: &DenoiserWeights,
) -> Result<(Tensor, BranchKv)> {
    let mut kv = BranchKv::default();
    let eps = run(z, cond, j, w, &Route::PLAIN, None, Some(&mut kv))?;
    Ok((eps, kv))
}

fn run(
    z: &Tensor,
    cond: &ConditionEmbedding,
    j: usize,
    w: &DenoiserWeights,
    route: &Route,
    peers: Option<&PeerContext<'_>>,
    mut trace: Option<&mut BranchKv>,
) -> Result<Tensor> {
    check_condition(w, cond)?;
    if let Some(p) = peers {
        if p.source_1.blocks.len() != w.blocks.len() || p.source_m.blocks.len() != w.blocks.len() {
            return Err(AidError::Dimension("peer context has the wrong block count".into()));
        }
    }
    let (_, mut x) = embed(w, z, j)?;
    for (bi, b) in w.blocks.iter().enumerate() {
        let (h1, _, _) = layer_norm(&x, &b.norm1_scale, &b.norm1_shift);
        let q = matmul(&h1, &b.self_attn.w_q)?;
        let k = matmul(&h1, &b.self_attn.w_k)?;
        let v = matmul(&h1, &b.self_attn.w_v)?;
        let site_peers = peers.map(|p| {
            let (s1, sm) = (&p.source_1.blocks[bi], &p.source_m.blocks[bi]);
            (&s1.self_k, &sm.self_k, &s1.self_v, &sm.self_v)
        });
        let a = run_processor(
            route.self_attn,
            &SiteInputs {
                q: &q,
                k_own: &k,
                v_own: &v,
                peers: site_peers,
            },
        )?;
        x.add_assign(&a)?;

        let (h2, _, _) = layer_norm(&x, &b.norm2_scale, &b.norm2_shift);
        let qc = matmul(&h2, &b.cross_attn.w_q)?;
        let kc = matmul(&cond.tokens, &b.cross_attn.w_k)?;
        let vc = matmul(&cond.tokens, &b.cross_attn.w_v)?;
        let site_peers = peers.map(|p| {
            let (s1, sm) = (&p.source_1.blocks[bi], &p.source_m.blocks[bi]);
            (&s1.cross_k, &sm.cross_k, &s1.cross_v, &sm.cross_v)
        });
        let a = run_processor(
            route.cross_attn,
            &SiteInputs {
                q: &qc,
                k_own: &kc,
                v_own: &vc,
                peers: site_peers,
            },
        )?;
        x.add_assign(&a)?;

        if let Some(kv) = trace.as_deref_mut() {
            kv.blocks.push(BlockKv {
                self_k: k,
                self_v: v,
                cross_k: kc,
                cross_v: vc,
            });
        }

        let (h3, _, _) = layer_norm(&x, &b.norm3_scale, &b.norm3_shift);
        let g = matmul(&h3, &b.mlp_w1)?.map(f64::tanh);
        x.add_assign(&matmul(&g, &b.mlp_w2)?)?;
    }
    let out = matmul(&x, &w.patch_unembed)?;
    unpatchify(&out, w.config.patch)
}

/// Mean-pooled tokens after the first block at `j = 0`, conditioned on the
/// mean of all class embeddings.
pub fn encoder_features(w: &DenoiserWeights, img: &Tensor) -> Result<Vec<f64>> {
    let all: Vec<usize> = (0..w.config.classes).collect();
    let cond = w.mean_condition(&all)?;
    let (_, mut x) = embed(w, img, 0)?;
    if let Some(b) = w.blocks.first() {
        let (h1, _, _) = layer_norm(&x, &b.norm1_scale, &b.norm1_shift);
        let a = attend_with_probs(
            &matmul(&h1, &b.self_attn.w_q)?,
            &matmul(&h1, &b.self_attn.w_k)?,
            &matmul(&h1, &b.self_attn.w_v)?,
        )?
        .0;
        x.add_assign(&a)?;
        let (h2, _, _) = layer_norm(&x, &b.norm2_scale, &b.norm2_shift);
        let a = attend_with_probs(
            &matmul(&h2, &b.cross_attn.w_q)?,
            &matmul(&cond.tokens, &b.cross_attn.w_k)?,
            &matmul(&cond.tokens, &b.cross_attn.w_v)?,
        )?
        .0;
        x.add_assign(&a)?;
        let (h3, _, _) = layer_norm(&x, &b.norm3_scale, &b.norm3_shift);
        let g = matmul(&h3, &b.mlp_w1)?.map(f64::tanh);
        x.add_assign(&matmul(&g, &b.mlp_w2)?)?;
    }
    let n = x.rows() as f64;
    Ok((0..x.cols())
        .map(|c| (0..x.rows()).map(|r| x.row(r)[c]).sum::<f64>() / n)
        .collect())
}
