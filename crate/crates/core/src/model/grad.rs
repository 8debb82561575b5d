//! Noise-prediction MSE and its exact reverse-mode gradient, written out by
//! hand for every layer.

use crate::attention::attend_with_probs;
use crate::error::{AidError, Result};
use crate::numerics::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::scheduler::{add_noise, NoiseSchedule};

use super::{check_condition, embed, layer_norm, patchify, unpatchify, DenoiserWeights};

/// Clean images, their class labels, the noise to add and the timestep of each sample.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub x0: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub eps: Vec<Tensor>,
    pub steps: Vec<usize>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.x0.len();
        if n == 0 || self.labels.len() != n || self.eps.len() != n || self.steps.len() != n {
            return Err(AidError::Dimension("inconsistent or empty batch".into()));
        }
        Ok(())
    }
}

struct NormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

struct AttnCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Tensor,
}

struct BlockCache {
    h1: Tensor,
    n1: NormCache,
    self_attn: AttnCache,
    h2: Tensor,
    n2: NormCache,
    cross_attn: AttnCache,
    h3: Tensor,
    n3: NormCache,
    g: Tensor,
}

struct SampleCache {
    tokens: Tensor,
    cond: Tensor,
    blocks: Vec<BlockCache>,
    x_final: Tensor,
}

fn forward_cached(
    w: &DenoiserWeights,
    z: &Tensor,
    label: usize,
    j: usize,
) -> Result<(Tensor, SampleCache)> {
    let cond = w.class_condition(label)?;
    check_condition(w, &cond)?;
    let (tokens, mut x) = embed(w, z, j)?;
    let mut blocks = Vec::with_capacity(w.blocks.len());
    for b in &w.blocks {
        let (h1, xhat1, inv1) = layer_norm(&x, &b.norm1_scale, &b.norm1_shift);
        let q = matmul(&h1, &b.self_attn.w_q)?;
        let k = matmul(&h1, &b.self_attn.w_k)?;
        let v = matmul(&h1, &b.self_attn.w_v)?;
        let (a, probs) = attend_with_probs(&q, &k, &v)?;
        x.add_assign(&a)?;
        let self_attn = AttnCache { q, k, v, probs };

        let (h2, xhat2, inv2) = layer_norm(&x, &b.norm2_scale, &b.norm2_shift);
        let qc = matmul(&h2, &b.cross_attn.w_q)?;
        let kc = matmul(&cond.tokens, &b.cross_attn.w_k)?;
        let vc = matmul(&cond.tokens, &b.cross_attn.w_v)?;
        let (a, probs) = attend_with_probs(&qc, &kc, &vc)?;
        x.add_assign(&a)?;
        let cross_attn = AttnCache {
            q: qc,
            k: kc,
            v: vc,
            probs,
        };

        let (h3, xhat3, inv3) = layer_norm(&x, &b.norm3_scale, &b.norm3_shift);
        let g = matmul(&h3, &b.mlp_w1)?.map(f64::tanh);
        x.add_assign(&matmul(&g, &b.mlp_w2)?)?;

        blocks.push(BlockCache {
            h1,
            n1: NormCache {
                xhat: xhat1,
                inv_std: inv1,
            },
            self_attn,
            h2,
            n2: NormCache {
                xhat: xhat2,
                inv_std: inv2,
            },
            cross_attn,
            h3,
            n3: NormCache {
                xhat: xhat3,
                inv_std: inv3,
            },
            g,
        });
    }
    let out = unpatchify(&matmul(&x, &w.patch_unembed)?, w.config.patch)?;
    Ok((
        out,
        SampleCache {
            tokens,
            cond: cond.tokens,
            blocks,
            x_final: x,
        },
    ))
}

/// Backward through `y = xhat·scale + shift`, `xhat = (x − mean)·inv_std`.
/// Accumulates the scale/shift gradients and returns `dL/dx`.
fn layer_norm_backward(
    dy: &Tensor,
    cache: &NormCache,
    scale: &Tensor,
    d_scale: &mut Tensor,
    d_shift: &mut Tensor,
) -> Tensor {
    let (n, d) = (dy.rows(), dy.cols());
    let mut dx = vec![0.0; n * d];
    let g = scale.data();
    for r in 0..n {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for c in 0..d {
            let dxh = dyr[c] * g[c];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[c];
            d_scale.data_mut()[c] += dyr[c] * xh[c];
            d_shift.data_mut()[c] += dyr[c];
        }
        mean_dxh /= d as f64;
        mean_dxh_xh /= d as f64;
        let is = cache.inv_std[r];
        for c in 0..d {
            let dxh = dyr[c] * g[c];
            dx[r * d + c] = is * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
        }
    }
    Tensor::new(vec![n, d], dx).expect("norm grad shape")
}

/// Returns `(dq, dk, dv)` for `out = softmax(q·kᵀ/√d)·v`.
fn attention_backward(d_out: &Tensor, c: &AttnCache) -> Result<(Tensor, Tensor, Tensor)> {
    let scale = 1.0 / (c.q.cols() as f64).sqrt();
    let dv = matmul_tn(&c.probs, d_out)?;
    let dp = matmul_nt(d_out, &c.v)?;
    let (n, m) = (dp.rows(), dp.cols());
    let mut ds = vec![0.0; n * m];
    for r in 0..n {
        let p = c.probs.row(r);
        let dpr = dp.row(r);
        let dot: f64 = p.iter().zip(dpr).map(|(a, b)| a * b).sum();
        for col in 0..m {
            ds[r * m + col] = p[col] * (dpr[col] - dot) * scale;
        }
    }
    let ds = Tensor::new(vec![n, m], ds)?;
    let dq = matmul(&ds, &c.k)?;
    let dk = matmul_tn(&ds, &c.q)?;
    Ok((dq, dk, dv))
}

/// Mean squared error between predicted and true noise over every pixel of
/// every sample, with the gradient for each parameter.
pub fn loss_and_grads(
    batch: &TrainBatch,
    w: &DenoiserWeights,
    sched: &NoiseSchedule,
) -> Result<(f64, DenoiserWeights)> {
    batch.validate()?;
    let mut grads = DenoiserWeights::zeros(w.config);
    let pixels = (w.config.image_size * w.config.image_size) as f64;
    let norm = 1.0 / (batch.len() as f64 * pixels);
    let mut loss = 0.0;
    let d = w.config.width;

    for s in 0..batch.len() {
        let j = batch.steps[s];
        let zj = add_noise(&batch.x0[s], &batch.eps[s], j, sched)?;
        let (pred, cache) = forward_cached(w, &zj, batch.labels[s], j)?;
        let diff = pred.sub(&batch.eps[s])?;
        loss += diff.data().iter().map(|v| v * v).sum::<f64>();

        let d_pred = diff.scale(2.0 * norm);
        let d_out_tokens = patchify(&d_pred, w.config.patch)?;
        grads
            .patch_unembed
            .add_assign(&matmul_tn(&cache.x_final, &d_out_tokens)?)?;
        let mut dx = matmul_nt(&d_out_tokens, &w.patch_unembed)?;
        let mut d_cond = Tensor::zeros(&[w.config.cond_tokens, d]);

        for (bi, b) in w.blocks.iter().enumerate().rev() {
            let c = &cache.blocks[bi];
            let gb = &mut grads.blocks[bi];

            // x += tanh(h3·W1)·W2
            gb.mlp_w2.add_assign(&matmul_tn(&c.g, &dx)?)?;
            let dg = matmul_nt(&dx, &b.mlp_w2)?;
            let du = Tensor::new(
                dg.shape().to_vec(),
                dg.data()
                    .iter()
                    .zip(c.g.data())
                    .map(|(dg, g)| dg * (1.0 - g * g))
                    .collect(),
            )?;
            gb.mlp_w1.add_assign(&matmul_tn(&c.h3, &du)?)?;
            let dh3 = matmul_nt(&du, &b.mlp_w1)?;
            dx.add_assign(&layer_norm_backward(
                &dh3,
                &c.n3,
                &b.norm3_scale,
                &mut gb.norm3_scale,
                &mut gb.norm3_shift,
            ))?;

            // x += attn(h2·Wq, cond·Wk, cond·Wv)
            let (dq, dk, dv) = attention_backward(&dx, &c.cross_attn)?;
            gb.cross_attn.w_q.add_assign(&matmul_tn(&c.h2, &dq)?)?;
            gb.cross_attn.w_k.add_assign(&matmul_tn(&cache.cond, &dk)?)?;
            gb.cross_attn.w_v.add_assign(&matmul_tn(&cache.cond, &dv)?)?;
            d_cond.add_assign(&matmul_nt(&dk, &b.cross_attn.w_k)?)?;
            d_cond.add_assign(&matmul_nt(&dv, &b.cross_attn.w_v)?)?;
            let dh2 = matmul_nt(&dq, &b.cross_attn.w_q)?;
            dx.add_assign(&layer_norm_backward(
                &dh2,
                &c.n2,
                &b.norm2_scale,
                &mut gb.norm2_scale,
                &mut gb.norm2_shift,
            ))?;

            // x += attn(h1·Wq, h1·Wk, h1·Wv)
            let (dq, dk, dv) = attention_backward(&dx, &c.self_attn)?;
            gb.self_attn.w_q.add_assign(&matmul_tn(&c.h1, &dq)?)?;
            gb.self_attn.w_k.add_assign(&matmul_tn(&c.h1, &dk)?)?;
            gb.self_attn.w_v.add_assign(&matmul_tn(&c.h1, &dv)?)?;
            let mut dh1 = matmul_nt(&dq, &b.self_attn.w_q)?;
            dh1.add_assign(&matmul_nt(&dk, &b.self_attn.w_k)?)?;
            dh1.add_assign(&matmul_nt(&dv, &b.self_attn.w_v)?)?;
            dx.add_assign(&layer_norm_backward(
                &dh1,
                &c.n1,
                &b.norm1_scale,
                &mut gb.norm1_scale,
                &mut gb.norm1_shift,
            ))?;
        }

        // x = tokens·E + pos + time[j]
        grads
            .patch_embed
            .add_assign(&matmul_tn(&cache.tokens, &dx)?)?;
        grads.pos_embed.add_assign(&dx)?;
        let time_row = grads.time_embed.row_mut(j);
        for r in 0..dx.rows() {
            for (t, v) in time_row.iter_mut().zip(dx.row(r)) {
                *t += v;
            }
        }
        let class_row = grads.class_embed.row_mut(batch.labels[s]);
        for (g, v) in class_row.iter_mut().zip(d_cond.data()) {
            *g += v;
        }
    }
    Ok((loss * norm, grads))
}
