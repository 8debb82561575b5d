//! Scaled dot-product attention and the interpolated variants that let an
//! interior branch attend to the keys and values of two source branches.
//!
//! All functions are single-head and operate on row-major matrices:
//! `q: n_q×d_k`, `k: n_k×d_k`, `v: n_k×d_v`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{AidError, Result};
use crate::numerics::{concat_rows, lerp, matmul, matmul_nt, softmax_rows, Tensor};

/// Projection weights of one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

impl AttentionParams {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor) -> Result<Self> {
        if w_q.shape().len() != 2 || w_k.shape().len() != 2 || w_v.shape().len() != 2 {
            return Err(AidError::Dimension("projection weights must be matrices".into()));
        }
        if w_q.cols() != w_k.cols() {
            return Err(AidError::Dimension(format!(
                "d_q ({}) must equal d_k ({})",
                w_q.cols(),
                w_k.cols()
            )));
        }
        if w_q.rows() != w_k.rows() || w_k.rows() != w_v.rows() {
            return Err(AidError::Dimension("projection input widths differ".into()));
        }
        Ok(Self { w_q, w_k, w_v })
    }
}

/// Query, key and value matrices of one attention call.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInputs {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

impl AttentionInputs {
    pub fn new(q: Tensor, k: Tensor, v: Tensor) -> Result<Self> {
        check_qkv(&q, &k, &v)?;
        Ok(Self { q, k, v })
    }

    pub fn attend(&self) -> Result<Tensor> {
        attend(&self.q, &self.k, &self.v)
    }
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<()> {
    for (name, t) in [("q", q), ("k", k), ("v", v)] {
        if t.shape().len() != 2 {
            return Err(AidError::Dimension(format!("{name} must be a matrix")));
        }
    }
    if q.cols() == 0 {
        return Err(AidError::Dimension("d_k must be positive".into()));
    }
    if q.cols() != k.cols() {
        return Err(AidError::Dimension(format!(
            "query width {} differs from key width {}",
            q.cols(),
            k.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(AidError::Dimension(format!(
            "{} keys but {} values",
            k.rows(),
            v.rows()
        )));
    }
    if k.rows() == 0 {
        return Err(AidError::Dimension("attention over zero keys".into()));
    }
    Ok(())
}

/// Returns the output together with the attention map.
pub(crate) fn attend_with_probs(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    check_qkv(q, k, v)?;
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let logits = matmul_nt(q, k)?.scale(scale);
    let probs = softmax_rows(&logits)?;
    let out = matmul(&probs, v)?;
    Ok((out, probs))
}

/// `softmax(q·kᵀ/√d_k)·v`
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    attend_with_probs(q, k, v).map(|(out, _)| out)
}

fn check_pair(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AidError::Dimension(format!(
            "source {what} shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(AidError::Domain(format!("coefficient {t} outside [0, 1]")));
    }
    Ok(())
}

/// Inner interpolation: one attention map over the mixed keys, applied to the mixed values.
pub fn inner_interp(
    q_i: &Tensor,
    k1: &Tensor,
    km: &Tensor,
    v1: &Tensor,
    vm: &Tensor,
    t: f64,
) -> Result<Tensor> {
    check_t(t)?;
    check_pair(k1, km, "key")?;
    check_pair(v1, vm, "value")?;
    attend(q_i, &lerp(k1, km, t)?, &lerp(v1, vm, t)?)
}

/// Outer interpolation: attend to each source separately, then mix the outputs.
pub fn outer_interp(
    q_i: &Tensor,
    k1: &Tensor,
    km: &Tensor,
    v1: &Tensor,
    vm: &Tensor,
    t: f64,
) -> Result<Tensor> {
    check_t(t)?;
    check_pair(k1, km, "key")?;
    check_pair(v1, vm, "value")?;
    let a = attend(q_i, k1, v1)?;
    let b = attend(q_i, km, vm)?;
    lerp(&a, &b, t)
}

/// Inner interpolation with the branch's own keys/values appended after the mixed block.
#[allow(clippy::too_many_arguments)]
pub fn fused_inner(
    q_i: &Tensor,
    k1: &Tensor,
    km: &Tensor,
    v1: &Tensor,
    vm: &Tensor,
    k_self: &Tensor,
    v_self: &Tensor,
    t: f64,
) -> Result<Tensor> {
    check_t(t)?;
    check_pair(k1, km, "key")?;
    check_pair(v1, vm, "value")?;
    let k = concat_rows(&lerp(k1, km, t)?, k_self)?;
    let v = concat_rows(&lerp(v1, vm, t)?, v_self)?;
    attend(q_i, &k, &v)
}

/// Outer interpolation where each source's keys/values are concatenated with the branch's own.
#[allow(clippy::too_many_arguments)]
pub fn fused_outer(
    q_i: &Tensor,
    k1: &Tensor,
    km: &Tensor,
    v1: &Tensor,
    vm: &Tensor,
    k_self: &Tensor,
    v_self: &Tensor,
    t: f64,
) -> Result<Tensor> {
    check_t(t)?;
    check_pair(k1, km, "key")?;
    check_pair(v1, vm, "value")?;
    let a = attend(q_i, &concat_rows(k1, k_self)?, &concat_rows(v1, v_self)?)?;
    let b = attend(q_i, &concat_rows(km, k_self)?, &concat_rows(vm, v_self)?)?;
    lerp(&a, &b, t)
}

/// Cross-attention that reads the guidance condition's keys/values.
pub fn guided_cross(q_i: &Tensor, k_g: &Tensor, v_g: &Tensor) -> Result<Tensor> {
    attend(q_i, k_g, v_g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessorMode {
    Plain,
    Inner,
    Outer,
    FusedInner,
    FusedOuter,
    Guided,
}

/// Which attention sites a selector routes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSite {
    CrossAttention,
    SelfAttention,
    Both,
}

impl AttentionSite {
    fn covers(self, site: AttentionSite) -> bool {
        self == AttentionSite::Both || self == site
    }
}

/// Chooses the attention processor for a set of sites over a range of sampler steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessorSelector {
    mode: ProcessorMode,
    t: f64,
    applies_to: AttentionSite,
    active_steps: Range<usize>,
}

impl ProcessorSelector {
    pub fn new(
        mode: ProcessorMode,
        t: f64,
        applies_to: AttentionSite,
        active_steps: Range<usize>,
    ) -> Result<Self> {
        check_t(t)?;
        if active_steps.start > active_steps.end {
            return Err(AidError::Config(format!(
                "inverted step range {active_steps:?}"
            )));
        }
        if mode == ProcessorMode::Guided && applies_to != AttentionSite::CrossAttention {
            return Err(AidError::Config(
                "guided processor only applies to cross-attention".into(),
            ));
        }
        Ok(Self {
            mode,
            t,
            applies_to,
            active_steps,
        })
    }

    /// Checks that the active range fits a sampler with `steps` iterations.
    pub fn validate_for(&self, steps: usize) -> Result<()> {
        if self.active_steps.end > steps {
            return Err(AidError::Config(format!(
                "active steps {:?} exceed sampler length {steps}",
                self.active_steps
            )));
        }
        Ok(())
    }

    pub fn mode(&self) -> ProcessorMode {
        self.mode
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn applies_to(&self) -> AttentionSite {
        self.applies_to
    }

    pub fn active_steps(&self) -> Range<usize> {
        self.active_steps.clone()
    }

    fn processor(&self) -> Processor {
        match self.mode {
            ProcessorMode::Plain => Processor::Plain,
            ProcessorMode::Inner => Processor::Inner(self.t),
            ProcessorMode::Outer => Processor::Outer(self.t),
            ProcessorMode::FusedInner => Processor::FusedInner(self.t),
            ProcessorMode::FusedOuter => Processor::FusedOuter(self.t),
            ProcessorMode::Guided => Processor::Guided,
        }
    }
}

/// Attention processor resolved for one site at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Processor {
    Plain,
    Inner(f64),
    Outer(f64),
    FusedInner(f64),
    FusedOuter(f64),
    Guided,
}

impl Processor {
    pub fn needs_peers(self) -> bool {
        !matches!(self, Processor::Plain | Processor::Guided)
    }
}

/// Processors for the self- and cross-attention sites of every block at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Route {
    pub self_attn: Processor,
    pub cross_attn: Processor,
}

impl Route {
    pub const PLAIN: Route = Route {
        self_attn: Processor::Plain,
        cross_attn: Processor::Plain,
    };

    /// First selector covering a site and active at `step` wins; otherwise plain.
    pub fn resolve(selectors: &[ProcessorSelector], step: usize) -> Route {
        let pick = |site| {
            selectors
                .iter()
                .find(|s| s.applies_to.covers(site) && s.active_steps.contains(&step))
                .map_or(Processor::Plain, ProcessorSelector::processor)
        };
        Route {
            self_attn: pick(AttentionSite::SelfAttention),
            cross_attn: pick(AttentionSite::CrossAttention),
        }
    }

    pub fn needs_peers(&self) -> bool {
        self.self_attn.needs_peers() || self.cross_attn.needs_peers()
    }
}

/// Runs `proc` for a query block given both sources' and the branch's own keys/values.
pub(crate) struct SiteInputs<'a> {
    pub q: &'a Tensor,
    pub k_own: &'a Tensor,
    pub v_own: &'a Tensor,
    pub peers: Option<(&'a Tensor, &'a Tensor, &'a Tensor, &'a Tensor)>,
}

pub(crate) fn run_processor(proc: Processor, x: &SiteInputs<'_>) -> Result<Tensor> {
    let peers = || {
        x.peers.ok_or_else(|| {
            AidError::MissingPeers(format!("processor {proc:?} needs source keys/values"))
        })
    };
    match proc {
        Processor::Plain => attend(x.q, x.k_own, x.v_own),
        Processor::Guided => guided_cross(x.q, x.k_own, x.v_own),
        Processor::Inner(t) => {
            let (k1, km, v1, vm) = peers()?;
            inner_interp(x.q, k1, km, v1, vm, t)
        }
        Processor::Outer(t) => {
            let (k1, km, v1, vm) = peers()?;
            outer_interp(x.q, k1, km, v1, vm, t)
        }
        Processor::FusedInner(t) => {
            let (k1, km, v1, vm) = peers()?;
            fused_inner(x.q, k1, km, v1, vm, x.k_own, x.v_own, t)
        }
        Processor::FusedOuter(t) => {
            let (k1, km, v1, vm) = peers()?;
            fused_outer(x.q, k1, km, v1, vm, x.k_own, x.v_own, t)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{randn, SeededRng};
    use proptest::prelude::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    struct Case {
        q: Tensor,
        k1: Tensor,
        km: Tensor,
        v1: Tensor,
        vm: Tensor,
        ks: Tensor,
        vs: Tensor,
    }

    fn case(seed: u64, nq: usize, nk: usize, ns: usize, dk: usize, dv: usize) -> Case {
        let mut rng = SeededRng::new(seed);
        Case {
            q: randn(&mut rng, &[nq, dk]),
            k1: randn(&mut rng, &[nk, dk]),
            km: randn(&mut rng, &[nk, dk]),
            v1: randn(&mut rng, &[nk, dv]),
            vm: randn(&mut rng, &[nk, dv]),
            ks: randn(&mut rng, &[ns, dk]),
            vs: randn(&mut rng, &[ns, dv]),
        }
    }

    #[test]
    fn attend_examples() {
        let v = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let k = mat(&[&[0.3, -1.0], &[2.0, 0.5]]);
        let out = attend(&Tensor::zeros(&[1, 2]), &k, &v).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);

        let single_v = mat(&[&[3.0, -2.0, 7.0]]);
        let out = attend(&mat(&[&[4.0, -9.0]]), &mat(&[&[1.0, 1.0]]), &single_v).unwrap();
        assert_eq!(out, single_v);

        let q = mat(&[&[10.0, 0.0]]);
        let k = mat(&[&[10.0, 0.0], &[0.0, 10.0]]);
        let out = attend(&q, &k, &v).unwrap();
        let w = 1.0 / (1.0 + (-100.0 / 2f64.sqrt()).exp());
        assert!((out.data()[0] - w).abs() < 1e-10);
        assert!((out.data()[0] - 1.0).abs() < 1e-10);
        assert!(out.data()[1].abs() < 1e-10);
    }

    #[test]
    fn attend_rejects_bad_shapes() {
        let q = Tensor::zeros(&[2, 3]);
        assert!(attend(&q, &Tensor::zeros(&[4, 2]), &Tensor::zeros(&[4, 5])).is_err());
        assert!(attend(&q, &Tensor::zeros(&[4, 3]), &Tensor::zeros(&[3, 5])).is_err());
        assert!(attend(&q, &Tensor::zeros(&[0, 3]), &Tensor::zeros(&[0, 5])).is_err());
    }

    #[test]
    fn inner_examples() {
        let c = case(11, 3, 4, 0, 4, 4);
        let plain = attend(&c.q, &c.k1, &c.v1).unwrap();
        assert_eq!(inner_interp(&c.q, &c.k1, &c.km, &c.v1, &c.vm, 0.0).unwrap(), plain);
        for t in [0.2, 0.5, 0.9] {
            let same = inner_interp(&c.q, &c.k1, &c.k1, &c.v1, &c.v1, t).unwrap();
            assert!(same.max_abs_diff(&plain).unwrap() < 1e-12);
        }
    }

    #[test]
    fn inner_matches_shared_map_expansion() {
        let c = case(12, 3, 4, 0, 4, 4);
        let t = 0.37;
        let k_mix = lerp(&c.k1, &c.km, t).unwrap();
        let logits = matmul_nt(&c.q, &k_mix).unwrap().scale(1.0 / 2.0);
        let map = softmax_rows(&logits).unwrap();
        let expanded = matmul(&map, &c.v1)
            .unwrap()
            .scale(1.0 - t)
            .add(&matmul(&map, &c.vm).unwrap().scale(t))
            .unwrap();
        let got = inner_interp(&c.q, &c.k1, &c.km, &c.v1, &c.vm, t).unwrap();
        assert!(got.max_abs_diff(&expanded).unwrap() < 1e-12);
    }

    #[test]
    fn outer_examples() {
        let c = case(13, 2, 3, 0, 2, 3);
        let a = attend(&c.q, &c.k1, &c.v1).unwrap();
        let b = attend(&c.q, &c.km, &c.vm).unwrap();
        let mid = outer_interp(&c.q, &c.k1, &c.km, &c.v1, &c.vm, 0.5).unwrap();
        let avg = a.add(&b).unwrap().scale(0.5);
        assert!(mid.max_abs_diff(&avg).unwrap() < 1e-15);
        assert_eq!(outer_interp(&c.q, &c.k1, &c.km, &c.v1, &c.vm, 1.0).unwrap(), b);
        for t in [0.1, 0.6] {
            let o = outer_interp(&c.q, &c.k1, &c.k1, &c.v1, &c.v1, t).unwrap();
            let i = inner_interp(&c.q, &c.k1, &c.k1, &c.v1, &c.v1, t).unwrap();
            assert!(o.max_abs_diff(&i).unwrap() < 1e-12);
        }
    }

    #[test]
    fn fused_inner_examples() {
        let c = case(14, 3, 4, 0, 4, 2);
        for t in [0.0, 0.4, 1.0] {
            let f = fused_inner(&c.q, &c.k1, &c.km, &c.v1, &c.vm, &c.ks, &c.vs, t).unwrap();
            let i = inner_interp(&c.q, &c.k1, &c.km, &c.v1, &c.vm, t).unwrap();
            assert_eq!(f, i);
        }
        // Duplicated identical key/value rows leave the weighted average unchanged.
        let c = case(15, 3, 4, 0, 4, 2);
        let dup = fused_inner(&c.q, &c.k1, &c.k1, &c.v1, &c.v1, &c.k1, &c.v1, 0.3).unwrap();
        let plain = attend(&c.q, &c.k1, &c.v1).unwrap();
        assert!(dup.max_abs_diff(&plain).unwrap() < 1e-12);
    }

    #[test]
    fn fused_inner_rows_are_convex_combinations() {
        let c = case(16, 5, 4, 3, 3, 4);
        let t = 0.62;
        let out = fused_inner(&c.q, &c.k1, &c.km, &c.v1, &c.vm, &c.ks, &c.vs, t).unwrap();
        let v_all = concat_rows(&lerp(&c.v1, &c.vm, t).unwrap(), &c.vs).unwrap();
        assert_in_value_box(&out, &v_all);
    }

    #[test]
    fn fused_outer_examples() {
        let c = case(17, 3, 4, 2, 4, 3);
        let t0 = fused_outer(&c.q, &c.k1, &c.km, &c.v1, &c.vm, &c.ks, &c.vs, 0.0).unwrap();
        let expect = attend(
            &c.q,
            &concat_rows(&c.k1, &c.ks).unwrap(),
            &concat_rows(&c.v1, &c.vs).unwrap(),
        )
        .unwrap();
        assert_eq!(t0, expect);

        let c0 = case(18, 3, 4, 0, 4, 3);
        let f = fused_outer(&c0.q, &c0.k1, &c0.km, &c0.v1, &c0.vm, &c0.ks, &c0.vs, 0.7).unwrap();
        let o = outer_interp(&c0.q, &c0.k1, &c0.km, &c0.v1, &c0.vm, 0.7).unwrap();
        assert_eq!(f, o);

        for t in [0.25, 0.8] {
            let fo = fused_outer(&c.q, &c.k1, &c.k1, &c.v1, &c.v1, &c.ks, &c.vs, t).unwrap();
            let fi = fused_inner(&c.q, &c.k1, &c.k1, &c.v1, &c.v1, &c.ks, &c.vs, t).unwrap();
            assert!(fo.max_abs_diff(&fi).unwrap() < 1e-12);
        }
    }

    #[test]
    fn guided_examples() {
        let c = case(19, 3, 2, 0, 4, 4);
        assert_eq!(
            guided_cross(&c.q, &c.k1, &c.v1).unwrap(),
            attend(&c.q, &c.k1, &c.v1).unwrap()
        );
        let z = guided_cross(&Tensor::zeros(&[1, 4]), &c.k1, &c.v1).unwrap();
        for j in 0..4 {
            let mean = (c.v1.row(0)[j] + c.v1.row(1)[j]) / 2.0;
            assert!((z.data()[j] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn coefficient_outside_unit_interval_is_rejected() {
        let c = case(20, 1, 2, 0, 2, 2);
        assert!(inner_interp(&c.q, &c.k1, &c.km, &c.v1, &c.vm, 1.5).is_err());
        assert!(outer_interp(&c.q, &c.k1, &c.km, &c.v1, &c.vm, -0.1).is_err());
        assert!(ProcessorSelector::new(ProcessorMode::Inner, 2.0, AttentionSite::Both, 0..3).is_err());
    }

    #[test]
    fn route_resolution_honours_steps_and_sites() {
        let selectors = vec![
            ProcessorSelector::new(ProcessorMode::Guided, 0.5, AttentionSite::CrossAttention, 0..25).unwrap(),
            ProcessorSelector::new(ProcessorMode::FusedOuter, 0.5, AttentionSite::Both, 0..5).unwrap(),
        ];
        let r = Route::resolve(&selectors, 2);
        assert_eq!(r.cross_attn, Processor::Guided);
        assert_eq!(r.self_attn, Processor::FusedOuter(0.5));
        let r = Route::resolve(&selectors, 5);
        assert_eq!(r.self_attn, Processor::Plain);
        assert_eq!(r.cross_attn, Processor::Guided);
        assert_eq!(Route::resolve(&[], 0), Route::PLAIN);
        assert!(selectors[0].validate_for(25).is_ok());
        assert!(selectors[0].validate_for(20).is_err());
    }

    #[test]
    fn missing_peers_is_an_error() {
        let c = case(21, 2, 2, 0, 2, 2);
        let x = SiteInputs {
            q: &c.q,
            k_own: &c.k1,
            v_own: &c.v1,
            peers: None,
        };
        assert!(matches!(
            run_processor(Processor::Inner(0.5), &x),
            Err(AidError::MissingPeers(_))
        ));
        assert!(run_processor(Processor::Plain, &x).is_ok());
    }

    fn assert_in_value_box(out: &Tensor, v: &Tensor) {
        for r in 0..out.rows() {
            for j in 0..out.cols() {
                let lo = (0..v.rows()).map(|i| v.row(i)[j]).fold(f64::INFINITY, f64::min);
                let hi = (0..v.rows()).map(|i| v.row(i)[j]).fold(f64::NEG_INFINITY, f64::max);
                let x = out.row(r)[j];
                assert!(x >= lo - 1e-12 && x <= hi + 1e-12, "{x} outside [{lo}, {hi}]");
            }
        }
    }

    proptest! {
        #[test]
        fn attend_rows_stay_inside_value_range(seed in 0u64..10_000, nq in 1usize..5, nk in 1usize..6) {
            let c = case(seed, nq, nk, 0, 3, 4);
            let out = attend(&c.q, &c.k1, &c.v1).unwrap();
            assert_in_value_box(&out, &c.v1);
        }

        #[test]
        fn attend_ignores_constant_logit_shift(seed in 0u64..10_000, shift in -20.0f64..20.0) {
            // Widening d_k from 3 to 4 with a unit query column and a constant key column
            // adds `shift` to every logit of every row.
            let c = case(seed, 3, 4, 0, 3, 2);
            let base = attend(&c.q, &c.k1, &c.v1).unwrap();
            let widen = |t: &Tensor, scale: f64, extra: f64| {
                let rows: Vec<Vec<f64>> = (0..t.rows())
                    .map(|r| {
                        let mut row: Vec<f64> = t.row(r).iter().map(|v| v * scale).collect();
                        row.push(extra);
                        row
                    })
                    .collect();
                Tensor::from_rows(&rows).unwrap()
            };
            let q4 = widen(&c.q, (4.0f64 / 3.0).sqrt(), 1.0);
            let k4 = widen(&c.k1, 1.0, 2.0 * shift);
            let shifted = attend(&q4, &k4, &c.v1).unwrap();
            prop_assert!(shifted.max_abs_diff(&base).unwrap() < 1e-12);
        }
    }
}
