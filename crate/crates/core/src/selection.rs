//! Interpolation coefficient schedules and Beta-prior search.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{AidError, Result};
use crate::numerics::SeededRng;

/// Coefficients t_1..t_m: nondecreasing from exactly 0 to exactly 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CoefficientSchedule {
    values: Vec<f64>,
}

impl CoefficientSchedule {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(AidError::Config(format!(
                "schedule needs at least 2 coefficients, got {}",
                values.len()
            )));
        }
        if values[0] != 0.0 || values[values.len() - 1] != 1.0 {
            return Err(AidError::Config("schedule must start at 0 and end at 1".into()));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // also rejects NaN
        if values.windows(2).any(|w| !(w[1] >= w[0])) {
            return Err(AidError::Config("schedule must be sorted ascending".into()));
        }
        Ok(Self { values })
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.values.windows(2).all(|w| w[1] > w[0])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl TryFrom<Vec<f64>> for CoefficientSchedule {
    type Error = AidError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<CoefficientSchedule> for Vec<f64> {
    fn from(s: CoefficientSchedule) -> Self {
        s.values
    }
}

fn check_len(m: usize) -> Result<()> {
    if m < 2 {
        return Err(AidError::Config(format!("sequence length must be at least 2, got {m}")));
    }
    Ok(())
}

/// `{0, 1/(m−1), …, 1}`.
pub fn uniform_schedule(m: usize) -> Result<CoefficientSchedule> {
    check_len(m)?;
    let n = (m - 1) as f64;
    CoefficientSchedule::new((0..m).map(|i| i as f64 / n).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaPrior {
    alpha: f64,
    beta: f64,
}

impl BetaPrior {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite() && beta > 0.0 && beta.is_finite()) {
            return Err(AidError::Domain(format!(
                "Beta parameters must be positive and finite, got ({alpha}, {beta})"
            )));
        }
        Ok(Self { alpha, beta })
    }

    pub fn uniform() -> Self {
        Self { alpha: 1.0, beta: 1.0 }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

/// Lanczos approximation (g = 7, 9 terms), accurate to ~1e-15 relative for x > 0.
fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    #[allow(clippy::excessive_precision)]
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function, modified Lentz.
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

fn check_unit(x: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&x) {
        return Err(AidError::Domain(format!("{what} must lie in [0, 1], got {x}")));
    }
    Ok(())
}

/// Regularized incomplete beta function I_x(α, β).
pub fn beta_cdf(x: f64, prior: &BetaPrior) -> Result<f64> {
    check_unit(x, "x")?;
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    let (a, b) = (prior.alpha, prior.beta);
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    let v = if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    };
    Ok(v.clamp(0.0, 1.0))
}

/// Quantile function by bisection; runs until the bracket stops shrinking.
pub fn beta_inverse_cdf(p: f64, prior: &BetaPrior) -> Result<f64> {
    check_unit(p, "p")?;
    if p == 0.0 {
        return Ok(0.0);
    }
    if p == 1.0 {
        return Ok(1.0);
    }
    if prior.alpha == 1.0 && prior.beta == 1.0 {
        return Ok(p);
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..2_000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if beta_cdf(mid, prior)? < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Of the two bracket ends, keep the one whose CDF is closer to p.
    let (flo, fhi) = (beta_cdf(lo, prior)?, beta_cdf(hi, prior)?);
    Ok(if (flo - p).abs() < (fhi - p).abs() { lo } else { hi })
}

/// `{0, F⁻¹(1/(m−1)), …, F⁻¹((m−2)/(m−1)), 1}`.
pub fn beta_schedule(m: usize, prior: &BetaPrior) -> Result<CoefficientSchedule> {
    check_len(m)?;
    let n = (m - 1) as f64;
    let mut values = Vec::with_capacity(m);
    values.push(0.0);
    for i in 1..m - 1 {
        values.push(beta_inverse_cdf(i as f64 / n, prior)?);
    }
    values.push(1.0);
    let s = CoefficientSchedule::new(values)?;
    if !s.is_strictly_increasing() {
        return Err(AidError::Degenerate(format!(
            "Beta({}, {}) quantiles collapse at m={m}",
            prior.alpha, prior.beta
        )));
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoObjective {
    #[default]
    Smoothness,
    Consistency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoConfig {
    pub search_range: [f64; 2],
    pub init_points: Vec<(f64, f64)>,
    pub iterations: usize,
    pub objective: BoObjective,
    pub seed: u64,
}

pub const BO_CANDIDATES: usize = 512;
pub const BO_NOISE: f64 = 1e-6;

impl BoConfig {
    /// Defaults with the {0.8T, T, 1.2T}² initial grid.
    pub fn for_steps(inference_steps: usize) -> Self {
        let t = inference_steps as f64;
        let axis = [0.8 * t, t, 1.2 * t];
        let init_points = axis
            .iter()
            .flat_map(|&a| axis.iter().map(move |&b| (a, b)))
            .collect();
        Self {
            search_range: [1.0, 30.0],
            init_points,
            iterations: 15,
            objective: BoObjective::Smoothness,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.search_range;
        if !(lo >= 1e-6 && hi > lo && hi.is_finite()) {
            return Err(AidError::Config(format!("invalid search range [{lo}, {hi}]")));
        }
        if self.init_points.is_empty() {
            return Err(AidError::Config("at least one initial point is required".into()));
        }
        for &(a, b) in &self.init_points {
            if !(lo..=hi).contains(&a) || !(lo..=hi).contains(&b) {
                return Err(AidError::Config(format!(
                    "initial point ({a}, {b}) lies outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

impl Default for BoConfig {
    fn default() -> Self {
        Self::for_steps(crate::scheduler::DEFAULT_INFERENCE_STEPS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoEvaluation {
    pub iteration: usize,
    pub alpha: f64,
    pub beta: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoResult {
    pub alpha: f64,
    pub beta: f64,
    pub best_value: f64,
    pub trace: Vec<BoEvaluation>,
}

impl BoResult {
    pub fn prior(&self) -> Result<BetaPrior> {
        BetaPrior::new(self.alpha, self.beta)
    }

    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,alpha,beta,objective\n");
        for e in &self.trace {
            let _ = writeln!(out, "{},{},{},{}", e.iteration, e.alpha, e.beta, e.objective);
        }
        out
    }
}

struct GaussianProcess {
    xs: Vec<[f64; 2]>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    weights: DVector<f64>,
    inv_two_l2: f64,
}

impl GaussianProcess {
    fn kernel(&self, a: &[f64; 2], b: &[f64; 2]) -> f64 {
        let d2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
        (-d2 * self.inv_two_l2).exp()
    }

    /// Unit signal variance, fixed length-scale, on already-standardized targets.
    fn fit(xs: &[[f64; 2]], ys: &[f64], length_scale: f64) -> Result<Self> {
        let n = xs.len();
        let inv_two_l2 = 1.0 / (2.0 * length_scale * length_scale);
        let mut gp_k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let d2 = (xs[i][0] - xs[j][0]).powi(2) + (xs[i][1] - xs[j][1]).powi(2);
                gp_k[(i, j)] = (-d2 * inv_two_l2).exp();
            }
        }
        let mut jitter = BO_NOISE;
        let chol = loop {
            let mut k = gp_k.clone();
            for i in 0..n {
                k[(i, i)] += jitter;
            }
            if let Some(c) = k.cholesky() {
                break c;
            }
            jitter *= 10.0;
            if jitter > 1.0 {
                return Err(AidError::Degenerate("surrogate kernel matrix is not positive definite".into()));
            }
        };
        let weights = chol.solve(&DVector::from_column_slice(ys));
        Ok(Self {
            xs: xs.to_vec(),
            chol,
            weights,
            inv_two_l2,
        })
    }

    fn predict(&self, x: &[f64; 2]) -> (f64, f64) {
        let ks = DVector::from_iterator(self.xs.len(), self.xs.iter().map(|xi| self.kernel(xi, x)));
        let mean = ks.dot(&self.weights);
        let v = self.chol.solve(&ks);
        let var = (1.0 - ks.dot(&v)).max(0.0);
        (mean, var.sqrt())
    }
}

fn expected_improvement(mean: f64, sd: f64, best: f64) -> f64 {
    if sd <= 0.0 {
        return (mean - best).max(0.0);
    }
    let z = (mean - best) / sd;
    let cdf = 0.5 * libm::erfc(-z / std::f64::consts::SQRT_2);
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (mean - best) * cdf + sd * pdf
}

/// Maximizes `objective` over the square search range.
///
/// Initial points are evaluated in order, then each round fits the surrogate to
/// all observations and evaluates the expected-improvement maximizer among fresh
/// random candidates. Ties keep the earliest observation.
pub fn bayes_opt<F>(mut objective: F, cfg: &BoConfig) -> Result<BoResult>
where
    F: FnMut(f64, f64) -> Result<f64>,
{
    cfg.validate()?;
    let [lo, hi] = cfg.search_range;
    let mut rng = SeededRng::new(cfg.seed);
    let mut xs: Vec<[f64; 2]> = Vec::new();
    let mut trace = Vec::with_capacity(cfg.init_points.len() + cfg.iterations);

    let mut evaluate = |alpha: f64, beta: f64, trace: &mut Vec<BoEvaluation>| -> Result<()> {
        let value = objective(alpha, beta)?;
        if !value.is_finite() {
            return Err(AidError::Objective { alpha, beta, value });
        }
        trace.push(BoEvaluation {
            iteration: trace.len(),
            alpha,
            beta,
            objective: value,
        });
        Ok(())
    };

    for &(a, b) in &cfg.init_points {
        evaluate(a, b, &mut trace)?;
        xs.push([a, b]);
    }
    for _ in 0..cfg.iterations {
        let ys: Vec<f64> = trace.iter().map(|e| e.objective).collect();
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let sd = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        let standardized: Vec<f64> = ys.iter().map(|y| (y - mean) / sd).collect();
        let best = standardized.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let gp = GaussianProcess::fit(&xs, &standardized, 0.2 * (hi - lo))?;

        let mut pick = [lo, lo];
        let mut pick_ei = f64::NEG_INFINITY;
        for _ in 0..BO_CANDIDATES {
            let c = [rng.uniform_range(lo, hi), rng.uniform_range(lo, hi)];
            let (m, s) = gp.predict(&c);
            let ei = expected_improvement(m, s, best);
            if ei > pick_ei {
                pick_ei = ei;
                pick = c;
            }
        }
        evaluate(pick[0], pick[1], &mut trace)?;
        xs.push(pick);
    }

    let best = trace
        .iter()
        .fold(None::<&BoEvaluation>, |acc, e| match acc {
            Some(b) if b.objective >= e.objective => Some(b),
            _ => Some(e),
        })
        .expect("at least one evaluation");
    Ok(BoResult {
        alpha: best.alpha,
        beta: best.beta,
        best_value: best.objective,
        trace,
    })
}
