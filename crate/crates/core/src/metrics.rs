//! Sequence quality: consistency, smoothness (1 − Gini) and Fréchet fidelity.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{AidError, Result};
use crate::model::{encoder_features, DenoiserWeights};
use crate::numerics::Tensor;

/// Regularizer added to every covariance before taking matrix square roots.
pub const COVARIANCE_RIDGE: f64 = 1e-6;

pub trait PerceptualDistance {
    fn name(&self) -> &str;
    fn distance(&self, a: &Tensor, b: &Tensor) -> Result<f64>;
}

pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn features(&self, img: &Tensor) -> Result<Vec<f64>>;
}

/// Root-mean-square pixel difference.
#[derive(Debug, Clone, Copy, Default)]
pub struct PixelL2;

impl PerceptualDistance for PixelL2 {
    fn name(&self) -> &str {
        "pixel"
    }

    fn distance(&self, a: &Tensor, b: &Tensor) -> Result<f64> {
        let d = a.sub(b)?;
        Ok((d.dot(&d)? / d.len().max(1) as f64).sqrt())
    }
}

/// Mean-pooled first-block tokens of the trained denoiser.
#[derive(Debug, Clone, Copy)]
pub struct EncoderFeatures<'a> {
    pub weights: &'a DenoiserWeights,
}

impl FeatureExtractor for EncoderFeatures<'_> {
    fn name(&self) -> &str {
        "encoder"
    }

    fn dim(&self) -> usize {
        self.weights.config.width
    }

    fn features(&self, img: &Tensor) -> Result<Vec<f64>> {
        encoder_features(self.weights, img)
    }
}

/// Euclidean distance between [`EncoderFeatures`].
#[derive(Debug, Clone, Copy)]
pub struct EncoderDistance<'a> {
    pub features: EncoderFeatures<'a>,
}

impl<'a> EncoderDistance<'a> {
    pub fn new(weights: &'a DenoiserWeights) -> Self {
        Self {
            features: EncoderFeatures { weights },
        }
    }
}

impl PerceptualDistance for EncoderDistance<'_> {
    fn name(&self) -> &str {
        "encoder"
    }

    fn distance(&self, a: &Tensor, b: &Tensor) -> Result<f64> {
        let fa = self.features.features(a)?;
        let fb = self.features.features(b)?;
        Ok(fa.iter().zip(&fb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
    }
}

/// Block means over a 4×4 grid of the image (16 features).
#[derive(Debug, Clone, Copy, Default)]
pub struct DownsampleFeatures;

impl FeatureExtractor for DownsampleFeatures {
    fn name(&self) -> &str {
        "downsample"
    }

    fn dim(&self) -> usize {
        16
    }

    fn features(&self, img: &Tensor) -> Result<Vec<f64>> {
        let s = img.shape();
        if s.len() != 2 || s[0] != s[1] || !s[0].is_multiple_of(4) || s[0] == 0 {
            return Err(AidError::Dimension(format!(
                "downsampling needs a square image with side divisible by 4, got {s:?}"
            )));
        }
        let b = s[0] / 4;
        let mut out = vec![0.0; 16];
        for r in 0..s[0] {
            for (c, &v) in img.row(r).iter().enumerate() {
                out[(r / b) * 4 + c / b] += v;
            }
        }
        let n = (b * b) as f64;
        Ok(out.into_iter().map(|v| v / n).collect())
    }
}

fn adjacent_distances(images: &[Tensor], p: &dyn PerceptualDistance) -> Result<Vec<f64>> {
    if images.len() < 2 {
        return Err(AidError::InsufficientSamples(format!(
            "a sequence needs at least 2 images, got {}",
            images.len()
        )));
    }
    images
        .windows(2)
        .map(|w| {
            let d = p.distance(&w[0], &w[1])?;
            if !d.is_finite() || d < 0.0 {
                return Err(AidError::NonFinite(format!("perceptual distance {d}")));
            }
            Ok(d)
        })
        .collect()
}

/// Mean distance between adjacent images.
pub fn consistency(images: &[Tensor], p: &dyn PerceptualDistance) -> Result<f64> {
    let d = adjacent_distances(images, p)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Gini coefficient over ordered pairs; 0 for an all-zero set.
pub fn gini(x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(AidError::InsufficientSamples("gini of an empty set".into()));
    }
    if let Some(v) = x.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(AidError::Domain(format!("gini needs nonnegative finite values, got {v}")));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Ok(0.0);
    }
    let pair_sum: f64 = x.iter().map(|a| x.iter().map(|b| (a - b).abs()).sum::<f64>()).sum();
    Ok(pair_sum / (2.0 * n * n * mean))
}

/// `1 − gini(adjacent distances)`.
pub fn smoothness(images: &[Tensor], p: &dyn PerceptualDistance) -> Result<f64> {
    Ok(1.0 - gini(&adjacent_distances(images, p)?)?)
}

/// Sample mean and unbiased covariance (plus the ridge) of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FeatureMoments {
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        if features.len() < 2 {
            return Err(AidError::InsufficientSamples(format!(
                "covariance needs at least 2 feature vectors, got {}",
                features.len()
            )));
        }
        let d = features[0].len();
        if d == 0 || features.iter().any(|f| f.len() != d) {
            return Err(AidError::Dimension("feature vectors differ in length".into()));
        }
        if features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(AidError::NonFinite("feature vector".into()));
        }
        let n = features.len() as f64;
        let mut mean = DVector::zeros(d);
        for f in features {
            mean += DVector::from_column_slice(f);
        }
        mean /= n;
        let mut cov = DMatrix::zeros(d, d);
        for f in features {
            let c = DVector::from_column_slice(f) - &mean;
            cov += &c * c.transpose();
        }
        cov /= n - 1.0;
        for i in 0..d {
            cov[(i, i)] += COVARIANCE_RIDGE;
        }
        Ok(Self { mean, cov })
    }
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa^½ Σb Σa^½)^½)`.
pub fn frechet_distance(a: &FeatureMoments, b: &FeatureMoments) -> Result<f64> {
    if a.mean.len() != b.mean.len()
        || a.cov.shape() != (a.mean.len(), a.mean.len())
        || b.cov.shape() != a.cov.shape()
    {
        return Err(AidError::Dimension("moment dimensions disagree".into()));
    }
    let diff = &a.mean - &b.mean;
    let sa = psd_sqrt(&a.cov);
    let cross = psd_sqrt(&(&sa * &b.cov * &sa));
    let v = diff.dot(&diff) + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    if !v.is_finite() {
        return Err(AidError::NonFinite("Fréchet distance".into()));
    }
    Ok(v.max(0.0))
}

/// Fréchet distance between pooled source images (first and last of each
/// sequence) and pooled interior images.
pub fn frechet_fidelity<S: AsRef<[Tensor]>>(sequences: &[S], fx: &dyn FeatureExtractor) -> Result<f64> {
    if sequences.is_empty() {
        return Err(AidError::InsufficientSamples("no sequences".into()));
    }
    let mut sources = Vec::new();
    let mut interiors = Vec::new();
    for s in sequences {
        let images = s.as_ref();
        if images.len() < 3 {
            return Err(AidError::InsufficientSamples(format!(
                "fidelity needs interior images; a sequence has length {}",
                images.len()
            )));
        }
        sources.push(fx.features(&images[0])?);
        sources.push(fx.features(&images[images.len() - 1])?);
        for img in &images[1..images.len() - 1] {
            interiors.push(fx.features(img)?);
        }
    }
    frechet_distance(
        &FeatureMoments::from_features(&sources)?,
        &FeatureMoments::from_features(&interiors)?,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub consistency: f64,
    pub smoothness: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fidelity: Option<f64>,
    pub distance: String,
    pub features: String,
    pub k: usize,
    pub m: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "consistency,smoothness,fidelity,distance,features,k,m";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.consistency,
            self.smoothness,
            self.fidelity.map(|f| f.to_string()).unwrap_or_default(),
            self.distance,
            self.features,
            self.k,
            self.m
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.consistency.is_finite() && self.consistency >= 0.0) {
            return Err(AidError::NonFinite(format!("consistency {}", self.consistency)));
        }
        if !(0.0..=1.0).contains(&self.smoothness) {
            return Err(AidError::Domain(format!("smoothness {} outside [0, 1]", self.smoothness)));
        }
        if let Some(f) = self.fidelity {
            if !(f.is_finite() && f >= 0.0) {
                return Err(AidError::NonFinite(format!("fidelity {f}")));
            }
        }
        Ok(())
    }
}

/// Mean consistency and smoothness over the sequences, plus one pooled
/// fidelity value when every sequence has interior images.
pub fn evaluate<S: AsRef<[Tensor]>>(
    sequences: &[S],
    p: &dyn PerceptualDistance,
    fx: &dyn FeatureExtractor,
) -> Result<MetricsReport> {
    let m = sequences
        .first()
        .ok_or_else(|| AidError::InsufficientSamples("no sequences to evaluate".into()))?
        .as_ref()
        .len();
    if sequences.iter().any(|s| s.as_ref().len() != m) {
        return Err(AidError::Dimension("sequences differ in length".into()));
    }
    let k = sequences.len();
    let mut c = 0.0;
    let mut s = 0.0;
    for seq in sequences {
        c += consistency(seq.as_ref(), p)?;
        s += smoothness(seq.as_ref(), p)?;
    }
    let fidelity = if m >= 3 && k * (m - 2) >= 2 {
        Some(frechet_fidelity(sequences, fx)?)
    } else {
        None
    };
    let report = MetricsReport {
        consistency: c / k as f64,
        smoothness: s / k as f64,
        fidelity,
        distance: p.name().to_string(),
        features: fx.name().to_string(),
        k,
        m,
    };
    report.validate()?;
    Ok(report)
}
