//! OOD score functions. Every score is oriented so that higher means more
//! in-distribution.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::losses::{cosine_logits, LossKind, MetricHead};
use crate::nn::RealMatrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScoreKind {
    Msp,
    Energy { temperature: f64 },
    Mahalanobis,
    MaxCosine,
}

impl ScoreKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScoreKind::Msp => "msp",
            ScoreKind::Energy { .. } => "energy",
            ScoreKind::Mahalanobis => "mahalanobis",
            ScoreKind::MaxCosine => "maxcos",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ScoreKind::Energy { temperature } if !(temperature > 0.0 && temperature.is_finite()) => {
                Err(Error::config(format!("energy temperature must be positive, got {temperature}")))
            }
            _ => Ok(()),
        }
    }

    /// The score each head is deployed with: maximum softmax probability
    /// for the softmax head, maximum cosine for every angular head.
    pub fn native_for(kind: LossKind) -> Self {
        if kind.is_angular() {
            ScoreKind::MaxCosine
        } else {
            ScoreKind::Msp
        }
    }

    /// Parses `msp|energy|mahalanobis|maxcos`; energy takes `temperature`.
    pub fn parse_with_temperature(s: &str, temperature: f64) -> Result<Self> {
        let kind = match s.trim() {
            "msp" => ScoreKind::Msp,
            "energy" => ScoreKind::Energy { temperature },
            "mahalanobis" => ScoreKind::Mahalanobis,
            "maxcos" | "max_cosine" => ScoreKind::MaxCosine,
            other => return Err(Error::config(format!("unknown score kind `{other}`"))),
        };
        kind.validate()?;
        Ok(kind)
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse_with_temperature(s, 1.0)
    }
}

/// Numerically stable softmax of one logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Maximum class probability.
pub fn msp_score(probabilities: &[f64]) -> Result<f64> {
    if probabilities.is_empty() {
        return Err(Error::invalid("empty probability vector"));
    }
    let sum: f64 = probabilities.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || probabilities.iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::invalid(format!("not a probability vector (sum {sum})")));
    }
    Ok(probabilities.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// `T · ln Σ exp(logit / T)`.
pub fn energy_score(logits: &[f64], temperature: f64) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = logits.iter().map(|l| ((l - max) / temperature).exp()).sum();
    max + temperature * sum.ln()
}

/// Class means and shared precision for Mahalanobis scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub means: Vec<DVector<f64>>,
    /// Pooled covariance including the ridge.
    pub covariance: DMatrix<f64>,
    pub precision: DMatrix<f64>,
    pub ridge: f64,
}

/// Class means and pooled covariance `Σ = (1/N) Σ_c Σ_{i∈c} (z_i − μ_c)(z_i − μ_c)ᵀ`
/// plus a ridge `εI`, `ε = 1e-6 · tr(Σ)/d` (or `1e-6` when `Σ` vanishes).
/// If the ridged matrix is still not positive definite the ridge grows ×10,
/// at most three times.
pub fn fit_gaussian_stats(features: &RealMatrix, labels: &[usize]) -> Result<GaussianStats> {
    let (n, d) = features.shape();
    if labels.len() != n {
        return Err(Error::Dimension {
            context: "labels",
            expected: n,
            actual: labels.len(),
        });
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    let mut means = vec![DVector::<f64>::zeros(d); classes];
    for (i, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        means[y] += features.row(i).transpose();
    }
    if let Some(c) = counts.iter().position(|&k| k < 2) {
        return Err(Error::invalid(format!("class {c} has fewer than two samples")));
    }
    for (mean, &k) in means.iter_mut().zip(&counts) {
        *mean /= k as f64;
    }
    let mut centered = features.clone();
    for (i, &y) in labels.iter().enumerate() {
        let mut row = centered.row_mut(i);
        row -= means[y].transpose();
    }
    let pooled = centered.transpose() * &centered / n as f64;
    let pooled = (&pooled + pooled.transpose()) * 0.5;
    let trace_per_dim = pooled.trace() / d as f64;
    let mut ridge = if trace_per_dim > 0.0 { 1e-6 * trace_per_dim } else { 1e-6 };
    for _ in 0..4 {
        let covariance = &pooled + DMatrix::identity(d, d) * ridge;
        if let Some(chol) = covariance.clone().cholesky() {
            let precision = chol.inverse();
            return Ok(GaussianStats {
                means,
                covariance,
                precision,
                ridge,
            });
        }
        ridge *= 10.0;
    }
    Err(Error::Singular("pooled feature covariance".into()))
}

/// `−min_c (z − μ_c)ᵀ Σ⁻¹ (z − μ_c)`.
pub fn mahalanobis_score(z: &[f64], stats: &GaussianStats) -> f64 {
    let z = DVector::from_column_slice(z);
    let best = stats
        .means
        .iter()
        .map(|mu| {
            let diff = &z - mu;
            (diff.transpose() * &stats.precision * &diff)[(0, 0)].max(0.0)
        })
        .fold(f64::INFINITY, f64::min);
    -best
}

/// Largest cosine between `z` and the head's class weights.
pub fn max_cosine_score(z: &[f64], head: &MetricHead) -> Result<f64> {
    let row = RealMatrix::from_row_slice(1, z.len(), z);
    Ok(cosine_logits(&row, head)?
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max))
}
