//! Training objectives for the classification heads.
//!
//! Every objective is cross-entropy over per-kind logits:
//!
//! | kind          | target logit            | other logits |
//! |---------------|-------------------------|--------------|
//! | softmax       | `W_y·z + b_y`           | `W_j·z + b_j`|
//! | scaled cosine | `s cos θ_y`             | `s cos θ_j`  |
//! | SphereFace    | `‖z‖ ψ(θ_y)`            | `‖z‖ cos θ_j`|
//! | CosFace       | `s (cos θ_y − m)`       | `s cos θ_j`  |
//! | ArcFace       | `s cos(θ_y + m)`        | `s cos θ_j`  |
//! | AdaCos        | ArcFace with `s = √2 ln(C − 1)` |      |
//!
//! where `θ_j` is the angle between `z` and the unit-normalized weight column
//! `W_j`. All gradients are derived by hand; the tests check them against
//! central differences.

mod head;
mod oe;

pub use head::{cosine_logits, HeadGrad, HeadSettings, LossKind, MetricHead, COS_CLAMP, NORM_GUARD};
pub use oe::{outlier_exposure_loss, uniform_cross_entropy, OutlierExposureValue};

pub(crate) use head::CosineTerms;

use std::f64::consts::PI;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::nn::RealMatrix;

/// Mean cross-entropy and its gradient with respect to the logits.
#[derive(Clone, Debug)]
pub struct CrossEntropy {
    pub loss: f64,
    pub grad_logits: RealMatrix,
}

/// Loss of a head on a feature batch with gradients for features and head.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub loss: f64,
    pub grad_features: RealMatrix,
    pub grad_head: HeadGrad,
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn row_vec(m: &RealMatrix, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// Softmax cross-entropy averaged over rows, with max subtraction.
pub fn softmax_ce(logits: &RealMatrix, labels: &[usize]) -> Result<CrossEntropy> {
    let (n, c) = logits.shape();
    if labels.len() != n {
        return Err(Error::Dimension {
            context: "labels",
            expected: n,
            actual: labels.len(),
        });
    }
    if n == 0 {
        return Err(Error::invalid("cross-entropy over an empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
    }
    let mut grad = RealMatrix::zeros(n, c);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let logp = log_softmax_row(&row_vec(logits, i));
        total -= logp[y];
        for j in 0..c {
            grad[(i, j)] = (logp[j].exp() - if j == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok(CrossEntropy {
        loss: total / n as f64,
        grad_logits: grad,
    })
}

/// SphereFace's monotone extension of `cos(mθ)`:
/// `ψ(θ) = (−1)^k cos(mθ) − 2k` for `θ ∈ [kπ/m, (k+1)π/m]`.
pub fn sphereface_psi(theta: f64, m: u32) -> f64 {
    let (k, sign) = psi_branch(theta, m);
    sign * (m as f64 * theta).cos() - 2.0 * k as f64
}

fn psi_branch(theta: f64, m: u32) -> (u32, f64) {
    let k = ((m as f64 * theta / PI).floor().max(0.0) as u32).min(m - 1);
    (k, if k.is_multiple_of(2) { 1.0 } else { -1.0 })
}

/// `dψ/dcos θ`
fn sphereface_psi_dcos(theta: f64, m: u32) -> f64 {
    let (_, sign) = psi_branch(theta, m);
    let mf = m as f64;
    sign * mf * (mf * theta).sin() / theta.sin()
}

/// AdaCos fixed scale `√2 · ln(C − 1)`. For two classes the formula gives 0;
/// that degenerate case is clamped to 1.
pub fn adacos_scale(classes: usize) -> Result<f64> {
    if classes < 2 {
        return Err(Error::config(format!("AdaCos needs at least two classes, got {classes}")));
    }
    let s = 2f64.sqrt() * ((classes - 1) as f64).ln();
    if s <= 0.0 {
        log::warn!("AdaCos scale for {classes} classes is {s}; using 1.0");
        return Ok(1.0);
    }
    Ok(s)
}

/// Logits for an angular head together with their partial derivatives.
pub(crate) struct AngularLogits {
    pub values: RealMatrix,
    pub d_cos: RealMatrix,
    /// `dℓ/d‖z‖`, SphereFace only
    pub d_norm: Option<RealMatrix>,
}

/// Builds angular logits. With `labels`, the per-kind margin is applied to
/// each row's target class; without, the logits are margin-free.
pub(crate) fn angular_logits(head: &MetricHead, terms: &CosineTerms, labels: Option<&[usize]>) -> AngularLogits {
    let (n, c) = terms.cos.shape();
    let s = head.scale;
    let m = head.margin;
    let mut values = RealMatrix::zeros(n, c);
    let mut d_cos = RealMatrix::zeros(n, c);
    let sphere = head.kind == LossKind::SphereFace;
    let mut d_norm = sphere.then(|| RealMatrix::zeros(n, c));
    let mut fallbacks = 0usize;
    for i in 0..n {
        let target = labels.map(|l| l[i]);
        for j in 0..c {
            let cos = terms.cos[(i, j)];
            let is_target = target == Some(j);
            let (v, d) = match head.kind {
                LossKind::SphereFace => {
                    let norm = terms.znorm[i];
                    let (psi, dpsi) = if is_target {
                        let theta = cos.acos();
                        let mi = m as u32;
                        (sphereface_psi(theta, mi), sphereface_psi_dcos(theta, mi))
                    } else {
                        (cos, 1.0)
                    };
                    if let Some(dn) = d_norm.as_mut() {
                        dn[(i, j)] = psi;
                    }
                    (norm * psi, norm * dpsi)
                }
                LossKind::CosFace if is_target => (s * (cos - m), s),
                LossKind::ArcFace | LossKind::AdaCos if is_target => {
                    let theta = cos.acos();
                    if theta + m <= PI {
                        (s * (theta + m).cos(), s * (theta + m).sin() / theta.sin())
                    } else {
                        fallbacks += 1;
                        (s * (cos - m * m.sin()), s)
                    }
                }
                _ => (s * cos, s),
            };
            values[(i, j)] = v;
            d_cos[(i, j)] = d;
        }
    }
    if fallbacks > 0 {
        log::debug!("arcface: {fallbacks} target angles beyond pi - m used the linear fallback");
    }
    AngularLogits { values, d_cos, d_norm }
}

/// Back-propagates `dL/dlogits` of an angular head to features and head.
pub(crate) fn angular_backprop(
    head: &MetricHead,
    terms: &CosineTerms,
    logits: &AngularLogits,
    grad_logits: &RealMatrix,
) -> (RealMatrix, HeadGrad) {
    let grad_cos = grad_logits.component_mul(&logits.d_cos);
    let grad_norm = logits.d_norm.as_ref().map(|dn| {
        DVector::from_iterator(
            dn.nrows(),
            grad_logits.component_mul(dn).row_iter().map(|r| r.sum()),
        )
    });
    let (dz, dw) = terms.backprop(&grad_cos, grad_norm.as_ref());
    let scale = if head.scales_logits() {
        grad_logits.component_mul(&logits.values).sum() / head.scale
    } else {
        0.0
    };
    (
        dz,
        HeadGrad {
            weight: dw,
            bias: DVector::zeros(head.classes()),
            scale,
        },
    )
}

fn softmax_head_backprop(head: &MetricHead, z: &RealMatrix, grad_logits: &RealMatrix) -> (RealMatrix, HeadGrad) {
    let dz = grad_logits * head.weight.transpose();
    let dw = z.transpose() * grad_logits;
    let db = DVector::from_iterator(grad_logits.ncols(), grad_logits.column_iter().map(|c| c.sum()));
    (
        dz,
        HeadGrad {
            weight: dw,
            bias: db,
            scale: 0.0,
        },
    )
}

/// Cross-entropy of `head` on features `z` with its kind's margin, plus
/// gradients. Dispatches on [`MetricHead::kind`].
pub fn head_loss(z: &RealMatrix, head: &MetricHead, labels: &[usize]) -> Result<LossValue> {
    head.check_features(z)?;
    head.validate()?;
    if head.kind == LossKind::Softmax {
        let ce = softmax_ce(&head.affine_logits(z), labels)?;
        let (grad_features, grad_head) = softmax_head_backprop(head, z, &ce.grad_logits);
        return Ok(LossValue {
            loss: ce.loss,
            grad_features,
            grad_head,
        });
    }
    if labels.len() != z.nrows() {
        return Err(Error::Dimension {
            context: "labels",
            expected: z.nrows(),
            actual: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= head.classes()) {
        return Err(Error::invalid(format!("label {bad} out of range for {} classes", head.classes())));
    }
    let terms = CosineTerms::new(z, &head.weight);
    let logits = angular_logits(head, &terms, Some(labels));
    let ce = softmax_ce(&logits.values, labels)?;
    let (grad_features, grad_head) = angular_backprop(head, &terms, &logits, &ce.grad_logits);
    Ok(LossValue {
        loss: ce.loss,
        grad_features,
        grad_head,
    })
}

/// Margin-free gradient of an arbitrary `dL/dlogits` through the head's
/// inference logits ([`MetricHead::logits`]).
pub(crate) fn margin_free_backprop(
    head: &MetricHead,
    z: &RealMatrix,
    grad_logits: &RealMatrix,
) -> (RealMatrix, HeadGrad) {
    if head.kind == LossKind::Softmax {
        return softmax_head_backprop(head, z, grad_logits);
    }
    let terms = CosineTerms::new(z, &head.weight);
    let logits = angular_logits(head, &terms, None);
    angular_backprop(head, &terms, &logits, grad_logits)
}

fn expect_kind(head: &MetricHead, kinds: &[LossKind]) -> Result<()> {
    if kinds.contains(&head.kind) {
        Ok(())
    } else {
        Err(Error::config(format!("head kind {} not accepted here", head.kind)))
    }
}

/// Cross-entropy over `s cos θ` with gradient for a learnable `s`.
pub fn scaled_cosine_loss(z: &RealMatrix, head: &MetricHead, labels: &[usize]) -> Result<LossValue> {
    expect_kind(head, &[LossKind::ScaledCosine])?;
    head_loss(z, head, labels)
}

pub fn sphereface_loss(z: &RealMatrix, head: &MetricHead, labels: &[usize]) -> Result<LossValue> {
    expect_kind(head, &[LossKind::SphereFace])?;
    head_loss(z, head, labels)
}

pub fn cosface_loss(z: &RealMatrix, head: &MetricHead, labels: &[usize]) -> Result<LossValue> {
    expect_kind(head, &[LossKind::CosFace])?;
    head_loss(z, head, labels)
}

/// ArcFace loss; AdaCos heads share this form with their fixed scale.
pub fn arcface_loss(z: &RealMatrix, head: &MetricHead, labels: &[usize]) -> Result<LossValue> {
    expect_kind(head, &[LossKind::ArcFace, LossKind::AdaCos])?;
    head_loss(z, head, labels)
}
