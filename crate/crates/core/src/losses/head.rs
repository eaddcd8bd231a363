use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;

use super::adacos_scale;
use crate::error::{Error, Result};
use crate::nn::{Parameterized, RealMatrix};
use crate::rng::Rng;

/// Cosines are clamped to `[-1 + COS_CLAMP, 1 - COS_CLAMP]`.
pub const COS_CLAMP: f64 = 1e-7;
/// Norms below this get `NORM_GUARD` added.
pub const NORM_GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossKind {
    Softmax,
    ScaledCosine,
    SphereFace,
    CosFace,
    ArcFace,
    AdaCos,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Softmax,
        LossKind::ScaledCosine,
        LossKind::AdaCos,
        LossKind::ArcFace,
        LossKind::CosFace,
        LossKind::SphereFace,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Softmax => "softmax",
            LossKind::ScaledCosine => "scaled_cosine",
            LossKind::SphereFace => "sphereface",
            LossKind::CosFace => "cosface",
            LossKind::ArcFace => "arcface",
            LossKind::AdaCos => "adacos",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            LossKind::Softmax => 0,
            LossKind::ScaledCosine => 1,
            LossKind::SphereFace => 2,
            LossKind::CosFace => 3,
            LossKind::ArcFace => 4,
            LossKind::AdaCos => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        LossKind::ALL.into_iter().find(|k| k.tag() == tag)
    }

    /// Whether logits are built from cosines against unit-normalized weights.
    pub fn is_angular(self) -> bool {
        self != LossKind::Softmax
    }

    fn uses_scale(self) -> bool {
        matches!(
            self,
            LossKind::ScaledCosine | LossKind::CosFace | LossKind::ArcFace | LossKind::AdaCos
        )
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown loss kind `{s}`")))
    }
}

/// Optional overrides for [`MetricHead::new`]; `None` picks the per-kind default.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HeadSettings {
    pub margin: Option<f64>,
    pub scale: Option<f64>,
    pub scale_learnable: Option<bool>,
}

/// Classification head on top of penultimate features.
///
/// `weight` is `feature_dim × classes`. For angular kinds the columns are
/// divided by their norms whenever logits are computed, so the stored values
/// never need explicit renormalization.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricHead {
    pub weight: RealMatrix,
    /// Only used by [`LossKind::Softmax`].
    pub bias: DVector<f64>,
    pub kind: LossKind,
    pub margin: f64,
    pub scale: f64,
    pub scale_learnable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrad {
    pub weight: RealMatrix,
    pub bias: DVector<f64>,
    pub scale: f64,
}

impl HeadGrad {
    pub fn zeros_like(head: &MetricHead) -> Self {
        Self {
            weight: RealMatrix::zeros(head.weight.nrows(), head.weight.ncols()),
            bias: DVector::zeros(head.bias.len()),
            scale: 0.0,
        }
    }

    pub(crate) fn add_assign(&mut self, other: &HeadGrad) {
        self.weight += &other.weight;
        self.bias += &other.bias;
        self.scale += other.scale;
    }

    /// Gradient slices in [`MetricHead`]'s parameter order.
    pub fn grad_slices<'a>(&'a self, head: &MetricHead) -> Vec<&'a [f64]> {
        let mut out = vec![self.weight.as_slice()];
        if head.kind == LossKind::Softmax {
            out.push(self.bias.as_slice());
        }
        if head.scale_learnable {
            out.push(std::slice::from_ref(&self.scale));
        }
        out
    }
}

/// Cosine geometry between a feature batch and the class weights.
#[derive(Clone, Debug)]
pub(crate) struct CosineTerms {
    /// `n × C`, clamped
    pub cos: RealMatrix,
    /// `n × C`, true where the raw cosine was clamped
    pub clamped: Vec<bool>,
    /// guarded feature norms
    pub znorm: DVector<f64>,
    /// `n × d` unit features
    pub unit_z: RealMatrix,
    /// `d × C` unit weight columns
    pub unit_w: RealMatrix,
    pub wnorm: DVector<f64>,
}

fn guarded(norm: f64) -> f64 {
    if norm < NORM_GUARD {
        norm + NORM_GUARD
    } else {
        norm
    }
}

impl CosineTerms {
    pub fn new(z: &RealMatrix, weight: &RealMatrix) -> Self {
        let znorm = DVector::from_iterator(z.nrows(), z.row_iter().map(|r| guarded(r.norm())));
        let wnorm = DVector::from_iterator(weight.ncols(), weight.column_iter().map(|c| guarded(c.norm())));
        let unit_z = RealMatrix::from_fn(z.nrows(), z.ncols(), |i, k| z[(i, k)] / znorm[i]);
        let unit_w = RealMatrix::from_fn(weight.nrows(), weight.ncols(), |k, j| weight[(k, j)] / wnorm[j]);
        let mut cos = &unit_z * &unit_w;
        let (n, c) = cos.shape();
        let mut clamped = vec![false; n * c];
        let hi = 1.0 - COS_CLAMP;
        for (idx, v) in cos.iter_mut().enumerate() {
            if *v > hi || *v < -hi {
                *v = v.clamp(-hi, hi);
                clamped[idx] = true;
            }
        }
        Self {
            cos,
            clamped,
            znorm,
            unit_z,
            unit_w,
            wnorm,
        }
    }

    /// Back-propagates `dL/dcos` (and optionally `dL/d‖z‖` per row) to the
    /// raw features and raw weight matrix.
    pub fn backprop(&self, grad_cos: &RealMatrix, grad_norm: Option<&DVector<f64>>) -> (RealMatrix, RealMatrix) {
        let mut g = grad_cos.clone();
        for (v, &c) in g.iter_mut().zip(&self.clamped) {
            if c {
                *v = 0.0;
            }
        }
        let gc = g.component_mul(&self.cos);
        let row_dot: Vec<f64> = gc.row_iter().map(|r| r.sum()).collect();
        let col_dot: Vec<f64> = gc.column_iter().map(|c| c.sum()).collect();

        let mut dz = &g * self.unit_w.transpose();
        for i in 0..dz.nrows() {
            let extra = grad_norm.map_or(0.0, |gn| gn[i]);
            for k in 0..dz.ncols() {
                let u = self.unit_z[(i, k)];
                dz[(i, k)] = (dz[(i, k)] - row_dot[i] * u) / self.znorm[i] + extra * u;
            }
        }
        let mut dw = self.unit_z.transpose() * &g;
        for j in 0..dw.ncols() {
            for k in 0..dw.nrows() {
                dw[(k, j)] = (dw[(k, j)] - col_dot[j] * self.unit_w[(k, j)]) / self.wnorm[j];
            }
        }
        (dz, dw)
    }
}

impl MetricHead {
    pub fn new(
        kind: LossKind,
        feature_dim: usize,
        classes: usize,
        settings: HeadSettings,
        rng: &mut Rng,
    ) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::config("feature dimension must be positive"));
        }
        if classes < 2 {
            return Err(Error::config("a classification head needs at least two classes"));
        }
        let (margin, scale, learnable) = match kind {
            LossKind::Softmax => (0.0, 1.0, false),
            LossKind::ScaledCosine => (0.0, settings.scale.unwrap_or(10.0), settings.scale_learnable.unwrap_or(true)),
            LossKind::SphereFace => (settings.margin.unwrap_or(2.0), 1.0, false),
            LossKind::CosFace => (settings.margin.unwrap_or(0.2), settings.scale.unwrap_or(10.0), settings.scale_learnable.unwrap_or(false)),
            LossKind::ArcFace => (settings.margin.unwrap_or(0.3), settings.scale.unwrap_or(10.0), settings.scale_learnable.unwrap_or(false)),
            LossKind::AdaCos => (
                settings.margin.unwrap_or(0.3),
                settings.scale.unwrap_or(adacos_scale(classes)?),
                false,
            ),
        };
        let std = if kind == LossKind::Softmax {
            (1.0 / feature_dim as f64).sqrt()
        } else {
            1.0
        };
        let head = Self {
            weight: RealMatrix::from_fn(feature_dim, classes, |_, _| std * rng.normal()),
            bias: DVector::zeros(classes),
            kind,
            margin,
            scale,
            scale_learnable: learnable,
        };
        head.validate()?;
        Ok(head)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.margin;
        match self.kind {
            LossKind::SphereFace => {
                if !(m >= 1.0 && m.fract() == 0.0) {
                    return Err(Error::config(format!("sphereface margin must be a positive integer, got {m}")));
                }
            }
            LossKind::CosFace => {
                if !(0.0..1.0).contains(&m) {
                    return Err(Error::config(format!("cosface margin must be in [0, 1), got {m}")));
                }
            }
            LossKind::ArcFace | LossKind::AdaCos => {
                if !(0.0..std::f64::consts::FRAC_PI_2).contains(&m) {
                    return Err(Error::config(format!("arcface margin must be in [0, pi/2), got {m}")));
                }
            }
            LossKind::Softmax | LossKind::ScaledCosine => {}
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::config(format!("scale must be positive, got {}", self.scale)));
        }
        if self.bias.len() != self.classes() {
            return Err(Error::Dimension {
                context: "head bias",
                expected: self.classes(),
                actual: self.bias.len(),
            });
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.weight.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub(crate) fn check_features(&self, z: &RealMatrix) -> Result<()> {
        if z.ncols() != self.feature_dim() {
            return Err(Error::Dimension {
                context: "head features",
                expected: self.feature_dim(),
                actual: z.ncols(),
            });
        }
        Ok(())
    }

    /// Margin-free logits: `zW + b` for softmax, `|z| cos` for SphereFace and
    /// `s cos` for the other angular kinds. Used for inference, scoring and the
    /// outlier-exposure term.
    pub fn logits(&self, z: &RealMatrix) -> Result<RealMatrix> {
        self.check_features(z)?;
        Ok(match self.kind {
            LossKind::Softmax => self.affine_logits(z),
            LossKind::SphereFace => {
                let t = CosineTerms::new(z, &self.weight);
                let mut l = t.cos;
                for (i, mut row) in l.row_iter_mut().enumerate() {
                    row *= t.znorm[i];
                }
                l
            }
            _ => cosine_logits(z, self)? * self.scale,
        })
    }

    pub(crate) fn affine_logits(&self, z: &RealMatrix) -> RealMatrix {
        let mut l = z * &self.weight;
        for (j, mut col) in l.column_iter_mut().enumerate() {
            col.add_scalar_mut(self.bias[j]);
        }
        l
    }

    /// Keeps a learnable scale positive after an optimizer update.
    pub fn enforce_constraints(&mut self) {
        if self.scale <= 0.0 || !self.scale.is_finite() {
            log::warn!("scale driven to {} by the optimizer; clamping to 1e-3", self.scale);
            self.scale = 1e-3;
        }
    }

    pub(crate) fn scales_logits(&self) -> bool {
        self.kind.uses_scale()
    }
}

impl Parameterized for MetricHead {
    fn param_slices_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![("head weight".into(), self.weight.as_mut_slice())];
        if self.kind == LossKind::Softmax {
            out.push(("head bias".into(), self.bias.as_mut_slice()));
        }
        if self.scale_learnable {
            out.push(("head scale".into(), std::slice::from_mut(&mut self.scale)));
        }
        out
    }
}

/// Cosine of the angle between each feature row and each class weight column.
pub fn cosine_logits(z: &RealMatrix, head: &MetricHead) -> Result<RealMatrix> {
    head.check_features(z)?;
    Ok(CosineTerms::new(z, &head.weight).cos)
}
