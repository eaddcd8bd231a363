//! Central finite differences, used as an independent oracle for every
//! hand-derived gradient in the crate.

use super::{GradientTape, MlpModel, Parameterized};
use crate::error::{Error, Result};

/// `(L(p + eps) - L(p - eps)) / 2 eps` for every parameter slice exposed by
/// `target`. The returned vectors follow [`Parameterized::param_slices_mut`]
/// order.
pub fn central_difference<M, F>(target: &M, eps: f64, mut loss: F) -> Result<Vec<Vec<f64>>>
where
    M: Parameterized + Clone,
    F: FnMut(&M) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::config(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut probe = target.clone();
    let shape: Vec<usize> = probe.param_slices_mut().iter().map(|(_, s)| s.len()).collect();
    let mut out = Vec::with_capacity(shape.len());
    for (group, &len) in shape.iter().enumerate() {
        let mut grad = Vec::with_capacity(len);
        for k in 0..len {
            let original = probe.param_slices_mut()[group].1[k];
            probe.param_slices_mut()[group].1[k] = original + eps;
            let up = loss(&probe)?;
            probe.param_slices_mut()[group].1[k] = original - eps;
            let down = loss(&probe)?;
            probe.param_slices_mut()[group].1[k] = original;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!("loss while perturbing parameter group {group}")));
            }
            grad.push((up - down) / (2.0 * eps));
        }
        out.push(grad);
    }
    Ok(out)
}

/// Finite-difference estimate of the full [`GradientTape`] of `loss_fn`.
pub fn finite_diff_grad<F>(loss_fn: F, model: &MlpModel, eps: f64) -> Result<GradientTape>
where
    F: FnMut(&MlpModel) -> Result<f64>,
{
    let groups = central_difference(model, eps, loss_fn)?;
    let mut tape = GradientTape::zeros_like(model);
    for (i, layer) in tape.layers.iter_mut().enumerate() {
        layer.weight.as_mut_slice().copy_from_slice(&groups[2 * i]);
        layer.bias.as_mut_slice().copy_from_slice(&groups[2 * i + 1]);
    }
    Ok(tape)
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, or the absolute difference norm when both
/// vectors are (numerically) zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone)]
    struct Scalar(Vec<f64>);

    impl Parameterized for Scalar {
        fn param_slices_mut(&mut self) -> Vec<(String, &mut [f64])> {
            vec![("p".into(), &mut self.0[..])]
        }
    }

    #[test]
    fn quadratic_derivative() {
        let g = central_difference(&Scalar(vec![3.0]), 1e-5, |s| Ok(0.5 * s.0[0] * s.0[0])).unwrap();
        assert!((g[0][0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let g = central_difference(&Scalar(vec![1.0, -2.0]), 1e-5, |_| Ok(4.2)).unwrap();
        assert_eq!(g[0], vec![0.0, 0.0]);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let r = central_difference(&Scalar(vec![1.0]), 1e-5, |_| Ok(f64::NAN));
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(central_difference(&Scalar(vec![1.0]), 0.0, |_| Ok(0.0)).is_err());
    }
}
