use super::{head_loss, log_softmax_row, margin_free_backprop, row_vec, CrossEntropy, HeadGrad, MetricHead};
use crate::error::{Error, Result};
use crate::nn::RealMatrix;

/// Mean cross-entropy between the uniform distribution and `softmax(logits)`:
/// `-(1/C) Σ_c ln p_c` per row. Equals `KL(U ‖ p) + ln C`.
pub fn uniform_cross_entropy(logits: &RealMatrix) -> Result<CrossEntropy> {
    let (n, c) = logits.shape();
    if n == 0 {
        return Err(Error::invalid("uniform cross-entropy over an empty batch"));
    }
    let inv_c = 1.0 / c as f64;
    let mut grad = RealMatrix::zeros(n, c);
    let mut total = 0.0;
    for i in 0..n {
        let logp = log_softmax_row(&row_vec(logits, i));
        total -= inv_c * logp.iter().sum::<f64>();
        for j in 0..c {
            grad[(i, j)] = (logp[j].exp() - inv_c) / n as f64;
        }
    }
    Ok(CrossEntropy {
        loss: total / n as f64,
        grad_logits: grad,
    })
}

#[derive(Clone, Debug)]
pub struct OutlierExposureValue {
    /// `base_loss + lambda * ood_term`
    pub loss: f64,
    pub base_loss: f64,
    /// Uniform cross-entropy of the outlier batch; 0 when it is empty.
    pub ood_term: f64,
    pub grad_id_features: RealMatrix,
    pub grad_ood_features: RealMatrix,
    pub grad_head: HeadGrad,
}

/// The head's own loss on in-distribution features plus `lambda` times the
/// uniform cross-entropy of its margin-free posterior on outlier features.
pub fn outlier_exposure_loss(
    z_id: &RealMatrix,
    labels: &[usize],
    z_ood: &RealMatrix,
    head: &MetricHead,
    lambda: f64,
) -> Result<OutlierExposureValue> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::config(format!("outlier-exposure weight must be >= 0, got {lambda}")));
    }
    let base = head_loss(z_id, head, labels)?;
    let mut grad_head = base.grad_head;
    if z_ood.nrows() == 0 {
        return Ok(OutlierExposureValue {
            loss: base.loss,
            base_loss: base.loss,
            ood_term: 0.0,
            grad_id_features: base.grad_features,
            grad_ood_features: RealMatrix::zeros(0, head.feature_dim()),
            grad_head,
        });
    }
    let ue = uniform_cross_entropy(&head.logits(z_ood)?)?;
    let (mut grad_ood, ood_head) = margin_free_backprop(head, z_ood, &(ue.grad_logits * lambda));
    if lambda == 0.0 {
        grad_ood.fill(0.0);
    } else {
        grad_head.add_assign(&ood_head);
    }
    Ok(OutlierExposureValue {
        loss: base.loss + lambda * ue.loss,
        base_loss: base.loss,
        ood_term: ue.loss,
        grad_id_features: base.grad_features,
        grad_ood_features: grad_ood,
        grad_head,
    })
}
