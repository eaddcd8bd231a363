#![allow(dead_code)]

use oodkit::diffusion::{denoising_loss, make_schedule, DenoiserModel};
use oodkit::losses::{head_loss, outlier_exposure_loss, HeadSettings, LossKind, MetricHead};
use oodkit::nn::{finite_diff_grad, relative_error, RealMatrix};
use oodkit::Rng;

/// Central differences of `f` at `x`.
pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + eps;
            let up = f(&p);
            p[i] = orig - eps;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> RealMatrix {
    RealMatrix::from_fn(rows, cols, |_, _| rng.normal())
}

/// A head of `kind` with random weights, bias and (where used) scale.
pub fn random_head(kind: LossKind, d: usize, c: usize, rng: &mut Rng) -> MetricHead {
    let mut h = MetricHead::new(kind, d, c, HeadSettings::default(), rng).unwrap();
    if kind == LossKind::Softmax {
        h.bias = nalgebra::DVector::from_fn(c, |_, _| rng.normal());
    }
    if matches!(kind, LossKind::ScaledCosine | LossKind::CosFace | LossKind::ArcFace) {
        h.scale = rng.uniform_in(2.0, 12.0);
    }
    h
}

/// Flattened parameters in the order the gradients are reported: features,
/// head weight, then bias for softmax and scale when learnable.
fn pack(z: &RealMatrix, head: &MetricHead) -> Vec<f64> {
    let mut v: Vec<f64> = z.as_slice().to_vec();
    v.extend_from_slice(head.weight.as_slice());
    if head.kind == LossKind::Softmax {
        v.extend_from_slice(head.bias.as_slice());
    }
    if head.scale_learnable {
        v.push(head.scale);
    }
    v
}

fn unpack(v: &[f64], z: &RealMatrix, head: &MetricHead) -> (RealMatrix, MetricHead) {
    let mut z2 = z.clone();
    let mut h = head.clone();
    let mut at = 0;
    z2.as_mut_slice().copy_from_slice(&v[at..at + z.len()]);
    at += z.len();
    h.weight.as_mut_slice().copy_from_slice(&v[at..at + head.weight.len()]);
    at += head.weight.len();
    if head.kind == LossKind::Softmax {
        h.bias.as_mut_slice().copy_from_slice(&v[at..at + head.bias.len()]);
        at += head.bias.len();
    }
    if head.scale_learnable {
        h.scale = v[at];
    }
    (z2, h)
}

/// Relative error between the analytic and numeric gradient of one head's
/// loss at a random point; with `lambda` set, the outlier-exposure objective
/// on an extra outlier batch is checked instead.
pub fn head_gradient_error(kind: LossKind, lambda: Option<f64>, rng: &mut Rng) -> f64 {
    let (n, d, c) = (5, 4, 3);
    let head = random_head(kind, d, c, rng);
    let z = random_matrix(n, d, rng) * 2.0;
    let z_ood = random_matrix(3, d, rng);
    let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();

    type Objective = Box<dyn Fn(&[f64]) -> f64>;
    let (analytic, loss_at): (Vec<f64>, Objective) = match lambda {
        None => {
            let v = head_loss(&z, &head, &labels).unwrap();
            let mut g: Vec<f64> = v.grad_features.as_slice().to_vec();
            for s in v.grad_head.grad_slices(&head) {
                g.extend_from_slice(s);
            }
            let (z0, h0, l0) = (z.clone(), head.clone(), labels.clone());
            (g, Box::new(move |p: &[f64]| {
                let (zz, hh) = unpack(p, &z0, &h0);
                head_loss(&zz, &hh, &l0).unwrap().loss
            }))
        }
        Some(lambda) => {
            let v = outlier_exposure_loss(&z, &labels, &z_ood, &head, lambda).unwrap();
            let mut g: Vec<f64> = v.grad_id_features.as_slice().to_vec();
            for s in v.grad_head.grad_slices(&head) {
                g.extend_from_slice(s);
            }
            g.extend_from_slice(v.grad_ood_features.as_slice());
            let (z0, h0, l0, o0) = (z.clone(), head.clone(), labels.clone(), z_ood.clone());
            (g, Box::new(move |p: &[f64]| {
                let split = p.len() - o0.len();
                let (zz, hh) = unpack(&p[..split], &z0, &h0);
                let mut oo = o0.clone();
                oo.as_mut_slice().copy_from_slice(&p[split..]);
                outlier_exposure_loss(&zz, &l0, &oo, &hh, lambda).unwrap().loss
            }))
        }
    };
    let mut point = pack(&z, &head);
    if lambda.is_some() {
        point.extend_from_slice(z_ood.as_slice());
    }
    let numeric = numeric_grad(loss_at, &point, 1e-6);
    relative_error(&analytic, &numeric)
}

/// Relative error of the denoiser's noise-prediction MSE gradient at a
/// random network and batch.
pub fn denoiser_gradient_error(rng: &mut Rng) -> f64 {
    let schedule = make_schedule(20, 1e-3, 0.2).unwrap();
    let model = DenoiserModel::new(2, 3, &[12, 12], 3, schedule, rng).unwrap();
    let n = 6;
    let x_t = random_matrix(n, 2, rng);
    let labels = RealMatrix::from_fn(n, 3, |i, c| if i % 3 == c { 1.0 } else { 0.0 });
    let ts: Vec<usize> = (0..n).map(|_| 1 + rng.below(20)).collect();
    let eps = random_matrix(n, 2, rng);
    let (_, tape) = denoising_loss(&model, &x_t, &labels, &ts, &eps).unwrap();
    let fd = finite_diff_grad(
        |net| {
            let m = DenoiserModel {
                net: net.clone(),
                ..model.clone()
            };
            Ok(denoising_loss(&m, &x_t, &labels, &ts, &eps)?.0)
        },
        &model.net,
        1e-6,
    )
    .unwrap();
    relative_error(&tape.flatten(), &fd.flatten())
}
