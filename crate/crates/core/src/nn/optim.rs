use super::all_finite;
use crate::error::{Error, Result};

/// First-order optimizer over an ordered list of parameter slices.
///
/// State is keyed by slice position, so every call must pass the same
/// parameters in the same order.
pub trait Optimizer {
    fn step(&mut self, params: Vec<(String, &mut [f64])>, grads: &[&[f64]]) -> Result<()>;
}

fn check_grads(params: &[(String, &mut [f64])], grads: &[&[f64]]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Dimension {
            context: "optimizer parameter groups",
            expected: params.len(),
            actual: grads.len(),
        });
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.len() != g.len() {
            return Err(Error::Dimension {
                context: "optimizer gradient length",
                expected: p.len(),
                actual: g.len(),
            });
        }
        if !all_finite(g) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    Ok(())
}

fn ensure_state(state: &mut Vec<Vec<f64>>, grads: &[&[f64]]) {
    if state.len() != grads.len() {
        *state = grads.iter().map(|g| vec![0.0; g.len()]).collect();
    }
}

/// SGD with heavy-ball momentum: `v = mu v + g; p -= lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: Vec<(String, &mut [f64])>, grads: &[&[f64]]) -> Result<()> {
        check_grads(&params, grads)?;
        ensure_state(&mut self.velocity, grads);
        for (((_, p), g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((pi, gi), vi) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= self.lr * *vi;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: Vec<(String, &mut [f64])>, grads: &[&[f64]]) -> Result<()> {
        check_grads(&params, grads)?;
        ensure_state(&mut self.m, grads);
        ensure_state(&mut self.v, grads);
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (_, p)) in params.into_iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, pk) in p.iter_mut().enumerate() {
                let g = grads[i][k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                *pk -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
