use crate::error::{Error, Result};
use crate::nn::RealMatrix;

/// Noise schedule indexed by timestep `t = 1..=T` (stored 0-based).
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::config("diffusion schedule needs at least one step"));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::config("every beta must lie in (0, 1)"));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::config("betas must be non-decreasing"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.index(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.index(t)?])
    }

    /// Variance of `q(x_{t-1} | x_t, x_0)`: `β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`,
    /// zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        let i = self.index(t)?;
        if i == 0 {
            return Ok(0.0);
        }
        Ok(self.betas[i] * (1.0 - self.alpha_bars[i - 1]) / (1.0 - self.alpha_bars[i]))
    }
}

/// Linear `β` from `beta_start` to `beta_end` over `steps` steps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps < 2 {
        return Err(Error::config(format!("need at least 2 diffusion steps, got {steps}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let last = (steps - 1) as f64;
    let betas = (0..steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / last)
        .collect();
    DiffusionSchedule::from_betas(betas)
}

/// `x_t = √ᾱ_t · x_0 + √(1 − ᾱ_t) · ε`
pub fn forward_noise(x0: &RealMatrix, t: usize, eps: &RealMatrix, schedule: &DiffusionSchedule) -> Result<RealMatrix> {
    if x0.shape() != eps.shape() {
        return Err(Error::invalid("noise and data shapes differ"));
    }
    let ab = schedule.alpha_bar(t)?;
    Ok(x0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}
