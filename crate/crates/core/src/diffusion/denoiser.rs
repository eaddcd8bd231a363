use std::f64::consts::PI;

use super::schedule::{forward_noise, DiffusionSchedule};
use crate::checkpoint::Checkpoint;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{select_rows, Activation, Adam, GradientTape, MlpModel, RealMatrix};
use crate::rng::Rng;

/// Conditioning weights over the ID classes.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVector(pub Vec<f64>);

impl LabelVector {
    pub fn one_hot(class: usize, classes: usize) -> Result<Self> {
        if class >= classes {
            return Err(Error::invalid(format!("class {class} out of range for {classes} classes")));
        }
        let mut v = vec![0.0; classes];
        v[class] = 1.0;
        Ok(Self(v))
    }

    /// Element-wise sum of two distinct one-hot vectors (`[1, 1]` pattern).
    pub fn mixup(a: usize, b: usize, classes: usize) -> Result<Self> {
        Self::check_pair(a, b, classes)?;
        let mut v = vec![0.0; classes];
        v[a] = 1.0;
        v[b] = 1.0;
        Ok(Self(v))
    }

    /// Convex combination `λ e_a + (1 − λ) e_b`.
    pub fn interpolate(a: usize, b: usize, lambda: f64, classes: usize) -> Result<Self> {
        Self::check_pair(a, b, classes)?;
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::config(format!("interpolation weight must be in [0, 1], got {lambda}")));
        }
        let mut v = vec![0.0; classes];
        v[a] = lambda;
        v[b] = 1.0 - lambda;
        Ok(Self(v))
    }

    fn check_pair(a: usize, b: usize, classes: usize) -> Result<()> {
        if a == b {
            return Err(Error::invalid(format!(
                "mixup needs two different classes, got {a} twice"
            )));
        }
        if a >= classes || b >= classes {
            return Err(Error::invalid(format!("class pair ({a}, {b}) out of range for {classes} classes")));
        }
        Ok(())
    }
}

/// `[t/T, sin(π 2^k t/T), cos(π 2^k t/T) for k < freqs]`
pub fn time_embedding(t: usize, steps: usize, freqs: usize) -> Vec<f64> {
    let u = t as f64 / steps as f64;
    let mut out = Vec::with_capacity(1 + 2 * freqs);
    out.push(u);
    for k in 0..freqs {
        let w = PI * f64::from(1u32 << k.min(30)) * u;
        out.push(w.sin());
        out.push(w.cos());
    }
    out
}

/// Noise-prediction network plus everything needed to sample from it.
///
/// Data are standardized with `data_mean` and a single `data_scale` before
/// diffusion and mapped back after sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    pub net: MlpModel,
    pub schedule: DiffusionSchedule,
    pub data_dim: usize,
    pub classes: usize,
    pub time_freqs: usize,
    pub data_mean: Vec<f64>,
    pub data_scale: f64,
}

impl DenoiserModel {
    pub fn new(
        data_dim: usize,
        classes: usize,
        hidden: &[usize],
        time_freqs: usize,
        schedule: DiffusionSchedule,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut widths = vec![data_dim + classes + 1 + 2 * time_freqs];
        widths.extend_from_slice(hidden);
        widths.push(data_dim);
        let net = MlpModel::new(&widths, Activation::SmoothRelu, Activation::Identity, rng)?;
        Ok(Self {
            net,
            schedule,
            data_dim,
            classes,
            time_freqs,
            data_mean: vec![0.0; data_dim],
            data_scale: 1.0,
        })
    }

    pub fn input_width(&self) -> usize {
        self.data_dim + self.classes + 1 + 2 * self.time_freqs
    }

    /// Checks that a deserialized model is self-consistent.
    pub fn validate(&self) -> Result<()> {
        if self.net.input_width() != self.input_width() || self.net.feature_dim() != self.data_dim {
            return Err(Error::config("denoiser network does not match its data/class/time widths"));
        }
        if self.data_mean.len() != self.data_dim || !(self.data_scale > 0.0) {
            return Err(Error::config("denoiser normalization is inconsistent"));
        }
        Ok(())
    }

    /// Network input rows `[x_t | label | embed(t)]`.
    pub fn assemble_input(&self, x_t: &RealMatrix, labels: &RealMatrix, ts: &[usize]) -> Result<RealMatrix> {
        let n = x_t.nrows();
        if x_t.ncols() != self.data_dim || labels.ncols() != self.classes || labels.nrows() != n || ts.len() != n {
            return Err(Error::invalid("denoiser input pieces have inconsistent shapes"));
        }
        let mut input = RealMatrix::zeros(n, self.input_width());
        let steps = self.schedule.steps();
        for i in 0..n {
            for j in 0..self.data_dim {
                input[(i, j)] = x_t[(i, j)];
            }
            for c in 0..self.classes {
                input[(i, self.data_dim + c)] = labels[(i, c)];
            }
            let off = self.data_dim + self.classes;
            for (k, v) in time_embedding(ts[i], steps, self.time_freqs).into_iter().enumerate() {
                input[(i, off + k)] = v;
            }
        }
        Ok(input)
    }

    pub fn predict_noise(&self, x_t: &RealMatrix, labels: &RealMatrix, ts: &[usize]) -> Result<RealMatrix> {
        self.net.predict(&self.assemble_input(x_t, labels, ts)?)
    }

    pub fn normalize(&self, x: &RealMatrix) -> RealMatrix {
        RealMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.data_mean[j]) / self.data_scale)
    }

    pub fn denormalize(&self, x: &RealMatrix) -> RealMatrix {
        RealMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * self.data_scale + self.data_mean[j])
    }
}

/// Mean squared noise-prediction error and its parameter gradient.
pub fn denoising_loss(
    model: &DenoiserModel,
    x_t: &RealMatrix,
    labels: &RealMatrix,
    ts: &[usize],
    eps: &RealMatrix,
) -> Result<(f64, GradientTape)> {
    let input = model.assemble_input(x_t, labels, ts)?;
    let (pred, cache) = model.net.forward(&input)?;
    let diff = pred - eps;
    let count = diff.len() as f64;
    let loss = diff.norm_squared() / count;
    let tape = model.net.backward(&cache, &(diff * (2.0 / count)))?;
    Ok((loss, tape))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DdpmConfig {
    pub hidden: Vec<usize>,
    pub time_freqs: usize,
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for DdpmConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128, 128],
            time_freqs: 8,
            iterations: 4000,
            batch: 128,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DenoiserTraining {
    pub model: DenoiserModel,
    /// Loss on a fixed held-out noise batch before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean training loss per block of iterations.
    pub curve: Vec<f64>,
}

struct NoisedBatch {
    x_t: RealMatrix,
    labels: RealMatrix,
    ts: Vec<usize>,
    eps: RealMatrix,
}

fn noised_batch(
    model: &DenoiserModel,
    x0: &RealMatrix,
    one_hot: &RealMatrix,
    size: usize,
    rng: &mut Rng,
) -> Result<NoisedBatch> {
    let rows: Vec<usize> = (0..size).map(|_| rng.below(x0.nrows())).collect();
    let x = select_rows(x0, &rows);
    let labels = select_rows(one_hot, &rows);
    let steps = model.schedule.steps();
    let ts: Vec<usize> = (0..size).map(|_| 1 + rng.below(steps)).collect();
    let eps = RealMatrix::from_fn(size, model.data_dim, |_, _| rng.normal());
    let mut x_t = RealMatrix::zeros(size, model.data_dim);
    for (i, &t) in ts.iter().enumerate() {
        let xi = x.rows(i, 1).into_owned();
        let ei = eps.rows(i, 1).into_owned();
        x_t.set_row(i, &forward_noise(&xi, t, &ei, &model.schedule)?.row(0));
    }
    Ok(NoisedBatch { x_t, labels, ts, eps })
}

/// Fits a class-conditional noise predictor on ID data with Adam.
pub fn train_denoiser(
    dataset: &LabeledDataset,
    schedule: &DiffusionSchedule,
    config: &DdpmConfig,
    rng: &mut Rng,
) -> Result<DenoiserTraining> {
    if config.batch == 0 || config.iterations == 0 {
        return Err(Error::config("denoiser batch and iteration counts must be positive"));
    }
    let labels = dataset.class_labels()?;
    let classes = dataset.num_classes();
    let d = dataset.dims();
    let mut model = DenoiserModel::new(d, classes, &config.hidden, config.time_freqs, schedule.clone(), &mut rng.split(0))?;

    model.data_mean = dataset.mean();
    let var = dataset
        .features
        .column_iter()
        .zip(&model.data_mean)
        .map(|(c, m)| c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / c.len() as f64)
        .sum::<f64>()
        / d as f64;
    model.data_scale = if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 };

    let x0 = model.normalize(&dataset.features);
    let one_hot = RealMatrix::from_fn(labels.len(), classes, |i, c| if labels[i] == c { 1.0 } else { 0.0 });

    let held_out = noised_batch(&model, &x0, &one_hot, 1024, &mut rng.split(1))?;
    let eval = |m: &DenoiserModel| -> Result<f64> {
        Ok(denoising_loss(m, &held_out.x_t, &held_out.labels, &held_out.ts, &held_out.eps)?.0)
    };
    let initial_loss = eval(&model)?;

    let mut stream = rng.split(2);
    let mut opt = Adam::new(config.lr)?;
    let block = (config.iterations / 50).max(1);
    let mut curve = Vec::new();
    let mut running = 0.0;
    let mut last_good = model.clone();
    for it in 0..config.iterations {
        let b = noised_batch(&model, &x0, &one_hot, config.batch, &mut stream)?;
        let (loss, tape) = denoising_loss(&model, &b.x_t, &b.labels, &b.ts, &b.eps)?;
        if !loss.is_finite() || !tape.is_finite() {
            return Err(Error::Diverged {
                step: it,
                last_good: Box::new(Checkpoint::Denoiser(last_good)),
            });
        }
        if it % block == 0 {
            last_good = model.clone();
        }
        model.net.apply_gradients(&tape, &mut opt)?;
        running += loss;
        if (it + 1) % block == 0 {
            curve.push(running / block as f64);
            running = 0.0;
        }
    }
    let final_loss = eval(&model)?;
    log::info!("denoiser held-out loss {initial_loss:.4} -> {final_loss:.4}");
    Ok(DenoiserTraining {
        model,
        initial_loss,
        final_loss,
        curve,
    })
}

/// Ancestral sampling from `x_T ~ N(0, I)` down to `x_0`, conditioning every
/// step on `label`. Chain `i` draws its noise from its own split stream.
pub fn sample(denoiser: &DenoiserModel, label: &LabelVector, n: usize, rng: &mut Rng) -> Result<RealMatrix> {
    if label.0.len() != denoiser.classes {
        return Err(Error::Dimension {
            context: "label vector",
            expected: denoiser.classes,
            actual: label.0.len(),
        });
    }
    let d = denoiser.data_dim;
    let base = Rng::new(rng.next_u64());
    let mut chains: Vec<Rng> = (0..n as u64).map(|i| base.split(i)).collect();
    let labels = RealMatrix::from_fn(n, denoiser.classes, |_, c| label.0[c]);
    let mut x = RealMatrix::zeros(n, d);
    for (i, chain) in chains.iter_mut().enumerate() {
        for j in 0..d {
            x[(i, j)] = chain.normal();
        }
    }
    let schedule = &denoiser.schedule;
    for t in (1..=schedule.steps()).rev() {
        let ts = vec![t; n];
        let eps_hat = denoiser.predict_noise(&x, &labels, &ts)?;
        let alpha = schedule.alpha(t)?;
        let coef = schedule.beta(t)? / (1.0 - schedule.alpha_bar(t)?).sqrt();
        let sigma = schedule.posterior_variance(t)?.sqrt();
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        for (i, chain) in chains.iter_mut().enumerate() {
            for j in 0..d {
                let mean = inv_sqrt_alpha * (x[(i, j)] - coef * eps_hat[(i, j)]);
                x[(i, j)] = if t > 1 { mean + sigma * chain.normal() } else { mean };
            }
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("diffusion samples".into()));
    }
    Ok(denoiser.denormalize(&x))
}

/// `n` samples conditioned on the sum of the one-hot vectors of `class_a`
/// and `class_b`, or on their convex combination when `interpolation` is set.
pub fn generate_label_mixup(
    denoiser: &DenoiserModel,
    class_a: usize,
    class_b: usize,
    n: usize,
    interpolation: Option<f64>,
    rng: &mut Rng,
) -> Result<RealMatrix> {
    let label = match interpolation {
        None => LabelVector::mixup(class_a, class_b, denoiser.classes)?,
        Some(lambda) => LabelVector::interpolate(class_a, class_b, lambda, denoiser.classes)?,
    };
    sample(denoiser, &label, n, rng)
}
