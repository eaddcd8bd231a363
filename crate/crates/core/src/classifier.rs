//! Encoder plus metric head, trained with or without outlier exposure.

use crate::checkpoint::Checkpoint;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::{cosine_logits, outlier_exposure_loss, HeadGrad, HeadSettings, LossKind, MetricHead, OutlierExposureValue};
use crate::nn::{select_rows, vstack, Activation, GradientTape, MlpModel, Optimizer, Parameterized, RealMatrix, Sgd};
use crate::rng::Rng;
use crate::scores::{energy_score, fit_gaussian_stats, mahalanobis_score, msp_score, softmax, GaussianStats, ScoreKind};

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub encoder: MlpModel,
    pub head: MetricHead,
}

/// Gradients for both parts of a [`Classifier`].
#[derive(Clone, Debug)]
pub struct ClassifierGrad {
    pub encoder: GradientTape,
    pub head: HeadGrad,
}

impl ClassifierGrad {
    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite()
            && self.head.weight.iter().all(|v| v.is_finite())
            && self.head.bias.iter().all(|v| v.is_finite())
            && self.head.scale.is_finite()
    }
}

impl Classifier {
    /// `widths` lists the hidden widths followed by the feature dimension.
    /// Hidden layers use ReLU and the feature layer is linear.
    pub fn new(
        input_dim: usize,
        widths: &[usize],
        kind: LossKind,
        classes: usize,
        settings: HeadSettings,
        rng: &mut Rng,
    ) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::config("the encoder needs at least a feature width"));
        }
        let mut all = vec![input_dim];
        all.extend_from_slice(widths);
        let encoder = MlpModel::new(&all, Activation::Relu, Activation::Identity, &mut rng.split(0))?;
        let head = MetricHead::new(kind, encoder.feature_dim(), classes, settings, &mut rng.split(1))?;
        Ok(Self { encoder, head })
    }

    pub fn from_parts(encoder: MlpModel, head: MetricHead) -> Result<Self> {
        if encoder.feature_dim() != head.feature_dim() {
            return Err(Error::Dimension {
                context: "encoder/head feature width",
                expected: head.feature_dim(),
                actual: encoder.feature_dim(),
            });
        }
        Ok(Self { encoder, head })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_width()
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    pub fn features(&self, x: &RealMatrix) -> Result<RealMatrix> {
        self.encoder.predict(x)
    }

    /// Margin-free logits used for prediction and scoring.
    pub fn logits(&self, x: &RealMatrix) -> Result<RealMatrix> {
        self.head.logits(&self.features(x)?)
    }

    pub fn predict(&self, x: &RealMatrix) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok(logits
            .row_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                    .0
            })
            .collect())
    }

    /// Fraction of `dataset` whose argmax class equals its label.
    pub fn closed_set_accuracy(&self, dataset: &LabeledDataset) -> Result<f64> {
        let labels = dataset.class_labels()?;
        let pred = self.predict(&dataset.features)?;
        let correct = pred.iter().zip(&labels).filter(|(p, y)| p == y).count();
        Ok(correct as f64 / labels.len() as f64)
    }

    /// Class-conditional Gaussians over the features of `dataset`.
    pub fn fit_stats(&self, dataset: &LabeledDataset) -> Result<GaussianStats> {
        fit_gaussian_stats(&self.features(&dataset.features)?, &dataset.class_labels()?)
    }

    /// One score per row of `x`; higher means more in-distribution.
    /// `stats` is required for [`ScoreKind::Mahalanobis`].
    pub fn scores(&self, x: &RealMatrix, kind: ScoreKind, stats: Option<&GaussianStats>) -> Result<Vec<f64>> {
        kind.validate()?;
        let z = self.features(x)?;
        match kind {
            ScoreKind::Msp => {
                let logits = self.head.logits(&z)?;
                logits
                    .row_iter()
                    .map(|r| msp_score(&softmax(&r.iter().copied().collect::<Vec<_>>())))
                    .collect()
            }
            ScoreKind::Energy { temperature } => {
                let logits = self.head.logits(&z)?;
                Ok(logits
                    .row_iter()
                    .map(|r| energy_score(&r.iter().copied().collect::<Vec<_>>(), temperature))
                    .collect())
            }
            ScoreKind::Mahalanobis => {
                let stats = stats.ok_or_else(|| Error::config("mahalanobis scoring needs fitted statistics"))?;
                Ok(z.row_iter()
                    .map(|r| mahalanobis_score(&r.iter().copied().collect::<Vec<_>>(), stats))
                    .collect())
            }
            ScoreKind::MaxCosine => {
                let cos = cosine_logits(&z, &self.head)?;
                Ok(cos.row_iter().map(|r| r.max()).collect())
            }
        }
    }

    /// Outlier-exposure objective on one batch and its gradients. With an
    /// empty `x_ood` this is the plain loss of the head.
    pub fn loss_and_grad(
        &self,
        x_id: &RealMatrix,
        labels: &[usize],
        x_ood: &RealMatrix,
        lambda: f64,
    ) -> Result<(OutlierExposureValue, ClassifierGrad)> {
        let n_id = x_id.nrows();
        let stacked = if x_ood.nrows() == 0 { x_id.clone() } else { vstack(x_id, x_ood) };
        let (z, cache) = self.encoder.forward(&stacked)?;
        let z_id = z.rows(0, n_id).into_owned();
        let z_ood = z.rows(n_id, z.nrows() - n_id).into_owned();
        let value = outlier_exposure_loss(&z_id, labels, &z_ood, &self.head, lambda)?;
        let grad_z = if x_ood.nrows() == 0 {
            value.grad_id_features.clone()
        } else {
            vstack(&value.grad_id_features, &value.grad_ood_features)
        };
        let encoder = self.encoder.backward(&cache, &grad_z)?;
        let grad = ClassifierGrad {
            encoder,
            head: value.grad_head.clone(),
        };
        Ok((value, grad))
    }

    pub fn apply_gradients(&mut self, grad: &ClassifierGrad, optimizer: &mut impl Optimizer) -> Result<()> {
        if !grad.encoder.mirrors(&self.encoder) {
            return Err(Error::invalid("gradient tape does not mirror the encoder"));
        }
        let mut grads = grad.encoder.grad_slices();
        grads.extend(grad.head.grad_slices(&self.head));
        let mut params = self.encoder.param_slices_mut();
        params.extend(self.head.param_slices_mut());
        optimizer.step(params, &grads)?;
        self.head.enforce_constraints();
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    /// Weight of the outlier term; ignored without an outlier set.
    pub lambda: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr: 0.01,
            momentum: 0.9,
            batch: 64,
            lambda: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub base_loss: f64,
    pub ood_term: f64,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub classifier: Classifier,
    pub epochs: Vec<EpochStats>,
}

/// Mini-batch SGD over `train`. When `ood` is given every ID batch is paired
/// with a slice of the (reshuffled) outlier set so that one epoch visits both
/// sets once.
pub fn train_classifier(
    mut classifier: Classifier,
    train: &LabeledDataset,
    ood: Option<&LabeledDataset>,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainOutcome> {
    if config.batch == 0 || config.epochs == 0 {
        return Err(Error::config("batch size and epoch count must be positive"));
    }
    if train.dims() != classifier.input_dim() {
        return Err(Error::Dimension {
            context: "training data",
            expected: classifier.input_dim(),
            actual: train.dims(),
        });
    }
    let labels = train.class_labels()?;
    if let Some(o) = ood {
        if !o.is_ood() {
            return Err(Error::invalid(format!("outlier set `{}` contains ID labels", o.name)));
        }
        if o.dims() != train.dims() {
            return Err(Error::Dimension {
                context: "outlier data",
                expected: train.dims(),
                actual: o.dims(),
            });
        }
    }
    let mut opt = Sgd::new(config.lr, config.momentum)?;
    let n = train.len();
    let batches = n.div_ceil(config.batch);
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut epoch_rng = rng.split(epoch as u64);
        let order = epoch_rng.permutation(n);
        let ood_order = ood.map(|o| epoch_rng.permutation(o.len()));
        let (mut loss_sum, mut base_sum, mut ood_sum) = (0.0, 0.0, 0.0);
        let epoch_start = classifier.clone();
        for b in 0..batches {
            let rows = &order[b * config.batch..((b + 1) * config.batch).min(n)];
            let x = select_rows(&train.features, rows);
            let y: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
            let x_ood = match (ood, &ood_order) {
                (Some(o), Some(perm)) => {
                    let lo = b * o.len() / batches;
                    let hi = (b + 1) * o.len() / batches;
                    select_rows(&o.features, &perm[lo..hi])
                }
                _ => RealMatrix::zeros(0, train.dims()),
            };
            let (value, grad) = classifier.loss_and_grad(&x, &y, &x_ood, config.lambda)?;
            if !value.loss.is_finite() || !grad.is_finite() {
                return Err(Error::Diverged {
                    step,
                    last_good: Box::new(Checkpoint::Classifier(epoch_start)),
                });
            }
            classifier.apply_gradients(&grad, &mut opt)?;
            loss_sum += value.loss;
            base_sum += value.base_loss;
            ood_sum += value.ood_term;
            step += 1;
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            loss: loss_sum / batches as f64,
            base_loss: base_sum / batches as f64,
            ood_term: ood_sum / batches as f64,
            train_accuracy: classifier.closed_set_accuracy(train)?,
        };
        log::debug!("epoch {} loss {:.4} acc {:.3}", stats.epoch, stats.loss, stats.train_accuracy);
        history.push(stats);
    }
    Ok(TrainOutcome {
        classifier,
        epochs: history,
    })
}
