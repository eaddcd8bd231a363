//! The default benchmark and the end-to-end pipeline:
//! data, denoiser, mixup outliers, classifier training and evaluation.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::classifier::{train_classifier, Classifier, TrainConfig, TrainOutcome};
use crate::config::{ExperimentConfig, MeansSpec};
use crate::data::{
    circle_means, circle_point, gaussian_mixture_id, gaussian_noise_ood, held_out_cluster_ood, inflate_bounds,
    train_val_split, uniform_noise_ood, LabeledDataset, OOD_LABEL,
};
use crate::diffusion::{generate_label_mixup, train_denoiser, DenoiserModel, DenoiserTraining};
use crate::error::{Error, Result};
use crate::eval::{aupr, auroc, roc_curve, threshold_at_tpr, true_positive_rate, EvalReport, EvalRow, Positive};
use crate::rng::Rng;
use crate::scores::ScoreKind;

// Stream ids under the experiment seed. Fixed so that changing one stage
// never shifts the randomness of another.
const STREAM_ID_TRAIN: u64 = 1;
const STREAM_ID_TEST: u64 = 2;
const STREAM_SPLIT: u64 = 3;
const STREAM_UNIFORM: u64 = 4;
const STREAM_GAUSSIAN: u64 = 5;
const STREAM_HELD_OUT: u64 = 6;
const STREAM_DDPM: u64 = 7;
const STREAM_MIXUP: u64 = 8;
const STREAM_INIT: u64 = 9;
const STREAM_TRAIN: u64 = 10;

pub const ID_TRAIN_FILE: &str = "id_train.csv";
pub const ID_VAL_FILE: &str = "id_val.csv";
pub const ID_TEST_FILE: &str = "id_test.csv";

#[derive(Clone, Debug)]
pub struct Benchmark {
    pub means: Vec<Vec<f64>>,
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
    /// Evaluation outlier sets: Gaussian noise, uniform noise, held-out cluster.
    pub ood_sets: Vec<LabeledDataset>,
}

pub fn class_means(cfg: &ExperimentConfig) -> Vec<Vec<f64>> {
    match &cfg.data_means {
        MeansSpec::Circle => circle_means(cfg.data_classes, cfg.data_dims, cfg.data_radius),
        MeansSpec::Explicit(m) => m.clone(),
    }
}

pub fn build_benchmark(cfg: &ExperimentConfig) -> Result<Benchmark> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let means = class_means(cfg);
    let full = gaussian_mixture_id(&means, cfg.data_sigma, cfg.data_n_per_class, &mut root.split(STREAM_ID_TRAIN))?;
    let (train, val) = train_val_split(&full, cfg.data_val_fraction, &mut root.split(STREAM_SPLIT))?;
    let mut test = gaussian_mixture_id(&means, cfg.data_sigma, cfg.data_n_test_per_class, &mut root.split(STREAM_ID_TEST))?;
    test.name = "id_test".into();
    let (train, val) = (
        LabeledDataset { name: "id_train".into(), ..train },
        LabeledDataset { name: "id_val".into(), ..val },
    );

    let center = full.mean();
    let gaussian = gaussian_noise_ood(&center, cfg.data_gaussian_sigma, cfg.data_n_ood, &mut root.split(STREAM_GAUSSIAN))?;
    let bounds = inflate_bounds(&full.bounding_box(), cfg.data_uniform_inflate);
    let uniform = uniform_noise_ood(&bounds, cfg.data_n_ood, &mut root.split(STREAM_UNIFORM))?;
    let held_mean = circle_point(cfg.data_dims, cfg.data_held_out_radius, PI / cfg.data_classes as f64);
    let held = held_out_cluster_ood(&[held_mean], &means, cfg.data_sigma, cfg.data_n_ood, &mut root.split(STREAM_HELD_OUT))?;
    Ok(Benchmark {
        means,
        train,
        val,
        test,
        ood_sets: vec![gaussian, uniform, held],
    })
}

impl Benchmark {
    /// Writes the ID splits and every OOD set as CSV files into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let files = [(ID_TRAIN_FILE.to_string(), &self.train), (ID_VAL_FILE.to_string(), &self.val), (ID_TEST_FILE.to_string(), &self.test)];
        let ood = self.ood_sets.iter().map(|d| (format!("ood_{}.csv", d.name), d));
        for (name, ds) in files.into_iter().chain(ood) {
            let path = dir.join(name);
            ds.write_csv(fs::File::create(&path)?)?;
            written.push(path);
        }
        Ok(written)
    }

    /// Reads the splits written by [`Benchmark::write_dir`]. OOD sets are all
    /// `ood_*.csv` files, in name order.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<LabeledDataset> {
            let path = dir.join(name);
            let stem = name.trim_end_matches(".csv");
            LabeledDataset::read_csv(fs::File::open(&path)?, stem)
        };
        let train = read(ID_TRAIN_FILE)?;
        let val = read(ID_VAL_FILE)?;
        let test = read(ID_TEST_FILE)?;
        let mut names: Vec<String> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
            .filter(|n| n.starts_with("ood_") && n.ends_with(".csv"))
            .collect();
        names.sort();
        let ood_sets = names
            .iter()
            .map(|n| {
                let mut d = read(n)?;
                d.name = n.trim_start_matches("ood_").trim_end_matches(".csv").to_string();
                Ok(d)
            })
            .collect::<Result<Vec<_>>>()?;
        let classes = train.num_classes();
        let means = (0..classes)
            .map(|c| {
                let rows: Vec<usize> = (0..train.len()).filter(|&i| train.labels[i] == c as i64).collect();
                train.select(&rows, "class").mean()
            })
            .collect();
        Ok(Self {
            means,
            train,
            val,
            test,
            ood_sets,
        })
    }
}

pub fn fit_denoiser(cfg: &ExperimentConfig, train: &LabeledDataset) -> Result<DenoiserTraining> {
    let root = Rng::new(cfg.seed);
    train_denoiser(train, &cfg.schedule()?, &cfg.ddpm_config(), &mut root.split(STREAM_DDPM))
}

/// Number of outliers to generate: `oe.n_ood`, or a quarter of `n_train`.
pub fn mixup_budget(cfg: &ExperimentConfig, n_train: usize) -> usize {
    if cfg.oe_n_ood > 0 {
        cfg.oe_n_ood
    } else {
        (n_train / 4).max(1)
    }
}

/// Label-mixup outliers over the given class pairs, `total` samples split
/// as evenly as possible, labelled OOD.
pub fn generate_mixup_set(
    cfg: &ExperimentConfig,
    denoiser: &DenoiserModel,
    pairs: &[(usize, usize)],
    total: usize,
) -> Result<LabeledDataset> {
    if pairs.is_empty() || total == 0 {
        return Err(Error::invalid("mixup generation needs at least one pair and one sample"));
    }
    let root = Rng::new(cfg.seed).split(STREAM_MIXUP);
    let mut parts = Vec::new();
    for (k, &(a, b)) in pairs.iter().enumerate() {
        let n = total / pairs.len() + usize::from(k < total % pairs.len());
        if n == 0 {
            continue;
        }
        let x = generate_label_mixup(denoiser, a, b, n, cfg.oe_interpolation, &mut root.split(k as u64))?;
        parts.push(LabeledDataset::new(x, vec![OOD_LABEL; n], "mixup")?);
    }
    LabeledDataset::concat(&parts, "mixup")
}

/// Trains the configured classifier, using `ood` for outlier exposure if
/// given.
pub fn fit_classifier(cfg: &ExperimentConfig, train: &LabeledDataset, ood: Option<&LabeledDataset>) -> Result<TrainOutcome> {
    let root = Rng::new(cfg.seed);
    let classes = train.num_classes();
    let classifier = Classifier::new(
        train.dims(),
        &cfg.model_widths,
        cfg.loss_kind,
        classes,
        cfg.head_settings(),
        &mut root.split(STREAM_INIT),
    )?;
    train_classifier(classifier, train, ood, &TrainConfig::from(cfg), &mut root.split(STREAM_TRAIN))
}

/// ROC points of one (OOD set, score kind) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub ood_set: String,
    pub score_kind: String,
    pub points: Vec<(f64, f64)>,
}

impl RocCurve {
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["fpr", "tpr"])?;
        for (f, t) in &self.points {
            w.write_record([format!("{f:.6}"), format!("{t:.6}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Scores every OOD set with every requested score kind. The threshold
/// comes from the validation split, AUROC/AUPR from the test split.
pub fn evaluate(
    classifier: &Classifier,
    bench: &Benchmark,
    kinds: &[ScoreKind],
    tpr: f64,
    outlier_exposure: bool,
    seed: u64,
) -> Result<(EvalReport, Vec<RocCurve>)> {
    if bench.ood_sets.is_empty() {
        return Err(Error::invalid("evaluation needs at least one OOD set"));
    }
    for ds in [&bench.train, &bench.val, &bench.test].into_iter().chain(&bench.ood_sets) {
        if ds.dims() != classifier.input_dim() {
            return Err(Error::Dimension {
                context: "evaluation data vs checkpoint",
                expected: classifier.input_dim(),
                actual: ds.dims(),
            });
        }
    }
    let accuracy = classifier.closed_set_accuracy(&bench.test)?;
    let stats = if kinds.contains(&ScoreKind::Mahalanobis) {
        Some(classifier.fit_stats(&bench.train)?)
    } else {
        None
    };
    let mut report = EvalReport::default();
    let mut curves = Vec::new();
    for &kind in kinds {
        let val = classifier.scores(&bench.val.features, kind, stats.as_ref())?;
        let id = classifier.scores(&bench.test.features, kind, stats.as_ref())?;
        let tau = threshold_at_tpr(&val, tpr)?;
        let tpr_at_tau = true_positive_rate(&val, tau);
        for ood_set in &bench.ood_sets {
            let ood = classifier.scores(&ood_set.features, kind, stats.as_ref())?;
            report.rows.push(EvalRow {
                ood_set: ood_set.name.clone(),
                loss_kind: classifier.head.kind,
                score_kind: kind.name().to_string(),
                outlier_exposure,
                seed,
                auroc: auroc(&id, &ood)?,
                aupr_in: aupr(&id, &ood, Positive::Id)?,
                aupr_out: aupr(&id, &ood, Positive::Ood)?,
                tau,
                tpr_at_tau,
                closed_set_accuracy: accuracy,
            });
            curves.push(RocCurve {
                ood_set: ood_set.name.clone(),
                score_kind: kind.name().to_string(),
                points: roc_curve(&id, &ood)?,
            });
        }
    }
    Ok((report, curves))
}

/// Results of [`run_pipeline`].
#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub denoiser: DenoiserTraining,
    pub mixup: LabeledDataset,
    pub baseline: Classifier,
    pub outlier_exposed: Classifier,
    pub baseline_report: EvalReport,
    pub oe_report: EvalReport,
}

/// Data, denoiser, mixup outliers, then a baseline and an outlier-exposed
/// classifier, both evaluated on the benchmark OOD sets. Models are evaluated
/// after the same `f32` rounding a checkpoint applies.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineResult> {
    let bench = build_benchmark(cfg)?;
    let denoiser = fit_denoiser(cfg, &bench.train)?;
    let ddpm = Checkpoint::Denoiser(denoiser.model.clone()).rounded()?.into_denoiser()?;
    let mixup = generate_mixup_set(cfg, &ddpm, &cfg.mixup_pairs(), mixup_budget(cfg, bench.train.len()))?;
    run_classifiers(cfg, &bench, denoiser, mixup)
}

/// The classifier half of [`run_pipeline`] for an already generated
/// outlier set.
pub fn run_classifiers(
    cfg: &ExperimentConfig,
    bench: &Benchmark,
    denoiser: DenoiserTraining,
    mixup: LabeledDataset,
) -> Result<PipelineResult> {
    let kinds = cfg.score_kinds()?;
    let baseline = fit_classifier(cfg, &bench.train, None)?.classifier;
    let baseline = Checkpoint::Classifier(baseline).rounded()?.into_classifier()?;
    let oe = fit_classifier(cfg, &bench.train, Some(&mixup))?.classifier;
    let oe = Checkpoint::Classifier(oe).rounded()?.into_classifier()?;
    let (baseline_report, _) = evaluate(&baseline, bench, &kinds, cfg.eval_tpr, false, cfg.seed)?;
    let (oe_report, _) = evaluate(&oe, bench, &kinds, cfg.eval_tpr, true, cfg.seed)?;
    Ok(PipelineResult {
        denoiser,
        mixup,
        baseline,
        outlier_exposed: oe,
        baseline_report,
        oe_report,
    })
}
