//! Flat `section.key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default; unknown keys and repeated keys are errors.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::classifier::TrainConfig;
use crate::diffusion::{make_schedule, DdpmConfig, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::losses::{HeadSettings, LossKind};
use crate::scores::ScoreKind;

/// Where the ID class means come from.
#[derive(Clone, Debug, PartialEq)]
pub enum MeansSpec {
    /// Evenly spaced on a circle of `data.radius` in the first two dims.
    Circle,
    Explicit(Vec<Vec<f64>>),
}

/// Which class pairs feed the mixup generator.
#[derive(Clone, Debug, PartialEq)]
pub enum PairSpec {
    All,
    Explicit(Vec<(usize, usize)>),
}

/// Score kinds to evaluate. `Native` is MSP for softmax heads and max
/// cosine for the others.
#[derive(Clone, Debug, PartialEq)]
pub enum ScoreSpec {
    Native,
    All,
    List(Vec<String>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,

    pub data_classes: usize,
    pub data_dims: usize,
    pub data_means: MeansSpec,
    pub data_radius: f64,
    pub data_sigma: f64,
    pub data_n_per_class: usize,
    pub data_n_test_per_class: usize,
    pub data_val_fraction: f64,
    pub data_n_ood: usize,
    pub data_uniform_inflate: f64,
    pub data_gaussian_sigma: f64,
    pub data_held_out_radius: f64,

    pub model_widths: Vec<usize>,

    pub loss_kind: LossKind,
    pub loss_m: Option<f64>,
    pub loss_s: Option<f64>,
    pub loss_s_learnable: Option<bool>,

    pub oe_enabled: bool,
    pub oe_lambda: f64,
    pub oe_pairs: PairSpec,
    /// Total number of generated outliers; 0 means a quarter of the ID
    /// training set.
    pub oe_n_ood: usize,
    pub oe_interpolation: Option<f64>,

    pub ddpm_steps: usize,
    pub ddpm_beta_start: f64,
    pub ddpm_beta_end: f64,
    pub ddpm_iterations: usize,
    pub ddpm_batch: usize,
    pub ddpm_lr: f64,
    pub ddpm_hidden: Vec<usize>,
    pub ddpm_time_freqs: usize,

    pub train_epochs: usize,
    pub train_lr: f64,
    pub train_momentum: f64,
    pub train_batch: usize,

    pub eval_tpr: f64,
    pub eval_scores: ScoreSpec,
    pub eval_temperature: f64,

    pub paths_data_dir: String,
    pub paths_ood_train: String,
    pub paths_out_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let ddpm = DdpmConfig::default();
        let train = TrainConfig::default();
        Self {
            seed: 0,
            data_classes: 4,
            data_dims: 2,
            data_means: MeansSpec::Circle,
            data_radius: 4.0,
            data_sigma: 0.5,
            data_n_per_class: 500,
            data_n_test_per_class: 250,
            data_val_fraction: 0.1,
            data_n_ood: 1000,
            data_uniform_inflate: 2.0,
            data_gaussian_sigma: 2.0,
            data_held_out_radius: 8.0,
            model_widths: vec![64, 64, 16],
            loss_kind: LossKind::Softmax,
            loss_m: None,
            loss_s: None,
            loss_s_learnable: None,
            oe_enabled: false,
            oe_lambda: train.lambda,
            oe_pairs: PairSpec::All,
            oe_n_ood: 0,
            oe_interpolation: None,
            ddpm_steps: 200,
            ddpm_beta_start: 1e-4,
            ddpm_beta_end: 0.04,
            ddpm_iterations: ddpm.iterations,
            ddpm_batch: ddpm.batch,
            ddpm_lr: ddpm.lr,
            ddpm_hidden: ddpm.hidden,
            ddpm_time_freqs: ddpm.time_freqs,
            train_epochs: train.epochs,
            train_lr: train.lr,
            train_momentum: train.momentum,
            train_batch: train.batch,
            eval_tpr: 0.95,
            eval_scores: ScoreSpec::Native,
            eval_temperature: 1.0,
            paths_data_dir: String::new(),
            paths_ood_train: String::new(),
            paths_out_dir: "runs".into(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("cannot parse `{value}` for {key}")))
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn show_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), T::to_string)
}

fn show_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::config(format!("line {}: `{key}` set twice", lineno + 1)));
            }
            cfg.set(key, value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies a `key=value` override on top of the current values.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{assignment}` is not `key=value`")))?;
        self.set(key.trim(), value.trim())?;
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "data.classes" => self.data_classes = parse(key, value)?,
            "data.dims" => self.data_dims = parse(key, value)?,
            "data.means" => {
                self.data_means = if value == "circle" {
                    MeansSpec::Circle
                } else {
                    MeansSpec::Explicit(value.split(';').map(|m| parse_list(key, m)).collect::<Result<_>>()?)
                }
            }
            "data.radius" => self.data_radius = parse(key, value)?,
            "data.sigma" => self.data_sigma = parse(key, value)?,
            "data.n_per_class" => self.data_n_per_class = parse(key, value)?,
            "data.n_test_per_class" => self.data_n_test_per_class = parse(key, value)?,
            "data.val_fraction" => self.data_val_fraction = parse(key, value)?,
            "data.n_ood" => self.data_n_ood = parse(key, value)?,
            "data.uniform_inflate" => self.data_uniform_inflate = parse(key, value)?,
            "data.gaussian_sigma" => self.data_gaussian_sigma = parse(key, value)?,
            "data.held_out_radius" => self.data_held_out_radius = parse(key, value)?,
            "model.widths" => self.model_widths = parse_list(key, value)?,
            "loss.kind" => self.loss_kind = value.parse()?,
            "loss.m" => self.loss_m = parse_opt(key, value)?,
            "loss.s" => self.loss_s = parse_opt(key, value)?,
            "loss.s_learnable" => self.loss_s_learnable = parse_opt(key, value)?,
            "oe.enabled" => self.oe_enabled = parse(key, value)?,
            "oe.lambda" => self.oe_lambda = parse(key, value)?,
            "oe.pairs" => {
                self.oe_pairs = if value == "all" {
                    PairSpec::All
                } else {
                    PairSpec::Explicit(
                        value
                            .split(';')
                            .map(|p| {
                                let v: Vec<usize> = parse_list(key, p)?;
                                match v[..] {
                                    [a, b] => Ok((a, b)),
                                    _ => Err(Error::config(format!("oe.pairs entry `{p}` is not `a,b`"))),
                                }
                            })
                            .collect::<Result<_>>()?,
                    )
                }
            }
            "oe.n_ood" => self.oe_n_ood = parse(key, value)?,
            "oe.interpolation" => {
                self.oe_interpolation = if value == "none" { None } else { Some(parse(key, value)?) }
            }
            "ddpm.steps" => self.ddpm_steps = parse(key, value)?,
            "ddpm.beta_start" => self.ddpm_beta_start = parse(key, value)?,
            "ddpm.beta_end" => self.ddpm_beta_end = parse(key, value)?,
            "ddpm.iterations" => self.ddpm_iterations = parse(key, value)?,
            "ddpm.batch" => self.ddpm_batch = parse(key, value)?,
            "ddpm.lr" => self.ddpm_lr = parse(key, value)?,
            "ddpm.hidden" => self.ddpm_hidden = parse_list(key, value)?,
            "ddpm.time_freqs" => self.ddpm_time_freqs = parse(key, value)?,
            "train.epochs" => self.train_epochs = parse(key, value)?,
            "train.lr" => self.train_lr = parse(key, value)?,
            "train.momentum" => self.train_momentum = parse(key, value)?,
            "train.batch" => self.train_batch = parse(key, value)?,
            "eval.tpr" => self.eval_tpr = parse(key, value)?,
            "eval.scores" => {
                self.eval_scores = match value {
                    "native" => ScoreSpec::Native,
                    "all" => ScoreSpec::All,
                    _ => ScoreSpec::List(value.split(',').map(|s| s.trim().to_string()).collect()),
                }
            }
            "eval.temperature" => self.eval_temperature = parse(key, value)?,
            "paths.data_dir" => self.paths_data_dir = value.to_string(),
            "paths.ood_train" => self.paths_ood_train = value.to_string(),
            "paths.out_dir" => self.paths_out_dir = value.to_string(),
            _ => return Err(Error::config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let means = match &self.data_means {
            MeansSpec::Circle => "circle".to_string(),
            MeansSpec::Explicit(m) => m.iter().map(|v| show_list(v)).collect::<Vec<_>>().join(";"),
        };
        let pairs = match &self.oe_pairs {
            PairSpec::All => "all".to_string(),
            PairSpec::Explicit(p) => p.iter().map(|(a, b)| format!("{a},{b}")).collect::<Vec<_>>().join(";"),
        };
        let scores = match &self.eval_scores {
            ScoreSpec::Native => "native".to_string(),
            ScoreSpec::All => "all".to_string(),
            ScoreSpec::List(l) => l.join(","),
        };
        vec![
            ("seed", self.seed.to_string()),
            ("data.classes", self.data_classes.to_string()),
            ("data.dims", self.data_dims.to_string()),
            ("data.means", means),
            ("data.radius", self.data_radius.to_string()),
            ("data.sigma", self.data_sigma.to_string()),
            ("data.n_per_class", self.data_n_per_class.to_string()),
            ("data.n_test_per_class", self.data_n_test_per_class.to_string()),
            ("data.val_fraction", self.data_val_fraction.to_string()),
            ("data.n_ood", self.data_n_ood.to_string()),
            ("data.uniform_inflate", self.data_uniform_inflate.to_string()),
            ("data.gaussian_sigma", self.data_gaussian_sigma.to_string()),
            ("data.held_out_radius", self.data_held_out_radius.to_string()),
            ("model.widths", show_list(&self.model_widths)),
            ("loss.kind", self.loss_kind.to_string()),
            ("loss.m", show_opt(&self.loss_m)),
            ("loss.s", show_opt(&self.loss_s)),
            ("loss.s_learnable", show_opt(&self.loss_s_learnable)),
            ("oe.enabled", self.oe_enabled.to_string()),
            ("oe.lambda", self.oe_lambda.to_string()),
            ("oe.pairs", pairs),
            ("oe.n_ood", self.oe_n_ood.to_string()),
            ("oe.interpolation", self.oe_interpolation.map_or_else(|| "none".into(), |v| v.to_string())),
            ("ddpm.steps", self.ddpm_steps.to_string()),
            ("ddpm.beta_start", self.ddpm_beta_start.to_string()),
            ("ddpm.beta_end", self.ddpm_beta_end.to_string()),
            ("ddpm.iterations", self.ddpm_iterations.to_string()),
            ("ddpm.batch", self.ddpm_batch.to_string()),
            ("ddpm.lr", self.ddpm_lr.to_string()),
            ("ddpm.hidden", show_list(&self.ddpm_hidden)),
            ("ddpm.time_freqs", self.ddpm_time_freqs.to_string()),
            ("train.epochs", self.train_epochs.to_string()),
            ("train.lr", self.train_lr.to_string()),
            ("train.momentum", self.train_momentum.to_string()),
            ("train.batch", self.train_batch.to_string()),
            ("eval.tpr", self.eval_tpr.to_string()),
            ("eval.scores", scores),
            ("eval.temperature", self.eval_temperature.to_string()),
            ("paths.data_dir", self.paths_data_dir.clone()),
            ("paths.ood_train", self.paths_ood_train.clone()),
            ("paths.out_dir", self.paths_out_dir.clone()),
        ]
    }

    /// Serializes every key; [`ExperimentConfig::parse`] reads it back to an
    /// equal value.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_classes < 2 {
            return Err(Error::config("data.classes must be at least 2"));
        }
        if self.data_dims < 2 {
            return Err(Error::config("data.dims must be at least 2"));
        }
        if let MeansSpec::Explicit(m) = &self.data_means {
            if m.len() != self.data_classes || m.iter().any(|v| v.len() != self.data_dims) {
                return Err(Error::config("data.means must list data.classes vectors of data.dims values"));
            }
        }
        if self.data_n_per_class < 2 || self.data_n_test_per_class == 0 || self.data_n_ood == 0 {
            return Err(Error::config("sample counts must be positive (at least 2 per training class)"));
        }
        if self.model_widths.is_empty() || self.model_widths.contains(&0) {
            return Err(Error::config("model.widths must list positive widths"));
        }
        if let PairSpec::Explicit(p) = &self.oe_pairs {
            if p.is_empty() || p.iter().any(|&(a, b)| a == b || a >= self.data_classes || b >= self.data_classes) {
                return Err(Error::config("oe.pairs must name distinct in-range classes"));
            }
        }
        if let Some(l) = self.oe_interpolation {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::config("oe.interpolation must be in [0, 1]"));
            }
        }
        if !(self.oe_lambda >= 0.0) {
            return Err(Error::config("oe.lambda must be non-negative"));
        }
        if !(self.eval_tpr > 0.0 && self.eval_tpr < 1.0) {
            return Err(Error::config("eval.tpr must be in (0, 1)"));
        }
        if self.ddpm_hidden.is_empty() || self.ddpm_hidden.contains(&0) {
            return Err(Error::config("ddpm.hidden must list positive widths"));
        }
        self.score_kinds()?;
        self.schedule()?;
        crate::nn::Sgd::new(self.train_lr, self.train_momentum)?;
        Ok(())
    }

    pub fn head_settings(&self) -> HeadSettings {
        HeadSettings {
            margin: self.loss_m,
            scale: self.loss_s,
            scale_learnable: self.loss_s_learnable,
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.ddpm_steps, self.ddpm_beta_start, self.ddpm_beta_end)
    }

    pub fn ddpm_config(&self) -> DdpmConfig {
        DdpmConfig {
            hidden: self.ddpm_hidden.clone(),
            time_freqs: self.ddpm_time_freqs,
            iterations: self.ddpm_iterations,
            batch: self.ddpm_batch,
            lr: self.ddpm_lr,
        }
    }

    /// Resolves `eval.scores` for the configured loss kind.
    pub fn score_kinds(&self) -> Result<Vec<ScoreKind>> {
        let t = self.eval_temperature;
        match &self.eval_scores {
            ScoreSpec::Native => Ok(vec![ScoreKind::native_for(self.loss_kind)]),
            ScoreSpec::All => {
                let all = vec![ScoreKind::Msp, ScoreKind::Energy { temperature: t }, ScoreKind::Mahalanobis, ScoreKind::MaxCosine];
                for k in &all {
                    k.validate()?;
                }
                Ok(all)
            }
            ScoreSpec::List(names) => names.iter().map(|n| ScoreKind::parse_with_temperature(n, t)).collect(),
        }
    }

    /// Class pairs for mixup generation.
    pub fn mixup_pairs(&self) -> Vec<(usize, usize)> {
        match &self.oe_pairs {
            PairSpec::All => (0..self.data_classes)
                .flat_map(|a| (a + 1..self.data_classes).map(move |b| (a, b)))
                .collect(),
            PairSpec::Explicit(p) => p.clone(),
        }
    }
}

impl From<&ExperimentConfig> for TrainConfig {
    fn from(cfg: &ExperimentConfig) -> Self {
        TrainConfig {
            epochs: cfg.train_epochs,
            lr: cfg.train_lr,
            momentum: cfg.train_momentum,
            batch: cfg.train_batch,
            lambda: cfg.oe_lambda,
        }
    }
}
