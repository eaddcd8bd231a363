use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use oodkit::checkpoint::write_atomic;
use oodkit::classifier::EpochStats;
use oodkit::eval::{aggregate_reports, EvalReport, EVAL_HEADER};
use oodkit::experiment::{
    build_benchmark, evaluate, fit_classifier, fit_denoiser, generate_mixup_set, mixup_budget, Benchmark, ID_TRAIN_FILE,
};
use oodkit::{Checkpoint, Error, ExperimentConfig, LabeledDataset};

use crate::manifest::{manifest_path_for, RunRecorder};
use crate::CliError;

/// `--data`, else `paths.data_dir`.
fn data_dir(cfg: &ExperimentConfig, flag: Option<&Path>) -> Result<PathBuf> {
    let dir = match flag {
        Some(p) => p.to_path_buf(),
        None if !cfg.paths_data_dir.is_empty() => PathBuf::from(&cfg.paths_data_dir),
        None => return Err(CliError::Config("no data directory: pass --data or set paths.data_dir".into()).into()),
    };
    require(&dir)?;
    Ok(dir)
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(path.display().to_string()).into())
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_dataset(path: &Path) -> Result<LabeledDataset> {
    require(path)?;
    let name = path.file_stem().map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned());
    let name = name.trim_start_matches("ood_").to_string();
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    LabeledDataset::read_csv(file, name).with_context(|| format!("reading {}", path.display()))
}

fn dataset_bytes(ds: &LabeledDataset) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    ds.write_csv(&mut bytes)?;
    Ok(bytes)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    require(path)?;
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Saves the last finite parameters before reporting a divergence.
fn keep_last_good(err: Error, out: &Path) -> anyhow::Error {
    if let Error::Diverged { step, last_good } = &err {
        match ensure_parent(out).and_then(|_| Ok(last_good.save(out)?)) {
            Ok(()) => log::error!("diverged at step {step}; kept the last finite parameters in {}", out.display()),
            Err(e) => log::error!("diverged at step {step}; could not save the last finite parameters: {e:#}"),
        }
    }
    err.into()
}

pub fn make_data(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<()> {
    let dir = match out {
        Some(p) => p.to_path_buf(),
        None if !cfg.paths_data_dir.is_empty() => PathBuf::from(&cfg.paths_data_dir),
        None => Path::new(&cfg.paths_out_dir).join("data"),
    };
    let mut rec = RunRecorder::start("make-data", cfg);
    let bench = build_benchmark(cfg)?;
    for path in bench.write_dir(&dir).with_context(|| format!("writing datasets to {}", dir.display()))? {
        log::info!("wrote {}", path.display());
        rec.output(path);
    }
    rec.finish(&manifest_path_for(&dir, true))?;
    Ok(())
}

fn classifier_curve_csv(epochs: &[EpochStats]) -> String {
    let mut out = String::from("epoch,loss,base_loss,ood_term,train_accuracy\n");
    for e in epochs {
        out.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.loss, e.base_loss, e.ood_term, e.train_accuracy));
    }
    out
}

fn default_curve_path(out: &Path) -> PathBuf {
    out.with_extension("curve.csv")
}

pub fn train(cfg: &ExperimentConfig, data: Option<&Path>, ood: Option<&Path>, out: &Path, curve: Option<&Path>) -> Result<()> {
    let dir = data_dir(cfg, data)?;
    let train_set = read_dataset(&dir.join(ID_TRAIN_FILE))?;
    let outliers = if cfg.oe_enabled {
        let path = match ood {
            Some(p) => p.to_path_buf(),
            None if !cfg.paths_ood_train.is_empty() => PathBuf::from(&cfg.paths_ood_train),
            None => {
                return Err(CliError::Missing("oe.enabled is set but no outlier file was given (--ood or paths.ood_train)".into()).into())
            }
        };
        Some(read_dataset(&path)?)
    } else {
        if ood.is_some() {
            log::warn!("--ood is ignored because oe.enabled is false");
        }
        None
    };
    let mut rec = RunRecorder::start("train", cfg);
    let outcome = fit_classifier(cfg, &train_set, outliers.as_ref()).map_err(|e| keep_last_good(e, out))?;
    if let Some(last) = outcome.epochs.last() {
        log::info!("final epoch loss {:.4}, train accuracy {:.4}", last.loss, last.train_accuracy);
    }
    ensure_parent(out)?;
    Checkpoint::Classifier(outcome.classifier).save(out)?;
    rec.output(out);
    let curve = curve.map_or_else(|| default_curve_path(out), Path::to_path_buf);
    write_bytes(&curve, classifier_curve_csv(&outcome.epochs).as_bytes())?;
    rec.output(&curve);
    rec.finish(&manifest_path_for(out, false))?;
    Ok(())
}

pub fn train_ddpm(cfg: &ExperimentConfig, data: Option<&Path>, out: &Path, curve: Option<&Path>) -> Result<()> {
    let dir = data_dir(cfg, data)?;
    let train_set = read_dataset(&dir.join(ID_TRAIN_FILE))?;
    let mut rec = RunRecorder::start("train-ddpm", cfg);
    let trained = fit_denoiser(cfg, &train_set).map_err(|e| keep_last_good(e, out))?;
    ensure_parent(out)?;
    Checkpoint::Denoiser(trained.model).save(out)?;
    rec.output(out);

    let block = (cfg.ddpm_iterations / 50).max(1);
    let mut text = String::from("iteration,loss\n");
    for (k, loss) in trained.curve.iter().enumerate() {
        text.push_str(&format!("{},{loss}\n", (k + 1) * block));
    }
    let curve = curve.map_or_else(|| default_curve_path(out), Path::to_path_buf);
    write_bytes(&curve, text.as_bytes())?;
    rec.output(&curve);
    rec.finish(&manifest_path_for(out, false))?;
    Ok(())
}

fn parse_pair(text: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => {
            let a = a.parse().map_err(|_| CliError::Config(format!("bad class `{a}` in --classes")))?;
            let b = b.parse().map_err(|_| CliError::Config(format!("bad class `{b}` in --classes")))?;
            Ok((a, b))
        }
        _ => Err(CliError::Config(format!("--classes wants two classes `a,b`, got `{text}`")).into()),
    }
}

pub struct GenOodArgs<'a> {
    pub ddpm: &'a Path,
    pub classes: Option<&'a str>,
    pub n: Option<usize>,
    pub data: Option<&'a Path>,
    pub out: &'a Path,
}

pub fn gen_ood(cfg: &ExperimentConfig, args: GenOodArgs<'_>) -> Result<()> {
    let denoiser = load_checkpoint(args.ddpm)?.into_denoiser()?;
    let pairs = match args.classes {
        Some(text) => vec![parse_pair(text)?],
        None => cfg.mixup_pairs(),
    };
    if let Some(&(a, b)) = pairs.iter().find(|(a, b)| a.max(b) >= &denoiser.classes) {
        return Err(CliError::Config(format!("class pair ({a}, {b}) is out of range for a {}-class denoiser", denoiser.classes)).into());
    }
    let n = match args.n {
        Some(n) => n,
        None if cfg.oe_n_ood > 0 => cfg.oe_n_ood,
        None => {
            let dir = data_dir(cfg, args.data)
                .context("the outlier count defaults to a quarter of the training split; pass --n or set oe.n_ood otherwise")?;
            mixup_budget(cfg, read_dataset(&dir.join(ID_TRAIN_FILE))?.len())
        }
    };
    let mut rec = RunRecorder::start("gen-ood", cfg);
    let set = generate_mixup_set(cfg, &denoiser, &pairs, n)?;
    write_bytes(args.out, &dataset_bytes(&set)?)?;
    log::info!("wrote {} outliers over {} class pairs to {}", set.len(), pairs.len(), args.out.display());
    rec.output(args.out);
    rec.finish(&manifest_path_for(args.out, false))?;
    Ok(())
}

fn roc_dir(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "eval".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}_roc"))
}

pub fn eval(cfg: &ExperimentConfig, checkpoint: &Path, data: Option<&Path>, ood: &[PathBuf], out: &Path) -> Result<()> {
    let classifier = load_checkpoint(checkpoint)?.into_classifier()?;
    let dir = data_dir(cfg, data)?;
    let mut bench = Benchmark::read_dir(&dir).with_context(|| format!("reading datasets from {}", dir.display()))?;
    if !ood.is_empty() {
        bench.ood_sets = ood.iter().map(|p| read_dataset(p)).collect::<Result<_>>()?;
    }
    if bench.ood_sets.is_empty() {
        return Err(CliError::Missing(format!("no OOD sets: none in {} and no --ood given", dir.display())).into());
    }
    let kinds = cfg.score_kinds()?;
    let mut rec = RunRecorder::start("eval", cfg);
    let (report, curves) = evaluate(&classifier, &bench, &kinds, cfg.eval_tpr, cfg.oe_enabled, cfg.seed)?;
    let mut bytes = Vec::new();
    report.write_csv(&mut bytes)?;
    write_bytes(out, &bytes)?;
    rec.output(out);
    let rocs = roc_dir(out);
    for curve in &curves {
        let path = rocs.join(format!("roc_{}_{}.csv", curve.ood_set, curve.score_kind));
        let mut bytes = Vec::new();
        curve.write_csv(&mut bytes)?;
        write_bytes(&path, &bytes)?;
        rec.output(path);
    }
    for row in &report.rows {
        log::info!(
            "{} / {}: AUROC {:.4}  AUPR-In {:.4}  AUPR-Out {:.4}",
            row.ood_set,
            row.score_kind,
            row.auroc,
            row.aupr_in,
            row.aupr_out
        );
    }
    rec.finish(&manifest_path_for(out, false))?;
    Ok(())
}

fn is_eval_report(path: &Path) -> Result<bool> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().next() == Some(EVAL_HEADER.join(",").as_str()))
}

pub fn report(cfg: &ExperimentConfig, results: &Path, out: Option<&Path>) -> Result<()> {
    require(results)?;
    let mut files: Vec<PathBuf> = fs::read_dir(results)
        .with_context(|| format!("listing {}", results.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    let mut reports = Vec::new();
    for path in files {
        if !is_eval_report(&path)? {
            log::debug!("skipping {}: not an evaluation report", path.display());
            continue;
        }
        let file = fs::File::open(&path)?;
        reports.push(EvalReport::read_csv(file).with_context(|| format!("reading {}", path.display()))?);
    }
    if reports.len() < 2 {
        return Err(CliError::Missing(format!(
            "{} holds {} evaluation report(s); a baseline and an outlier-exposure run are needed",
            results.display(),
            reports.len()
        ))
        .into());
    }
    let mut rec = RunRecorder::start("report", cfg);
    let table = aggregate_reports(&reports);
    let dir = out.unwrap_or(results);
    fs::create_dir_all(dir)?;
    let long = dir.join("aggregate_long.csv");
    let wide = dir.join("aggregate_wide.csv");
    let mut bytes = Vec::new();
    table.write_long_csv(&mut bytes)?;
    write_bytes(&long, &bytes)?;
    let mut bytes = Vec::new();
    table.write_wide_csv(&mut bytes)?;
    write_bytes(&wide, &bytes)?;
    rec.output(&long);
    rec.output(&wide);
    rec.finish(&manifest_path_for(&dir.join("aggregate"), false))?;

    let incomplete: Vec<String> = table
        .rows
        .iter()
        .filter(|r| !r.is_complete())
        .map(|r| format!("{}/{}/{}", r.ood_set, r.loss_kind, r.score_kind))
        .collect();
    if incomplete.is_empty() {
        Ok(())
    } else {
        Err(CliError::Incomplete(incomplete.join(", ")).into())
    }
}
