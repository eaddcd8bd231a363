//! Acceptance suite for the whole toolkit. Prints one PASS/FAIL line per
//! criterion, with indented detail lines underneath, then one line for the
//! score ranking property, and exits nonzero when any of them fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::process::ExitCode;
use std::time::Instant;

use oodkit::classifier::{train_classifier, Classifier, TrainConfig};
use oodkit::data::{gaussian_mixture_id, gaussian_noise_ood};
use oodkit::diffusion::{forward_noise, generate_label_mixup, make_schedule, sample, train_denoiser, DdpmConfig, LabelVector};
use oodkit::eval::{aupr, auroc, brute_force_auroc, Positive};
use oodkit::experiment::{build_benchmark, evaluate, fit_denoiser, generate_mixup_set, mixup_budget, run_classifiers, run_pipeline};
use oodkit::losses::{
    adacos_scale, arcface_loss, cosface_loss, cosine_logits, softmax_ce, sphereface_loss, HeadSettings, LossKind, MetricHead,
};
use oodkit::scores::{energy_score, ScoreKind};
use oodkit::{Checkpoint, ExperimentConfig, RealMatrix, Rng};

const GRADIENT_POINTS: usize = 20;
const GRADIENT_TOL: f64 = 1e-4;
const IDENTITY_TOL: f64 = 1e-10;
const ADACOS_TEN: f64 = 3.107;
const ADACOS_TOL: f64 = 1e-3;
const AUROC_TOL: f64 = 1e-12;
const METRIC_INSTANCES: usize = 200;
const MARGINAL_DRAWS: usize = 10_000;
const RECOVERY_SAMPLES: usize = 5_000;
const RECOVERY_MEAN_TOL: f64 = 0.1;
const RECOVERY_COV_TOL: f64 = 0.2;
const MIXUP_SAMPLES: usize = 2_000;
const SEEDS: [u64; 3] = [0, 1, 2];
const OE_AUROC_FLOOR: f64 = 0.95;
const ACCURACY_DROP: f64 = 0.02;

struct Outcome {
    pass: bool,
    details: Vec<String>,
}

impl Outcome {
    fn new() -> Self {
        Outcome {
            pass: true,
            details: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, line: String) {
        self.pass &= ok;
        self.details.push(format!("{} {line}", if ok { "ok  " } else { "MISS" }));
    }

    fn note(&mut self, line: String) {
        self.details.push(format!("     {line}"));
    }
}

fn gradients() -> Outcome {
    let mut out = Outcome::new();
    let mut rng = Rng::new(101);
    for kind in LossKind::ALL {
        let worst = (0..GRADIENT_POINTS)
            .map(|_| common::head_gradient_error(kind, None, &mut rng))
            .fold(0.0, f64::max);
        out.check(worst < GRADIENT_TOL, format!("{:<13} worst relative error {worst:.2e} over {GRADIENT_POINTS} points", kind.as_str()));
    }
    let worst = (0..GRADIENT_POINTS)
        .map(|_| common::denoiser_gradient_error(&mut rng))
        .fold(0.0, f64::max);
    out.check(worst < GRADIENT_TOL, format!("denoiser MSE  worst relative error {worst:.2e} over {GRADIENT_POINTS} points"));
    out
}

fn fixed_head(kind: LossKind, weight: &RealMatrix, margin: f64, scale: f64) -> MetricHead {
    MetricHead {
        weight: weight.clone(),
        bias: nalgebra::DVector::zeros(weight.ncols()),
        kind,
        margin,
        scale,
        scale_learnable: false,
    }
}

fn reductions() -> Outcome {
    let mut out = Outcome::new();
    let mut rng = Rng::new(202);
    let (mut cos_gap, mut arc_gap, mut sphere_gap) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let z = common::random_matrix(8, 5, &mut rng) * 2.0;
        let w = common::random_matrix(5, 4, &mut rng);
        let labels: Vec<usize> = (0..8).map(|_| rng.below(4)).collect();
        let s = rng.uniform_in(1.0, 30.0);

        let plain_head = fixed_head(LossKind::ScaledCosine, &w, 0.0, s);
        let plain = softmax_ce(&(cosine_logits(&z, &plain_head).unwrap() * s), &labels).unwrap().loss;
        let cos = cosface_loss(&z, &fixed_head(LossKind::CosFace, &w, 0.0, s), &labels).unwrap().loss;
        let arc = arcface_loss(&z, &fixed_head(LossKind::ArcFace, &w, 0.0, s), &labels).unwrap().loss;
        cos_gap = cos_gap.max((cos - plain).abs());
        arc_gap = arc_gap.max((arc - plain).abs());

        let sphere_head = fixed_head(LossKind::SphereFace, &w, 1.0, 1.0);
        let mut logits = cosine_logits(&z, &sphere_head).unwrap();
        for (i, mut row) in logits.row_iter_mut().enumerate() {
            row *= z.row(i).norm();
        }
        let expected = softmax_ce(&logits, &labels).unwrap().loss;
        sphere_gap = sphere_gap.max((sphereface_loss(&z, &sphere_head, &labels).unwrap().loss - expected).abs());
    }
    out.check(cos_gap <= IDENTITY_TOL, format!("cosface(m=0) vs fixed-scale cosine softmax: max gap {cos_gap:.1e}"));
    out.check(arc_gap <= IDENTITY_TOL, format!("arcface(m=0) vs fixed-scale cosine softmax: max gap {arc_gap:.1e}"));
    out.check(sphere_gap <= IDENTITY_TOL, format!("sphereface(m=1) vs softmax over |z|cos: max gap {sphere_gap:.1e}"));
    let s10 = adacos_scale(10).unwrap();
    out.check((s10 - ADACOS_TEN).abs() <= ADACOS_TOL, format!("adacos_scale(10) = {s10:.6}"));
    out
}

/// Scores drawn from a small integer grid so that ties are common.
fn tied_scores(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.below(12) as f64 * 0.5 - 2.0).collect()
}

/// Precision-recall area by counting hits at every distinct threshold.
fn aupr_exhaustive(pos: &[f64], neg: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = pos.iter().chain(neg).copied().collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut prev_tp = 0usize;
    let mut area = 0.0;
    for t in thresholds {
        let tp = pos.iter().filter(|&&s| s >= t).count();
        let fp = neg.iter().filter(|&&s| s >= t).count();
        area += (tp - prev_tp) as f64 * (tp as f64 / (tp + fp) as f64);
        prev_tp = tp;
    }
    area / pos.len() as f64
}

fn metric_oracles() -> Outcome {
    let mut out = Outcome::new();
    let mut rng = Rng::new(303);
    let mut worst = 0.0f64;
    for i in 0..METRIC_INSTANCES {
        let (n, m) = (1 + rng.below(80), 1 + rng.below(80));
        let (id, ood) = if i % 2 == 0 {
            (tied_scores(n, &mut rng), tied_scores(m, &mut rng))
        } else {
            ((0..n).map(|_| rng.normal()).collect(), (0..m).map(|_| rng.normal() - 0.5).collect())
        };
        worst = worst.max((auroc(&id, &ood).unwrap() - brute_force_auroc(&id, &ood).unwrap()).abs());
    }
    out.check(worst <= AUROC_TOL, format!("auroc vs brute force over {METRIC_INSTANCES} instances: max gap {worst:.1e}"));

    let mut mismatches = 0;
    for i in 0..METRIC_INSTANCES {
        let n = 1 + rng.below(30);
        let m = 1 + rng.below(50 - n);
        let (id, ood) = if i % 2 == 0 {
            (tied_scores(n, &mut rng), tied_scores(m, &mut rng))
        } else {
            ((0..n).map(|_| rng.normal()).collect(), (0..m).map(|_| rng.normal()).collect())
        };
        let neg = |v: &[f64]| v.iter().map(|s| -s).collect::<Vec<_>>();
        if aupr(&id, &ood, Positive::Id).unwrap() != aupr_exhaustive(&id, &ood) {
            mismatches += 1;
        }
        if aupr(&id, &ood, Positive::Ood).unwrap() != aupr_exhaustive(&neg(&ood), &neg(&id)) {
            mismatches += 1;
        }
    }
    out.check(mismatches == 0, format!("AUPR-In/Out vs exhaustive thresholds (n+m <= 50): {mismatches} inexact of {}", 2 * METRIC_INSTANCES));

    // Integer logits and shifts that keep both energies inside one binade.
    let mut inexact = 0;
    for _ in 0..METRIC_INSTANCES {
        let logits: Vec<f64> = (0..2 + rng.below(5)).map(|_| (16 + rng.below(9)) as f64).collect();
        let c = rng.below(7) as f64;
        let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
        if energy_score(&shifted, 1.0) != energy_score(&logits, 1.0) + c {
            inexact += 1;
        }
    }
    out.check(inexact == 0, format!("energy(logits + c) == energy(logits) + c: {inexact} inexact of {METRIC_INSTANCES}"));
    out
}

fn mean_and_cov(x: &RealMatrix) -> (Vec<f64>, RealMatrix) {
    let n = x.nrows() as f64;
    let mean: Vec<f64> = x.column_iter().map(|c| c.sum() / n).collect();
    let centred = RealMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred / (n - 1.0);
    (mean, cov)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn diffusion_fidelity() -> Outcome {
    let mut out = Outcome::new();
    let schedule = make_schedule(200, 1e-4, 0.04).unwrap();
    let x0 = RealMatrix::from_row_slice(1, 2, &[1.5, -0.5]);
    let mut rng = Rng::new(404);
    for t in [1, 20, 60, 120, 200] {
        let ab = schedule.alpha_bar(t).unwrap();
        let mut draws = RealMatrix::zeros(MARGINAL_DRAWS, 2);
        for i in 0..MARGINAL_DRAWS {
            let eps = RealMatrix::from_fn(1, 2, |_, _| rng.normal());
            draws.set_row(i, &forward_noise(&x0, t, &eps, &schedule).unwrap().row(0));
        }
        let (mean, cov) = mean_and_cov(&draws);
        let var = 1.0 - ab;
        let se_mean = (var / MARGINAL_DRAWS as f64).sqrt();
        let se_var = var * (2.0 / (MARGINAL_DRAWS - 1) as f64).sqrt();
        let z_mean = (0..2).map(|j| (mean[j] - ab.sqrt() * x0[(0, j)]).abs() / se_mean).fold(0.0, f64::max);
        let z_var = (0..2).map(|j| (cov[(j, j)] - var).abs() / se_var).fold(0.0, f64::max);
        out.check(z_mean < 3.0 && z_var < 3.0, format!("forward marginal t={t:<3} mean {z_mean:.2} SE, variance {z_var:.2} SE"));
    }

    let mu = [1.0, -2.0];
    let data = gaussian_mixture_id(&[mu.to_vec()], 0.1f64.sqrt(), 2000, &mut Rng::new(1)).unwrap();
    let trained = train_denoiser(&data, &schedule, &DdpmConfig::default(), &mut Rng::new(2)).unwrap();
    let x = sample(&trained.model, &LabelVector::one_hot(0, 1).unwrap(), RECOVERY_SAMPLES, &mut Rng::new(3)).unwrap();
    let (mean, cov) = mean_and_cov(&x);
    let truth = RealMatrix::identity(2, 2) * 0.1;
    let mean_err = distance(&mean, &mu);
    let cov_err = (&cov - &truth).norm() / truth.norm();
    out.check(mean_err < RECOVERY_MEAN_TOL, format!("single Gaussian: generated mean off by {mean_err:.4}"));
    out.check(cov_err < RECOVERY_COV_TOL, format!("single Gaussian: covariance relative Frobenius error {cov_err:.3}"));
    out
}

fn mixup_geometry() -> Outcome {
    let mut out = Outcome::new();
    let means = [vec![-3.0, 0.0], vec![3.0, 0.0]];
    let train = gaussian_mixture_id(&means, 0.5, 1000, &mut Rng::new(4)).unwrap();
    let test = gaussian_mixture_id(&means, 0.5, 500, &mut Rng::new(8)).unwrap();
    let schedule = make_schedule(200, 1e-4, 0.04).unwrap();
    let trained = train_denoiser(&train, &schedule, &DdpmConfig::default(), &mut Rng::new(5)).unwrap();
    let mix = generate_label_mixup(&trained.model, 0, 1, MIXUP_SAMPLES, None, &mut Rng::new(7)).unwrap();
    let (mean, _) = mean_and_cov(&mix);
    let midpoint = [0.0, 0.0];
    let to_mid = distance(&mean, &midpoint);
    let to_a = distance(&mean, &means[0]);
    let to_b = distance(&mean, &means[1]);
    out.check(
        to_mid < to_a.min(to_b),
        format!("[1,1] sample mean ({:.3}, {:.3}): {to_mid:.3} from midpoint, {to_a:.3} / {to_b:.3} from class means", mean[0], mean[1]),
    );

    let c = Classifier::new(2, &[64, 64, 16], LossKind::Softmax, 2, HeadSettings::default(), &mut Rng::new(9)).unwrap();
    let c = train_classifier(c, &train, None, &TrainConfig::default(), &mut Rng::new(10)).unwrap().classifier;
    let mean_msp = |x: &RealMatrix| {
        let s = c.scores(x, ScoreKind::Msp, None).unwrap();
        s.iter().sum::<f64>() / s.len() as f64
    };
    let (on_mix, on_test) = (mean_msp(&mix), mean_msp(&test.features));
    out.check(on_mix < on_test, format!("baseline mean MSP: {on_mix:.4} on mixup samples vs {on_test:.4} on ID test"));
    out
}

struct SeedRun {
    auroc: Vec<(f64, f64)>,
    accuracy: (f64, f64),
}

/// Per loss kind, the baseline and outlier-exposed results for every seed.
fn benchmark_runs() -> (Vec<String>, Vec<Vec<SeedRun>>) {
    let mut names = Vec::new();
    let mut runs: Vec<Vec<SeedRun>> = LossKind::ALL.iter().map(|_| Vec::new()).collect();
    for seed in SEEDS {
        let mut cfg = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        let bench = build_benchmark(&cfg).unwrap();
        names = bench.ood_sets.iter().map(|d| d.name.clone()).collect();
        let denoiser = fit_denoiser(&cfg, &bench.train).unwrap();
        let ddpm = Checkpoint::Denoiser(denoiser.model.clone()).rounded().unwrap().into_denoiser().unwrap();
        let mixup = generate_mixup_set(&cfg, &ddpm, &cfg.mixup_pairs(), mixup_budget(&cfg, bench.train.len())).unwrap();
        for (k, kind) in LossKind::ALL.into_iter().enumerate() {
            cfg.loss_kind = kind;
            let r = run_classifiers(&cfg, &bench, denoiser.clone(), mixup.clone()).unwrap();
            let auroc = r
                .baseline_report
                .rows
                .iter()
                .zip(&r.oe_report.rows)
                .map(|(b, o)| (b.auroc, o.auroc))
                .collect();
            let accuracy = (r.baseline_report.rows[0].closed_set_accuracy, r.oe_report.rows[0].closed_set_accuracy);
            runs[k].push(SeedRun { auroc, accuracy });
        }
    }
    (names, runs)
}

fn outlier_exposure_direction(names: &[String], runs: &[Vec<SeedRun>]) -> Outcome {
    let mut out = Outcome::new();
    let n = SEEDS.len() as f64;
    let (mut directional, mut floor, mut total, mut noise_total) = (0, 0, 0, 0);
    for (kind, seeds) in LossKind::ALL.iter().zip(runs) {
        for (j, name) in names.iter().enumerate() {
            let before = seeds.iter().map(|r| r.auroc[j].0).sum::<f64>() / n;
            let after = seeds.iter().map(|r| r.auroc[j].1).sum::<f64>() / n;
            let improves = after >= before;
            let is_noise = name.ends_with("noise");
            let high = !is_noise || after >= OE_AUROC_FLOOR;
            total += 1;
            directional += usize::from(improves);
            if is_noise {
                noise_total += 1;
                floor += usize::from(high);
            }
            let mut notes = Vec::new();
            if !improves {
                notes.push("OE below baseline".to_string());
            }
            if !high {
                notes.push(format!("below {OE_AUROC_FLOOR}"));
            }
            out.check(
                improves && high,
                format!("{:<13} {name:<17} AUROC {before:.4} -> {after:.4} {}", kind.as_str(), notes.join(", ")),
            );
        }
    }
    out.note(format!("OE >= baseline on {directional}/{total} suites; AUROC >= {OE_AUROC_FLOOR} after OE on {floor}/{noise_total} noise suites"));
    out
}

fn accuracy_impact(runs: &[Vec<SeedRun>]) -> Outcome {
    let mut out = Outcome::new();
    let n = SEEDS.len() as f64;
    for (kind, seeds) in LossKind::ALL.iter().zip(runs) {
        let before = seeds.iter().map(|r| r.accuracy.0).sum::<f64>() / n;
        let after = seeds.iter().map(|r| r.accuracy.1).sum::<f64>() / n;
        out.check(before - after <= ACCURACY_DROP, format!("{:<13} accuracy {before:.4} -> {after:.4}", kind.as_str()));
    }
    out
}

fn pipeline_csvs(cfg: &ExperimentConfig) -> Vec<u8> {
    let r = run_pipeline(cfg).unwrap();
    let mut bytes = Vec::new();
    r.baseline_report.write_csv(&mut bytes).unwrap();
    r.oe_report.write_csv(&mut bytes).unwrap();
    let bench = build_benchmark(cfg).unwrap();
    let (_, curves) = evaluate(&r.outlier_exposed, &bench, &cfg.score_kinds().unwrap(), cfg.eval_tpr, true, cfg.seed).unwrap();
    for curve in curves {
        curve.write_csv(&mut bytes).unwrap();
    }
    bytes
}

fn determinism() -> Outcome {
    let mut out = Outcome::new();
    let cfg = ExperimentConfig {
        seed: 7,
        loss_kind: LossKind::ArcFace,
        ..ExperimentConfig::default()
    };
    let (a, b) = (pipeline_csvs(&cfg), pipeline_csvs(&cfg));
    out.check(a == b, format!("two pipeline runs under seed 7: {} and {} bytes of metric CSV, identical: {}", a.len(), b.len(), a == b));
    out
}

/// Every score ranks held-out ID samples above far-away noise on a fitted
/// two-Gaussian toy, compared by medians.
fn ranking_sanity() -> Outcome {
    let mut out = Outcome::new();
    let means = [vec![-3.0, 0.0], vec![3.0, 0.0]];
    let train = gaussian_mixture_id(&means, 0.5, 200, &mut Rng::new(1)).unwrap();
    let test = gaussian_mixture_id(&means, 0.5, 100, &mut Rng::new(2)).unwrap();
    let far = gaussian_noise_ood(&[0.0, 25.0], 1.0, 200, &mut Rng::new(3)).unwrap();
    for kind in [LossKind::Softmax, LossKind::CosFace] {
        let c = Classifier::new(2, &[32, 32, 8], kind, 2, HeadSettings::default(), &mut Rng::new(4)).unwrap();
        let cfg = TrainConfig {
            epochs: 10,
            ..TrainConfig::default()
        };
        let c = train_classifier(c, &train, None, &cfg, &mut Rng::new(5)).unwrap().classifier;
        let stats = c.fit_stats(&train).unwrap();
        for score in [ScoreKind::Msp, ScoreKind::Energy { temperature: 1.0 }, ScoreKind::Mahalanobis, ScoreKind::MaxCosine] {
            let median = |x: &RealMatrix| {
                let mut s = c.scores(x, score, Some(&stats)).unwrap();
                s.sort_by(|a, b| a.partial_cmp(b).unwrap());
                s[s.len() / 2]
            };
            let (id, ood) = (median(&test.features), median(&far.features));
            out.check(id > ood, format!("{:<8} {:<11} median ID {id:.10} vs far noise {ood:.10}", kind.as_str(), score.name()));
        }
    }
    out
}

fn report(label: &str, title: &str, started: Instant, outcome: Outcome) -> bool {
    let verdict = if outcome.pass { "PASS" } else { "FAIL" };
    println!("{label} {verdict} {title} ({:.1}s)", started.elapsed().as_secs_f64());
    for line in &outcome.details {
        println!("    {line}");
    }
    outcome.pass
}

fn main() -> ExitCode {
    let mut all = true;
    let t = Instant::now();
    all &= report("criterion 1", "gradient correctness", t, gradients());
    let t = Instant::now();
    all &= report("criterion 2", "reduction identities", t, reductions());
    let t = Instant::now();
    all &= report("criterion 3", "metric oracles", t, metric_oracles());
    let t = Instant::now();
    all &= report("criterion 4", "diffusion fidelity", t, diffusion_fidelity());
    let t = Instant::now();
    all &= report("criterion 5", "label-mixup geometry", t, mixup_geometry());
    let t = Instant::now();
    let (names, runs) = benchmark_runs();
    all &= report("criterion 6", "outlier exposure raises AUROC on every suite", t, outlier_exposure_direction(&names, &runs));
    let t = Instant::now();
    all &= report("criterion 7", "outlier exposure keeps closed-set accuracy", t, accuracy_impact(&runs));
    let t = Instant::now();
    all &= report("criterion 8", "determinism of metric CSVs", t, determinism());
    let t = Instant::now();
    all &= report("property", "ranking sanity: ID scores above far-away noise", t, ranking_sanity());
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
