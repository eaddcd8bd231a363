use oodkit::checkpoint::Checkpoint;
use oodkit::classifier::{train_classifier, Classifier, TrainConfig};
use oodkit::config::ExperimentConfig;
use oodkit::data::{circle_means, gaussian_mixture_id, gaussian_noise_ood, held_out_cluster_ood};
use oodkit::eval::auroc;
use oodkit::experiment::{build_benchmark, evaluate, fit_classifier};
use oodkit::losses::{HeadSettings, LossKind};
use oodkit::scores::ScoreKind;
use oodkit::{Error, Rng};

#[test]
fn default_benchmark_is_learnable_by_every_head() {
    let mut cfg = ExperimentConfig::default();
    let bench = build_benchmark(&cfg).unwrap();
    for kind in LossKind::ALL {
        cfg.loss_kind = kind;
        let out = fit_classifier(&cfg, &bench.train, None).unwrap();
        let first = out.epochs.first().unwrap().loss;
        let last = out.epochs.last().unwrap().loss;
        assert!(last < first, "{kind}: {first} -> {last}");
        let acc = out.classifier.closed_set_accuracy(&bench.test).unwrap();
        assert!(acc >= 0.95, "{kind}: accuracy {acc}");
    }
}

#[test]
fn fixed_seed_reproduces_parameters() {
    let cfg = ExperimentConfig { loss_kind: LossKind::ArcFace, train_epochs: 5, ..ExperimentConfig::default() };
    let bench = build_benchmark(&cfg).unwrap();
    let a = fit_classifier(&cfg, &bench.train, Some(&bench.ood_sets[0])).unwrap();
    let b = fit_classifier(&cfg, &bench.train, Some(&bench.ood_sets[0])).unwrap();
    assert_eq!(a.classifier, b.classifier);
    assert_eq!(a.epochs, b.epochs);
}

#[test]
fn evaluation_has_one_row_per_set_and_score() {
    let cfg = ExperimentConfig { train_epochs: 3, ..ExperimentConfig::default() };
    let bench = build_benchmark(&cfg).unwrap();
    let c = fit_classifier(&cfg, &bench.train, None).unwrap().classifier;
    let kinds = [ScoreKind::Msp, ScoreKind::Energy { temperature: 1.0 }, ScoreKind::Mahalanobis, ScoreKind::MaxCosine];
    let (report, curves) = evaluate(&c, &bench, &kinds, 0.95, false, 0).unwrap();
    assert_eq!(report.rows.len(), 12);
    assert_eq!(curves.len(), 12);
    let n_val = bench.val.len() as f64;
    assert!(report.rows.iter().all(|r| r.tpr_at_tau >= 0.95 - 1.0 / n_val));
    assert!(report.rows.iter().all(|r| (0.0..=1.0).contains(&r.auroc)));
}

#[test]
fn clusters_far_away_and_between_classes() {
    let means = circle_means(4, 2, 4.0);
    let train = gaussian_mixture_id(&means, 0.5, 300, &mut Rng::new(1)).unwrap();
    let test = gaussian_mixture_id(&means, 0.5, 200, &mut Rng::new(2)).unwrap();
    let c = Classifier::new(2, &[64, 64, 16], LossKind::Softmax, 4, HeadSettings::default(), &mut Rng::new(3)).unwrap();
    let c = train_classifier(c, &train, None, &TrainConfig::default(), &mut Rng::new(4)).unwrap().classifier;
    let stats = c.fit_stats(&train).unwrap();
    let id = c.scores(&test.features, ScoreKind::Mahalanobis, Some(&stats)).unwrap();

    let far = held_out_cluster_ood(&[vec![30.0, 30.0]], &means, 0.5, 300, &mut Rng::new(5)).unwrap();
    let far_auc = auroc(&id, &c.scores(&far.features, ScoreKind::Mahalanobis, Some(&stats)).unwrap()).unwrap();
    assert!(far_auc > 0.99, "far cluster AUROC {far_auc}");

    // halfway between classes 0 and 1: hard but not hopeless
    let mid = held_out_cluster_ood(&[vec![2.0, 2.0]], &means, 0.5, 300, &mut Rng::new(6)).unwrap();
    let mid_auc = auroc(&id, &c.scores(&mid.features, ScoreKind::Mahalanobis, Some(&stats)).unwrap()).unwrap();
    assert!(mid_auc > 0.5 && mid_auc < 1.0, "midpoint AUROC {mid_auc}");

    // broad noise is scored far below the ID median
    let noise = gaussian_noise_ood(&[0.0, 0.0], 8.0, 300, &mut Rng::new(7)).unwrap();
    let mut ns = c.scores(&noise.features, ScoreKind::Mahalanobis, Some(&stats)).unwrap();
    let mut is = id.clone();
    ns.sort_by(|a, b| a.partial_cmp(b).unwrap());
    is.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let noise_mean = ns.iter().sum::<f64>() / ns.len() as f64;
    assert!(noise_mean < is[is.len() / 2]);
}

#[test]
fn divergence_returns_the_last_good_model() {
    let cfg = ExperimentConfig { train_lr: 1e6, train_momentum: 0.0, train_epochs: 3, ..ExperimentConfig::default() };
    let bench = build_benchmark(&cfg).unwrap();
    match fit_classifier(&cfg, &bench.train, None) {
        Err(Error::Diverged { last_good, .. }) => {
            let c = last_good.into_classifier().unwrap();
            assert!(c.encoder.layers().iter().all(|l| l.weight.iter().all(|v| v.is_finite())));
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.epochs.len())),
    }
}

#[test]
fn checkpoint_files_round_trip() {
    let cfg = ExperimentConfig { train_epochs: 2, loss_kind: LossKind::ScaledCosine, ..ExperimentConfig::default() };
    let bench = build_benchmark(&cfg).unwrap();
    let c = fit_classifier(&cfg, &bench.train, None).unwrap().classifier;
    let dir = std::env::temp_dir().join(format!("oodkit-ck-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.ckpt");
    Checkpoint::Classifier(c.clone()).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap().into_classifier().unwrap();
    let diff = back.head.weight.clone() - &c.head.weight;
    assert!(diff.abs().max() < 1e-5);
    assert_eq!(back.head.scale, c.head.scale);
    std::fs::remove_dir_all(&dir).unwrap();
}
