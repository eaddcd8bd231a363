use std::cmp::Ordering;

use crate::error::{Error, Result};

fn check_scores(name: &str, scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::invalid(format!("{name} scores are empty")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid(format!("{name} scores contain NaN")));
    }
    Ok(())
}

/// Scores tagged with class membership, sorted descending.
fn sorted_desc(positive: &[f64], negative: &[f64]) -> Vec<(f64, bool)> {
    let mut all: Vec<(f64, bool)> = positive
        .iter()
        .map(|&s| (s, true))
        .chain(negative.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    all
}

/// Runs of equal scores in a descending list as `(positives, negatives)`.
fn tie_groups(sorted: &[(f64, bool)]) -> Vec<(usize, usize)> {
    let mut groups = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut p, mut n) = (0, 0);
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            if sorted[j].1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        groups.push((p, n));
        i = j;
    }
    groups
}

/// Probability that a random ID score exceeds a random OOD score, ties
/// counting one half. `O((n + m) log(n + m))`.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_scores("ID", id_scores)?;
    check_scores("OOD", ood_scores)?;
    let sorted = sorted_desc(id_scores, ood_scores);
    // walking from the top, every ID sample beats all OOD samples below its group
    // counted in half-wins so the statistic stays an exact integer
    let mut ood_above = 0u128;
    let mut half_wins = 0u128;
    let total_ood = ood_scores.len() as u128;
    for (p, n) in tie_groups(&sorted) {
        let (p, n) = (p as u128, n as u128);
        let below = total_ood - ood_above - n;
        half_wins += p * (2 * below + n);
        ood_above += n;
    }
    let pairs = 2 * id_scores.len() as u128 * total_ood;
    // Divide on the smaller side and complement the larger one, so that
    // swapping the roles of the two sets gives exactly `1 - auroc`.
    if 2 * half_wins > pairs {
        Ok(1.0 - (pairs - half_wins) as f64 / pairs as f64)
    } else {
        Ok(half_wins as f64 / pairs as f64)
    }
}

/// Literal pairwise mean of `[id > ood] + ½[id = ood]`.
pub fn brute_force_auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_scores("ID", id_scores)?;
    check_scores("OOD", ood_scores)?;
    let mut wins = 0.0;
    for &a in id_scores {
        for &b in ood_scores {
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (id_scores.len() as f64 * ood_scores.len() as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Positive {
    Id,
    Ood,
}

/// Area under the precision-recall curve, step-wise over grouped
/// thresholds: `Σ_k (R_k − R_{k−1}) P_k` with one threshold per distinct
/// score, accumulated as `Σ_k ΔTP_k · P_k` and divided by the number of
/// positives once. With `Positive::Ood` the scores are negated first.
pub fn aupr(id_scores: &[f64], ood_scores: &[f64], positive: Positive) -> Result<f64> {
    check_scores("ID", id_scores)?;
    check_scores("OOD", ood_scores)?;
    let (pos, neg): (Vec<f64>, Vec<f64>) = match positive {
        Positive::Id => (id_scores.to_vec(), ood_scores.to_vec()),
        Positive::Ood => (
            ood_scores.iter().map(|s| -s).collect(),
            id_scores.iter().map(|s| -s).collect(),
        ),
    };
    let total_pos = pos.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    for (p, n) in tie_groups(&sorted_desc(&pos, &neg)) {
        tp += p;
        fp += n;
        let precision = tp as f64 / (tp + fp) as f64;
        area += p as f64 * precision;
    }
    Ok(area / total_pos)
}

/// ROC curve with ID as the positive class: `(fpr, tpr)` points from
/// `(0, 0)` to `(1, 1)`, one per distinct score.
pub fn roc_curve(id_scores: &[f64], ood_scores: &[f64]) -> Result<Vec<(f64, f64)>> {
    check_scores("ID", id_scores)?;
    check_scores("OOD", ood_scores)?;
    let (np, nn) = (id_scores.len() as f64, ood_scores.len() as f64);
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (p, n) in tie_groups(&sorted_desc(id_scores, ood_scores)) {
        tp += p;
        fp += n;
        points.push((fp as f64 / nn, tp as f64 / np));
    }
    Ok(points)
}

/// Largest `τ` with `#{s ≥ τ} ≥ tpr · n` over the validation ID scores.
///
/// That is the `(⌊(1 − tpr) n⌋ + 1)`-th smallest score.
pub fn threshold_at_tpr(val_id_scores: &[f64], tpr: f64) -> Result<f64> {
    check_scores("validation", val_id_scores)?;
    if !(tpr > 0.0 && tpr < 1.0) {
        return Err(Error::config(format!("target TPR must be in (0, 1), got {tpr}")));
    }
    let n = val_id_scores.len();
    if n < 20 {
        log::warn!("thresholding on only {n} validation scores; the quantile is unstable");
    }
    let mut sorted = val_id_scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    // tolerance absorbs products like 0.05 * 20 = 1.0000000000000009
    let below = ((1.0 - tpr) * n as f64 + 1e-9).floor() as usize;
    Ok(sorted[below.min(n - 1)])
}

/// Fraction of scores at or above `tau`.
pub fn true_positive_rate(scores: &[f64], tau: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().filter(|&&s| detect(s, tau) == Detection::Id).count() as f64 / scores.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Detection {
    Id,
    Ood,
}

/// OOD iff `score < tau`.
pub fn detect(score: f64, tau: f64) -> Detection {
    if score < tau {
        Detection::Ood
    } else {
        Detection::Id
    }
}
