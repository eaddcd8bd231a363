//! Fixtures shared by the benchmarks in `benches/`.

use oodkit::nn::RealMatrix;
use oodkit::Rng;

/// ID and OOD score vectors of `n` entries each, overlapping enough that
/// the ranking has real work to do.
pub fn score_pair(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = Rng::new(seed);
    let id = (0..n).map(|_| rng.normal() + 1.0).collect();
    let ood = (0..n).map(|_| rng.normal()).collect();
    (id, ood)
}

pub fn gaussian_batch(rows: usize, cols: usize, seed: u64) -> RealMatrix {
    let mut rng = Rng::new(seed);
    RealMatrix::from_fn(rows, cols, |_, _| rng.normal())
}

pub fn labels(n: usize, classes: usize, seed: u64) -> Vec<usize> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| rng.below(classes)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_deterministic() {
        assert_eq!(score_pair(10, 3), score_pair(10, 3));
        assert_eq!(gaussian_batch(4, 2, 1), gaussian_batch(4, 2, 1));
        assert!(labels(100, 4, 2).iter().all(|&c| c < 4));
    }
}
