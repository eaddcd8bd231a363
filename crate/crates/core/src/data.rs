//! Synthetic in-distribution mixtures, OOD families and the dataset CSV format.
//!
//! CSV layout: header `f0,…,f{d−1},label`, one sample per line; label `-1`
//! marks out-of-distribution samples.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::nn::RealMatrix;
use crate::rng::Rng;

pub const OOD_LABEL: i64 = -1;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub features: RealMatrix,
    pub labels: Vec<i64>,
    pub name: String,
}

impl LabeledDataset {
    pub fn new(features: RealMatrix, labels: Vec<i64>, name: impl Into<String>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Dimension {
                context: "dataset labels",
                expected: features.nrows(),
                actual: labels.len(),
            });
        }
        if labels.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        if let Some(bad) = labels.iter().find(|&&l| l < OOD_LABEL) {
            return Err(Error::invalid(format!("invalid label {bad}")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features".into()));
        }
        Ok(Self {
            features,
            labels,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.ncols()
    }

    pub fn is_ood(&self) -> bool {
        self.labels.iter().all(|&l| l == OOD_LABEL)
    }

    /// Number of ID classes, `max label + 1`.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize)
    }

    /// Labels as class indices; fails on OOD samples.
    pub fn class_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .map(|&l| {
                usize::try_from(l).map_err(|_| Error::invalid(format!("dataset `{}` contains OOD samples", self.name)))
            })
            .collect()
    }

    pub fn select(&self, rows: &[usize], name: impl Into<String>) -> LabeledDataset {
        LabeledDataset {
            features: crate::nn::select_rows(&self.features, rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            name: name.into(),
        }
    }

    /// Vertical concatenation of datasets with the same dimensionality.
    pub fn concat(parts: &[LabeledDataset], name: impl Into<String>) -> Result<LabeledDataset> {
        let first = parts.first().ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        let d = first.dims();
        if let Some(p) = parts.iter().find(|p| p.dims() != d) {
            return Err(Error::Dimension {
                context: "dataset concatenation",
                expected: d,
                actual: p.dims(),
            });
        }
        let n: usize = parts.iter().map(LabeledDataset::len).sum();
        let mut features = RealMatrix::zeros(n, d);
        let mut labels = Vec::with_capacity(n);
        let mut row = 0;
        for p in parts {
            features.rows_mut(row, p.len()).copy_from(&p.features);
            labels.extend_from_slice(&p.labels);
            row += p.len();
        }
        LabeledDataset::new(features, labels, name)
    }

    /// Per-dimension `(min, max)`.
    pub fn bounding_box(&self) -> Vec<(f64, f64)> {
        self.features
            .column_iter()
            .map(|c| (c.min(), c.max()))
            .collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        self.features
            .column_iter()
            .map(|c| c.sum() / c.len() as f64)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.dims()).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for (i, label) in self.labels.iter().enumerate() {
            let mut record: Vec<String> = self.features.row(i).iter().map(|v| v.to_string()).collect();
            record.push(label.to_string());
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, name: impl Into<String>) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let cols = header.len();
        if cols < 2 || header.get(cols - 1) != Some("label") {
            return Err(Error::invalid("dataset CSV must end with a `label` column"));
        }
        for (j, h) in header.iter().take(cols - 1).enumerate() {
            if h != format!("f{j}") {
                return Err(Error::invalid(format!("unexpected CSV column `{h}`, wanted `f{j}`")));
            }
        }
        let d = cols - 1;
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            for j in 0..d {
                let v: f64 = rec[j]
                    .trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("row {}: bad number `{}`", line + 1, &rec[j])))?;
                values.push(v);
            }
            let l: i64 = rec[d]
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("row {}: bad label `{}`", line + 1, &rec[d])))?;
            labels.push(l);
        }
        let features = RealMatrix::from_row_slice(labels.len(), d, &values);
        LabeledDataset::new(features, labels, name)
    }
}

/// `classes` means evenly spaced on a circle of `radius` in the first two
/// coordinates; remaining coordinates are zero.
pub fn circle_means(classes: usize, dims: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|c| circle_point(dims, radius, std::f64::consts::TAU * c as f64 / classes as f64))
        .collect()
}

pub fn circle_point(dims: usize, radius: f64, angle: f64) -> Vec<f64> {
    let mut v = vec![0.0; dims.max(2)];
    v[0] = radius * angle.cos();
    v[1] = radius * angle.sin();
    v.truncate(dims.max(1));
    v
}

fn isotropic_samples(mean: &[f64], sigma: f64, n: usize, rng: &mut Rng) -> RealMatrix {
    let d = mean.len();
    let mut m = RealMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            m[(i, j)] = mean[j] + sigma * rng.normal();
        }
    }
    m
}

/// `n_per_class` draws from `N(μ_c, σ²I)` for each mean, labelled `0..C`.
pub fn gaussian_mixture_id(
    means: &[Vec<f64>],
    shared_sigma: f64,
    n_per_class: usize,
    rng: &mut Rng,
) -> Result<LabeledDataset> {
    if means.is_empty() || n_per_class == 0 {
        return Err(Error::invalid("mixture needs at least one class and one sample per class"));
    }
    if !(shared_sigma > 0.0) {
        return Err(Error::config(format!("sigma must be positive, got {shared_sigma}")));
    }
    let d = means[0].len();
    if means.iter().any(|m| m.len() != d) {
        return Err(Error::config("class means have different dimensionality"));
    }
    for (a, ma) in means.iter().enumerate() {
        if means[a + 1..].iter().any(|mb| mb == ma) {
            return Err(Error::config(format!("class mean {a} is duplicated")));
        }
    }
    let parts = means
        .iter()
        .enumerate()
        .map(|(c, mu)| {
            let x = isotropic_samples(mu, shared_sigma, n_per_class, rng);
            LabeledDataset::new(x, vec![c as i64; n_per_class], "id")
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::concat(&parts, "id")
}

/// Box `bounds` scaled by `factor` about its center.
pub fn inflate_bounds(bounds: &[(f64, f64)], factor: f64) -> Vec<(f64, f64)> {
    bounds
        .iter()
        .map(|&(lo, hi)| {
            let mid = 0.5 * (lo + hi);
            let half = 0.5 * (hi - lo) * factor;
            (mid - half, mid + half)
        })
        .collect()
}

pub fn uniform_noise_ood(bounds: &[(f64, f64)], n: usize, rng: &mut Rng) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(Error::invalid("requested an empty OOD set"));
    }
    if bounds.iter().any(|(lo, hi)| !(hi > lo)) {
        return Err(Error::config("uniform bounds must have lo < hi"));
    }
    let d = bounds.len();
    let mut m = RealMatrix::zeros(n, d);
    for i in 0..n {
        for (j, &(lo, hi)) in bounds.iter().enumerate() {
            m[(i, j)] = rng.uniform_in(lo, hi);
        }
    }
    LabeledDataset::new(m, vec![OOD_LABEL; n], "uniform_noise")
}

pub fn gaussian_noise_ood(mu: &[f64], sigma: f64, n: usize, rng: &mut Rng) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(Error::invalid("requested an empty OOD set"));
    }
    if !(sigma > 0.0) {
        return Err(Error::config(format!("sigma must be positive, got {sigma}")));
    }
    LabeledDataset::new(isotropic_samples(mu, sigma, n, rng), vec![OOD_LABEL; n], "gaussian_noise")
}

/// Samples split evenly across `means_ood`, each an isotropic Gaussian. Each
/// OOD mean must be at least `3σ` from every ID mean.
pub fn held_out_cluster_ood(
    means_ood: &[Vec<f64>],
    id_means: &[Vec<f64>],
    sigma: f64,
    n: usize,
    rng: &mut Rng,
) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(Error::invalid("requested an empty OOD set"));
    }
    if means_ood.is_empty() || !(sigma > 0.0) {
        return Err(Error::config("held-out clusters need means and a positive sigma"));
    }
    for mo in means_ood {
        for mi in id_means {
            let dist = mo.iter().zip(mi).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if dist < 3.0 * sigma {
                return Err(Error::config(format!(
                    "held-out mean {mo:?} is only {dist:.3} from ID mean {mi:?}"
                )));
            }
        }
    }
    let k = means_ood.len();
    let parts = means_ood
        .iter()
        .enumerate()
        .map(|(c, mu)| {
            let count = n / k + usize::from(c < n % k);
            LabeledDataset::new(isotropic_samples(mu, sigma, count, rng), vec![OOD_LABEL; count], "held_out_cluster")
        })
        .filter(|r| r.as_ref().map_or(true, |d| !d.is_empty()))
        .collect::<Result<Vec<_>>>()?;
    LabeledDataset::concat(&parts, "held_out_cluster")
}

/// Stratified split: each label keeps `round(val_fraction · n_label)` samples
/// for validation. Both halves keep the input order.
pub fn train_val_split(
    dataset: &LabeledDataset,
    val_fraction: f64,
    rng: &mut Rng,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::config(format!("validation fraction must be in (0, 1), got {val_fraction}")));
    }
    let mut by_label: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    let mut val = Vec::new();
    for idx in by_label.values_mut() {
        rng.shuffle(idx);
        let k = (val_fraction * idx.len() as f64).round() as usize;
        val.extend_from_slice(&idx[..k]);
    }
    val.sort_unstable();
    let mut in_val = vec![false; dataset.len()];
    for &i in &val {
        in_val[i] = true;
    }
    let train: Vec<usize> = (0..dataset.len()).filter(|&i| !in_val[i]).collect();
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("split left one side empty"));
    }
    Ok((
        dataset.select(&train, format!("{}_train", dataset.name)),
        dataset.select(&val, format!("{}_val", dataset.name)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_class_mean_converges() {
        let mut rng = Rng::new(0);
        let n = 4000;
        let d = gaussian_mixture_id(&[vec![0.0, 0.0]], 1.0, n, &mut rng).unwrap();
        for m in d.mean() {
            assert!(m.abs() < 3.0 / (n as f64).sqrt());
        }
        assert!(d.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn generators_are_deterministic() {
        let means = circle_means(4, 2, 4.0);
        let a = gaussian_mixture_id(&means, 0.5, 10, &mut Rng::new(3)).unwrap();
        let b = gaussian_mixture_id(&means, 0.5, 10, &mut Rng::new(3)).unwrap();
        assert_eq!(a, b);
        let box_ = [(-1.0, 1.0), (-1.0, 1.0)];
        assert_eq!(
            uniform_noise_ood(&box_, 5, &mut Rng::new(1)).unwrap(),
            uniform_noise_ood(&box_, 5, &mut Rng::new(1)).unwrap()
        );
    }

    #[test]
    fn uniform_noise_mean() {
        let n = 1000;
        let d = uniform_noise_ood(&[(-1.0, 1.0), (-1.0, 1.0)], n, &mut Rng::new(2)).unwrap();
        let sd = (1.0f64 / 3.0).sqrt();
        for m in d.mean() {
            assert!(m.abs() < 3.0 * sd / (n as f64).sqrt());
        }
        assert!(d.is_ood());
    }

    #[test]
    fn held_out_cluster_checks_distance_and_size() {
        let id = circle_means(4, 2, 4.0);
        let mut rng = Rng::new(0);
        assert!(held_out_cluster_ood(&[vec![4.0, 0.5]], &id, 0.5, 10, &mut rng).is_err());
        assert!(held_out_cluster_ood(&[vec![8.0, 8.0]], &id, 0.5, 0, &mut rng).is_err());
        let d = held_out_cluster_ood(&[vec![8.0, 8.0], vec![-8.0, 8.0]], &id, 0.5, 11, &mut rng).unwrap();
        assert_eq!(d.len(), 11);
        assert!(d.is_ood());
    }

    #[test]
    fn stratified_split() {
        let means = circle_means(4, 2, 4.0);
        let d = gaussian_mixture_id(&means, 0.5, 250, &mut Rng::new(0)).unwrap();
        let (train, val) = train_val_split(&d, 0.1, &mut Rng::new(1)).unwrap();
        for c in 0..4 {
            assert_eq!(val.labels.iter().filter(|&&l| l == c).count(), 25);
        }
        assert_eq!(train.len() + val.len(), d.len());
        let mut rows: Vec<Vec<u64>> = train
            .features
            .row_iter()
            .chain(val.features.row_iter())
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut orig: Vec<Vec<u64>> = d.features.row_iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        rows.sort();
        orig.sort();
        assert_eq!(rows, orig);
        let again = train_val_split(&d, 0.1, &mut Rng::new(1)).unwrap();
        assert_eq!(again.1, val);
        assert!(train_val_split(&d, 1.0, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let d = gaussian_mixture_id(&circle_means(3, 2, 1.0), 0.3, 4, &mut Rng::new(5)).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("f0,f1,label\n"));
        let back = LabeledDataset::read_csv(&buf[..], "id").unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn csv_rejects_bad_header() {
        assert!(LabeledDataset::read_csv("x,y,label\n1,2,0\n".as_bytes(), "d").is_err());
        assert!(LabeledDataset::read_csv("f0,f1\n1,2\n".as_bytes(), "d").is_err());
        assert!(LabeledDataset::read_csv("f0,label\n1,-2\n".as_bytes(), "d").is_err());
    }

    #[test]
    fn inflate_doubles_box() {
        assert_eq!(inflate_bounds(&[(-1.0, 3.0)], 2.0), vec![(-3.0, 5.0)]);
    }
}
