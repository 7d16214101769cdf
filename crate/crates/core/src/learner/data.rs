use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::LearnerError;
use crate::seed::{self, Purpose};

/// Row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize) -> Result<Self, LearnerError> {
        if labels.is_empty() {
            return Err(LearnerError::EmptyDataset);
        }
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(LearnerError::InvalidData(format!(
                "{} features for {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self {
            features,
            labels,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(rows.len() * self.dim);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            features.extend_from_slice(self.row(r));
            labels.push(self.labels[r]);
        }
        Dataset {
            features,
            labels,
            dim: self.dim,
        }
    }

    /// Seeded split into `(train, test)`; the test part gets
    /// `round(len * test_fraction)` rows.
    pub fn split(&self, test_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut seed::rng(seed, Purpose::Data, &[1]));
        let n_test = ((self.len() as f64) * test_fraction).round() as usize;
        let n_test = n_test.min(self.len() - 1);
        let (test, train) = order.split_at(n_test);
        (self.select(train), self.select(test))
    }

    /// CSV with a header row `x0,...,x{d-1},label`.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        let header: Vec<String> = (0..self.dim).map(|j| format!("x{j}")).collect();
        out.push_str(&header.join(","));
        out.push_str(",label\n");
        for i in 0..self.len() {
            for v in self.row(i) {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{}\n", self.labels[i]));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), LearnerError> {
        fs::write(path, self.to_csv_string()).map_err(|e| LearnerError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Gaussian blobs with unit variance, one center per class, centers at
/// pairwise distance at least `separation`. Labels are balanced.
pub fn synth_dataset(
    seed: u64,
    n: usize,
    dim: usize,
    classes: usize,
    separation: f64,
) -> Result<Dataset, LearnerError> {
    if n == 0 || dim == 0 || classes == 0 {
        return Err(LearnerError::InvalidData(
            "n, d and classes must be positive".into(),
        ));
    }
    let mut rng = seed::rng(seed, Purpose::Synthetic, &[]);
    let centers = blob_centers(&mut rng, dim, classes, separation);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut features = Vec::with_capacity(n * dim);
    for &label in &labels {
        for &c in &centers[label] {
            let noise: f64 = StandardNormal.sample(&mut rng);
            features.push(c + noise);
        }
    }
    Dataset::new(features, labels, dim)
}

fn blob_centers(rng: &mut impl Rng, dim: usize, classes: usize, separation: f64) -> Vec<Vec<f64>> {
    let mut radius = separation.max(1e-9);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut failures = 0;
    while centers.len() < classes {
        let candidate: Vec<f64> = (0..dim)
            .map(|_| rng.random_range(-radius..radius))
            .collect();
        let fits = centers.iter().all(|c| {
            let d2: f64 = c.iter().zip(&candidate).map(|(a, b)| (a - b).powi(2)).sum();
            d2.sqrt() >= separation
        });
        if fits {
            centers.push(candidate);
            failures = 0;
        } else {
            failures += 1;
            if failures > 100 {
                radius *= 1.5;
                failures = 0;
            }
        }
    }
    centers
}

/// Parses `d` numeric feature columns followed by one integer label column.
/// The first row is a header when none of its fields parse as numbers.
pub fn load_csv(path: &Path) -> Result<Dataset, LearnerError> {
    let text = fs::read_to_string(path).map_err(|e| LearnerError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<Dataset, LearnerError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut dim: Option<usize> = None;
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| LearnerError::Parse {
            line: e.position().map_or(idx + 1, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(idx + 1, |p| p.line() as usize);
        if record.iter().all(str::is_empty) {
            continue;
        }
        if idx == 0 && record.iter().all(|f| f.parse::<f64>().is_err()) {
            dim = Some(record.len().saturating_sub(1));
            continue;
        }
        if record.len() < 2 {
            return Err(LearnerError::Parse {
                line,
                message: "need at least one feature and a label".into(),
            });
        }
        let d = *dim.get_or_insert(record.len() - 1);
        if record.len() != d + 1 {
            return Err(LearnerError::Parse {
                line,
                message: format!("expected {} columns, found {}", d + 1, record.len()),
            });
        }
        for (col, field) in record.iter().take(d).enumerate() {
            let v: f64 = field.parse().map_err(|_| LearnerError::Parse {
                line,
                message: format!("column {}: '{field}' is not a number", col + 1),
            })?;
            if !v.is_finite() {
                return Err(LearnerError::Parse {
                    line,
                    message: format!("column {}: non-finite value", col + 1),
                });
            }
            features.push(v);
        }
        let label_field = &record[d];
        let label: usize = label_field.parse().map_err(|_| LearnerError::Parse {
            line,
            message: format!("label '{label_field}' is not a non-negative integer"),
        })?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(LearnerError::EmptyDataset);
    }
    Dataset::new(features, labels, dim.unwrap_or(0))
}

/// Permutation of `[0, n)` keyed by `(seed, epoch, worker)`.
pub fn shuffle_epoch(n: usize, seed: u64, epoch: u64, worker: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seed::rng(seed, Purpose::Shuffle, &[worker, epoch]));
    perm
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn synth_is_balanced_and_deterministic() {
        let d = synth_dataset(1, 100, 2, 2, 4.0).unwrap();
        assert_eq!(d.len(), 100);
        let ones = d.labels().iter().filter(|&&l| l == 1).count();
        assert!((40..=60).contains(&ones), "{ones}");
        assert_eq!(d, synth_dataset(1, 100, 2, 2, 4.0).unwrap());
        assert_ne!(d, synth_dataset(2, 100, 2, 2, 4.0).unwrap());
    }

    #[test]
    fn synth_single_class() {
        let d = synth_dataset(5, 20, 3, 1, 4.0).unwrap();
        assert!(d.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn synth_centers_respect_separation() {
        let mut rng = seed::rng(11, Purpose::Synthetic, &[]);
        let centers = blob_centers(&mut rng, 3, 6, 5.0);
        for i in 0..6 {
            for j in i + 1..6 {
                let d: f64 = centers[i]
                    .iter()
                    .zip(&centers[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(d >= 5.0);
            }
        }
    }

    #[test]
    fn csv_two_rows() {
        let d = parse_csv("0.1,0.2,0\n0.3,0.4,1").unwrap();
        assert_eq!((d.len(), d.dim()), (2, 2));
        assert_eq!(d.row(1), &[0.3, 0.4]);
        assert_eq!(d.labels(), &[0, 1]);
    }

    #[test]
    fn csv_header_is_skipped() {
        let d = parse_csv("a,b,label\n1,2,3\n").unwrap();
        assert_eq!((d.len(), d.dim(), d.label(0)), (1, 2, 3));
    }

    #[test]
    fn csv_errors() {
        let first = parse_csv("abc,0.2,0\n0.1,0.2,1\n").unwrap_err();
        assert!(matches!(first, LearnerError::Parse { line: 1, .. }), "{first}");
        let err = parse_csv("0.1,zz,0\n").unwrap_err();
        assert!(matches!(err, LearnerError::Parse { line: 1, .. }), "{err}");
        assert!(matches!(parse_csv(""), Err(LearnerError::EmptyDataset)));
        let ragged = parse_csv("1,2,0\n1,0\n").unwrap_err();
        assert!(matches!(ragged, LearnerError::Parse { line: 2, .. }));
    }

    #[test]
    fn csv_round_trip_via_file() {
        let d = synth_dataset(3, 30, 4, 3, 2.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        d.write_csv(&path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back.labels(), d.labels());
        for i in 0..d.len() {
            for (a, b) in d.row(i).iter().zip(back.row(i)) {
                assert!(((a - b) / a.abs().max(1e-300)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn shuffle_cases() {
        assert_eq!(shuffle_epoch(1, 9, 0, 0), vec![0]);
        assert_ne!(shuffle_epoch(1000, 7, 1, 0), shuffle_epoch(1000, 7, 2, 0));
        assert_ne!(shuffle_epoch(1000, 7, 1, 0), shuffle_epoch(1000, 7, 1, 1));
        assert_eq!(shuffle_epoch(50, 7, 3, 2), shuffle_epoch(50, 7, 3, 2));
    }

    proptest! {
        #[test]
        fn shuffle_is_a_bijection(n in 1usize..500, seed in any::<u64>(), epoch in 0u64..100) {
            let mut perm = shuffle_epoch(n, seed, epoch, 0);
            perm.sort_unstable();
            prop_assert_eq!(perm, (0..n).collect::<Vec<_>>());
        }
    }
}
