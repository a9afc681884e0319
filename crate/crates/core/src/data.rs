//! Synthetic class-imbalanced multi-label data, feature augmentation and the
//! comma-separated dataset file format.
//!
//! Samples come from a Gaussian latent `z`. Each class thresholds a noisy
//! projection of `z` at the empirical quantile matching its prevalence, and
//! the observed features are a random linear mixing of `z` plus noise. Class
//! directions share a common component so labels co-occur.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(
        "class {class}: prevalence {prevalence} yields no positives among {n_samples} samples"
    )]
    UnreachablePrevalence {
        class: usize,
        prevalence: f64,
        n_samples: usize,
    },
    #[error("no header")]
    NoHeader,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dataset I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Binary `rows × classes` label matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMatrix {
    rows: usize,
    classes: usize,
    data: Vec<u8>,
}

impl LabelMatrix {
    pub fn new(rows: usize, classes: usize, data: Vec<u8>) -> Self {
        assert_eq!(rows * classes, data.len(), "label matrix size");
        assert!(data.iter().all(|&v| v <= 1), "labels must be binary");
        Self {
            rows,
            classes,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, row: usize, class: usize) -> u8 {
        self.data[row * self.classes + class]
    }

    pub fn row(&self, row: usize) -> &[u8] {
        &self.data[row * self.classes..(row + 1) * self.classes]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn column(&self, class: usize) -> Vec<u8> {
        (0..self.rows).map(|r| self.get(r, class)).collect()
    }

    pub fn select(&self, indices: &[usize]) -> LabelMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.classes);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        LabelMatrix::new(indices.len(), self.classes, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainPool,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::TrainPool => "train_pool",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train_pool" => Ok(Split::TrainPool),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split tag '{other}'")),
        }
    }
}

/// Class prevalences loosely following a chest X-ray multi-label profile.
pub const DEFAULT_PREVALENCE: [f64; 14] = [
    0.18, 0.12, 0.10, 0.056, 0.052, 0.047, 0.042, 0.030, 0.025, 0.022, 0.021, 0.015, 0.013, 0.002,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// Total samples, train pool plus test.
    pub n_samples: usize,
    pub n_test: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub prevalence: Vec<f64>,
    pub label_noise: f64,
    pub latent_dim: usize,
    /// Std of the noise added to each class score before thresholding.
    pub score_noise: f64,
    /// Std of the observation noise on the features.
    pub feature_noise: f64,
    /// Weight of the direction shared by all classes (0 = independent classes).
    pub shared_direction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_samples: 24_000,
            n_test: 4_000,
            n_features: 64,
            n_classes: 14,
            prevalence: DEFAULT_PREVALENCE.to_vec(),
            label_noise: 0.0,
            latent_dim: 16,
            score_noise: 0.3,
            feature_noise: 0.5,
            shared_direction: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if self.n_features == 0 || self.n_classes == 0 || self.latent_dim == 0 {
            return bad("n_features, n_classes and latent_dim must be positive".into());
        }
        if self.n_test >= self.n_samples {
            return bad(format!(
                "n_test ({}) must be below n_samples ({})",
                self.n_test, self.n_samples
            ));
        }
        if self.prevalence.len() != self.n_classes {
            return bad(format!(
                "prevalence has {} entries for {} classes",
                self.prevalence.len(),
                self.n_classes
            ));
        }
        for (class, &p) in self.prevalence.iter().enumerate() {
            if !(p > 0.0 && p < 1.0) {
                return bad(format!("prevalence[{class}] = {p} outside (0, 1)"));
            }
            if (p * self.n_samples as f64).round() < 1.0 {
                return Err(DataError::UnreachablePrevalence {
                    class,
                    prevalence: p,
                    n_samples: self.n_samples,
                });
            }
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return bad(format!(
                "label_noise = {} outside [0, 0.5)",
                self.label_noise
            ));
        }
        for (name, v) in [
            ("score_noise", self.score_noise),
            ("feature_noise", self.feature_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.shared_direction) {
            return bad(format!(
                "shared_direction = {} outside [0, 1]",
                self.shared_direction
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    n_features: usize,
    features: Vec<f64>,
    labels: LabelMatrix,
    splits: Vec<Split>,
}

impl Dataset {
    pub fn new(
        n_features: usize,
        features: Vec<f64>,
        labels: LabelMatrix,
        splits: Vec<Split>,
    ) -> Self {
        assert_eq!(features.len(), labels.rows() * n_features);
        assert_eq!(splits.len(), labels.rows());
        Self {
            n_features,
            features,
            labels,
            splits,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.labels.classes()
    }

    pub fn features(&self, row: usize) -> &[f64] {
        &self.features[row * self.n_features..(row + 1) * self.n_features]
    }

    pub fn labels(&self) -> &LabelMatrix {
        &self.labels
    }

    pub fn split(&self, row: usize) -> Split {
        self.splits[row]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    /// Feature rows `indices` as an `n × d` matrix.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.n_features);
        for &i in indices {
            data.extend_from_slice(self.features(i));
        }
        Tensor::matrix(indices.len(), self.n_features, data).expect("non-empty gather")
    }

    pub fn gather_labels(&self, indices: &[usize]) -> LabelMatrix {
        self.labels.select(indices)
    }

    /// Per-class fraction of positives among `indices`.
    pub fn prevalence(&self, indices: &[usize]) -> Vec<f64> {
        let mut counts = vec![0usize; self.n_classes()];
        for &i in indices {
            for (c, &y) in counts.iter_mut().zip(self.labels.row(i)) {
                *c += y as usize;
            }
        }
        counts
            .iter()
            .map(|&c| c as f64 / indices.len().max(1) as f64)
            .collect()
    }

    /// Per-feature standard deviation over `indices`.
    pub fn feature_std(&self, indices: &[usize]) -> Vec<f64> {
        let d = self.n_features;
        let n = indices.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for &i in indices {
            for (m, v) in mean.iter_mut().zip(self.features(i)) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for &i in indices {
            for ((s, v), m) in var.iter_mut().zip(self.features(i)).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        var.into_iter().map(f64::sqrt).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        let mut header: Vec<String> = (0..self.n_features).map(|j| format!("f{j}")).collect();
        header.extend((0..self.n_classes()).map(|k| format!("y{k}")));
        header.push("split".into());
        writeln!(out, "{}", header.join(","))?;
        let mut line = String::new();
        for row in 0..self.len() {
            line.clear();
            for v in self.features(row) {
                // `Display` for f64 prints the shortest string that round-trips.
                line.push_str(&format!("{v},"));
            }
            for y in self.labels.row(row) {
                line.push_str(&format!("{y},"));
            }
            line.push_str(&self.splits[row].to_string());
            writeln!(out, "{line}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut lines = text.lines().enumerate();
        let header = loop {
            match lines.next() {
                Some((_, l)) if l.trim().is_empty() => continue,
                Some((_, l)) => break l,
                None => return Err(DataError::NoHeader),
            }
        };
        let columns: Vec<&str> = header.split(',').collect();
        let n_features = columns.iter().filter(|c| c.starts_with('f')).count();
        let n_classes = columns.iter().filter(|c| c.starts_with('y')).count();
        let expected: Vec<String> = (0..n_features)
            .map(|j| format!("f{j}"))
            .chain((0..n_classes).map(|k| format!("y{k}")))
            .chain(std::iter::once("split".to_string()))
            .collect();
        if columns != expected || n_features == 0 || n_classes == 0 {
            return Err(DataError::Parse {
                line: 1,
                message: format!("unexpected header '{header}'"),
            });
        }
        let width = n_features + n_classes + 1;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut splits = Vec::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            if line.is_empty() {
                continue;
            }
            let err = |message: String| DataError::Parse {
                line: line_no,
                message,
            };
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != width {
                return Err(err(format!(
                    "expected {width} fields, found {}",
                    cells.len()
                )));
            }
            for cell in &cells[..n_features] {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| err(format!("bad feature value '{cell}'")))?;
                features.push(v);
            }
            for cell in &cells[n_features..n_features + n_classes] {
                match *cell {
                    "0" => labels.push(0),
                    "1" => labels.push(1),
                    other => return Err(err(format!("non-binary label '{other}'"))),
                }
            }
            splits.push(cells[width - 1].parse::<Split>().map_err(err)?);
        }
        let rows = splits.len();
        Ok(Dataset::new(
            n_features,
            features,
            LabelMatrix::new(rows, n_classes, labels),
            splits,
        ))
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Generates a dataset; a pure function of `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, d, k, m) = (
        spec.n_samples,
        spec.n_features,
        spec.n_classes,
        spec.latent_dim,
    );

    let shared = normal_vec(&mut rng, m);
    let class_dirs: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let own = normal_vec(&mut rng, m);
            let w: Vec<f64> = own
                .iter()
                .zip(&shared)
                .map(|(o, s)| {
                    spec.shared_direction.sqrt() * s + (1.0 - spec.shared_direction).sqrt() * o
                })
                .collect();
            let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            w.into_iter().map(|v| v / norm).collect()
        })
        .collect();
    let mixing: Vec<f64> = normal_vec(&mut rng, d * m)
        .into_iter()
        .map(|v| v / (m as f64).sqrt())
        .collect();

    let mut features = vec![0.0; n * d];
    let mut scores = vec![0.0; n * k];
    for i in 0..n {
        let z = normal_vec(&mut rng, m);
        for j in 0..d {
            let mix: f64 = mixing[j * m..(j + 1) * m]
                .iter()
                .zip(&z)
                .map(|(a, b)| a * b)
                .sum();
            let eps: f64 = StandardNormal.sample(&mut rng);
            features[i * d + j] = mix + spec.feature_noise * eps;
        }
        for (c, dir) in class_dirs.iter().enumerate() {
            let proj: f64 = dir.iter().zip(&z).map(|(a, b)| a * b).sum();
            let eps: f64 = StandardNormal.sample(&mut rng);
            scores[i * k + c] = proj + spec.score_noise * eps;
        }
    }

    let mut labels = vec![0u8; n * k];
    for (c, &prev) in spec.prevalence.iter().enumerate() {
        let positives = (prev * n as f64).round() as usize;
        let mut column: Vec<(f64, usize)> = (0..n).map(|i| (scores[i * k + c], i)).collect();
        column.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i) in &column[..positives] {
            labels[i * k + c] = 1;
        }
    }
    if spec.label_noise > 0.0 {
        for y in labels.iter_mut() {
            if rng.random::<f64>() < spec.label_noise {
                *y = 1 - *y;
            }
        }
    }

    let n_train = n - spec.n_test;
    let splits = (0..n)
        .map(|i| {
            if i < n_train {
                Split::TrainPool
            } else {
                Split::Test
            }
        })
        .collect();
    Ok(Dataset::new(
        d,
        features,
        LabelMatrix::new(n, k, labels),
        splits,
    ))
}

/// Probability of zeroing each feature per unit of augmentation strength.
pub const ZEROING_PER_STRENGTH: f64 = 0.5;

/// Random feature dropout followed by additive Gaussian noise scaled by
/// `strength · feature_std`. Strength 0 is the identity.
pub fn augment_with<R: Rng + ?Sized>(
    x: &[f64],
    strength: f64,
    feature_std: &[f64],
    rng: &mut R,
) -> Vec<f64> {
    if strength <= 0.0 {
        return x.to_vec();
    }
    let zeroing = (strength * ZEROING_PER_STRENGTH).min(0.5);
    x.iter()
        .zip(feature_std)
        .map(|(&v, &sd)| {
            let kept = if rng.random::<f64>() < zeroing {
                0.0
            } else {
                v
            };
            let eps: f64 = StandardNormal.sample(rng);
            kept + strength * sd * eps
        })
        .collect()
}

pub fn augment(x: &[f64], strength: f64, feature_std: &[f64], seed: u64) -> Vec<f64> {
    augment_with(
        x,
        strength,
        feature_std,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

/// Augments every row of a matrix.
pub fn augment_batch<R: Rng + ?Sized>(
    x: &Tensor,
    strength: f64,
    feature_std: &[f64],
    rng: &mut R,
) -> Tensor {
    if strength <= 0.0 {
        return x.clone();
    }
    let (rows, cols) = x.dims2();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        data.extend(augment_with(x.row(r), strength, feature_std, rng));
    }
    Tensor::matrix(rows, cols, data).expect("same shape")
}
