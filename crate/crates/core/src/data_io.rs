//! Synthetic fixtures, CSV ingestion, standardisation and splitting.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Regression,
    /// Labels in `{-1, +1}`.
    Binary,
}

/// Affine maps applied to features (and, for regression, the target).
#[derive(Debug, Clone, PartialEq)]
pub struct Standardisation {
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

impl Standardisation {
    pub fn identity(dim: usize) -> Self {
        Standardisation {
            feature_means: vec![0.0; dim],
            feature_stds: vec![1.0; dim],
            target_mean: 0.0,
            target_std: 1.0,
        }
    }

    pub fn transform_x(&self, x: &DenseMatrix) -> DenseMatrix {
        DenseMatrix::from_fn(x.rows(), x.cols(), |i, j| {
            (x.get(i, j) - self.feature_means[j]) / self.feature_stds[j]
        })
    }

    pub fn inverse_x(&self, x: &DenseMatrix) -> DenseMatrix {
        DenseMatrix::from_fn(x.rows(), x.cols(), |i, j| {
            x.get(i, j) * self.feature_stds[j] + self.feature_means[j]
        })
    }

    pub fn transform_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.target_mean) / self.target_std).collect()
    }

    pub fn inverse_y(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| v * self.target_std + self.target_mean).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N x D`
    pub x: DenseMatrix,
    pub y: Vec<f64>,
    pub task: Task,
    /// Transform already applied to `x` and `y`; identity for raw data.
    pub transform: Standardisation,
}

impl Dataset {
    pub fn new(x: DenseMatrix, y: Vec<f64>, task: Task) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::shape(
                "Dataset",
                format!("{} inputs but {} targets", x.rows(), y.len()),
            ));
        }
        if y.is_empty() || x.cols() == 0 {
            return Err(Error::Domain(
                "dataset must have at least one row and one feature".into(),
            ));
        }
        if !x.is_finite() || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("dataset contains non-finite values".into()));
        }
        if task == Task::Binary && y.iter().any(|v| *v != 1.0 && *v != -1.0) {
            return Err(Error::Domain("binary labels must be -1 or +1".into()));
        }
        let dim = x.cols();
        Ok(Dataset {
            x,
            y,
            task,
            transform: Standardisation::identity(dim),
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: DenseMatrix::from_fn(idx.len(), self.x.cols(), |i, j| self.x.get(idx[i], j)),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            task: self.task,
            transform: self.transform.clone(),
        }
    }
}

/// `2 sin(2x) exp(-x/4)`
pub fn snelson_curve(x: f64) -> f64 {
    2.0 * (2.0 * x).sin() * (-x / 4.0).exp()
}

/// 1-D regression: `x ~ U(0, 6)`, `y = snelson_curve(x) + ε`, `ε ~ N(0, 0.1²)`.
pub fn synth_snelson_like(n: usize, seed: u64) -> Result<Dataset> {
    synth_snelson_with_noise(n, seed, true)
}

pub fn synth_snelson_with_noise(n: usize, seed: u64, noise: bool) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Config("need at least two points".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let xi = rng.random_range(0.0..6.0);
        let eps: f64 = rng.sample(StandardNormal);
        x.push(xi);
        y.push(snelson_curve(xi) + if noise { 0.1 * eps } else { 0.0 });
    }
    Dataset::new(DenseMatrix::from_col_major(n, 1, x)?, y, Task::Regression)
}

/// 2-D classification: two interleaved crescents, half the points each, with
/// 2% of labels flipped.
pub fn synth_banana_like(n: usize, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Config("need at least two points".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<(f64, f64, f64)> = (0..n)
        .map(|i| {
            let positive = i < n / 2;
            let theta = rng.random_range(0.0..PI);
            let (mut a, mut b) = if positive {
                (theta.cos(), theta.sin())
            } else {
                (1.0 - theta.cos(), 0.5 - theta.sin())
            };
            a += 0.2 * rng.sample::<f64, _>(StandardNormal);
            b += 0.2 * rng.sample::<f64, _>(StandardNormal);
            let mut label = if positive { 1.0 } else { -1.0 };
            if rng.random::<f64>() < 0.02 {
                label = -label;
            }
            (1.5 * (a - 0.5), 1.5 * (b - 0.25), label)
        })
        .collect();
    rows.shuffle(&mut rng);
    let x = DenseMatrix::from_fn(n, 2, |i, j| if j == 0 { rows[i].0 } else { rows[i].1 });
    Dataset::new(x, rows.iter().map(|r| r.2).collect(), Task::Binary)
}

/// Reads a comma-separated file with a header row. Every column other than
/// `target` is a feature. For `Task::Binary`, targets `0`/`1` map to `-1`/`+1`.
///
/// Parse errors report 1-based data rows (the header is row 0) and 1-based
/// columns.
pub fn load_csv(path: &Path, target: &str, task: Task) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader.headers().map_err(csv_err)?.clone();
    let t_col = headers
        .iter()
        .position(|h| h == target)
        .ok_or_else(|| Error::MissingColumn {
            path: path.to_path_buf(),
            name: target.to_string(),
        })?;
    let d = headers.len() - 1;
    let mut feats = Vec::new();
    let mut y = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != headers.len() {
            return Err(Error::Csv {
                path: path.to_path_buf(),
                detail: format!("row {} has {} fields, expected {}", r + 1, rec.len(), headers.len()),
            });
        }
        for (c, cell) in rec.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    row: r + 1,
                    col: c + 1,
                    value: cell.to_string(),
                })?;
            if c == t_col {
                y.push(v);
            } else {
                feats.push(v);
            }
        }
    }
    if task == Task::Binary {
        for (r, v) in y.iter_mut().enumerate() {
            *v = match *v {
                0.0 | -1.0 => -1.0,
                1.0 => 1.0,
                other => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        row: r + 1,
                        col: t_col + 1,
                        value: other.to_string(),
                    })
                }
            }
        }
    }
    let n = y.len();
    let x = DenseMatrix::from_fn(n, d, |i, j| feats[i * d + j]);
    Dataset::new(x, y, task)
}

/// Writes `data` with 17 significant digits per value; features are named
/// `x0, x1, …`.
pub fn write_csv(path: &Path, data: &Dataset, target: &str) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let mut header: Vec<String> = (0..data.dim()).map(|j| format!("x{j}")).collect();
    header.push(target.to_string());
    w.write_record(&header).map_err(|e| io(e.into()))?;
    for i in 0..data.len() {
        let mut row: Vec<String> = (0..data.dim()).map(|j| format!("{:.16e}", data.x.get(i, j))).collect();
        row.push(format!("{:.16e}", data.y[i]));
        w.write_record(&row).map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Standardises features (and regression targets) to zero mean and unit
/// variance using statistics of `train` only.
pub fn standardise(train: &Dataset, test: &Dataset) -> Result<(Dataset, Dataset, Standardisation)> {
    if train.dim() != test.dim() {
        return Err(Error::shape(
            "standardise",
            "train and test have different feature counts",
        ));
    }
    let mut means = Vec::with_capacity(train.dim());
    let mut stds = Vec::with_capacity(train.dim());
    for j in 0..train.dim() {
        let (m, s) = mean_std(train.x.col(j).iter().copied());
        if !(s > 1e-12 * m.abs().max(1.0)) {
            return Err(Error::ConstantFeature { feature: j });
        }
        means.push(m);
        stds.push(s);
    }
    let (target_mean, target_std) = match train.task {
        Task::Regression => {
            let (m, s) = mean_std(train.y.iter().copied());
            if s > 0.0 {
                (m, s)
            } else {
                (m, 1.0)
            }
        }
        Task::Binary => (0.0, 1.0),
    };
    let tf = Standardisation {
        feature_means: means,
        feature_stds: stds,
        target_mean,
        target_std,
    };
    let apply = |d: &Dataset| Dataset {
        x: tf.transform_x(&d.x),
        y: tf.transform_y(&d.y),
        task: d.task,
        transform: tf.clone(),
    };
    Ok((apply(train), apply(test), tf))
}

/// Seeded random partition with `round(ratio · N)` training rows (at least one
/// row on each side).
pub fn split(data: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let n = data.len();
    if n < 2 {
        return Err(Error::Config("need at least two rows to split".into()));
    }
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, b) = idx.split_at(n_train);
    Ok((data.subset(a), data.subset(b)))
}
