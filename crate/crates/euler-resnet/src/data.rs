//! The two-moon synthetic classification task, noise injection, splits, and
//! dataset CSV import/export.
//!
//! The two classes are interleaved half-circles: class 0 sits on the upper
//! half-circle `(r cos t, r sin t)` and class 1 on the shifted lower
//! half-circle `(r - r cos t, -r sin t + r/2)`, with `t` uniform on `[0, pi]`
//! and independent gaussian jitter on both coordinates. The classes are not
//! linearly separable but are perfectly separated by the two arcs, which
//! makes the task small enough to reason about and hard enough that trunk
//! depth matters.

use crate::csvfmt::{self, CsvWriter};
use crate::error::{Error, Result};
use crate::tensor::{derive_seed, gauss_draw, Matrix, Rng};
use std::path::Path;

/// Generation recipe for a two-moon dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MoonSpec {
    pub n_per_class: usize,
    pub radius: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for MoonSpec {
    fn default() -> MoonSpec {
        MoonSpec {
            n_per_class: 500,
            radius: 1.0,
            noise_std: 0.15,
            seed: 0,
        }
    }
}

impl MoonSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_class == 0 {
            return Err(Error::InvalidArgument {
                arg: "n_per_class",
                reason: "must be at least 1".to_string(),
            });
        }
        if !self.radius.is_finite() || self.radius <= 0.0 {
            return Err(Error::InvalidArgument {
                arg: "radius",
                reason: format!("must be positive and finite, got {}", self.radius),
            });
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::InvalidArgument {
                arg: "noise_std",
                reason: format!("must be nonnegative and finite, got {}", self.noise_std),
            });
        }
        Ok(())
    }
}

/// A labeled batch: one row of `features` per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Number of samples per label value, indexed by label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.labels.iter().max().map_or(0, |&m| m + 1)];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Rows of this dataset at the given indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut features = Matrix::zeros(indices.len(), self.dim());
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &idx) in indices.iter().enumerate() {
            if idx >= self.len() {
                return Err(Error::InvalidArgument {
                    arg: "indices",
                    reason: format!("index {idx} out of range for {} samples", self.len()),
                });
            }
            features.row_mut(row).copy_from_slice(self.features.row(idx));
            labels.push(self.labels[idx]);
        }
        Ok(Dataset { features, labels })
    }
}

/// Generates a two-moon dataset: rows `0 .. n_per_class` are class 0 in
/// angle-draw order, rows `n_per_class .. 2 n_per_class` are class 1.
///
/// The generator consumes `spec.seed` in a fixed order: the `2 n` angles
/// first (class 0 then class 1), then the jitter matrix in row-major order.
/// A `noise_std` of 0 consumes no jitter draws and leaves every point
/// exactly on its arc.
pub fn generate_two_moons(spec: &MoonSpec) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.n_per_class;
    let r = spec.radius;
    let mut rng = Rng::new(spec.seed);
    let mut features = Matrix::zeros(2 * n, 2);
    let mut labels = vec![0usize; 2 * n];

    let angles: Vec<f64> = (0..2 * n)
        .map(|_| std::f64::consts::PI * rng.next_f64())
        .collect();
    for i in 0..n {
        let t = angles[i];
        features.set(i, 0, r * t.cos());
        features.set(i, 1, r * t.sin());
    }
    for i in 0..n {
        let t = angles[n + i];
        features.set(n + i, 0, r - r * t.cos());
        features.set(n + i, 1, -r * t.sin() + r / 2.0);
        labels[n + i] = 1;
    }
    let jitter = gauss_draw(&mut rng, 2 * n, 2, 0.0, spec.noise_std);
    features.add_assign_scaled(&jitter, 1.0)?;
    Ok(Dataset { features, labels })
}

/// Adds independent gaussian noise to every feature. The noise of row `i`
/// comes from its own generator seeded with `derive_seed(seed, key)` where
/// the key is the row index; [`add_gaussian_noise_keyed`] lets callers keep
/// the keys of an earlier split so that noise-then-split and split-then-noise
/// agree bit for bit on corresponding rows.
pub fn add_gaussian_noise(d: &Dataset, std: f64, seed: u64) -> Result<Dataset> {
    let keys: Vec<u64> = (0..d.len() as u64).collect();
    add_gaussian_noise_keyed(d, std, seed, &keys)
}

/// [`add_gaussian_noise`] with explicit per-row stream keys.
pub fn add_gaussian_noise_keyed(d: &Dataset, std: f64, seed: u64, keys: &[u64]) -> Result<Dataset> {
    if !std.is_finite() || std < 0.0 {
        return Err(Error::InvalidArgument {
            arg: "noise std",
            reason: format!("must be nonnegative and finite, got {std}"),
        });
    }
    if keys.len() != d.len() {
        return Err(Error::DimensionMismatch {
            op: "add_gaussian_noise_keyed",
            expected: d.len(),
            actual: keys.len(),
        });
    }
    let mut out = d.clone();
    if std == 0.0 {
        return Ok(out);
    }
    for (i, &key) in keys.iter().enumerate() {
        let mut rng = Rng::new(derive_seed(seed, key));
        for v in out.features.row_mut(i) {
            *v += std * rng.next_gauss();
        }
    }
    Ok(out)
}

/// The shuffled index partition behind [`split`]: a Fisher-Yates shuffle of
/// `0..n` seeded by `seed`, cut after `round(n * train_fraction)` entries.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&train_fraction) || !train_fraction.is_finite() {
        return Err(Error::InvalidArgument {
            arg: "train_fraction",
            reason: format!("must be in (0, 1), got {train_fraction}"),
        });
    }
    let k = (n as f64 * train_fraction).round() as usize;
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument {
            arg: "train_fraction",
            reason: format!("fraction {train_fraction} of {n} samples leaves one side empty"),
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Rng::new(seed);
    for i in (1..n).rev() {
        let j = rng.below(i + 1);
        order.swap(i, j);
    }
    let test = order.split_off(k);
    Ok((order, test))
}

/// Splits a dataset into disjoint train and test parts whose union is the
/// input; rows appear in shuffled order within each part.
pub fn split(d: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train_idx, test_idx) = split_indices(d.len(), train_fraction, seed)?;
    Ok((d.subset(&train_idx)?, d.subset(&test_idx)?))
}

/// Writes a dataset as CSV with columns `x0, ..., x{dim-1}, label`.
pub fn write_csv(d: &Dataset, path: &Path) -> Result<()> {
    let mut header: Vec<String> = (0..d.dim()).map(|j| format!("x{j}")).collect();
    header.push("label".to_string());
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut w = CsvWriter::new(&header_refs);
    for i in 0..d.len() {
        let mut fields: Vec<String> = d.features.row(i).iter().map(|&v| csvfmt::format_f64(v)).collect();
        fields.push(d.labels[i].to_string());
        w.row(&fields);
    }
    w.finish(path)
}

/// Reads a dataset written by [`write_csv`]; feature values round-trip
/// bit-exactly.
pub fn read_csv(path: &Path) -> Result<Dataset> {
    let (header, rows) = csvfmt::read_csv(path)?;
    if header.last().map(String::as_str) != Some("label") || header.len() < 2 {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            reason: format!("expected columns x0..x{{d-1}},label, got {header:?}"),
        });
    }
    let dim = header.len() - 1;
    let mut features = Matrix::zeros(rows.len(), dim);
    let mut labels = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let line = i + 2;
        for j in 0..dim {
            features.set(i, j, csvfmt::parse_f64(&row[j], path, line)?);
        }
        let label = row[dim].trim().parse::<usize>().map_err(|_| Error::Parse {
            path: path.display().to_string(),
            line,
            reason: format!("expected an integer label, got {:?}", row[dim]),
        })?;
        labels.push(label);
    }
    Ok(Dataset { features, labels })
}
