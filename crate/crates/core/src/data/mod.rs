//! Datasets: synthetic generators, IDX files, stratified splitting and
//! per-class membership.

mod container;
mod idx;

pub use container::{read_container, write_container, CONTAINER_MAGIC, CONTAINER_VERSION};
pub use idx::{read_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels, IdxImages};

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::{standard_normal, Matrix, RngStream};

/// Labelled samples with per-class membership lists.
///
/// `class_index[y]` holds, in ascending order, every sample whose observed
/// label is `y`. It is rebuilt whenever the observed labels change.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Matrix,
    true_labels: Option<Vec<usize>>,
    observed_labels: Vec<usize>,
    num_classes: usize,
    class_index: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        true_labels: Option<Vec<usize>>,
        observed_labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = features.rows();
        if observed_labels.len() != n {
            return Err(Error::Consistency(format!(
                "{} observed labels for {n} samples",
                observed_labels.len()
            )));
        }
        if let Some(t) = &true_labels {
            if t.len() != n {
                return Err(Error::Consistency(format!("{} true labels for {n} samples", t.len())));
            }
        }
        let out_of_range = observed_labels
            .iter()
            .chain(true_labels.iter().flatten())
            .find(|&&y| y >= num_classes);
        if let Some(y) = out_of_range {
            return Err(Error::invalid(format!("label {y} outside [0, {num_classes})")));
        }
        let class_index = build_class_index(&observed_labels, num_classes);
        Ok(Self {
            features,
            true_labels,
            observed_labels,
            num_classes,
            class_index,
        })
    }

    /// Clean dataset: observed labels equal the true labels.
    pub fn clean(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        Self::new(features, Some(labels.clone()), labels, num_classes)
    }

    pub fn len(&self) -> usize {
        self.observed_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed_labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn observed_labels(&self) -> &[usize] {
        &self.observed_labels
    }

    pub fn true_labels(&self) -> Option<&[usize]> {
        self.true_labels.as_deref()
    }

    pub fn class_index(&self) -> &[Vec<usize>] {
        &self.class_index
    }

    /// Members of class `label` (by observed label).
    pub fn class_members(&self, label: usize) -> &[usize] {
        &self.class_index[label]
    }

    /// Same samples with replaced observed labels; the class index is rebuilt.
    pub fn with_observed_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Self::new(
            self.features.clone(),
            self.true_labels.clone(),
            labels,
            self.num_classes,
        )
    }

    pub fn with_features(&self, features: Matrix) -> Result<Self> {
        if features.rows() != self.len() {
            return Err(Error::Consistency("feature row count changed".into()));
        }
        Ok(Self {
            features,
            ..self.clone()
        })
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let pick = |v: &[usize]| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let observed = pick(&self.observed_labels);
        let class_index = build_class_index(&observed, self.num_classes);
        Dataset {
            features: self.features.select_rows(indices),
            true_labels: self.true_labels.as_deref().map(pick),
            observed_labels: observed,
            num_classes: self.num_classes,
            class_index,
        }
    }
}

pub fn build_class_index(labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut index = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        index[y].push(i);
    }
    index
}

/// Per-dimension affine map to zero mean and unit variance.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &Matrix) -> Self {
        let (n, d) = features.shape();
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(features.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(features.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n.max(1) as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, features: &Matrix) -> Matrix {
        let mut out = features.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        out
    }
}

/// Gaussian clusters with identity covariance.
///
/// Centers are mutually `separation` apart: on scaled coordinate axes when
/// `num_classes <= dim`, otherwise on a regular polygon in the first two
/// dimensions (or a line when `dim == 1`), adjacent centers `separation` apart.
pub fn make_blobs(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    rng: &mut RngStream,
) -> Result<Dataset> {
    if num_classes < 2 || per_class < 1 || dim < 1 || !(separation > 0.0) {
        return Err(Error::invalid(
            "make_blobs needs num_classes >= 2, per_class >= 1, dim >= 1, separation > 0",
        ));
    }
    let centers = blob_centers(num_classes, dim, separation);
    let n = num_classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (y, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(center.iter().map(|c| c + standard_normal(rng)));
            labels.push(y);
        }
    }
    Dataset::clean(Matrix::from_vec(n, dim, data)?, labels, num_classes)
}

fn blob_centers(num_classes: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|y| {
            let mut c = vec![0.0; dim];
            if num_classes <= dim {
                c[y] = separation / 2f64.sqrt();
            } else if dim == 1 {
                c[0] = y as f64 * separation;
            } else {
                let radius = separation / (2.0 * (PI / num_classes as f64).sin());
                let angle = 2.0 * PI * y as f64 / num_classes as f64;
                c[0] = radius * angle.cos();
                c[1] = radius * angle.sin();
            }
            c
        })
        .collect()
}

/// Two interleaved half circles in the plane.
pub fn make_two_moons(per_class: usize, noise_stdev: f64, rng: &mut RngStream) -> Result<Dataset> {
    if per_class < 1 || !(noise_stdev >= 0.0) {
        return Err(Error::invalid("make_two_moons needs per_class >= 1, noise_stdev >= 0"));
    }
    let n = 2 * per_class;
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for y in 0..2 {
        for i in 0..per_class {
            let t = if per_class == 1 {
                0.0
            } else {
                PI * i as f64 / (per_class - 1) as f64
            };
            let (x0, x1) = if y == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            data.push(x0 + noise_stdev * standard_normal(rng));
            data.push(x1 + noise_stdev * standard_normal(rng));
            labels.push(y);
        }
    }
    Dataset::clean(Matrix::from_vec(n, 2, data)?, labels, 2)
}

/// Stratified split into `(train, test)` sample indices, each ascending.
pub fn split_indices(
    dataset: &Dataset,
    test_fraction: f64,
    rng: &mut RngStream,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!("test fraction {test_fraction} outside (0, 1)")));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (y, members) in dataset.class_index().iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::invalid(format!(
                "class {y} has {} member(s); both splits must be non-empty",
                members.len()
            )));
        }
        let mut shuffled = members.clone();
        rng.shuffle(&mut shuffled);
        let n_test = ((members.len() as f64 * test_fraction).round() as usize).clamp(1, members.len() - 1);
        test.extend_from_slice(&shuffled[..n_test]);
        train.extend_from_slice(&shuffled[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split(dataset: &Dataset, test_fraction: f64, rng: &mut RngStream) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(dataset, test_fraction, rng)?;
    Ok((dataset.subset(&train), dataset.subset(&test)))
}
