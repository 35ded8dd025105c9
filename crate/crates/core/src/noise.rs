//! Label-noise injection: symmetric, pair-flip and instance-dependent.
//!
//! Every injector draws the decision for sample `i` from the substream keyed
//! by `i`, so appending samples leaves earlier decisions untouched.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{softmax, standard_normal, truncated_normal, RngStream};

/// Spread of the per-sample flip rate around the nominal rate.
pub const INSTANCE_RATE_STDEV: f64 = 0.1;

const PROJECTION_KEY: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Symmetric,
    Pairflip,
    InstanceDependent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
    #[serde(default = "default_noise_stream")]
    pub rng_stream: u64,
}

fn default_noise_stream() -> u64 {
    0x6e6f_6973_65
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::invalid(format!("noise rate {} outside [0, 1)", self.rate)));
        }
        if self.kind == NoiseKind::Pairflip && self.rate >= 0.5 {
            return Err(Error::invalid(format!(
                "pairflip rate {} must be below 0.5",
                self.rate
            )));
        }
        Ok(())
    }

    pub fn apply(&self, dataset: &Dataset, seed: u64) -> Result<Dataset> {
        self.validate()?;
        let mut rng = RngStream::new(seed, self.rng_stream);
        match self.kind {
            NoiseKind::Symmetric => inject_symmetric(dataset, self.rate, &mut rng),
            NoiseKind::Pairflip => inject_pairflip(dataset, self.rate, &mut rng),
            NoiseKind::InstanceDependent => inject_instance_dependent(dataset, self.rate, &mut rng),
        }
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::invalid(format!("noise rate {rate} outside [0, 1)")))
    }
}

/// Flips each label with probability `rate` to a class drawn uniformly from
/// the other `c - 1` classes.
pub fn inject_symmetric(dataset: &Dataset, rate: f64, rng: &mut RngStream) -> Result<Dataset> {
    check_rate(rate)?;
    let c = dataset.num_classes();
    if c < 2 {
        return Err(Error::invalid("symmetric noise needs at least two classes"));
    }
    let labels = dataset
        .observed_labels()
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let mut r = rng.substream(i as u64);
            if r.next_f64() < rate {
                let other = r.below(c - 1);
                if other >= y {
                    other + 1
                } else {
                    other
                }
            } else {
                y
            }
        })
        .collect();
    dataset.with_observed_labels(labels)
}

/// Flips each label with probability `rate` from `y` to `(y + 1) mod c`.
pub fn inject_pairflip(dataset: &Dataset, rate: f64, rng: &mut RngStream) -> Result<Dataset> {
    if !(0.0..0.5).contains(&rate) {
        return Err(Error::invalid(format!("pairflip rate {rate} outside [0, 0.5)")));
    }
    let c = dataset.num_classes();
    let labels = dataset
        .observed_labels()
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            if rng.substream(i as u64).next_f64() < rate {
                (y + 1) % c
            } else {
                y
            }
        })
        .collect();
    dataset.with_observed_labels(labels)
}

pub fn inject_instance_dependent(dataset: &Dataset, rate: f64, rng: &mut RngStream) -> Result<Dataset> {
    inject_instance_dependent_with_stdev(dataset, rate, INSTANCE_RATE_STDEV, rng)
}

/// Feature-dependent noise.
///
/// A `d × c` projection is drawn once from a standard normal. Sample `i`
/// gets a flip rate `q_i ~ N(rate, stdev²)` truncated to `[0, 1]`; when it
/// flips, the target follows the softmax of `x_i · projection` with the
/// current class masked out. Features are expected to be standardized.
pub fn inject_instance_dependent_with_stdev(
    dataset: &Dataset,
    rate: f64,
    stdev: f64,
    rng: &mut RngStream,
) -> Result<Dataset> {
    check_rate(rate)?;
    let c = dataset.num_classes();
    let d = dataset.dim();
    if c < 2 {
        return Err(Error::invalid("instance-dependent noise needs at least two classes"));
    }
    let mut proj_rng = rng.substream(PROJECTION_KEY);
    let projection: Vec<f64> = (0..d * c).map(|_| standard_normal(&mut proj_rng)).collect();

    let mut labels = Vec::with_capacity(dataset.len());
    for (i, &y) in dataset.observed_labels().iter().enumerate() {
        let mut r = rng.substream(i as u64);
        let q = truncated_normal(rate, stdev, 0.0, 1.0, &mut r)?;
        if r.next_f64() >= q {
            labels.push(y);
            continue;
        }
        let targets = flip_distribution(dataset.features().row(i), y, &projection, c)?;
        labels.push(draw_categorical(&targets, &mut r));
    }
    dataset.with_observed_labels(labels)
}

/// Target distribution given that sample `x` with label `y` flips.
fn flip_distribution(x: &[f64], y: usize, projection: &[f64], c: usize) -> Result<Vec<f64>> {
    let mut scores: Vec<f64> = (0..c)
        .map(|j| x.iter().enumerate().map(|(k, v)| v * projection[k * c + j]).sum())
        .collect();
    // Masked entry gets the smallest finite score; its mass is zeroed below.
    let floor = scores.iter().copied().fold(f64::INFINITY, f64::min);
    scores[y] = floor;
    let mut p = softmax(&scores)?;
    p[y] = 0.0;
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    Ok(p)
}

fn draw_categorical(p: &[f64], rng: &mut RngStream) -> usize {
    let u = rng.next_f64();
    let mut acc = 0.0;
    let mut last = 0;
    for (j, &pj) in p.iter().enumerate() {
        if pj <= 0.0 {
            continue;
        }
        acc += pj;
        last = j;
        if u < acc {
            return j;
        }
    }
    last
}

/// `true` where the observed label differs from the true label.
pub fn corruption_mask(dataset: &Dataset) -> Result<Vec<bool>> {
    let truth = dataset
        .true_labels()
        .ok_or_else(|| Error::Unavailable("dataset has no true labels".into()))?;
    Ok(truth
        .iter()
        .zip(dataset.observed_labels())
        .map(|(t, o)| t != o)
        .collect())
}

/// Row-normalized empirical transition matrix `P[true][observed]`.
pub fn transition_matrix(dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
    let truth = dataset
        .true_labels()
        .ok_or_else(|| Error::Unavailable("dataset has no true labels".into()))?;
    let c = dataset.num_classes();
    let mut counts = vec![vec![0.0; c]; c];
    for (&t, &o) in truth.iter().zip(dataset.observed_labels()) {
        counts[t][o] += 1.0;
    }
    for row in counts.iter_mut() {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|v| *v /= total);
        }
    }
    Ok(counts)
}
