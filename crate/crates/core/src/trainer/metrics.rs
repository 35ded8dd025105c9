use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// End-of-epoch statistics. Columns needing true labels are `None` when
/// the training set carries none.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    /// Number of completed epochs.
    pub epoch: usize,
    /// Mean optimized batch objective over the epoch.
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub clean_mean_loss: Option<f64>,
    pub noisy_mean_loss: Option<f64>,
    /// Mean within-class selection probability under `exp(−ℓ(ℓ+ε))`.
    pub clean_mean_selection_prob: Option<f64>,
    pub noisy_mean_selection_prob: Option<f64>,
    /// Same, under `exp(−ℓ)`.
    pub clean_mean_selection_prob_plain: Option<f64>,
    pub noisy_mean_selection_prob_plain: Option<f64>,
    /// Share of the training set kept as labeled in a semi-supervised epoch.
    pub labeled_fraction: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,test_accuracy,clean_mean_loss,noisy_mean_loss,\
clean_mean_selection_prob,noisy_mean_selection_prob,clean_mean_selection_prob_plain,\
noisy_mean_selection_prob_plain,labeled_fraction";

fn field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.train_loss,
            r.test_accuracy,
            field(r.clean_mean_loss),
            field(r.noisy_mean_loss),
            field(r.clean_mean_selection_prob),
            field(r.noisy_mean_selection_prob),
            field(r.clean_mean_selection_prob_plain),
            field(r.noisy_mean_selection_prob_plain),
            field(r.labeled_fraction),
        )
        .unwrap();
    }
    out
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Means of `values` over the clean and the corrupted entries of `mask`.
pub(crate) fn split_means(values: &[f64], mask: &[bool]) -> (Option<f64>, Option<f64>) {
    let (mut clean, mut noisy) = ((0.0, 0usize), (0.0, 0usize));
    for (v, &corrupted) in values.iter().zip(mask) {
        let acc = if corrupted { &mut noisy } else { &mut clean };
        acc.0 += v;
        acc.1 += 1;
    }
    let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    (mean(clean), mean(noisy))
}
