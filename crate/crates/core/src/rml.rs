//! Regroup median loss estimation.
//!
//! Per observed class, cached losses define a selection distribution that
//! favours small-loss members (`p̃ ∝ exp(−ℓ(ℓ+ε))`). For each sample, `n·k`
//! same-class members are drawn without replacement, split at random into
//! `n` groups of `k`, and the sample's loss is estimated as the median of
//! the `n` group means together with its own loss. Estimates are refreshed
//! once per epoch and carried to the current step by the ratio
//! `ℓ_RML / ℓ`, never exceeding the plain loss.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::numerics::{log_sum_exp, median_of, sample_without_replacement_log, RngStream};

/// Denominator floor for loss ratios.
pub const DIVISION_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegroupParams {
    /// Number of groups; even.
    pub n: usize,
    /// Group size.
    pub k: usize,
    /// Bias ε of the processed loss `ℓ(ℓ+ε)`.
    #[serde(default = "default_epsilon_bias")]
    pub epsilon_bias: f64,
}

fn default_epsilon_bias() -> f64 {
    1.0
}

impl RegroupParams {
    pub fn new(n: usize, k: usize) -> Self {
        Self {
            n,
            k,
            epsilon_bias: default_epsilon_bias(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n % 2 != 0 {
            return Err(Error::invalid(format!("group count n = {} must be even and positive", self.n)));
        }
        if self.k == 0 {
            return Err(Error::invalid("group size k must be positive"));
        }
        if !self.epsilon_bias.is_finite() {
            return Err(Error::invalid("epsilon_bias must be finite"));
        }
        Ok(())
    }

    pub fn selected(&self) -> usize {
        self.n * self.k
    }
}

impl Default for RegroupParams {
    fn default() -> Self {
        Self::new(6, 10)
    }
}

/// Which selection probabilities drive the draw.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// `p̃ ∝ exp(−ℓ(ℓ+ε))`
    #[default]
    Processed,
    /// `p ∝ exp(−ℓ)`
    Plain,
}

/// How the selected losses are reduced to an estimate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Median of group means and the sample's own loss.
    #[default]
    RegroupMedian,
    /// Plain mean of the selected losses.
    Mean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RmlVariant {
    #[serde(default)]
    pub selection: SelectionRule,
    #[serde(default)]
    pub aggregation: Aggregation,
}

impl RmlVariant {
    pub const FULL: Self = Self {
        selection: SelectionRule::Processed,
        aggregation: Aggregation::RegroupMedian,
    };
    pub const WITHOUT_PROCESSING: Self = Self {
        selection: SelectionRule::Plain,
        aggregation: Aggregation::RegroupMedian,
    };
    pub const WITHOUT_MEDIAN: Self = Self {
        selection: SelectionRule::Processed,
        aggregation: Aggregation::Mean,
    };
}

/// Per-sample losses recorded at the end of an epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossCache {
    plain: Vec<f64>,
    rml: Vec<f64>,
    epoch: usize,
}

impl LossCache {
    pub fn new(plain: Vec<f64>, rml: Vec<f64>, epoch: usize) -> Result<Self> {
        if plain.len() != rml.len() {
            return Err(Error::Consistency("plain and rml loss vectors differ in length".into()));
        }
        if let Some(i) = plain.iter().chain(&rml).position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!("cached loss at position {i} is negative or non-finite")));
        }
        Ok(Self { plain, rml, epoch })
    }

    /// Cache whose estimates equal the plain losses.
    pub fn from_plain(plain: Vec<f64>, epoch: usize) -> Result<Self> {
        Self::new(plain.clone(), plain, epoch)
    }

    pub fn len(&self) -> usize {
        self.plain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plain.is_empty()
    }

    pub fn plain(&self) -> &[f64] {
        &self.plain
    }

    pub fn rml(&self) -> &[f64] {
        &self.rml
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }
}

/// Selection distribution over the members of one observed class.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionDistribution {
    pub label: usize,
    pub members: Vec<usize>,
    /// Exponent fed to the softmax: `ℓ(ℓ+ε)` or `ℓ`.
    pub processed: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub probs: Vec<f64>,
}

impl SelectionDistribution {
    pub fn new(label: usize, members: Vec<usize>, losses: &[f64], epsilon_bias: f64, rule: SelectionRule) -> Result<Self> {
        if losses.is_empty() {
            return Err(Error::invalid("selection over an empty class"));
        }
        if losses.len() != members.len() {
            return Err(Error::invalid("one loss per member required"));
        }
        if let Some(i) = losses.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(format!("loss at position {i} is negative or non-finite")));
        }
        let processed: Vec<f64> = match rule {
            SelectionRule::Processed => losses.iter().map(|l| l * (l + epsilon_bias)).collect(),
            SelectionRule::Plain => losses.to_vec(),
        };
        let neg: Vec<f64> = processed.iter().map(|v| -v).collect();
        let lse = log_sum_exp(&neg);
        let log_probs: Vec<f64> = neg.iter().map(|v| v - lse).collect();
        let probs = log_probs.iter().map(|v| v.exp()).collect();
        Ok(Self {
            label,
            members,
            processed,
            log_probs,
            probs,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Processed-loss selection probabilities over a standalone loss vector.
pub fn selection_probabilities(losses: &[f64], epsilon_bias: f64) -> Result<SelectionDistribution> {
    SelectionDistribution::new(0, (0..losses.len()).collect(), losses, epsilon_bias, SelectionRule::Processed)
}

/// Plain-loss selection probabilities `p ∝ exp(−ℓ)`.
pub fn plain_selection_probabilities(losses: &[f64]) -> Result<SelectionDistribution> {
    SelectionDistribution::new(0, (0..losses.len()).collect(), losses, 0.0, SelectionRule::Plain)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityShift {
    /// `log p_τ − log p̃_τ` per sample.
    pub shifts: Vec<f64>,
    /// `log(Σ exp(−ℓ_j) / Σ exp(−ℓ_j(ℓ_j+ε)))`
    pub beta: f64,
}

/// Change in log selection probability caused by loss processing.
pub fn probability_shift(losses: &[f64], epsilon_bias: f64) -> Result<ProbabilityShift> {
    let plain = plain_selection_probabilities(losses)?;
    let processed = selection_probabilities(losses, epsilon_bias)?;
    let shifts = plain
        .log_probs
        .iter()
        .zip(&processed.log_probs)
        .map(|(a, b)| a - b)
        .collect();
    let neg_plain: Vec<f64> = losses.iter().map(|l| -l).collect();
    let neg_processed: Vec<f64> = processed.processed.iter().map(|v| -v).collect();
    let beta = log_sum_exp(&neg_plain) - log_sum_exp(&neg_processed);
    Ok(ProbabilityShift { shifts, beta })
}

/// Random partition of the selected losses into `n` groups of `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupMeans {
    /// Positions into the selected-loss slice.
    pub groups: Vec<Vec<usize>>,
    pub means: Vec<f64>,
}

/// Median of the `n` group means together with `sample_loss`.
///
/// The `n + 1` values have odd count, so the result is one of them.
pub fn regroup_median(
    sample_loss: f64,
    selected_losses: &[f64],
    params: &RegroupParams,
    rng: &mut RngStream,
) -> Result<(f64, GroupMeans)> {
    params.validate()?;
    if selected_losses.len() != params.selected() {
        return Err(Error::invalid(format!(
            "expected n·k = {} selected losses, got {}",
            params.selected(),
            selected_losses.len()
        )));
    }
    let mut order: Vec<usize> = (0..selected_losses.len()).collect();
    rng.shuffle(&mut order);
    let groups: Vec<Vec<usize>> = order.chunks(params.k).map(<[usize]>::to_vec).collect();
    let means: Vec<f64> = groups
        .iter()
        .map(|g| g.iter().map(|&i| selected_losses[i]).sum::<f64>() / g.len() as f64)
        .collect();
    let mut pool = means.clone();
    pool.push(sample_loss);
    let estimate = median_of(&pool)?;
    Ok((estimate, GroupMeans { groups, means }))
}

/// Reduction shared by the per-sample estimate and the epoch refresh.
///
/// `log_weights` are the selection log-weights of the class members with
/// the sample's own slot already set to `-inf`.
fn estimate_from_class(
    own_loss: f64,
    member_losses: &[f64],
    log_weights: &[f64],
    params: &RegroupParams,
    aggregation: Aggregation,
    rng: &mut RngStream,
) -> Result<f64> {
    let available = member_losses.len().saturating_sub(1);
    let k = if available < params.selected() {
        available / params.n
    } else {
        params.k
    };
    if k == 0 {
        return Ok(own_loss);
    }
    let shrunk = RegroupParams { k, ..*params };
    let picked = sample_without_replacement_log(log_weights, shrunk.selected(), rng)?;
    let selected: Vec<f64> = picked.iter().map(|&j| member_losses[j]).collect();
    match aggregation {
        Aggregation::RegroupMedian => Ok(regroup_median(own_loss, &selected, &shrunk, rng)?.0),
        Aggregation::Mean => Ok(selected.iter().sum::<f64>() / selected.len() as f64),
    }
}

fn class_log_weights(member_losses: &[f64], epsilon_bias: f64, rule: SelectionRule) -> Vec<f64> {
    member_losses
        .iter()
        .map(|&l| match rule {
            SelectionRule::Processed => -l * (l + epsilon_bias),
            SelectionRule::Plain => -l,
        })
        .collect()
}

/// Regroup-median estimate for one sample from the cached plain losses of
/// its observed class, excluding the sample itself from the draw.
pub fn estimate_for_sample(
    sample_index: usize,
    dataset: &Dataset,
    cache: &LossCache,
    params: &RegroupParams,
    rng: &mut RngStream,
) -> Result<f64> {
    estimate_for_sample_with(sample_index, dataset, cache, params, RmlVariant::FULL, rng)
}

pub fn estimate_for_sample_with(
    sample_index: usize,
    dataset: &Dataset,
    cache: &LossCache,
    params: &RegroupParams,
    variant: RmlVariant,
    rng: &mut RngStream,
) -> Result<f64> {
    params.validate()?;
    if cache.len() != dataset.len() || sample_index >= dataset.len() {
        return Err(Error::invalid("sample index or cache length does not match the dataset"));
    }
    let members = dataset.class_members(dataset.observed_labels()[sample_index]);
    let losses: Vec<f64> = members.iter().map(|&j| cache.plain[j]).collect();
    let mut log_weights = class_log_weights(&losses, params.epsilon_bias, variant.selection);
    let own = members.binary_search(&sample_index).expect("class index contains every sample");
    log_weights[own] = f64::NEG_INFINITY;
    estimate_from_class(cache.plain[sample_index], &losses, &log_weights, params, variant.aggregation, rng)
}

/// Carries an epoch-`t` estimate to a fresh loss: `ℓ^{t+1} · ℓ_RML^t / ℓ^t`.
pub fn propagate_estimate(cache: &LossCache, sample_index: usize, fresh_loss: f64) -> f64 {
    fresh_loss * cache.rml[sample_index] / cache.plain[sample_index].max(DIVISION_FLOOR)
}

/// Keeps the estimate only when it does not exceed the plain loss.
pub fn correct_estimate(estimate: f64, original_loss: f64) -> f64 {
    estimate.min(original_loss)
}

/// Per-sample weights `w_i = ℓ_RML,i / ℓ_i` so that `(1/|B|) Σ w_i ℓ_i`
/// equals the batch mean of the corrected, propagated estimates.
pub fn batch_weights(cache: &LossCache, batch: &[usize], fresh_losses: &[f64]) -> Result<Vec<f64>> {
    if batch.len() != fresh_losses.len() {
        return Err(Error::invalid("one fresh loss per batch index required"));
    }
    batch
        .iter()
        .zip(fresh_losses)
        .map(|(&i, &fresh)| {
            if i >= cache.len() {
                return Err(Error::invalid(format!("sample {i} outside cache of {}", cache.len())));
            }
            if fresh >= DIVISION_FLOOR {
                Ok((cache.rml[i] / cache.plain[i].max(DIVISION_FLOOR)).min(1.0))
            } else {
                Ok(correct_estimate(propagate_estimate(cache, i, fresh), fresh) / DIVISION_FLOOR)
            }
        })
        .collect()
}

/// Batch mean of the corrected, propagated estimates, reduced directly.
pub fn batch_rml_mean(cache: &LossCache, batch: &[usize], fresh_losses: &[f64]) -> f64 {
    let total: f64 = batch
        .iter()
        .zip(fresh_losses)
        .map(|(&i, &fresh)| correct_estimate(propagate_estimate(cache, i, fresh), fresh))
        .sum();
    total / batch.len().max(1) as f64
}

/// Records fresh plain losses for every sample and re-estimates all RML
/// losses from them. The returned cache is stamped `cache.epoch() + 1`.
///
/// Sample `i` draws from `rng.substream(epoch).substream(i)`.
pub fn refresh_cache(
    cache: &LossCache,
    dataset: &Dataset,
    model: &ModelState,
    params: &RegroupParams,
    rng: &RngStream,
) -> Result<LossCache> {
    refresh_cache_with(cache, dataset, model, params, RmlVariant::FULL, rng)
}

pub fn refresh_cache_with(
    cache: &LossCache,
    dataset: &Dataset,
    model: &ModelState,
    params: &RegroupParams,
    variant: RmlVariant,
    rng: &RngStream,
) -> Result<LossCache> {
    let plain = model.losses(dataset.features(), dataset.observed_labels())?;
    estimate_all(plain, cache.epoch + 1, dataset, params, variant, rng)
}

/// Builds a cache for `epoch` from freshly recorded plain losses.
pub fn estimate_all(
    plain: Vec<f64>,
    epoch: usize,
    dataset: &Dataset,
    params: &RegroupParams,
    variant: RmlVariant,
    rng: &RngStream,
) -> Result<LossCache> {
    params.validate()?;
    if plain.len() != dataset.len() {
        return Err(Error::invalid("one loss per sample required"));
    }
    let epoch_rng = rng.substream(epoch as u64);
    let mut rml = vec![0.0; plain.len()];
    for members in dataset.class_index() {
        let losses: Vec<f64> = members.iter().map(|&j| plain[j]).collect();
        let mut log_weights = class_log_weights(&losses, params.epsilon_bias, variant.selection);
        for (pos, &i) in members.iter().enumerate() {
            let saved = std::mem::replace(&mut log_weights[pos], f64::NEG_INFINITY);
            let mut sample_rng = epoch_rng.substream(i as u64);
            let estimate = estimate_from_class(plain[i], &losses, &log_weights, params, variant.aggregation, &mut sample_rng)?;
            log_weights[pos] = saved;
            rml[i] = correct_estimate(estimate, plain[i]);
        }
    }
    LossCache::new(plain, rml, epoch)
}

/// Each sample's selection probability within its observed class.
pub fn per_sample_selection_probs(
    dataset: &Dataset,
    losses: &[f64],
    epsilon_bias: f64,
    rule: SelectionRule,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; dataset.len()];
    for (label, members) in dataset.class_index().iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let class_losses: Vec<f64> = members.iter().map(|&j| losses[j]).collect();
        let dist = SelectionDistribution::new(label, members.clone(), &class_losses, epsilon_bias, rule)?;
        for (&i, p) in dist.members.iter().zip(&dist.probs) {
            out[i] = *p;
        }
    }
    Ok(out)
}

/// Diagnostic CSV: `sample_id,true_label,observed_label,loss_plain,loss_rml,is_corrupted`.
/// Columns that need true labels are left empty when those are absent.
pub fn write_cache_csv(path: impl AsRef<Path>, dataset: &Dataset, cache: &LossCache) -> Result<()> {
    let path = path.as_ref();
    if cache.len() != dataset.len() {
        return Err(Error::invalid("cache does not match dataset"));
    }
    let mut out = String::from("sample_id,true_label,observed_label,loss_plain,loss_rml,is_corrupted\n");
    for i in 0..dataset.len() {
        let observed = dataset.observed_labels()[i];
        let (truth, corrupted) = match dataset.true_labels() {
            Some(t) => (t[i].to_string(), (t[i] != observed).to_string()),
            None => (String::new(), String::new()),
        };
        writeln!(out, "{i},{truth},{observed},{},{},{corrupted}", cache.plain[i], cache.rml[i]).unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;
    use approx::assert_abs_diff_eq;

    fn rng() -> RngStream {
        RngStream::new(17, 3)
    }

    #[test]
    fn uniform_when_losses_equal() {
        let d = selection_probabilities(&[0.7; 5], 1.0).unwrap();
        assert!(d.probs.iter().all(|p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn processed_loss_value() {
        assert_eq!(selection_probabilities(&[2.0], 1.0).unwrap().processed, vec![6.0]);
    }

    #[test]
    fn closed_form_two_losses() {
        let d = selection_probabilities(&[0.0, 1.0], 1.0).unwrap();
        let z = 1.0 + (-2f64).exp();
        assert_abs_diff_eq!(d.probs[0], 1.0 / z, epsilon = 1e-15);
        assert_abs_diff_eq!(d.probs[1], (-2f64).exp() / z, epsilon = 1e-15);
        assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn shift_vanishes_for_constant_losses() {
        let s = probability_shift(&[1.5; 4], 1.0).unwrap();
        assert_abs_diff_eq!(s.beta, 1.5 * 1.5, epsilon = 1e-12);
        assert!(s.shifts.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn shift_identity_and_positive_beta() {
        let mut r = rng();
        for _ in 0..1000 {
            let m = 2 + r.below(50);
            let losses: Vec<f64> = (0..m).map(|_| 30.0 * r.next_f64()).collect();
            let s = probability_shift(&losses, 1.0).unwrap();
            assert!(s.beta > 0.0);
            for (l, shift) in losses.iter().zip(&s.shifts) {
                assert!((shift - (l * l - s.beta)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn general_epsilon_shift() {
        let losses = [0.2, 1.0, 2.5];
        let s = probability_shift(&losses, 2.0).unwrap();
        for (l, shift) in losses.iter().zip(&s.shifts) {
            assert!((shift - (l * (l + 2.0 - 1.0) - s.beta)).abs() < 1e-12);
        }
    }

    #[test]
    fn regroup_median_sorted_middle() {
        let params = RegroupParams::new(6, 1);
        let (est, groups) = regroup_median(0.5, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &params, &mut rng()).unwrap();
        assert_eq!(est, 3.0);
        assert_eq!(groups.groups.len(), 6);
    }

    #[test]
    fn regroup_median_constant_selection() {
        for n in [2, 4, 6] {
            for k in 1..4 {
                let params = RegroupParams::new(n, k);
                for own in [0.0, 1.0, 100.0] {
                    let (est, _) = regroup_median(own, &vec![2.5; n * k], &params, &mut rng()).unwrap();
                    assert_eq!(est, 2.5);
                }
            }
        }
    }

    #[test]
    fn regroup_median_matches_partition_enumeration() {
        // Oracle: the 3 ways to split {0,0,10,10} into two pairs.
        let selected = [0.0, 0.0, 10.0, 10.0];
        let partitions = [[[0, 1], [2, 3]], [[0, 2], [1, 3]], [[0, 3], [1, 2]]];
        let mut oracle: Vec<f64> = partitions
            .iter()
            .map(|p| {
                let mut pool: Vec<f64> = p.iter().map(|g| (selected[g[0]] + selected[g[1]]) / 2.0).collect();
                pool.push(0.0);
                pool.sort_by(f64::total_cmp);
                pool[1]
            })
            .collect();
        let p_zero = oracle.iter().filter(|&&v| v == 0.0).count() as f64 / 3.0;
        oracle.sort_by(f64::total_cmp);
        oracle.dedup();
        assert_eq!(oracle, vec![0.0, 5.0]);

        let params = RegroupParams::new(2, 2);
        let mut r = rng();
        let trials = 30_000;
        let mut zeros = 0;
        for _ in 0..trials {
            let (est, g) = regroup_median(0.0, &selected, &params, &mut r).unwrap();
            assert!(oracle.contains(&est));
            for (grp, mean) in g.groups.iter().zip(&g.means) {
                let m: f64 = grp.iter().map(|&i| selected[i]).sum::<f64>() / grp.len() as f64;
                assert!((m - mean).abs() < 1e-12);
            }
            zeros += usize::from(est == 0.0);
        }
        assert!((zeros as f64 / trials as f64 - p_zero).abs() < 0.01);
    }

    #[test]
    fn regroup_median_rejects_bad_lengths() {
        let params = RegroupParams::new(2, 2);
        assert!(regroup_median(0.0, &[1.0; 3], &params, &mut rng()).is_err());
        assert!(regroup_median(0.0, &[1.0; 3], &RegroupParams::new(3, 1), &mut rng()).is_err());
    }

    #[test]
    fn groups_are_disjoint_and_full() {
        let params = RegroupParams::new(4, 3);
        let sel: Vec<f64> = (0..12).map(f64::from).collect();
        let (_, g) = regroup_median(1.0, &sel, &params, &mut rng()).unwrap();
        let mut all: Vec<usize> = g.groups.concat();
        all.sort_unstable();
        assert_eq!(all, (0..12).collect::<Vec<_>>());
        assert!(g.groups.iter().all(|x| x.len() == 3));
    }

    fn toy_dataset(labels: Vec<usize>, c: usize) -> Dataset {
        let n = labels.len();
        Dataset::new(Matrix::zeros(n, 1), None, labels, c).unwrap()
    }

    #[test]
    fn estimate_constant_class() {
        let ds = toy_dataset(vec![0; 40], 2);
        let cache = LossCache::from_plain(vec![0.8; 40], 1).unwrap();
        let params = RegroupParams::new(4, 3);
        for i in [0, 7, 39] {
            let est = estimate_for_sample(i, &ds, &cache, &params, &mut rng()).unwrap();
            assert_abs_diff_eq!(est, 0.8, epsilon = 1e-12);
        }
    }

    #[test]
    fn singleton_class_returns_own_loss() {
        let ds = toy_dataset(vec![0, 1, 1, 1], 2);
        let cache = LossCache::from_plain(vec![3.0, 0.1, 0.2, 0.3], 1).unwrap();
        let params = RegroupParams::new(2, 1);
        assert_eq!(estimate_for_sample(0, &ds, &cache, &params, &mut rng()).unwrap(), 3.0);
    }

    #[test]
    fn shrink_fallback() {
        // class of 5: 4 candidates, n=2 → k shrinks from 10 to 2
        let ds = toy_dataset(vec![0; 5], 1);
        let cache = LossCache::from_plain(vec![9.0, 1.0, 1.0, 1.0, 1.0], 0).unwrap();
        let params = RegroupParams::new(2, 10);
        assert_eq!(estimate_for_sample(0, &ds, &cache, &params, &mut rng()).unwrap(), 1.0);
        // 2 candidates with n=4 → k = 0 → own loss
        let ds = toy_dataset(vec![0; 3], 1);
        let cache = LossCache::from_plain(vec![9.0, 1.0, 1.0], 0).unwrap();
        let params = RegroupParams::new(4, 1);
        assert_eq!(estimate_for_sample(0, &ds, &cache, &params, &mut rng()).unwrap(), 9.0);
    }

    #[test]
    fn outlier_estimate_within_group_mean_range() {
        // Explicit class: one outlier at 25, tight members in [0.1, 0.3].
        let mut losses = vec![25.0];
        losses.extend((0..30).map(|i| 0.1 + 0.2 * i as f64 / 29.0));
        let ds = toy_dataset(vec![0; losses.len()], 1);
        let cache = LossCache::from_plain(losses, 0).unwrap();
        let params = RegroupParams::new(6, 2);
        let mut r = rng();
        for _ in 0..500 {
            let est = estimate_for_sample(0, &ds, &cache, &params, &mut r).unwrap();
            assert!((0.1..=0.3).contains(&est), "{est}");
        }
    }

    #[test]
    fn sample_never_selects_itself() {
        // Only the sample itself has a tiny loss; all others are equal.
        // With self-exclusion the estimate is the common value.
        let mut losses = vec![5.0; 13];
        losses[4] = 0.0;
        let ds = toy_dataset(vec![0; 13], 1);
        let cache = LossCache::from_plain(losses, 0).unwrap();
        let params = RegroupParams::new(2, 6);
        let est = estimate_for_sample(4, &ds, &cache, &params, &mut rng()).unwrap();
        assert_eq!(est, 5.0);
    }

    #[test]
    fn propagate_and_correct_examples() {
        let cache = LossCache::new(vec![4.0, 3.0, 0.0], vec![1.0, 3.0, 0.0], 2).unwrap();
        assert_eq!(propagate_estimate(&cache, 0, 2.0), 0.5);
        assert_eq!(propagate_estimate(&cache, 1, 7.0), 7.0);
        assert_eq!(propagate_estimate(&cache, 2, 1.0), 0.0);
        let cache = LossCache::new(vec![0.0], vec![0.5], 0);
        assert!(cache.is_ok());
        let cache = cache.unwrap();
        let raw = propagate_estimate(&cache, 0, 1.0);
        assert_eq!(raw, 1.0 * 0.5 / DIVISION_FLOOR);
        assert_eq!(correct_estimate(raw, 1.0), 1.0);

        assert_eq!(correct_estimate(5.0, 2.0), 2.0);
        assert_eq!(correct_estimate(2.0, 5.0), 2.0);
        assert_eq!(correct_estimate(3.0, 3.0), 3.0);
    }

    #[test]
    fn batch_weight_examples() {
        let cache = LossCache::from_plain(vec![1.0, 2.0, 3.0], 1).unwrap();
        assert_eq!(batch_weights(&cache, &[0, 1, 2], &[0.5, 0.7, 4.0]).unwrap(), vec![1.0; 3]);
        let cache = LossCache::new(vec![1.0, 2.0], vec![0.0, 2.0], 1).unwrap();
        assert_eq!(batch_weights(&cache, &[0, 1], &[0.5, 0.7]).unwrap(), vec![0.0, 1.0]);
        assert!(batch_weights(&cache, &[5], &[1.0]).is_err());
    }

    #[test]
    fn batch_weights_reproduce_batch_mean() {
        let mut r = rng();
        for _ in 0..1000 {
            let n = 1 + r.below(64);
            let plain: Vec<f64> = (0..n).map(|_| 5.0 * r.next_f64()).collect();
            let rml: Vec<f64> = plain.iter().map(|p| p * r.next_f64()).collect();
            let cache = LossCache::new(plain, rml, 3).unwrap();
            let batch: Vec<usize> = (0..1 + r.below(n)).map(|_| r.below(n)).collect();
            let fresh: Vec<f64> = batch.iter().map(|_| 4.0 * r.next_f64()).collect();
            let w = batch_weights(&cache, &batch, &fresh).unwrap();
            assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
            let weighted = w.iter().zip(&fresh).map(|(a, b)| a * b).sum::<f64>() / batch.len() as f64;
            let direct: f64 = batch
                .iter()
                .zip(&fresh)
                .map(|(&i, &f)| (f * cache.rml()[i] / cache.plain()[i].max(DIVISION_FLOOR)).min(f))
                .sum::<f64>()
                / batch.len() as f64;
            assert!((weighted - direct).abs() < 1e-9);
            assert!((batch_rml_mean(&cache, &batch, &fresh) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn estimate_all_corrects_and_is_deterministic() {
        let mut r = rng();
        let labels: Vec<usize> = (0..300).map(|i| i % 3).collect();
        let ds = toy_dataset(labels, 3);
        let plain: Vec<f64> = (0..300).map(|_| 3.0 * r.next_f64()).collect();
        let params = RegroupParams::new(6, 5);
        let base = RngStream::new(1, 2);
        let a = estimate_all(plain.clone(), 4, &ds, &params, RmlVariant::FULL, &base).unwrap();
        let b = estimate_all(plain.clone(), 4, &ds, &params, RmlVariant::FULL, &base).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.epoch(), 4);
        assert!(a.rml().iter().zip(a.plain()).all(|(r, p)| r <= p));
        // agrees with the per-sample path under the same keyed stream
        for i in [0, 1, 150, 299] {
            let mut s = base.substream(4).substream(i as u64);
            let est = estimate_for_sample(i, &ds, &a, &params, &mut s).unwrap();
            assert_eq!(a.rml()[i], est.min(plain[i]));
        }
        for variant in [RmlVariant::WITHOUT_MEDIAN, RmlVariant::WITHOUT_PROCESSING] {
            let c = estimate_all(plain.clone(), 4, &ds, &params, variant, &base).unwrap();
            assert!(c.rml().iter().zip(c.plain()).all(|(r, p)| r <= p));
        }
    }

    #[test]
    fn cache_validation() {
        assert!(LossCache::new(vec![1.0], vec![], 0).is_err());
        assert!(LossCache::new(vec![-1.0], vec![0.0], 0).is_err());
        assert!(LossCache::new(vec![f64::NAN], vec![0.0], 0).is_err());
    }

    #[test]
    fn cache_csv_columns() {
        let ds = Dataset::new(Matrix::zeros(2, 1), Some(vec![0, 1]), vec![0, 0], 2).unwrap();
        let cache = LossCache::new(vec![0.5, 2.0], vec![0.5, 1.0], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cache.csv");
        write_cache_csv(&p, &ds, &cache).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "sample_id,true_label,observed_label,loss_plain,loss_rml,is_corrupted");
        assert_eq!(lines[1], "0,0,0,0.5,0.5,false");
        assert_eq!(lines[2], "1,1,0,2,1,true");
    }
}
