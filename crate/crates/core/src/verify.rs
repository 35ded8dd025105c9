//! Statistical checks of the selection-probability identity, the
//! median-of-means concentration bound, its robustness to contamination,
//! and the clean-mass gain of processed-loss selection.

use std::collections::BTreeMap;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::noise::corruption_mask;
use crate::numerics::{standard_normal, RngStream};
use crate::rml::{probability_shift, regroup_median, LossCache, RegroupParams, SelectionDistribution, SelectionRule};

/// Identity tolerance for the log-probability shift.
pub const SHIFT_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    /// The bound's premise does not hold; nothing was asserted.
    Vacuous,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub check: String,
    pub trials: u64,
    pub statistic: f64,
    pub bound: Option<f64>,
    pub pass: bool,
    pub status: Status,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub details: BTreeMap<String, f64>,
}

impl Report {
    fn new(check: &str, trials: u64, statistic: f64, bound: Option<f64>, pass: bool) -> Self {
        Self {
            check: check.to_string(),
            trials,
            statistic,
            bound,
            pass,
            status: if pass { Status::Pass } else { Status::Fail },
            details: BTreeMap::new(),
        }
    }

    fn detail(mut self, key: &str, value: f64) -> Self {
        self.details.insert(key.to_string(), value);
        self
    }
}

/// Draws `trials` loss vectors of length `m` uniformly from `[0, max_loss]`
/// and compares the direct shift `log p − log p̃` against `ℓ² − β` (ε = 1).
/// Also requires `β > 0` and that the shift is positive exactly when
/// `ℓ² > β`. The statistic is the largest identity residual.
pub fn check_prop1(trials: u64, m: usize, max_loss: f64, rng: &mut RngStream) -> Result<Report> {
    if m < 2 {
        return Err(Error::invalid("loss vectors need at least two entries"));
    }
    let mut worst: f64 = 0.0;
    let mut beta_ok = true;
    let mut sign_ok = true;
    let mut min_beta = f64::INFINITY;
    for _ in 0..trials {
        let losses: Vec<f64> = (0..m).map(|_| max_loss * rng.next_f64()).collect();
        let (residual, beta, signs) = prop1_vector(&losses)?;
        worst = worst.max(residual);
        min_beta = min_beta.min(beta);
        beta_ok &= beta > 0.0;
        sign_ok &= signs;
    }
    let pass = worst < SHIFT_TOLERANCE && beta_ok && sign_ok;
    Ok(Report::new("prop1", trials, worst, Some(SHIFT_TOLERANCE), pass)
        .detail("min_beta", min_beta)
        .detail("sign_rule_held", f64::from(u8::from(sign_ok))))
}

/// Residual, β, and whether the sign rule holds for one loss vector.
pub fn prop1_vector(losses: &[f64]) -> Result<(f64, f64, bool)> {
    let shift = probability_shift(losses, 1.0)?;
    let mut residual: f64 = 0.0;
    let mut signs = true;
    for (l, s) in losses.iter().zip(&shift.shifts) {
        let predicted = l * l - shift.beta;
        residual = residual.max((s - predicted).abs());
        if predicted.abs() > SHIFT_TOLERANCE {
            signs &= (*s > 0.0) == (predicted > 0.0);
        }
    }
    Ok((residual, shift.beta, signs))
}

/// Regroup median on raw population draws: the first `n·k` values are the selected
/// losses, the last is the sample's own loss.
pub fn mom_estimate(samples: &[f64], n: usize, k: usize, rng: &mut RngStream) -> Result<f64> {
    let params = RegroupParams::new(n, k);
    if samples.len() != params.selected() + 1 {
        return Err(Error::invalid(format!("expected n·k + 1 = {} samples", params.selected() + 1)));
    }
    let (selected, own) = samples.split_at(params.selected());
    Ok(regroup_median(own[0], selected, &params, rng)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Population {
    PointMass { value: f64 },
    Normal { mean: f64, sd: f64 },
    /// Normal draws of which exactly `corrupted` are replaced by `outlier`.
    Contaminated { mean: f64, sd: f64, corrupted: usize, outlier: f64 },
}

impl Population {
    /// Mean `μ̂` of the uncorrupted population.
    pub fn mean(&self) -> f64 {
        match *self {
            Population::PointMass { value } => value,
            Population::Normal { mean, .. } | Population::Contaminated { mean, .. } => mean,
        }
    }

    /// Variance `σ̂²` of the uncorrupted population.
    pub fn variance(&self) -> f64 {
        match *self {
            Population::PointMass { .. } => 0.0,
            Population::Normal { sd, .. } | Population::Contaminated { sd, .. } => sd * sd,
        }
    }

    pub fn draw(&self, count: usize, rng: &mut RngStream) -> Vec<f64> {
        match *self {
            Population::PointMass { value } => vec![value; count],
            Population::Normal { mean, sd } => (0..count).map(|_| mean + sd * standard_normal(rng)).collect(),
            Population::Contaminated {
                mean,
                sd,
                corrupted,
                outlier,
            } => {
                let mut v: Vec<f64> = (0..count).map(|_| mean + sd * standard_normal(rng)).collect();
                let mut slots: Vec<usize> = (0..count).collect();
                rng.shuffle(&mut slots);
                for &i in slots.iter().take(corrupted) {
                    v[i] = outlier;
                }
                v
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomExperiment {
    pub population: Population,
    pub n: usize,
    pub k: usize,
    /// Concentration radius.
    pub epsilon_r: f64,
    pub trials: u64,
    #[serde(default)]
    pub seed: u64,
}

impl MomExperiment {
    pub fn validate(&self) -> Result<()> {
        RegroupParams::new(self.n, self.k).validate()?;
        if !(self.epsilon_r > 0.0) || !self.epsilon_r.is_finite() {
            return Err(Error::invalid("epsilon_r must be positive"));
        }
        if !self.population.variance().is_finite() {
            return Err(Error::invalid("population variance must be finite"));
        }
        if self.trials == 0 {
            return Err(Error::invalid("trials must be positive"));
        }
        Ok(())
    }

    /// `(C₁, C₂) = (2(n+1), (n+k)/(k(n+1)))`
    pub fn constants(&self) -> (f64, f64) {
        let (n, k) = (self.n as f64, self.k as f64);
        (2.0 * (n + 1.0), (n + k) / (k * (n + 1.0)))
    }

    /// `1/2 − C₂·σ̂²/ε_r²`; the bound says nothing unless this is positive.
    pub fn margin(&self) -> f64 {
        0.5 - self.constants().1 * self.population.variance() / (self.epsilon_r * self.epsilon_r)
    }

    /// `exp(−C₁·margin²)`, or `None` when the margin is not positive.
    pub fn bound(&self) -> Option<f64> {
        let margin = self.margin();
        (margin > 0.0).then(|| (-self.constants().0 * margin * margin).exp())
    }

    /// Fraction of trials with `|estimate − μ̂| > ε_r`. Trial `t` draws from
    /// its own substream, so the result does not depend on thread count.
    pub fn exceedance_rate(&self) -> Result<f64> {
        self.validate()?;
        let base = RngStream::new(self.seed, 0x9090);
        let workers = thread::available_parallelism().map_or(1, usize::from).min(16) as u64;
        let chunk = self.trials.div_ceil(workers);
        let mu = self.population.mean();
        let counts: Vec<Result<u64>> = thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let base = &base;
                    scope.spawn(move || -> Result<u64> {
                        let mut hits = 0;
                        for t in (w * chunk)..((w + 1) * chunk).min(self.trials) {
                            let mut rng = base.substream(t);
                            let draws = self.population.draw(self.n * self.k + 1, &mut rng);
                            let est = mom_estimate(&draws, self.n, self.k, &mut rng)?;
                            hits += u64::from((est - mu).abs() > self.epsilon_r);
                        }
                        Ok(hits)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("trial worker panicked")).collect()
        });
        let hits = counts.into_iter().sum::<Result<u64>>()?;
        Ok(hits as f64 / self.trials as f64)
    }
}

/// Monte Carlo check that the exceedance rate does not exceed the analytic
/// bound by more than three binomial standard errors. Configurations with a
/// non-positive margin are reported as vacuous.
pub fn check_prop2(experiment: &MomExperiment) -> Result<Report> {
    let rate = experiment.exceedance_rate()?;
    let mut report = match experiment.bound() {
        Some(bound) => {
            let se = (bound * (1.0 - bound) / experiment.trials as f64).sqrt();
            Report::new("prop2", experiment.trials, rate, Some(bound), rate <= bound + 3.0 * se).detail("standard_error", se)
        }
        None => {
            let mut r = Report::new("prop2", experiment.trials, rate, None, true);
            r.status = Status::Vacuous;
            r
        }
    };
    report.details.insert("margin".into(), experiment.margin());
    Ok(report)
}

/// Requires the estimate to stay within `ε_r` of `μ̂` in at least
/// `1 − max_rate` of the trials.
pub fn check_contamination(experiment: &MomExperiment, max_rate: f64) -> Result<Report> {
    let rate = experiment.exceedance_rate()?;
    Ok(Report::new("contamination", experiment.trials, rate, Some(max_rate), rate <= max_rate))
}

/// For every `n` in `ns` and `k` in `ks`, replaces every subset of at most
/// `⌈(n+1)/2⌉ − 1` of the `n + 1` pooled values (group means and own loss)
/// with extreme values of every sign pattern, keeping the random partition
/// fixed, and counts medians that leave `[min, max]` of the untouched
/// values. `bases` random base draws are tried per `(n, k)`.
pub fn check_mom_exhaustive(ns: &[usize], ks: &[usize], bases: usize, rng: &mut RngStream) -> Result<Report> {
    const FAR: f64 = 1e9;
    let mut cases = 0u64;
    let mut violations = 0u64;
    for &n in ns {
        for &k in ks {
            let params = RegroupParams::new(n, k);
            params.validate()?;
            let budget = (n + 1).div_ceil(2) - 1;
            for _ in 0..bases {
                let selected: Vec<f64> = (0..n * k).map(|_| 5.0 * rng.next_f64()).collect();
                let own = 5.0 * rng.next_f64();
                let partition_rng = rng.substream(rng.counter());
                rng.next_f64();
                let (_, groups) = regroup_median(own, &selected, &params, &mut partition_rng.clone())?;
                for subset in 0u32..(1 << (n + 1)) {
                    let touched = subset.count_ones() as usize;
                    if touched > budget {
                        continue;
                    }
                    let positions: Vec<usize> = (0..=n).filter(|p| subset >> p & 1 == 1).collect();
                    let mut untouched: Vec<f64> = (0..n).filter(|g| subset >> g & 1 == 0).map(|g| groups.means[g]).collect();
                    if subset >> n & 1 == 0 {
                        untouched.push(own);
                    }
                    let lo = untouched.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = untouched.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    for signs in 0u32..(1 << touched) {
                        let mut corrupted = selected.clone();
                        let mut own_c = own;
                        for (bit, &p) in positions.iter().enumerate() {
                            let value = if signs >> bit & 1 == 1 { FAR } else { -FAR };
                            if p == n {
                                own_c = value;
                            } else {
                                for &i in &groups.groups[p] {
                                    corrupted[i] = value;
                                }
                            }
                        }
                        let (est, _) = regroup_median(own_c, &corrupted, &params, &mut partition_rng.clone())?;
                        cases += 1;
                        violations += u64::from(!(lo..=hi).contains(&est));
                    }
                }
            }
        }
    }
    Ok(Report::new("mom", cases, violations as f64, Some(0.0), violations == 0))
}

/// Per class, the selection mass on truly clean members under `exp(−ℓ)`
/// and under `exp(−ℓ(ℓ+ε))`, averaged over classes with members. The
/// direction is asserted only when corrupted samples have the larger mean
/// cached loss; otherwise the masses are reported and the check passes.
pub fn check_cor1(dataset: &Dataset, cache: &LossCache, epsilon_bias: f64) -> Result<Report> {
    let mask = corruption_mask(dataset)?;
    if cache.len() != dataset.len() {
        return Err(Error::invalid("cache does not match dataset"));
    }
    let losses = cache.plain();
    let (mut plain_mass, mut processed_mass, mut classes) = (0.0, 0.0, 0usize);
    for (label, members) in dataset.class_index().iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let class_losses: Vec<f64> = members.iter().map(|&i| losses[i]).collect();
        let masses = [SelectionRule::Plain, SelectionRule::Processed].map(|rule| {
            SelectionDistribution::new(label, members.clone(), &class_losses, epsilon_bias, rule).map(|d| {
                d.members
                    .iter()
                    .zip(&d.probs)
                    .filter(|(&i, _)| !mask[i])
                    .map(|(_, p)| p)
                    .sum::<f64>()
            })
        });
        let [plain, processed] = masses;
        plain_mass += plain?;
        processed_mass += processed?;
        classes += 1;
    }
    let classes = classes.max(1) as f64;
    plain_mass /= classes;
    processed_mass /= classes;
    let mean_of = |want: bool| {
        let v: Vec<f64> = losses.iter().zip(&mask).filter(|(_, &m)| m == want).map(|(l, _)| *l).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let premise = matches!((mean_of(true), mean_of(false)), (Some(noisy), Some(clean)) if noisy > clean);
    let holds = processed_mass >= plain_mass - 1e-12;
    let mut report = Report::new("cor1", 1, processed_mass - plain_mass, Some(0.0), !premise || holds)
        .detail("clean_mass_plain", plain_mass)
        .detail("clean_mass_processed", processed_mass)
        .detail("premise_held", f64::from(u8::from(premise)));
    if !premise {
        report.status = Status::Vacuous;
    }
    Ok(report)
}
