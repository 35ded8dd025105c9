//! Training loops: cross-entropy baseline, regroup-median training with a
//! momentum teacher, and the semi-supervised variant that keeps samples on
//! which student, teacher and observed label agree.

mod metrics;

use serde::{Deserialize, Serialize};

pub use metrics::{metrics_csv, write_metrics_csv, MetricsRow, METRICS_HEADER};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax, ema_update, sgd_step, ModelState, OptimizerConfig, OptimizerState};
use crate::noise::corruption_mask;
use crate::numerics::{Matrix, RngStream};
use crate::rml::{batch_rml_mean, batch_weights, estimate_all, per_sample_selection_probs, LossCache, RegroupParams, RmlVariant, SelectionRule};
use metrics::split_means;

/// RNG stream ids. Model initialization draws from [`STREAM_INIT`].
pub const STREAM_INIT: u64 = 0x1717;
const STREAM_BATCHES: u64 = 0x2121;
const STREAM_CACHE: u64 = 0x3535;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Ce,
    Rml,
    RmlSemi,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Ce => "ce",
            Mode::Rml => "rml",
            Mode::RmlSemi => "rml_semi",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    /// Total epochs `T₁`.
    pub total_epochs: usize,
    /// Epoch `T₂` after which semi-supervised training starts; defaults to `T₁`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub common_epochs: Option<usize>,
    pub batch_size: usize,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub regroup: RegroupParams,
    /// EMA weight λ of the teacher.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub variant: RmlVariant,
}

fn default_warmup() -> usize {
    1
}

fn default_lambda() -> f64 {
    0.999
}

impl RunConfig {
    pub fn new(mode: Mode, total_epochs: usize, batch_size: usize) -> Self {
        Self {
            mode,
            total_epochs,
            common_epochs: None,
            batch_size,
            warmup_epochs: default_warmup(),
            regroup: RegroupParams::default(),
            lambda: default_lambda(),
            seed: 0,
            variant: RmlVariant::FULL,
        }
    }

    pub fn switch_epoch(&self) -> usize {
        self.common_epochs.unwrap_or(self.total_epochs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.switch_epoch() > self.total_epochs {
            return Err(Error::invalid(format!(
                "common_epochs {} exceeds total_epochs {}",
                self.switch_epoch(),
                self.total_epochs
            )));
        }
        if self.mode != Mode::Ce {
            if self.warmup_epochs == 0 {
                return Err(Error::invalid("warmup_epochs must be at least 1 for rml modes"));
            }
            self.regroup.validate()?;
        }
        if self.mode == Mode::RmlSemi && self.switch_epoch() < self.warmup_epochs {
            return Err(Error::invalid("common_epochs must not precede the end of warmup"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub student: ModelState,
    /// Momentum teacher; absent for cross-entropy runs.
    pub teacher: Option<ModelState>,
    pub metrics: Vec<MetricsRow>,
    /// Cache built after the final epoch in rml modes.
    pub cache: Option<LossCache>,
}

impl TrainOutcome {
    pub fn final_accuracy(&self) -> f64 {
        self.metrics.last().map_or(f64::NAN, |r| r.test_accuracy)
    }
}

/// Plain cross-entropy training on shuffled mini-batches.
pub fn train_ce(
    train: &Dataset,
    test: &Dataset,
    model: ModelState,
    optimizer: &OptimizerConfig,
    config: &RunConfig,
) -> Result<TrainOutcome> {
    let config = RunConfig {
        mode: Mode::Ce,
        ..config.clone()
    };
    run(train, test, model, None, optimizer, &config)
}

/// Warmup with plain CE, then per-sample weights from the regroup-median
/// cache; the teacher follows the student by EMA after every step.
pub fn train_rml(
    train: &Dataset,
    test: &Dataset,
    model: ModelState,
    teacher: ModelState,
    optimizer: &OptimizerConfig,
    config: &RunConfig,
) -> Result<TrainOutcome> {
    let config = RunConfig {
        mode: Mode::Rml,
        ..config.clone()
    };
    run(train, test, model, Some(teacher), optimizer, &config)
}

/// Regroup-median training up to `common_epochs`, then mixup between the
/// agreed-upon labeled set and the rest.
pub fn train_rml_semi(
    train: &Dataset,
    test: &Dataset,
    model: ModelState,
    teacher: ModelState,
    optimizer: &OptimizerConfig,
    config: &RunConfig,
) -> Result<TrainOutcome> {
    let config = RunConfig {
        mode: Mode::RmlSemi,
        ..config.clone()
    };
    run(train, test, model, Some(teacher), optimizer, &config)
}

/// Dispatches on `config.mode`; the teacher starts as a copy of the student.
pub fn train(
    train: &Dataset,
    test: &Dataset,
    model: ModelState,
    optimizer: &OptimizerConfig,
    config: &RunConfig,
) -> Result<TrainOutcome> {
    match config.mode {
        Mode::Ce => train_ce(train, test, model, optimizer, config),
        Mode::Rml => {
            let teacher = model.clone();
            train_rml(train, test, model, teacher, optimizer, config)
        }
        Mode::RmlSemi => {
            let teacher = model.clone();
            train_rml_semi(train, test, model, teacher, optimizer, config)
        }
    }
}

/// Indices whose student and teacher predictions both equal the observed
/// label, and the remainder.
pub fn separate(dataset: &Dataset, student: &ModelState, teacher: &ModelState) -> Result<(Vec<usize>, Vec<usize>)> {
    let a = student.predict(dataset.features())?;
    let b = teacher.predict(dataset.features())?;
    let (mut labeled, mut unlabeled) = (Vec::new(), Vec::new());
    for (i, &y) in dataset.observed_labels().iter().enumerate() {
        if a[i] == y && b[i] == y {
            labeled.push(i);
        } else {
            unlabeled.push(i);
        }
    }
    Ok((labeled, unlabeled))
}

/// `max(γ, 1 − γ)`
pub fn reflect_gamma(gamma: f64) -> f64 {
    gamma.max(1.0 - gamma)
}

/// `γ·x + (1 − γ)·x_u` elementwise.
pub fn mix_features(features: &Matrix, unlabeled: &Matrix, gamma: f64) -> Result<Matrix> {
    if features.shape() != unlabeled.shape() {
        return Err(Error::invalid(format!(
            "mixup shapes differ: {:?} vs {:?}",
            features.shape(),
            unlabeled.shape()
        )));
    }
    let mut mixed = features.clone();
    for (m, u) in mixed.data_mut().iter_mut().zip(unlabeled.data()) {
        *m = gamma * *m + (1.0 - gamma) * u;
    }
    Ok(mixed)
}

/// Draws `γ ~ U[0, 1]`, reflects it into `[0.5, 1]` and mixes. Labels are
/// passed through unchanged.
pub fn mixup_batch(
    features: &Matrix,
    labels: &[usize],
    unlabeled: &Matrix,
    rng: &mut RngStream,
) -> Result<(Matrix, Vec<usize>, f64)> {
    if labels.len() != features.rows() {
        return Err(Error::invalid("one label per labeled row required"));
    }
    let gamma = reflect_gamma(rng.next_f64());
    let mixed = mix_features(features, unlabeled, gamma)?;
    Ok((mixed, labels.to_vec(), gamma))
}

/// Fraction of rows whose prediction matches `labels`.
pub fn accuracy(model: &ModelState, features: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(f64::NAN);
    }
    let logits = model.logits(features)?;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(logits.row(*i)) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

fn evaluation_labels(dataset: &Dataset) -> &[usize] {
    dataset.true_labels().unwrap_or(dataset.observed_labels())
}

enum Phase<'a> {
    Plain,
    Weighted(&'a LossCache),
    Semi { labeled: Vec<usize>, unlabeled: Vec<usize> },
}

struct Trainer<'a> {
    train: &'a Dataset,
    config: &'a RunConfig,
    student: ModelState,
    teacher: Option<ModelState>,
    optimizer: OptimizerState,
}

impl Trainer<'_> {
    fn step(&mut self, epoch: usize, features: &Matrix, labels: &[usize], weights: StepWeights<'_>) -> Result<f64> {
        let (losses, grads) = match weights {
            StepWeights::Unit => self.student.loss_and_grad_with(features, labels, |l| Ok(vec![1.0; l.len()]))?,
            StepWeights::Cache(cache, batch) => self.student.loss_and_grad_with(features, labels, |fresh| {
                let w = batch_weights(cache, batch, fresh)?;
                debug_assert!({
                    let weighted = w.iter().zip(fresh).map(|(a, b)| a * b).sum::<f64>() / fresh.len() as f64;
                    (weighted - batch_rml_mean(cache, batch, fresh)).abs() <= 1e-9
                });
                Ok(w)
            })?,
        };
        let objective = match weights {
            StepWeights::Unit => losses.iter().sum::<f64>(),
            StepWeights::Cache(cache, batch) => batch_rml_mean(cache, batch, &losses) * batch.len() as f64,
        };
        sgd_step(&mut self.student, &mut self.optimizer, &grads, epoch)?;
        if let Some(teacher) = self.teacher.as_mut() {
            ema_update(teacher, &self.student, self.config.lambda)?;
        }
        Ok(objective)
    }

    /// Runs one epoch and returns the summed objective.
    fn epoch(&mut self, epoch: usize, phase: &Phase<'_>, rng: &RngStream) -> Result<f64> {
        let wrap = |batch: usize| move |e: Error| Error::Training {
            epoch,
            batch,
            source: Box::new(e),
        };
        let features = self.train.features();
        let labels = self.train.observed_labels();
        let mut total = 0.0;
        match phase {
            Phase::Plain | Phase::Weighted(_) => {
                let mut order: Vec<usize> = (0..self.train.len()).collect();
                rng.substream(0).shuffle(&mut order);
                for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
                    let x = features.select_rows(batch);
                    let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                    let weights = match phase {
                        Phase::Weighted(cache) => StepWeights::Cache(cache, batch),
                        _ => StepWeights::Unit,
                    };
                    total += self.step(epoch, &x, &y, weights).map_err(wrap(b))?;
                }
            }
            Phase::Semi { labeled, unlabeled } => {
                let mut order = labeled.clone();
                rng.substream(0).shuffle(&mut order);
                let mut pool = unlabeled.clone();
                rng.substream(1).shuffle(&mut pool);
                let mut mix_rng = rng.substream(2);
                let mut cursor = 0;
                for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
                    let x = features.select_rows(batch);
                    let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                    let xu = if pool.is_empty() {
                        x.clone()
                    } else {
                        let paired: Vec<usize> = (0..batch.len()).map(|j| pool[(cursor + j) % pool.len()]).collect();
                        cursor = (cursor + batch.len()) % pool.len();
                        features.select_rows(&paired)
                    };
                    let (mixed, y, _) = mixup_batch(&x, &y, &xu, &mut mix_rng).map_err(wrap(b))?;
                    total += self.step(epoch, &mixed, &y, StepWeights::Unit).map_err(wrap(b))?;
                }
            }
        }
        Ok(total)
    }
}

#[derive(Clone, Copy)]
enum StepWeights<'a> {
    Unit,
    Cache(&'a LossCache, &'a [usize]),
}

fn run(
    train: &Dataset,
    test: &Dataset,
    student: ModelState,
    teacher: Option<ModelState>,
    optimizer: &OptimizerConfig,
    config: &RunConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    optimizer.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if student.dim() != train.dim() || student.classes() != train.num_classes() {
        return Err(Error::invalid(format!(
            "model expects {}x{} but data is {}x{}",
            student.dim(),
            student.classes(),
            train.dim(),
            train.num_classes()
        )));
    }
    let mask = corruption_mask(train).ok();
    let optimizer = OptimizerState::new(optimizer, &student, config.total_epochs)?;
    let mut trainer = Trainer {
        train,
        config,
        student,
        teacher,
        optimizer,
    };
    let batch_rng = RngStream::new(config.seed, STREAM_BATCHES);
    let cache_rng = RngStream::new(config.seed, STREAM_CACHE);
    let mut cache: Option<LossCache> = None;
    let mut metrics = Vec::with_capacity(config.total_epochs);

    for epoch in 0..config.total_epochs {
        let mut labeled_fraction = None;
        let phase = match (config.mode, cache.as_ref()) {
            (Mode::Ce, _) | (_, None) => Phase::Plain,
            (Mode::RmlSemi, Some(c)) if epoch >= config.switch_epoch() => {
                let teacher = trainer.teacher.as_ref().expect("rml modes keep a teacher");
                let (labeled, unlabeled) = separate(train, &trainer.student, teacher)?;
                labeled_fraction = Some(labeled.len() as f64 / train.len() as f64);
                if labeled.is_empty() {
                    Phase::Weighted(c)
                } else {
                    Phase::Semi { labeled, unlabeled }
                }
            }
            (_, Some(c)) if epoch >= config.warmup_epochs => Phase::Weighted(c),
            _ => Phase::Plain,
        };
        let seen = match &phase {
            Phase::Semi { labeled, .. } => labeled.len(),
            _ => train.len(),
        };
        let total = trainer.epoch(epoch, &phase, &batch_rng.substream(epoch as u64))?;
        drop(phase);

        let plain = trainer.student.losses(train.features(), train.observed_labels()).map_err(|e| Error::Training {
            epoch,
            batch: usize::MAX,
            source: Box::new(e),
        })?;
        let mut row = MetricsRow {
            epoch: epoch + 1,
            train_loss: total / seen as f64,
            test_accuracy: accuracy(&trainer.student, test.features(), evaluation_labels(test))?,
            clean_mean_loss: None,
            noisy_mean_loss: None,
            clean_mean_selection_prob: None,
            noisy_mean_selection_prob: None,
            clean_mean_selection_prob_plain: None,
            noisy_mean_selection_prob_plain: None,
            labeled_fraction,
        };
        if let Some(mask) = &mask {
            let eps = config.regroup.epsilon_bias;
            let processed = per_sample_selection_probs(train, &plain, eps, SelectionRule::Processed)?;
            let raw = per_sample_selection_probs(train, &plain, eps, SelectionRule::Plain)?;
            (row.clean_mean_loss, row.noisy_mean_loss) = split_means(&plain, mask);
            (row.clean_mean_selection_prob, row.noisy_mean_selection_prob) = split_means(&processed, mask);
            (row.clean_mean_selection_prob_plain, row.noisy_mean_selection_prob_plain) = split_means(&raw, mask);
        }
        metrics.push(row);
        if config.mode != Mode::Ce {
            cache = Some(estimate_all(plain, epoch + 1, train, &config.regroup, config.variant, &cache_rng)?);
        }
    }
    Ok(TrainOutcome {
        student: trainer.student,
        teacher: trainer.teacher,
        metrics,
        cache,
    })
}
