//! Experiment orchestration behind the `rml-lab` binary: config loading,
//! data preparation, and the `inject`, `train`, `verify` and `ablate`
//! commands. Every artifact is a function of the config and the seed.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Instant;

use serde::Serialize;

pub use config::{AblationSpec, Cor1Params, DatasetSpec, ExperimentConfig, MomParams, Prop1Params, SplitSpec, VerifyConfig};

use crate::data::{make_blobs, make_two_moons, read_container, read_idx, split, write_container, Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Architecture, ModelState, OptimizerConfig};
use crate::noise::{NoiseKind, NoiseSpec};
use crate::numerics::RngStream;
use crate::rml::{write_cache_csv, RegroupParams, RmlVariant};
use crate::trainer::{self, write_metrics_csv, Mode, RunConfig, TrainOutcome, STREAM_INIT};
use crate::verify::{self, Report};

const STREAM_DATA: u64 = 0xda7a;
const STREAM_SPLIT: u64 = 0x5b17;
const STREAM_VERIFY: u64 = 0x7e57;

/// Training and held-out test splits after standardization and noise.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
}

/// Generates or loads the dataset, splits it (stratified), standardizes
/// both splits with training statistics and injects noise into the
/// training split only.
pub fn prepare_data(config: &ExperimentConfig, seed: u64) -> Result<PreparedData> {
    let mut data_rng = RngStream::new(seed, STREAM_DATA);
    let mut split_rng = RngStream::new(seed, STREAM_SPLIT);
    let fraction = config.split.test_fraction;
    let (train, test) = match &config.dataset {
        DatasetSpec::Blobs {
            classes,
            per_class,
            dim,
            separation,
        } => split(&make_blobs(*classes, *per_class, *dim, *separation, &mut data_rng)?, fraction, &mut split_rng)?,
        DatasetSpec::TwoMoons { per_class, noise } => {
            split(&make_two_moons(*per_class, *noise, &mut data_rng)?, fraction, &mut split_rng)?
        }
        DatasetSpec::Idx {
            images,
            labels,
            test_images,
            test_labels,
        } => {
            let full = read_idx(images, labels)?;
            match (test_images, test_labels) {
                (Some(ti), Some(tl)) => align_classes(full, read_idx(ti, tl)?)?,
                _ => split(&full, fraction, &mut split_rng)?,
            }
        }
        DatasetSpec::File { path, test_path } => {
            let full = read_container(path)?;
            match test_path {
                Some(tp) => align_classes(full, read_container(tp)?)?,
                None => split(&full, fraction, &mut split_rng)?,
            }
        }
    };
    let (train, test) = if config.split.standardize {
        let s = Standardizer::fit(train.features());
        let tr = train.with_features(s.apply(train.features()))?;
        let te = test.with_features(s.apply(test.features()))?;
        (tr, te)
    } else {
        (train, test)
    };
    if train.dim() != test.dim() {
        return Err(Error::Consistency(format!(
            "train has {} features, test has {}",
            train.dim(),
            test.dim()
        )));
    }
    let train = match &config.noise {
        Some(noise) => noise.apply(&train, seed)?,
        None => train,
    };
    Ok(PreparedData { train, test })
}

fn align_classes(train: Dataset, test: Dataset) -> Result<(Dataset, Dataset)> {
    let c = train.num_classes().max(test.num_classes());
    let widen = |d: Dataset| -> Result<Dataset> {
        if d.num_classes() == c {
            return Ok(d);
        }
        Dataset::new(
            d.features().clone(),
            d.true_labels().map(<[usize]>::to_vec),
            d.observed_labels().to_vec(),
            c,
        )
    };
    Ok((widen(train)?, widen(test)?))
}

/// Initializes a model from the seed and trains it per `config.run`.
pub fn run_training(config: &ExperimentConfig, data: &PreparedData, seed: u64) -> Result<TrainOutcome> {
    let run = RunConfig {
        seed,
        ..config.run.clone()
    };
    let mut rng = RngStream::new(seed, STREAM_INIT);
    let model = ModelState::init(config.model, data.train.dim(), data.train.num_classes(), &mut rng);
    trainer::train(&data.train, &data.test, model, &config.optimizer, &run)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `sample_id,true_label,observed_label,is_corrupted`
pub fn mask_csv(dataset: &Dataset) -> Result<String> {
    let truth = dataset
        .true_labels()
        .ok_or_else(|| Error::Unavailable("no true labels, so no corruption mask".into()))?;
    let mut out = String::from("sample_id,true_label,observed_label,is_corrupted\n");
    for (i, (t, o)) in truth.iter().zip(dataset.observed_labels()).enumerate() {
        writeln!(out, "{i},{t},{o},{}", t != o).unwrap();
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct InjectSummary {
    pub train_samples: usize,
    pub test_samples: usize,
    pub corrupted_fraction: Option<f64>,
    pub train_path: PathBuf,
    pub test_path: PathBuf,
    pub mask_path: Option<PathBuf>,
}

fn write_dataset_artifacts(data: &PreparedData, out: &Path) -> Result<InjectSummary> {
    create_dir(out)?;
    let train_path = out.join("train.rmld");
    let test_path = out.join("test.rmld");
    write_container(&train_path, &data.train)?;
    write_container(&test_path, &data.test)?;
    let (mask_path, corrupted_fraction) = match data.train.true_labels() {
        Some(truth) => {
            let p = out.join("mask.csv");
            write_text(&p, &mask_csv(&data.train)?)?;
            let flipped = truth.iter().zip(data.train.observed_labels()).filter(|(a, b)| a != b).count();
            (Some(p), Some(flipped as f64 / data.train.len() as f64))
        }
        None => (None, None),
    };
    Ok(InjectSummary {
        train_samples: data.train.len(),
        test_samples: data.test.len(),
        corrupted_fraction,
        train_path,
        test_path,
        mask_path,
    })
}

/// Writes the noisy training split, the test split and the corruption mask.
pub fn cmd_inject(config: &ExperimentConfig, seed: u64, out: &Path) -> Result<InjectSummary> {
    let data = prepare_data(config, seed)?;
    write_dataset_artifacts(&data, out)
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub mode: Mode,
    pub seed: u64,
    pub epochs: usize,
    pub final_test_accuracy: f64,
    pub final_teacher_test_accuracy: Option<f64>,
    pub corrupted_fraction: Option<f64>,
    pub wall_time_secs: f64,
    pub config: ExperimentConfig,
}

/// Trains per `config.run.mode` and writes `metrics_<mode>.csv`,
/// `summary_<mode>.json`, checkpoints and, in rml modes, `cache_<mode>.csv`,
/// next to the shared dataset artifacts.
pub fn cmd_train(config: &ExperimentConfig, seed: u64, out: &Path) -> Result<TrainSummary> {
    let started = Instant::now();
    let data = prepare_data(config, seed)?;
    let artifacts = write_dataset_artifacts(&data, out)?;
    let outcome = run_training(config, &data, seed)?;
    let mode = config.run.mode.name();
    write_metrics_csv(out.join(format!("metrics_{mode}.csv")), &outcome.metrics)?;
    save_checkpoint(out.join(format!("checkpoint_{mode}_student.rmlc")), &outcome.student)?;
    let teacher_accuracy = match &outcome.teacher {
        Some(t) => {
            save_checkpoint(out.join(format!("checkpoint_{mode}_teacher.rmlc")), t)?;
            let labels = data.test.true_labels().unwrap_or(data.test.observed_labels());
            Some(trainer::accuracy(t, data.test.features(), labels)?)
        }
        None => None,
    };
    if let Some(cache) = &outcome.cache {
        write_cache_csv(out.join(format!("cache_{mode}.csv")), &data.train, cache)?;
    }
    let mut echoed = config.clone();
    echoed.run.seed = seed;
    let summary = TrainSummary {
        mode: config.run.mode,
        seed,
        epochs: outcome.metrics.len(),
        final_test_accuracy: outcome.final_accuracy(),
        final_teacher_test_accuracy: teacher_accuracy,
        corrupted_fraction: artifacts.corrupted_fraction,
        wall_time_secs: started.elapsed().as_secs_f64(),
        config: echoed,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_text(&out.join(format!("summary_{mode}.json")), &json)?;
    Ok(summary)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Prop1,
    Prop2,
    Cor1,
    Mom,
    All,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prop1" => Ok(Suite::Prop1),
            "prop2" => Ok(Suite::Prop2),
            "cor1" => Ok(Suite::Cor1),
            "mom" => Ok(Suite::Mom),
            "all" => Ok(Suite::All),
            other => Err(Error::invalid(format!(
                "unknown suite {other:?}; expected prop1, prop2, cor1, mom or all"
            ))),
        }
    }
}

/// Runs the selected checks. The caller decides the exit code from
/// `Report::pass`.
pub fn cmd_verify(suite: Suite, params: &VerifyConfig, seed: u64) -> Result<Vec<Report>> {
    let wants = |s: Suite| suite == s || suite == Suite::All;
    let mut reports = Vec::new();
    if wants(Suite::Prop1) {
        let p = &params.prop1;
        let mut rng = RngStream::new(seed, STREAM_VERIFY);
        reports.push(verify::check_prop1(p.trials, p.m, p.max_loss, &mut rng)?);
    }
    if wants(Suite::Prop2) {
        for exp in &params.prop2 {
            let exp = verify::MomExperiment {
                seed: exp.seed.wrapping_add(seed),
                ..*exp
            };
            reports.push(verify::check_prop2(&exp)?);
        }
    }
    if wants(Suite::Mom) {
        let p = &params.mom;
        let mut rng = RngStream::new(seed, STREAM_VERIFY + 1);
        reports.push(verify::check_mom_exhaustive(&p.ns, &p.ks, p.bases, &mut rng)?);
        let exp = verify::MomExperiment {
            seed: params.contamination.seed.wrapping_add(seed),
            ..params.contamination
        };
        reports.push(verify::check_contamination(&exp, params.contamination_max_rate)?);
    }
    if wants(Suite::Cor1) {
        reports.push(cor1_suite(&params.cor1, seed)?);
    }
    Ok(reports)
}

/// Trains `runs` small RML models on noisy blobs and checks each final cache.
fn cor1_suite(params: &Cor1Params, seed: u64) -> Result<Report> {
    let mut run = RunConfig::new(Mode::Rml, params.epochs, 32);
    run.warmup_epochs = params.epochs.clamp(1, 2);
    run.regroup = RegroupParams::new(2, 5);
    let config = ExperimentConfig {
        out_dir: None,
        dataset: DatasetSpec::Blobs {
            classes: 4,
            per_class: 100,
            dim: 8,
            separation: 3.0,
        },
        split: SplitSpec::default(),
        noise: Some(NoiseSpec {
            kind: NoiseKind::Symmetric,
            rate: params.noise_rate,
            rng_stream: 0x6e6f_6973_65,
        }),
        run,
        model: Architecture::Linear,
        optimizer: OptimizerConfig::new(0.05),
        ablation: None,
    };
    let mut diffs = Vec::with_capacity(params.runs);
    let mut pass = true;
    for r in 0..params.runs as u64 {
        let s = seed.wrapping_add(r);
        let data = prepare_data(&config, s)?;
        let outcome = run_training(&config, &data, s)?;
        let cache = outcome.cache.expect("rml runs produce a cache");
        let report = verify::check_cor1(&data.train, &cache, config.run.regroup.epsilon_bias)?;
        pass &= report.pass;
        diffs.push(report.statistic);
    }
    let mean = diffs.iter().sum::<f64>() / diffs.len().max(1) as f64;
    let positive = diffs.iter().filter(|d| **d > 0.0).count();
    let mut report = Report {
        check: "cor1".into(),
        trials: params.runs as u64,
        statistic: mean,
        bound: Some(0.0),
        pass: pass && mean >= 0.0,
        status: verify::Status::Pass,
        details: Default::default(),
    };
    if !report.pass {
        report.status = verify::Status::Fail;
    }
    report.details.insert("runs_with_gain".into(), positive as f64);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub seed: u64,
    pub full: f64,
    pub without_processing: f64,
    pub without_median: f64,
}

pub const ABLATION_VARIANTS: [(&str, RmlVariant); 3] = [
    ("full", RmlVariant::FULL),
    ("without_processing", RmlVariant::WITHOUT_PROCESSING),
    ("without_median", RmlVariant::WITHOUT_MEDIAN),
];

/// Runs `f(seed)` for every seed on its own thread; results keep seed order.
pub fn per_seed<T: Send>(seeds: &[u64], f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    thread::scope(|scope| {
        let f = &f;
        let handles: Vec<_> = seeds.iter().map(|&s| scope.spawn(move || f(s))).collect();
        handles.into_iter().map(|h| h.join().expect("seed worker panicked")).collect()
    })
}

/// Final test accuracy of the full method and both ablations per seed, on
/// identical data, initialization and batch order.
pub fn cmd_ablate(config: &ExperimentConfig, seeds: &[u64], out: &Path) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::invalid("ablation needs at least one seed"));
    }
    let mode = if config.run.mode == Mode::Ce { Mode::Rml } else { config.run.mode };
    let rows = per_seed(seeds, |seed| {
        let data = prepare_data(config, seed)?;
        let mut acc = [0.0; 3];
        for (slot, (_, variant)) in acc.iter_mut().zip(ABLATION_VARIANTS) {
            let mut cfg = config.clone();
            cfg.run.mode = mode;
            cfg.run.variant = variant;
            *slot = run_training(&cfg, &data, seed)?.final_accuracy();
        }
        Ok(AblationRow {
            seed,
            full: acc[0],
            without_processing: acc[1],
            without_median: acc[2],
        })
    })?;
    create_dir(out)?;
    write_text(&out.join("ablation.csv"), &ablation_csv(&rows))?;
    Ok(rows)
}

/// One row per seed followed by a `mean` row.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("seed,full,without_processing,without_median\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.seed, r.full, r.without_processing, r.without_median).unwrap();
    }
    let n = rows.len().max(1) as f64;
    let mean = |f: fn(&AblationRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    writeln!(
        out,
        "mean,{},{},{}",
        mean(|r| r.full),
        mean(|r| r.without_processing),
        mean(|r| r.without_median)
    )
    .unwrap();
    out
}
