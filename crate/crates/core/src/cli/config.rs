use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Architecture, OptimizerConfig};
use crate::noise::NoiseSpec;
use crate::trainer::RunConfig;
use crate::verify::MomExperiment;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        classes: usize,
        per_class: usize,
        dim: usize,
        separation: f64,
    },
    TwoMoons {
        per_class: usize,
        #[serde(default = "default_moon_noise")]
        noise: f64,
    },
    /// IDX image/label pairs; a test pair, when given, replaces the split.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_images: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_labels: Option<PathBuf>,
    },
    /// Dataset container written by `inject`.
    File {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_path: Option<PathBuf>,
    },
}

fn default_moon_noise() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Standardize features with training-split statistics.
    #[serde(default = "default_true")]
    pub standardize: bool,
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_true() -> bool {
    true
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            test_fraction: default_test_fraction(),
            standardize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    pub run: RunConfig,
    pub model: Architecture,
    pub optimizer: OptimizerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationSpec>,
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetSpec::Blobs {
                classes,
                per_class,
                dim,
                separation,
            } => {
                if *classes < 2 || *per_class < 2 || *dim < 1 || !(*separation > 0.0) {
                    return Err(Error::invalid(
                        "dataset: blobs need classes >= 2, per_class >= 2, dim >= 1, separation > 0",
                    ));
                }
            }
            DatasetSpec::TwoMoons { per_class, noise } => {
                if *per_class < 2 || !(*noise >= 0.0) {
                    return Err(Error::invalid("dataset: two_moons need per_class >= 2, noise >= 0"));
                }
            }
            DatasetSpec::Idx {
                test_images,
                test_labels,
                ..
            } => {
                if test_images.is_some() != test_labels.is_some() {
                    return Err(Error::invalid("dataset: test_images and test_labels go together"));
                }
            }
            DatasetSpec::File { .. } => {}
        }
        if !(self.split.test_fraction > 0.0 && self.split.test_fraction < 1.0) {
            return Err(Error::invalid("split.test_fraction must lie in (0, 1)"));
        }
        if let Some(noise) = &self.noise {
            noise.validate()?;
        }
        if let Architecture::Mlp { hidden: 0 } = self.model {
            return Err(Error::invalid("model.hidden must be positive"));
        }
        if let Some(a) = &self.ablation {
            if a.seeds.is_empty() {
                return Err(Error::invalid("ablation.seeds must not be empty"));
            }
        }
        self.run.validate()?;
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prop1Params {
    pub trials: u64,
    pub m: usize,
    pub max_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomParams {
    pub ns: Vec<usize>,
    pub ks: Vec<usize>,
    pub bases: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cor1Params {
    /// Number of independently trained caches.
    pub runs: usize,
    pub epochs: usize,
    pub noise_rate: f64,
}

/// Parameters of the `verify` suites. Every section is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub prop1: Prop1Params,
    pub prop2: Vec<MomExperiment>,
    pub contamination: MomExperiment,
    pub contamination_max_rate: f64,
    pub mom: MomParams,
    pub cor1: Cor1Params,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        use crate::verify::Population;
        Self {
            prop1: Prop1Params {
                trials: 10_000,
                m: 100,
                max_loss: 30.0,
            },
            prop2: vec![
                MomExperiment {
                    population: Population::Normal { mean: 1.0, sd: 1.0 },
                    n: 6,
                    k: 10,
                    epsilon_r: 1.0,
                    trials: 100_000,
                    seed: 0,
                },
                MomExperiment {
                    population: Population::PointMass { value: 1.0 },
                    n: 6,
                    k: 10,
                    epsilon_r: 1.0,
                    trials: 10_000,
                    seed: 0,
                },
            ],
            contamination: MomExperiment {
                population: Population::Contaminated {
                    mean: 1.0,
                    sd: 0.1,
                    corrupted: 2,
                    outlier: 1e6,
                },
                n: 6,
                k: 10,
                epsilon_r: 0.5,
                trials: 10_000,
                seed: 0,
            },
            contamination_max_rate: 0.01,
            mom: MomParams {
                ns: vec![2, 4, 6],
                ks: vec![1, 2, 3],
                bases: 20,
            },
            cor1: Cor1Params {
                runs: 5,
                epochs: 20,
                noise_rate: 0.4,
            },
        }
    }
}

impl VerifyConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}
