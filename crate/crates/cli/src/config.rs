//! Experiment configuration file (TOML).
//!
//! Relative paths are resolved against the directory holding the config
//! file. Every table rejects unknown keys.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use rlfat_core::rbs::SplitMode;
use rlfat_core::{AttackBudget, AttackSpec, Method, ModelSpec, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Experiment id, copied into every metrics record.
    pub id: String,
    /// Master seed; every stage derives its own from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub train: TrainSection,
    #[serde(default)]
    pub attacks: Vec<AttackSpec>,
    #[serde(default)]
    pub sensitivity: SensitivityConfig,
    #[serde(default)]
    pub saliency: SaliencyConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Cifar10 {
        train_files: Vec<PathBuf>,
        test_file: PathBuf,
    },
    Synthetic {
        classes: usize,
        /// `[channels, height, width]`.
        shape: [usize; 3],
        train_per_class: usize,
        test_per_class: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Class-balanced subset sizes; the whole split when absent.
    #[serde(default)]
    pub train_per_class: Option<usize>,
    #[serde(default)]
    pub test_per_class: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_widths")]
    pub conv_widths: Vec<usize>,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
}

fn default_widths() -> Vec<usize> {
    vec![16, 32]
}

fn default_hidden() -> usize {
    128
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            conv_widths: default_widths(),
            hidden: default_hidden(),
        }
    }
}

/// Training table as written in the file; `into_config` fills defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub method: Method,
    #[serde(default)]
    pub lambda: Option<f64>,
    /// Defaults to 0.5 for RLFAT_P and 1 for RLFAT_T.
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub rbs_k: Option<usize>,
    #[serde(default)]
    pub split_mode: SplitMode,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    pub steps: usize,
    #[serde(default = "AttackBudget::mnist")]
    pub attack: AttackBudget,
}

impl TrainSection {
    pub fn into_config(&self, seed: u64) -> TrainConfig {
        let base = TrainConfig::new(self.method);
        TrainConfig {
            lambda: self.lambda.unwrap_or(base.lambda),
            eta: self.eta.unwrap_or(base.eta),
            rbs_k: self.rbs_k.unwrap_or(base.rbs_k),
            split_mode: self.split_mode,
            budget: self.attack,
            lr: self.lr.unwrap_or(base.lr),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            steps: self.steps,
            seed,
            ..base
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityConfig {
    #[serde(default = "default_brightness")]
    pub brightness: Vec<f64>,
    #[serde(default = "default_gamma")]
    pub gamma: Vec<f64>,
    /// Test examples used; all when absent.
    #[serde(default)]
    pub samples: Option<usize>,
}

fn default_brightness() -> Vec<f64> {
    vec![-0.15, 0.15]
}

fn default_gamma() -> Vec<f64> {
    vec![0.8, 1.2]
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            brightness: default_brightness(),
            gamma: default_gamma(),
            samples: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaliencyConfig {
    /// Test-set indices to explain.
    #[serde(default)]
    pub indices: Vec<usize>,
    #[serde(default = "default_sg_samples")]
    pub samples: usize,
    /// Noise standard deviation, as a fraction of the `[0, 1]` pixel range.
    #[serde(default = "default_sg_sigma")]
    pub sigma: f64,
}

fn default_sg_samples() -> usize {
    50
}

fn default_sg_sigma() -> f64 {
    0.1
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self {
            indices: Vec::new(),
            samples: default_sg_samples(),
            sigma: default_sg_sigma(),
        }
    }
}

impl ExperimentConfig {
    pub fn train_config(&self) -> TrainConfig {
        self.train.into_config(rlfat_core::seed::derive_seed(self.seed, "train"))
    }

    pub fn model_spec(&self, input: [usize; 3], classes: usize) -> ModelSpec {
        ModelSpec::convnet(
            input,
            classes,
            &self.model.conv_widths,
            self.model.hidden,
            rlfat_core::seed::derive_seed(self.seed, "model"),
        )
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        match &mut self.data.source {
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    fix(p);
                }
            }
            DataSource::Cifar10 { train_files, test_file } => {
                train_files.iter_mut().for_each(fix);
                fix(test_file);
            }
            DataSource::Synthetic { .. } => {}
        }
    }

    /// Checks value ranges and that every referenced input file exists.
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            bail!("`id` must not be empty");
        }
        self.train_config().validate().context("[train]")?;
        for a in &self.attacks {
            a.validate().with_context(|| format!("attack `{}`", a.name()))?;
        }
        if self.model.conv_widths.contains(&0) || self.model.hidden == 0 {
            bail!("[model] widths must be positive");
        }
        if self.saliency.samples == 0 || !(self.saliency.sigma >= 0.0) {
            bail!("[saliency] needs samples >= 1 and sigma >= 0");
        }
        let files: Vec<&PathBuf> = match &self.data.source {
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => vec![train_images, train_labels, test_images, test_labels],
            DataSource::Cifar10 { train_files, test_file } => {
                if train_files.is_empty() {
                    bail!("[data.source] needs at least one CIFAR-10 training file");
                }
                train_files.iter().chain(std::iter::once(test_file)).collect()
            }
            DataSource::Synthetic {
                classes,
                train_per_class,
                test_per_class,
                ..
            } => {
                if *classes < 2 || *train_per_class == 0 || *test_per_class == 0 {
                    bail!("[data.source] synthetic data needs >= 2 classes and >= 1 example per class");
                }
                Vec::new()
            }
        };
        for f in files {
            if !f.is_file() {
                bail!("data file {} does not exist", f.display());
            }
        }
        Ok(())
    }
}

/// Parses and validates a config; relative paths resolve against `base`.
pub fn parse_config(text: &str, base: &Path) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = toml::from_str(text).context("parsing experiment config")?;
    cfg.resolve(base);
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base).with_context(|| format!("in {}", path.display()))
}
