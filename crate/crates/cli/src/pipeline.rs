//! Experiment stages. Each stage can run alone against a saved checkpoint;
//! `run` chains them and records which stage failed.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rlfat_core::seed::derive_seed;
use rlfat_core::{data, eval, training, AttackSpec, Classifier, Dataset, Model, NAttackParams, ShiftKind};

use crate::config::{DataSource, ExperimentConfig};
use crate::metrics::{MetricsLog, MetricsRecord};

pub const CHECKPOINT: &str = "model.ckpt";
pub const METRICS: &str = "metrics.jsonl";
pub const TRAIN_LOG: &str = "train_log.tsv";
pub const FAILURE_MARKER: &str = "FAILED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Data,
    Train,
    Evaluate,
    Attack,
    Sensitivity,
    Saliency,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Data => "data",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Attack => "attack",
            Stage::Sensitivity => "sensitivity",
            Stage::Saliency => "saliency",
        })
    }
}

fn stage<T>(s: Stage, r: Result<T>) -> Result<T> {
    r.with_context(|| format!("stage `{s}` failed"))
}

fn rng(cfg: &ExperimentConfig, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, name))
}

fn load_split(source: &DataSource, train: bool, cfg: &ExperimentConfig) -> Result<Dataset<f32>> {
    Ok(match source {
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            if train {
                data::load_idx(train_images, train_labels)?
            } else {
                data::load_idx(test_images, test_labels)?
            }
        }
        DataSource::Cifar10 { train_files, test_file } => {
            if train {
                let parts = train_files
                    .iter()
                    .map(|p| data::load_cifar10_binary::<f32>(p))
                    .collect::<Result<Vec<_>, _>>()?;
                concat(parts)?
            } else {
                data::load_cifar10_binary(test_file)?
            }
        }
        DataSource::Synthetic {
            classes,
            shape,
            train_per_class,
            test_per_class,
        } => {
            let (n, name) = if train {
                (*train_per_class, "data/synthetic/train")
            } else {
                (*test_per_class, "data/synthetic/test")
            };
            data::synthetic_blobs(*classes, n, *shape, &mut rng(cfg, name))?
        }
    })
}

fn concat(parts: Vec<Dataset<f32>>) -> Result<Dataset<f32>> {
    let first = parts.first().context("no dataset parts")?;
    let mut shape = first.images.shape().to_vec();
    let (classes, provenance) = (first.classes, first.provenance.clone());
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        labels.extend(p.labels);
        pixels.extend(p.images.into_data());
    }
    shape[0] = labels.len();
    Ok(Dataset::new(rlfat_core::Tensor::new(shape, pixels)?, labels, classes, provenance)?)
}

/// Loads the train and test splits and applies the configured subsets.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset<f32>, Dataset<f32>)> {
    stage(Stage::Data, (|| {
        let mut train = load_split(&cfg.data.source, true, cfg)?;
        let mut test = load_split(&cfg.data.source, false, cfg)?;
        if let Some(k) = cfg.data.train_per_class {
            train = data::subset(&train, k, &mut rng(cfg, "data/subset/train"))?;
        }
        if let Some(k) = cfg.data.test_per_class {
            test = data::subset(&test, k, &mut rng(cfg, "data/subset/test"))?;
        }
        if train.image_shape() != test.image_shape() || train.classes != test.classes {
            bail!("train and test splits disagree on image shape or class count");
        }
        Ok((train, test))
    })())
}

fn metrics_log(cfg: &ExperimentConfig) -> Result<MetricsLog> {
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    MetricsLog::open(&cfg.output_dir.join(METRICS))
}

fn record(cfg: &ExperimentConfig, metric: &str, value: f64) -> MetricsRecord {
    MetricsRecord::new(&cfg.id, cfg.train.method.name(), metric, value)
}

/// Trains a fresh model and writes the checkpoint and per-step log.
pub fn train_stage(cfg: &ExperimentConfig, train: &Dataset<f32>, checkpoint: &Path) -> Result<Model<f32>> {
    stage(Stage::Train, (|| {
        let mut log = metrics_log(cfg)?;
        let tc = cfg.train_config();
        let mut model = Model::build(cfg.model_spec(train.image_shape(), train.classes))?;
        let steps = training::train(&mut model, train, &tc)?;
        if let Some(parent) = checkpoint.parent() {
            fs::create_dir_all(parent)?;
        }
        model.save(checkpoint)?;
        fs::write(cfg.output_dir.join(TRAIN_LOG), steps.to_tsv())?;
        if let Some(last) = steps.rows.last() {
            log.append(&record(cfg, "final_train_loss", last.total).param("steps", tc.steps))?;
        }
        Ok(model)
    })())
}

pub fn load_checkpoint(path: &Path, data: &Dataset<f32>) -> Result<Model<f32>> {
    let model = Model::<f32>::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if model.input_shape() != data.image_shape() || model.classes() != data.classes {
        bail!(
            "checkpoint expects {:?} inputs with {} classes, data has {:?} with {}",
            model.input_shape(),
            model.classes(),
            data.image_shape(),
            data.classes
        );
    }
    Ok(model)
}

/// Clean accuracy plus robust accuracy under every configured attack.
pub fn evaluate_stage(cfg: &ExperimentConfig, model: &Model<f32>, test: &Dataset<f32>) -> Result<()> {
    stage(Stage::Evaluate, (|| {
        let mut log = metrics_log(cfg)?;
        let clean = eval::evaluate_accuracy(model, test, None, &mut rng(cfg, "eval/clean"))?;
        log.append(&record(cfg, "clean_accuracy", clean.clean).param("count", clean.count))?;
        for (i, spec) in cfg.attacks.iter().enumerate() {
            let mut r = rng(cfg, &format!("eval/attack/{i}/{}", spec.name()));
            let acc = eval::evaluate_accuracy(model, test, Some(spec), &mut r)?;
            log.append(
                &record(cfg, "robust_accuracy", acc.robust.expect("attack given"))
                    .param("attack", spec.name())
                    .param("epsilon", spec.epsilon())
                    .param("count", acc.count),
            )?;
        }
        Ok(())
    })())
}

/// Resolves an attack name to the configured spec of that kind, or to a
/// default built from the training budget.
pub fn attack_by_name(cfg: &ExperimentConfig, name: &str) -> Result<AttackSpec> {
    if let Some(spec) = cfg.attacks.iter().find(|a| a.name() == name) {
        return Ok(spec.clone());
    }
    let budget = cfg.train.attack;
    Ok(match name {
        "fgsm" => AttackSpec::Fgsm {
            epsilon: budget.epsilon,
        },
        "pgd" => AttackSpec::pgd(budget),
        "cw" => AttackSpec::cw(budget, rlfat_core::attacks::CW_CONFIDENCE),
        "nattack" => AttackSpec::nattack(budget.epsilon, NAttackParams::default()),
        other => bail!("unknown attack `{other}` (expected fgsm, pgd, cw or nattack)"),
    })
}

/// Attacks the test set and writes one row per example.
pub fn attack_stage(
    cfg: &ExperimentConfig,
    model: &Model<f32>,
    test: &Dataset<f32>,
    spec: &AttackSpec,
    out: &Path,
) -> Result<f64> {
    stage(Stage::Attack, (|| {
        let mut r = rng(cfg, &format!("attack/{}", spec.name()));
        let mut text = String::from("index\tlabel\tclean_pred\tadv_pred\tsuccess\tlinf\n");
        let mut successes = 0usize;
        for start in (0..test.len()).step_by(eval::EVAL_BATCH) {
            let idx: Vec<usize> = (start..(start + eval::EVAL_BATCH).min(test.len())).collect();
            let (x, labels) = test.batch(&idx);
            let clean = model.predict(&x)?;
            let res = spec.run(model, &x, &labels, &mut r)?;
            let adv = model.predict(&res.adversarial)?;
            for (j, &i) in idx.iter().enumerate() {
                let linf = x
                    .row(j)
                    .iter()
                    .zip(res.adversarial.row(j))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f32, f32::max);
                successes += res.success[j] as usize;
                text.push_str(&format!(
                    "{i}\t{}\t{}\t{}\t{}\t{linf}\n",
                    labels[j], clean[j], adv[j], res.success[j] as u8
                ));
            }
        }
        if let Some(parent) = out.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
        let rate = successes as f64 / test.len() as f64;
        metrics_log(cfg)?.append(
            &record(cfg, "attack_success_rate", rate)
                .param("attack", spec.name())
                .param("epsilon", spec.epsilon()),
        )?;
        Ok(rate)
    })())
}

/// Loss sensitivity for every configured brightness and gamma shift.
pub fn sensitivity_stage(cfg: &ExperimentConfig, model: &Model<f32>, test: &Dataset<f32>) -> Result<()> {
    stage(Stage::Sensitivity, (|| {
        let mut log = metrics_log(cfg)?;
        let n = cfg.sensitivity.samples.unwrap_or(test.len()).min(test.len());
        let subset = test.select(&(0..n).collect::<Vec<_>>());
        let shifts = cfg
            .sensitivity
            .brightness
            .iter()
            .map(|&a| (ShiftKind::Brightness, a))
            .chain(cfg.sensitivity.gamma.iter().map(|&g| (ShiftKind::Gamma, g)));
        for (kind, param) in shifts {
            let rep = eval::loss_sensitivity(model, &subset, kind, param)?;
            log.append(
                &record(cfg, &format!("sensitivity_{}", kind.name()), rep.value)
                    .param("shift", param)
                    .param("count", rep.count),
            )?;
        }
        Ok(())
    })())
}

/// Writes a salience PGM and the original image for each index. Returns the
/// written paths.
pub fn saliency_stage(
    cfg: &ExperimentConfig,
    model: &Model<f32>,
    test: &Dataset<f32>,
    indices: &[usize],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    stage(Stage::Saliency, (|| {
        fs::create_dir_all(out_dir)?;
        let method = cfg.train.method.name();
        let mut written = Vec::new();
        for &i in indices {
            if i >= test.len() {
                bail!("saliency index {i} out of range for {} test examples", test.len());
            }
            let (x, labels) = test.batch(&[i]);
            let mut r = rng(cfg, &format!("saliency/{i}"));
            let map = eval::smoothgrad(model, &x, labels[0], cfg.saliency.samples, cfg.saliency.sigma, &mut r)?;
            let p = out_dir.join(format!("{method}_{i}.pgm"));
            fs::write(&p, map.to_pgm())?;
            written.push(p);
            let ext = if x.shape()[1] == 1 { "pgm" } else { "ppm" };
            let p = out_dir.join(format!("original_{i}.{ext}"));
            fs::write(&p, eval::image_to_pnm(&x)?)?;
            written.push(p);
        }
        Ok(written)
    })())
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub salience: Vec<PathBuf>,
}

/// Train, evaluate, sensitivity and saliency in sequence. A failing stage
/// leaves a `FAILED` marker naming it next to the partial outputs.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    fs::create_dir_all(&cfg.output_dir)?;
    let metrics = cfg.output_dir.join(METRICS);
    for stale in [metrics.clone(), cfg.output_dir.join(FAILURE_MARKER)] {
        if stale.exists() {
            fs::remove_file(&stale)?;
        }
    }
    let result = (|| {
        let (train, test) = load_data(cfg)?;
        let checkpoint = cfg.output_dir.join(CHECKPOINT);
        let model = train_stage(cfg, &train, &checkpoint)?;
        evaluate_stage(cfg, &model, &test)?;
        sensitivity_stage(cfg, &model, &test)?;
        let salience = saliency_stage(cfg, &model, &test, &cfg.saliency.indices, &cfg.output_dir.join("saliency"))?;
        Ok(RunSummary {
            output_dir: cfg.output_dir.clone(),
            checkpoint,
            metrics: metrics.clone(),
            salience,
        })
    })();
    if let Err(e) = &result {
        fs::write(cfg.output_dir.join(FAILURE_MARKER), format!("{e:#}\n"))?;
    }
    result
}
