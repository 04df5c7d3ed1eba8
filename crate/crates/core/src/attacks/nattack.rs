//! Derivative-free attack that learns a Gaussian search distribution.
//!
//! The distribution lives in tanh space around the clean input. Each
//! iteration draws `samples` perturbations, squashes them to `[0, 1]`, clips
//! them into the ball, queries the model, and moves the mean along the
//! z-scored natural-evolution-strategy gradient estimate of the margin loss
//! `max(log p_y - max_{c != y} log p_c, 0)`. The loop stops at the first
//! misclassified sample.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{check_batch, AttackResult};
use crate::autodiff::{kernels, Real, Tensor};
use crate::error::{Error, Result};
use crate::model::Classifier;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NAttackParams {
    /// Maximum optimization iterations `T`.
    pub iterations: usize,
    /// Samples per iteration `b`.
    pub samples: usize,
    /// Variance of the isotropic search Gaussian.
    pub sigma2: f64,
    /// Learning rate of the mean update.
    pub lr: f64,
    /// Draw noise in `(e, -e)` pairs.
    #[serde(default)]
    pub antithetic: bool,
}

impl Default for NAttackParams {
    fn default() -> Self {
        Self {
            iterations: 200,
            samples: 300,
            sigma2: 0.01,
            lr: 0.008,
            antithetic: false,
        }
    }
}

impl NAttackParams {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.samples == 0 || !(self.sigma2 > 0.0) || !(self.lr > 0.0) {
            return Err(Error::invalid(format!("black-box attack parameters must be positive: {self:?}")));
        }
        if self.antithetic && self.samples % 2 != 0 {
            return Err(Error::invalid("antithetic sampling needs an even sample count"));
        }
        Ok(())
    }
}

fn margin_loss(log_probs: &[f64], label: usize) -> f64 {
    let other = log_probs
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    (log_probs[label] - other).max(0.0)
}

/// Runs the attack independently on every example of the batch. Uses only
/// [`Classifier`] queries.
pub fn nattack<T: Real, M: Classifier<T>>(
    model: &M,
    x: &Tensor<T>,
    labels: &[usize],
    epsilon: f64,
    params: &NAttackParams,
    rng: &mut impl Rng,
) -> Result<AttackResult<T>> {
    check_batch(x, labels)?;
    params.validate()?;
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let mut image_shape = x.shape().to_vec();
    image_shape[0] = 1;
    let mut adversarial = Vec::with_capacity(x.len());
    let mut success = Vec::with_capacity(labels.len());
    let mut losses = Vec::with_capacity(labels.len());
    let mut queries = 0;
    for (i, &label) in labels.iter().enumerate() {
        let clean: Vec<f64> = x.row(i).iter().map(|v| v.as_f64()).collect();
        let (adv, loss, hit, used) = attack_one(model, &clean, label, &image_shape, epsilon, params, rng)?;
        adversarial.extend(adv.iter().map(|&v| T::lit(v)));
        losses.push(loss);
        success.push(hit);
        queries += used;
    }
    Ok(AttackResult {
        adversarial: Tensor::new(x.shape().to_vec(), adversarial)?,
        success,
        loss: losses,
        queries,
    })
}

type OneResult = (Vec<f64>, f64, bool, usize);

fn attack_one<T: Real, M: Classifier<T>>(
    model: &M,
    clean: &[f64],
    label: usize,
    image_shape: &[usize],
    epsilon: f64,
    params: &NAttackParams,
    rng: &mut impl Rng,
) -> Result<OneResult> {
    let dim = clean.len();
    let classes = model.classes();

    if epsilon == 0.0 {
        let probs = model.predict_probs(&Tensor::from_f64(image_shape, clean)?)?;
        let lp: Vec<f64> = probs.data().iter().map(|p| p.as_f64().ln()).collect();
        let hit = probs.argmax_rows()[0] != label;
        return Ok((clean.to_vec(), margin_loss(&lp, label), hit, 1));
    }

    let sigma = params.sigma2.sqrt();
    let b = params.samples;
    let mut mean: Vec<f64> = clean
        .iter()
        .map(|&v| (2.0 * v.clamp(1e-6, 1.0 - 1e-6) - 1.0).atanh())
        .collect();
    let mut batch_shape = image_shape.to_vec();
    batch_shape[0] = b;

    let mut noise = vec![0.0f64; b * dim];
    let mut candidates = vec![T::zero(); b * dim];
    let mut best: (f64, Vec<f64>) = (f64::INFINITY, clean.to_vec());
    let mut queries = 0;

    for _ in 0..params.iterations {
        if params.antithetic {
            let half = b / 2 * dim;
            for v in &mut noise[..half] {
                *v = rng.sample(StandardNormal);
            }
            let (head, tail) = noise.split_at_mut(half);
            for (t, &h) in tail.iter_mut().zip(head.iter()) {
                *t = -h;
            }
        } else {
            for v in &mut noise {
                *v = rng.sample(StandardNormal);
            }
        }
        for j in 0..b {
            let eps_row = &noise[j * dim..(j + 1) * dim];
            let cand = &mut candidates[j * dim..(j + 1) * dim];
            for d in 0..dim {
                let squashed = 0.5 * ((mean[d] + sigma * eps_row[d]).tanh() + 1.0);
                let delta = (squashed - clean[d]).clamp(-epsilon, epsilon);
                cand[d] = T::lit((clean[d] + delta).clamp(0.0, 1.0));
            }
        }
        let batch = Tensor::new(batch_shape.clone(), candidates.clone())?;
        let logits = model.logits(&batch)?;
        queries += b;
        let lp: Vec<f64> = {
            let v: Vec<f64> = logits.data().iter().map(|v| v.as_f64()).collect();
            kernels::log_softmax_rows(&v, classes)
        };
        let preds = logits.argmax_rows();
        let losses: Vec<f64> = lp.chunks(classes).map(|row| margin_loss(row, label)).collect();

        for (j, &l) in losses.iter().enumerate() {
            if l < best.0 {
                best = (l, row_f64(&candidates, j, dim));
            }
        }
        if let Some(j) = preds.iter().position(|&p| p != label) {
            return Ok((row_f64(&candidates, j, dim), losses[j], true, queries));
        }

        let n = b as f64;
        let mu = losses.iter().sum::<f64>() / n;
        let sd = (losses.iter().map(|l| (l - mu).powi(2)).sum::<f64>() / n).sqrt();
        if sd < 1e-12 {
            continue;
        }
        let step = params.lr / (n * sigma);
        for (j, &l) in losses.iter().enumerate() {
            let z = (l - mu) / sd;
            for (m, &e) in mean.iter_mut().zip(&noise[j * dim..(j + 1) * dim]) {
                *m -= step * z * e;
            }
        }
    }
    Ok((best.1, best.0, false, queries))
}

fn row_f64<T: Real>(data: &[T], j: usize, dim: usize) -> Vec<f64> {
    data[j * dim..(j + 1) * dim].iter().map(|v| v.as_f64()).collect()
}
