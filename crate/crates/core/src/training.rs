//! Adversarial-training objectives and the minibatch training loop.
//!
//! Every objective is a weighted sum of four components:
//!
//! ```text
//! total = clean_ce + adv_ce + lambda * kl + eta * transfer
//! ```
//!
//! Components a method does not use are zero. Adversarial and shuffled
//! batches are generated once per step and treated as constants w.r.t. the
//! parameters.

use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd, AttackBudget, AttackLoss};
use crate::autodiff::{adam_step, cross_entropy, kl_divergence, squared_l2, AdamState, Graph, Real, Tensor, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rbs::{self, RbsPlan, SplitMode};
use crate::seed::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    Natural,
    Pgdat,
    Trades,
    RbsatP,
    RbsatT,
    RlfatP,
    RlfatT,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Natural,
        Method::Pgdat,
        Method::Trades,
        Method::RbsatP,
        Method::RbsatT,
        Method::RlfatP,
        Method::RlfatT,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Natural => "NATURAL",
            Method::Pgdat => "PGDAT",
            Method::Trades => "TRADES",
            Method::RbsatP => "RBSAT_P",
            Method::RbsatT => "RBSAT_T",
            Method::RlfatP => "RLFAT_P",
            Method::RlfatT => "RLFAT_T",
        }
    }

    /// Default transfer weight: 0.5 for the PGDAT-based variant, 1 for the
    /// TRADES-based one, 0 where no transfer term exists.
    pub fn default_eta(self) -> f64 {
        match self {
            Method::RlfatP => 0.5,
            Method::RlfatT => 1.0,
            _ => 0.0,
        }
    }

    /// Inner attack objective, `None` for natural training.
    pub fn attack_loss(self) -> Option<AttackLoss> {
        match self {
            Method::Natural => None,
            Method::Pgdat | Method::RbsatP | Method::RlfatP => Some(AttackLoss::CrossEntropy),
            Method::Trades | Method::RbsatT | Method::RlfatT => Some(AttackLoss::KlFromClean),
        }
    }

    pub fn uses_rbs(self) -> bool {
        matches!(self, Method::RbsatP | Method::RbsatT | Method::RlfatP | Method::RlfatT)
    }

    pub fn uses_transfer(self) -> bool {
        matches!(self, Method::RlfatP | Method::RlfatT)
    }

    pub fn is_trades_family(self) -> bool {
        matches!(self, Method::Trades | Method::RbsatT | Method::RlfatT)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown training method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    /// KL weight of the TRADES family.
    pub lambda: f64,
    /// Transfer-term weight.
    pub eta: f64,
    /// Block count of the shuffle.
    pub rbs_k: usize,
    pub split_mode: SplitMode,
    pub budget: AttackBudget,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            lambda: 6.0,
            eta: method.default_eta(),
            rbs_k: 2,
            split_mode: SplitMode::Random,
            budget: AttackBudget::cifar(),
            lr: 0.001,
            batch_size: 32,
            steps: 1000,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid(format!(
                "lambda and eta must be finite and >= 0, got {} and {}",
                self.lambda, self.eta
            )));
        }
        if self.rbs_k == 0 {
            return Err(Error::invalid("rbs_k must be >= 1"));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::invalid("lr must be positive and batch_size at least 1"));
        }
        self.budget.validate()
    }
}

/// Loss components of one evaluated objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepOutput {
    pub step: usize,
    pub total: f64,
    pub clean_ce: f64,
    pub adv_ce: f64,
    pub kl: f64,
    pub transfer: f64,
    pub grad_norm: f64,
}

impl StepOutput {
    pub fn combine(&self, lambda: f64, eta: f64) -> f64 {
        self.clean_ce + self.adv_ce + lambda * self.kl + eta * self.transfer
    }

    pub const TSV_HEADER: &'static str = "step\ttotal\tclean_ce\tadv_ce\tkl\ttransfer\tgrad_norm";

    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.total, self.clean_ce, self.adv_ce, self.kl, self.transfer, self.grad_norm
        )
    }
}

/// Data a step's objective is evaluated on.
#[derive(Clone, Debug, PartialEq)]
pub struct StepBatch<T> {
    pub clean: Tensor<T>,
    pub labels: Vec<usize>,
    pub adversarial: Option<Tensor<T>>,
    /// Shuffled adversarial batch, present for the RBS methods.
    pub shuffled: Option<Tensor<T>>,
    pub plans: Vec<RbsPlan>,
}

/// Objective value plus parameter gradients in declaration order.
#[derive(Clone, Debug)]
pub struct LossEval<T> {
    pub output: StepOutput,
    pub grads: Vec<Tensor<T>>,
}

/// Generates the adversarial batch, then shuffles it once.
pub fn prepare_batch<T: Real>(
    model: &Model<T>,
    config: &TrainConfig,
    x: &Tensor<T>,
    labels: &[usize],
    attack_rng: &mut impl Rng,
    rbs_rng: &mut impl Rng,
) -> Result<StepBatch<T>> {
    let mut batch = attack_batch(model, config, x, labels, attack_rng)?;
    shuffle_batch(&mut batch, config, rbs_rng)?;
    Ok(batch)
}

fn attack_batch<T: Real>(
    model: &Model<T>,
    config: &TrainConfig,
    x: &Tensor<T>,
    labels: &[usize],
    rng: &mut impl Rng,
) -> Result<StepBatch<T>> {
    let adversarial = match config.method.attack_loss() {
        None => None,
        Some(kind) => Some(pgd(model, kind, x, labels, &config.budget, rng)?.adversarial),
    };
    Ok(StepBatch {
        clean: x.clone(),
        labels: labels.to_vec(),
        adversarial,
        shuffled: None,
        plans: Vec::new(),
    })
}

fn shuffle_batch<T: Real>(batch: &mut StepBatch<T>, config: &TrainConfig, rng: &mut impl Rng) -> Result<()> {
    if let (Some(adv), true) = (&batch.adversarial, config.method.uses_rbs()) {
        let (s, plans) = rbs::apply_batch(rng, adv, config.rbs_k, config.split_mode)?;
        batch.shuffled = Some(s);
        batch.plans = plans;
    }
    Ok(())
}

fn required<'a, T>(t: &'a Option<Tensor<T>>, what: &str, method: Method) -> Result<&'a Tensor<T>> {
    t.as_ref()
        .ok_or_else(|| Error::invalid(format!("{method} needs a {what} batch")))
}

/// Evaluates `method`'s objective on a fixed batch and backpropagates to the
/// parameters.
pub fn evaluate_objective<T: Real>(
    model: &Model<T>,
    method: Method,
    batch: &StepBatch<T>,
    lambda: f64,
    eta: f64,
) -> Result<LossEval<T>> {
    let mut g = Graph::new();
    let params = model.bind(&mut g, true);
    let logits = |g: &mut Graph<T>, t: &Tensor<T>| -> Result<Var> {
        let v = g.constant(t.clone());
        model.forward_with(g, &params, v)
    };
    let labels = &batch.labels;
    let mut out = StepOutput::default();
    let mut terms: Vec<Var> = Vec::new();
    let mut push = |g: &mut Graph<T>, v: Var, weight: f64, slot: &mut f64| -> Result<()> {
        *slot = g.value(v).item().as_f64();
        terms.push(if weight == 1.0 { v } else { g.scale(v, weight)? });
        Ok(())
    };

    match method {
        Method::Natural => {
            let f = logits(&mut g, &batch.clean)?;
            let ce = cross_entropy(&mut g, f, labels)?;
            push(&mut g, ce, 1.0, &mut out.clean_ce)?;
        }
        Method::Pgdat | Method::RbsatP | Method::RlfatP => {
            let adv = required(&batch.adversarial, "adversarial", method)?;
            let trained_on = if method == Method::Pgdat {
                adv
            } else {
                required(&batch.shuffled, "shuffled", method)?
            };
            let f = logits(&mut g, trained_on)?;
            let ce = cross_entropy(&mut g, f, labels)?;
            push(&mut g, ce, 1.0, &mut out.adv_ce)?;
            if method == Method::RlfatP {
                let fa = logits(&mut g, adv)?;
                let t = squared_l2(&mut g, f, fa)?;
                push(&mut g, t, eta, &mut out.transfer)?;
            }
        }
        Method::Trades | Method::RbsatT | Method::RlfatT => {
            let adv = required(&batch.adversarial, "adversarial", method)?;
            let fx = logits(&mut g, &batch.clean)?;
            let ce = cross_entropy(&mut g, fx, labels)?;
            push(&mut g, ce, 1.0, &mut out.clean_ce)?;
            let target = if method == Method::Trades {
                adv
            } else {
                required(&batch.shuffled, "shuffled", method)?
            };
            let ft = logits(&mut g, target)?;
            let kl = kl_divergence(&mut g, fx, ft)?;
            push(&mut g, kl, lambda, &mut out.kl)?;
            if method == Method::RlfatT {
                let fa = logits(&mut g, adv)?;
                let t = squared_l2(&mut g, ft, fa)?;
                push(&mut g, t, eta, &mut out.transfer)?;
            }
        }
    }

    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    out.total = g.value(total).item().as_f64();
    g.backward(total)?;
    let grads: Vec<Tensor<T>> = params
        .iter()
        .map(|&p| g.take_grad(p).expect("parameters require grad"))
        .collect();
    out.grad_norm = grads.iter().map(|t| t.l2_norm().powi(2)).sum::<f64>().sqrt();
    Ok(LossEval { output: out, grads })
}

fn single_step<T: Real>(
    model: &Model<T>,
    config: &TrainConfig,
    x: &Tensor<T>,
    labels: &[usize],
    rng: &mut impl Rng,
) -> Result<(StepOutput, StepBatch<T>)> {
    config.validate()?;
    // The attack draws from `rng` before the shuffle does.
    let mut batch = attack_batch(model, config, x, labels, rng)?;
    shuffle_batch(&mut batch, config, rng)?;
    let eval = evaluate_objective(model, config.method, &batch, config.lambda, config.eta)?;
    Ok((eval.output, batch))
}

fn with_method(method: Method, budget: &AttackBudget) -> TrainConfig {
    TrainConfig {
        budget: *budget,
        ..TrainConfig::new(method)
    }
}

/// Cross entropy on PGD adversarial examples.
pub fn loss_pgdat<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    budget: &AttackBudget,
    rng: &mut impl Rng,
) -> Result<StepOutput> {
    Ok(single_step(model, &with_method(Method::Pgdat, budget), x, labels, rng)?.0)
}

/// Clean cross entropy plus `lambda` times the KL from the clean to the
/// KL-adversarial predictive distribution.
pub fn loss_trades<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    budget: &AttackBudget,
    lambda: f64,
    rng: &mut impl Rng,
) -> Result<StepOutput> {
    let config = TrainConfig {
        lambda,
        ..with_method(Method::Trades, budget)
    };
    Ok(single_step(model, &config, x, labels, rng)?.0)
}

/// Cross entropy on shuffled PGD adversarial examples. Returns the batch so
/// its plans can be reused.
pub fn loss_rlfl_pgdat<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    budget: &AttackBudget,
    rbs_k: usize,
    rng: &mut impl Rng,
) -> Result<(StepOutput, StepBatch<T>)> {
    let config = TrainConfig {
        rbs_k,
        ..with_method(Method::RbsatP, budget)
    };
    single_step(model, &config, x, labels, rng)
}

/// Clean cross entropy plus `lambda` times the KL from the clean
/// distribution to the one on shuffled KL-adversarial examples.
pub fn loss_rlfl_trades<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    budget: &AttackBudget,
    lambda: f64,
    rbs_k: usize,
    rng: &mut impl Rng,
) -> Result<(StepOutput, StepBatch<T>)> {
    let config = TrainConfig {
        lambda,
        rbs_k,
        ..with_method(Method::RbsatT, budget)
    };
    single_step(model, &config, x, labels, rng)
}

/// Batch-mean squared distance between the logits of the shuffled and the
/// unshuffled adversarial batch.
pub fn loss_rlft<T: Real>(model: &Model<T>, adversarial: &Tensor<T>, plans: &[RbsPlan]) -> Result<f64> {
    let shuffled = rbs::apply_plans(plans, adversarial)?;
    let mut g = Graph::new();
    let params = model.bind(&mut g, false);
    let a = g.constant(shuffled);
    let b = g.constant(adversarial.clone());
    let fa = model.forward_with(&mut g, &params, a)?;
    let fb = model.forward_with(&mut g, &params, b)?;
    let d = squared_l2(&mut g, fa, fb)?;
    Ok(g.value(d).item().as_f64())
}

/// Full objective of an RLFAT variant.
pub fn loss_rlfat<T: Real>(
    model: &Model<T>,
    x: &Tensor<T>,
    labels: &[usize],
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(StepOutput, StepBatch<T>)> {
    if !config.method.uses_transfer() {
        return Err(Error::invalid(format!("{} is not an RLFAT variant", config.method)));
    }
    single_step(model, config, x, labels, rng)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<StepOutput>,
}

impl TrainLog {
    pub fn write_tsv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "{}", StepOutput::TSV_HEADER)?;
        for r in &self.rows {
            writeln!(w, "{}", r.tsv_row())?;
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut buf = Vec::new();
        self.write_tsv(&mut buf).expect("writing to a Vec");
        String::from_utf8(buf).expect("ascii")
    }
}

pub fn train<T: Real>(model: &mut Model<T>, data: &Dataset<T>, config: &TrainConfig) -> Result<TrainLog> {
    train_observed(model, data, config, |_, _| {})
}

/// Training loop with a hook that sees every step's batch and losses.
///
/// Batches come from epoch-wise shuffles. Attack noise, shuffle plans and
/// batch order use separate streams derived from `config.seed`.
pub fn train_observed<T: Real>(
    model: &mut Model<T>,
    data: &Dataset<T>,
    config: &TrainConfig,
    mut observer: impl FnMut(&StepBatch<T>, &StepOutput),
) -> Result<TrainLog> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if data.image_shape() != model.spec().input {
        return Err(Error::shape(
            "train",
            format!("data {:?} vs model input {:?}", data.image_shape(), model.spec().input),
        ));
    }
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "train/batches"));
    let mut attack_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "train/attack"));
    let mut rbs_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "train/rbs"));
    let mut adam = AdamState::new(model.params());
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut log = TrainLog::default();

    for step in 0..config.steps {
        let mut idx = Vec::with_capacity(config.batch_size);
        while idx.len() < config.batch_size.min(data.len()) {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut batch_rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let (x, labels) = data.batch(&idx);
        let diverged = |e: Error| Error::Diverged {
            step,
            detail: e.to_string(),
        };
        let batch = prepare_batch(model, config, &x, &labels, &mut attack_rng, &mut rbs_rng).map_err(diverged)?;
        let eval = evaluate_objective(model, config.method, &batch, config.lambda, config.eta).map_err(diverged)?;
        let mut out = eval.output;
        out.step = step;
        if !out.total.is_finite() || !out.grad_norm.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {} with gradient norm {}", out.total, out.grad_norm),
            });
        }
        observer(&batch, &out);
        adam_step(model.params_mut(), &eval.grads, &mut adam, config.lr)?;
        log.rows.push(out);
    }
    Ok(log)
}
