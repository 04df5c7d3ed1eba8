//! Adversarial example generation under the l-infinity threat model.
//!
//! Gradient attacks ([`fgsm`], [`pgd`], [`cw_attack`]) need a
//! [`Differentiable`] model; [`nattack`] only takes a [`Classifier`] and so
//! cannot reach a gradient entry point.

mod cw;
mod nattack;

pub use cw::{cw_attack, cw_objective, cw_penalty_attack, from_tanh_space, to_tanh_space, CwPenaltyParams};
pub use nattack::{nattack, NAttackParams};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, loss, Graph, Real, Tensor};
use crate::error::{Error, Result};
use crate::model::{Classifier, Differentiable};

/// Default confidence for the margin attack.
pub const CW_CONFIDENCE: f64 = 50.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackBudget {
    pub epsilon: f64,
    pub alpha: f64,
    pub iterations: usize,
    #[serde(default = "default_true")]
    pub random_init: bool,
}

fn default_true() -> bool {
    true
}

impl AttackBudget {
    pub fn new(epsilon: f64, alpha: f64, iterations: usize) -> Self {
        Self {
            epsilon,
            alpha,
            iterations,
            random_init: true,
        }
    }

    /// `epsilon = 0.03`, step `0.0075`, 7 iterations.
    pub fn cifar() -> Self {
        Self::new(0.03, 0.0075, 7)
    }

    /// `epsilon = 0.1` with the same step-to-radius ratio as [`AttackBudget::cifar`].
    pub fn mnist() -> Self {
        Self::new(0.1, 0.025, 7)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon <= 1.0) {
            return Err(Error::invalid(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if self.iterations > 0 && !(self.alpha > 0.0) {
            return Err(Error::invalid(format!("step size {} must be positive", self.alpha)));
        }
        Ok(())
    }
}

/// Which loss PGD ascends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackLoss {
    CrossEntropy,
    /// `KL(p(.|x) || p(.|x'))` with the clean distribution held fixed.
    KlFromClean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult<T> {
    pub adversarial: Tensor<T>,
    /// Final prediction differs from the label.
    pub success: Vec<bool>,
    /// Attack objective per example at the returned point.
    pub loss: Vec<f64>,
    /// Model evaluations spent (black-box attacks only; zero otherwise).
    pub queries: usize,
}

impl<T: Real> AttackResult<T> {
    pub fn success_rate(&self) -> f64 {
        self.success.iter().filter(|&&s| s).count() as f64 / self.success.len().max(1) as f64
    }
}

/// Projects `x_adv` onto `B_eps(x)` and then onto `[0, 1]`.
pub fn project_linf<T: Real>(x_adv: &mut Tensor<T>, x: &Tensor<T>, epsilon: f64) {
    let eps = T::lit(epsilon);
    for (a, &c) in x_adv.data_mut().iter_mut().zip(x.data()) {
        *a = a.max(c - eps).min(c + eps).max(T::zero()).min(T::one());
    }
}

/// `max |a - b|` over all coordinates.
pub fn linf_distance<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.max_abs_diff(b)
}

pub(crate) fn check_unit_range<T: Real>(x: &Tensor<T>) -> Result<()> {
    if x.data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::invalid("attack input must lie in [0, 1]"));
    }
    Ok(())
}

pub(crate) enum Objective<'a, T> {
    CrossEntropy(&'a [usize]),
    Kl(&'a Tensor<T>),
    Margin(&'a [usize], f64),
}

/// Gradient w.r.t. the input of the batch-summed objective, so each example's
/// gradient is independent of the rest of the batch.
pub(crate) fn input_gradient<T: Real, M: Differentiable<T>>(
    model: &M,
    x: &Tensor<T>,
    objective: &Objective<'_, T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let logits = model.forward(&mut g, xv)?;
    let batch = x.batch() as f64;
    let total = match objective {
        Objective::CrossEntropy(labels) => {
            let per = loss::cross_entropy_per_example(&mut g, logits, labels)?;
            g.sum(per)?
        }
        Objective::Kl(clean_logits) => {
            let clean = g.constant((*clean_logits).clone());
            let kl = loss::kl_divergence(&mut g, clean, logits)?;
            g.scale(kl, batch)?
        }
        Objective::Margin(labels, k) => {
            let m = loss::cw_margin(&mut g, logits, labels, *k)?;
            g.sum(m)?
        }
    };
    g.backward(total)?;
    let grad = g.take_grad(xv).expect("input requires grad");
    if !grad.all_finite() {
        return Err(Error::NonFinite("attack gradient"));
    }
    Ok(grad)
}

/// Per-example objective values from logits, computed in f64.
pub(crate) fn objective_values<T: Real>(logits: &Tensor<T>, objective: &Objective<'_, T>) -> Vec<f64> {
    let classes = logits.shape()[1];
    let log_probs = |t: &Tensor<T>| -> Vec<f64> {
        let v: Vec<f64> = t.data().iter().map(|v| v.as_f64()).collect();
        kernels::log_softmax_rows(&v, classes)
    };
    match objective {
        Objective::CrossEntropy(labels) => {
            let lp = log_probs(logits);
            labels.iter().enumerate().map(|(i, &y)| -lp[i * classes + y]).collect()
        }
        Objective::Kl(clean) => {
            let (lp, lq) = (log_probs(clean), log_probs(logits));
            lp.chunks(classes)
                .zip(lq.chunks(classes))
                .map(|(p, q)| p.iter().zip(q).map(|(a, b)| a.exp() * (a - b)).sum())
                .collect()
        }
        Objective::Margin(labels, k) => labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let row = logits.row(i);
                let other = row
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != y)
                    .map(|(_, v)| v.as_f64())
                    .fold(f64::NEG_INFINITY, f64::max);
                (row[y].as_f64() - other).max(-k)
            })
            .collect(),
    }
}

fn finish<T: Real, M: Classifier<T>>(
    model: &M,
    adversarial: Tensor<T>,
    labels: &[usize],
    objective: &Objective<'_, T>,
) -> Result<AttackResult<T>> {
    let logits = model.logits(&adversarial)?;
    let success = logits.argmax_rows().iter().zip(labels).map(|(p, y)| p != y).collect();
    let loss = objective_values(&logits, objective);
    Ok(AttackResult {
        adversarial,
        success,
        loss,
        queries: 0,
    })
}

pub(crate) fn check_batch<T: Real>(x: &Tensor<T>, labels: &[usize]) -> Result<()> {
    if x.rank() != 4 || x.batch() != labels.len() {
        return Err(Error::shape(
            "attack",
            format!("{} labels for input {:?}", labels.len(), x.shape()),
        ));
    }
    check_unit_range(x)
}

/// Single signed-gradient step of size `epsilon`, clamped to `[0, 1]`.
pub fn fgsm<T: Real, M: Differentiable<T>>(
    model: &M,
    x: &Tensor<T>,
    labels: &[usize],
    epsilon: f64,
) -> Result<AttackResult<T>> {
    check_batch(x, labels)?;
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let objective = Objective::CrossEntropy(labels);
    if epsilon == 0.0 {
        return finish(model, x.clone(), labels, &objective);
    }
    let grad = input_gradient(model, x, &objective)?;
    let eps = T::lit(epsilon);
    let mut adv = x.zip_map(&grad, |v, g| v + eps * signum(g))?;
    project_linf(&mut adv, x, epsilon);
    finish(model, adv, labels, &objective)
}

#[inline]
pub(crate) fn signum<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Iterated signed-gradient ascent projected onto the l-infinity ball.
pub fn pgd<T: Real, M: Differentiable<T>>(
    model: &M,
    loss_kind: AttackLoss,
    x: &Tensor<T>,
    labels: &[usize],
    budget: &AttackBudget,
    rng: &mut impl Rng,
) -> Result<AttackResult<T>> {
    check_batch(x, labels)?;
    budget.validate()?;
    let clean_logits;
    let objective = match loss_kind {
        AttackLoss::CrossEntropy => Objective::CrossEntropy(labels),
        AttackLoss::KlFromClean => {
            clean_logits = model.logits(x)?;
            Objective::Kl(&clean_logits)
        }
    };
    let adv = signed_descent(model, x, &objective, budget, 1.0, rng)?;
    finish(model, adv, labels, &objective)
}

/// Shared PGD loop; `direction` is `+1` to ascend the objective, `-1` to
/// descend it.
pub(crate) fn signed_descent<T: Real, M: Differentiable<T>>(
    model: &M,
    x: &Tensor<T>,
    objective: &Objective<'_, T>,
    budget: &AttackBudget,
    direction: f64,
    rng: &mut impl Rng,
) -> Result<Tensor<T>> {
    if budget.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let mut adv = x.clone();
    if budget.random_init {
        let eps = budget.epsilon;
        for v in adv.data_mut() {
            *v = *v + T::lit(rng.random_range(-eps..=eps));
        }
        project_linf(&mut adv, x, eps);
    }
    let step = T::lit(direction * budget.alpha);
    for _ in 0..budget.iterations {
        let grad = input_gradient(model, &adv, objective)?;
        for (a, &g) in adv.data_mut().iter_mut().zip(grad.data()) {
            *a = *a + step * signum(g);
        }
        project_linf(&mut adv, x, budget.epsilon);
    }
    Ok(adv)
}

/// Declarative attack description used by evaluation and configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackSpec {
    Fgsm {
        epsilon: f64,
    },
    Pgd {
        epsilon: f64,
        alpha: f64,
        iterations: usize,
        #[serde(default = "default_true")]
        random_init: bool,
    },
    Cw {
        epsilon: f64,
        alpha: f64,
        iterations: usize,
        #[serde(default = "default_true")]
        random_init: bool,
        #[serde(default = "default_confidence")]
        confidence: f64,
    },
    Nattack {
        epsilon: f64,
        #[serde(default = "nattack_defaults::iterations")]
        iterations: usize,
        #[serde(default = "nattack_defaults::samples")]
        samples: usize,
        #[serde(default = "nattack_defaults::sigma2")]
        sigma2: f64,
        #[serde(default = "nattack_defaults::lr")]
        lr: f64,
        #[serde(default)]
        antithetic: bool,
    },
}

fn default_confidence() -> f64 {
    CW_CONFIDENCE
}

mod nattack_defaults {
    use super::NAttackParams;

    pub fn iterations() -> usize {
        NAttackParams::default().iterations
    }
    pub fn samples() -> usize {
        NAttackParams::default().samples
    }
    pub fn sigma2() -> f64 {
        NAttackParams::default().sigma2
    }
    pub fn lr() -> f64 {
        NAttackParams::default().lr
    }
}

impl AttackSpec {
    pub fn pgd(budget: AttackBudget) -> Self {
        AttackSpec::Pgd {
            epsilon: budget.epsilon,
            alpha: budget.alpha,
            iterations: budget.iterations,
            random_init: budget.random_init,
        }
    }

    pub fn cw(budget: AttackBudget, confidence: f64) -> Self {
        AttackSpec::Cw {
            epsilon: budget.epsilon,
            alpha: budget.alpha,
            iterations: budget.iterations,
            random_init: budget.random_init,
            confidence,
        }
    }

    pub fn nattack(epsilon: f64, params: NAttackParams) -> Self {
        AttackSpec::Nattack {
            epsilon,
            iterations: params.iterations,
            samples: params.samples,
            sigma2: params.sigma2,
            lr: params.lr,
            antithetic: params.antithetic,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::Fgsm { .. } => "fgsm",
            AttackSpec::Pgd { .. } => "pgd",
            AttackSpec::Cw { .. } => "cw",
            AttackSpec::Nattack { .. } => "nattack",
        }
    }

    pub fn epsilon(&self) -> f64 {
        match self {
            AttackSpec::Fgsm { epsilon }
            | AttackSpec::Pgd { epsilon, .. }
            | AttackSpec::Cw { epsilon, .. }
            | AttackSpec::Nattack { epsilon, .. } => *epsilon,
        }
    }

    /// Step budget for the gradient attacks.
    pub fn budget(&self) -> Option<AttackBudget> {
        match *self {
            AttackSpec::Pgd {
                epsilon,
                alpha,
                iterations,
                random_init,
            }
            | AttackSpec::Cw {
                epsilon,
                alpha,
                iterations,
                random_init,
                ..
            } => Some(AttackBudget {
                epsilon,
                alpha,
                iterations,
                random_init,
            }),
            _ => None,
        }
    }

    pub fn nattack_params(&self) -> Option<NAttackParams> {
        match *self {
            AttackSpec::Nattack {
                iterations,
                samples,
                sigma2,
                lr,
                antithetic,
                ..
            } => Some(NAttackParams {
                iterations,
                samples,
                sigma2,
                lr,
                antithetic,
            }),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        AttackBudget::new(self.epsilon(), 1.0, 0).validate()?;
        if let Some(budget) = self.budget() {
            budget.validate()?;
        }
        if let AttackSpec::Cw { confidence, .. } = self {
            if !(*confidence >= 0.0) {
                return Err(Error::invalid("confidence must be non-negative"));
            }
        }
        if let Some(params) = self.nattack_params() {
            params.validate()?;
        }
        Ok(())
    }

    pub fn run<T: Real, M: Differentiable<T>>(
        &self,
        model: &M,
        x: &Tensor<T>,
        labels: &[usize],
        rng: &mut impl Rng,
    ) -> Result<AttackResult<T>> {
        self.validate()?;
        match self {
            AttackSpec::Fgsm { epsilon } => fgsm(model, x, labels, *epsilon),
            AttackSpec::Pgd { .. } => pgd(model, AttackLoss::CrossEntropy, x, labels, &self.budget().unwrap(), rng),
            AttackSpec::Cw { confidence, .. } => cw_attack(model, x, labels, &self.budget().unwrap(), *confidence, rng),
            AttackSpec::Nattack { epsilon, .. } => nattack(model, x, labels, *epsilon, &self.nattack_params().unwrap(), rng),
        }
    }
}
