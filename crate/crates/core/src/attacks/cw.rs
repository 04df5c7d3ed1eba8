use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_batch, finish, signed_descent, AttackBudget, AttackResult, Objective};
use crate::autodiff::{loss, Graph, Real, Tensor};
use crate::error::{Error, Result};
use crate::model::Differentiable;

/// `x = (tanh(w) + 1) / 2`, mapping the real line onto `(0, 1)`.
pub fn from_tanh_space<T: Real>(w: &Tensor<T>) -> Tensor<T> {
    let half = T::lit(0.5);
    w.map(|v| half * (v.tanh() + T::one()))
}

/// Inverse of [`from_tanh_space`]; undefined at 0 and 1.
pub fn to_tanh_space<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if let Some(v) = x.data().iter().find(|&&v| !(v > T::zero() && v < T::one())) {
        return Err(Error::Domain(format!("tanh-space inverse needs values in (0, 1), got {v}")));
    }
    let two = T::lit(2.0);
    Ok(x.map(|v| (two * v - T::one()).atanh()))
}

/// PGD descent on the margin `max(f_true - max_other f, -confidence)`.
pub fn cw_attack<T: Real, M: Differentiable<T>>(
    model: &M,
    x: &Tensor<T>,
    labels: &[usize],
    budget: &AttackBudget,
    confidence: f64,
    rng: &mut impl Rng,
) -> Result<AttackResult<T>> {
    check_batch(x, labels)?;
    budget.validate()?;
    if model.classes() < 2 {
        return Err(Error::invalid("margin attack needs at least 2 classes"));
    }
    let objective = Objective::Margin(labels, confidence);
    let adv = signed_descent(model, x, &objective, budget, -1.0, rng)?;
    finish(model, adv, labels, &objective)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CwPenaltyParams {
    /// Weight of the margin term.
    pub c: f64,
    pub confidence: f64,
    pub steps: usize,
    pub lr: f64,
}

/// Batch-summed `||x_adv - x||_2^2 + c * margin(x_adv)` at `x_adv =
/// from_tanh_space(w)`, with its gradient w.r.t. `w`.
pub fn cw_objective<T: Real, M: Differentiable<T>>(
    model: &M,
    w: &Tensor<T>,
    x: &Tensor<T>,
    labels: &[usize],
    c: f64,
    confidence: f64,
) -> Result<(f64, Tensor<T>)> {
    let mut g = Graph::new();
    let wv = g.param(w.clone());
    let t = g.tanh(wv)?;
    let half = g.scale(t, 0.5)?;
    let x_adv = g.add_scalar(half, 0.5)?;
    let x0 = g.constant(x.clone());
    let diff = g.sub(x_adv, x0)?;
    let sq = g.pow(diff, 2.0)?;
    let dist = g.sum(sq)?;
    let logits = model.forward(&mut g, x_adv)?;
    let margin = loss::cw_margin(&mut g, logits, labels, confidence)?;
    let margin = g.sum(margin)?;
    let penalty = g.scale(margin, c)?;
    let total = g.add(dist, penalty)?;
    g.backward(total)?;
    let value = g.value(total).item().as_f64();
    let grad = g.take_grad(wv).expect("w requires grad");
    if !grad.all_finite() {
        return Err(Error::NonFinite("cw objective gradient"));
    }
    Ok((value, grad))
}

/// Gradient descent over the tanh-space variable. Returns, per example, the
/// closest misclassified point visited, or the final iterate if none was.
/// `loss` holds the l2 distance of the returned point. Not confined to an
/// l-infinity ball.
pub fn cw_penalty_attack<T: Real, M: Differentiable<T>>(
    model: &M,
    x: &Tensor<T>,
    labels: &[usize],
    params: &CwPenaltyParams,
) -> Result<AttackResult<T>> {
    check_batch(x, labels)?;
    if !(params.c >= 0.0 && params.lr > 0.0) {
        return Err(Error::invalid("penalty attack needs c >= 0 and lr > 0"));
    }
    let inset = T::lit(1e-6);
    let mut w = to_tanh_space(&x.map(|v| v.max(inset).min(T::one() - inset)))?;
    let row = x.row_len();
    let mut best: Vec<Option<(f64, Vec<T>)>> = vec![None; labels.len()];
    let mut current = from_tanh_space(&w);
    let lr = T::lit(params.lr);
    for step in 0..=params.steps {
        let preds = model.predict(&current)?;
        for (i, (&p, &y)) in preds.iter().zip(labels).enumerate() {
            if p == y {
                continue;
            }
            let d = l2(current.row(i), x.row(i));
            if best[i].as_ref().is_none_or(|(bd, _)| d < *bd) {
                best[i] = Some((d, current.row(i).to_vec()));
            }
        }
        if step == params.steps {
            break;
        }
        let (_, grad) = cw_objective(model, &w, x, labels, params.c, params.confidence)?;
        for (wi, &gi) in w.data_mut().iter_mut().zip(grad.data()) {
            *wi = *wi - lr * gi;
        }
        current = from_tanh_space(&w);
    }
    let mut out = Vec::with_capacity(x.len());
    let mut success = Vec::with_capacity(labels.len());
    let mut dists = Vec::with_capacity(labels.len());
    for (i, b) in best.into_iter().enumerate() {
        match b {
            Some((d, r)) => {
                out.extend(r);
                success.push(true);
                dists.push(d);
            }
            None => {
                out.extend_from_slice(current.row(i));
                success.push(false);
                dists.push(l2(current.row(i), x.row(i)));
            }
        }
    }
    debug_assert_eq!(out.len(), row * labels.len());
    Ok(AttackResult {
        adversarial: Tensor::new(x.shape().to_vec(), out)?,
        success,
        loss: dists,
        queries: 0,
    })
}

fn l2<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p.as_f64() - q.as_f64()).powi(2))
        .sum::<f64>()
        .sqrt()
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_reparam_basics() {
        let w = Tensor::<f64>::from_f64(&[3], &[0.0, 5.0, 20.0]).unwrap();
        let x = from_tanh_space(&w);
        assert_eq!(x.data()[0], 0.5);
        assert!(x.data()[0] < x.data()[1] && x.data()[1] <= x.data()[2] && x.data()[2] <= 1.0);
    }

    #[test]
    fn tanh_round_trip_on_grid() {
        let grid: Vec<f64> = (1..=99).map(|i| 0.01 + 0.98 * i as f64 / 100.0).collect();
        let x = Tensor::<f64>::from_f64(&[grid.len()], &grid).unwrap();
        let back = from_tanh_space(&to_tanh_space(&x).unwrap());
        assert!(back.max_abs_diff(&x) <= 1e-9);
    }

    #[test]
    fn tanh_inverse_domain() {
        for bad in [0.0, 1.0, -0.2, 1.3] {
            let x = Tensor::<f64>::from_f64(&[1], &[bad]).unwrap();
            assert!(matches!(to_tanh_space(&x), Err(Error::Domain(_))));
        }
    }
}
