//! Scalar objectives built from graph primitives.

use super::graph::{Graph, Var};
use super::tensor::Real;
use crate::error::{Error, Result};

fn logits_dims<T: Real>(g: &Graph<T>, logits: Var, op: &'static str) -> Result<(usize, usize)> {
    let s = g.value(logits).shape();
    if s.len() != 2 {
        return Err(Error::shape(op, format!("expected [batch, classes], got {s:?}")));
    }
    Ok((s[0], s[1]))
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::shape(
            "labels",
            format!("{} labels for batch of {batch}", labels.len()),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Flat indices of `(row, labels[row])` entries of a `[batch, classes]` tensor.
pub fn label_indices(labels: &[usize], classes: usize) -> Vec<usize> {
    labels.iter().enumerate().map(|(i, &l)| i * classes + l).collect()
}

/// Per-example `-log softmax(logits)[label]`, shape `[batch]`.
pub fn cross_entropy_per_example<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (batch, classes) = logits_dims(g, logits, "cross_entropy")?;
    check_labels(labels, batch, classes)?;
    let log_probs = g.log_softmax(logits)?;
    let picked = g.gather(log_probs, label_indices(labels, classes), vec![batch])?;
    g.scale(picked, -1.0)
}

/// Batch-mean cross entropy.
pub fn cross_entropy<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let per_example = cross_entropy_per_example(g, logits, labels)?;
    g.mean(per_example)
}

/// Batch-mean `KL(softmax(p_logits) || softmax(q_logits))`.
pub fn kl_divergence<T: Real>(g: &mut Graph<T>, p_logits: Var, q_logits: Var) -> Result<Var> {
    let (batch, _) = logits_dims(g, p_logits, "kl_divergence")?;
    if g.value(p_logits).shape() != g.value(q_logits).shape() {
        return Err(Error::shape(
            "kl_divergence",
            format!("{:?} vs {:?}", g.value(p_logits).shape(), g.value(q_logits).shape()),
        ));
    }
    let p = g.softmax(p_logits)?;
    let log_p = g.log_softmax(p_logits)?;
    let log_q = g.log_softmax(q_logits)?;
    let diff = g.sub(log_p, log_q)?;
    let terms = g.mul(p, diff)?;
    let total = g.sum(terms)?;
    g.scale(total, 1.0 / batch as f64)
}

/// `sum_i (a_i - b_i)^2`, averaged over leading-axis rows.
pub fn squared_l2<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let batch = g.value(a).batch();
    let diff = g.sub(a, b)?;
    let sq = g.pow(diff, 2.0)?;
    let total = g.sum(sq)?;
    g.scale(total, 1.0 / batch as f64)
}

/// Per-example margin `max(f_true - max_{i != true} f_i, -confidence)`, shape
/// `[batch]`. The runner-up class is selected from the current values; the
/// gradient is the corresponding subgradient.
pub fn cw_margin<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize], confidence: f64) -> Result<Var> {
    let (batch, classes) = logits_dims(g, logits, "cw_margin")?;
    if classes < 2 {
        return Err(Error::invalid("margin needs at least 2 classes"));
    }
    check_labels(labels, batch, classes)?;
    let runner_up: Vec<usize> = {
        let v = g.value(logits);
        labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let row = v.row(i);
                let mut best = if y == 0 { 1 } else { 0 };
                for (j, &val) in row.iter().enumerate() {
                    if j != y && val > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    };
    let true_logit = g.gather(logits, label_indices(labels, classes), vec![batch])?;
    let other_logit = g.gather(logits, label_indices(&runner_up, classes), vec![batch])?;
    let margin = g.sub(true_logit, other_logit)?;
    g.clamp(margin, -confidence, f64::INFINITY)
}
