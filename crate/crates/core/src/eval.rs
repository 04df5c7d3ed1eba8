//! Clean and robust accuracy, loss sensitivity under brightness and gamma
//! shifts, and SmoothGrad salience maps.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attacks::AttackSpec;
use crate::autodiff::loss::cross_entropy_per_example;
use crate::autodiff::{Graph, Real, Tensor};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Differentiable;

/// Examples per forward pass during evaluation.
pub const EVAL_BATCH: usize = 100;

fn chunks(len: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..len)
        .step_by(EVAL_BATCH)
        .map(move |s| (s..(s + EVAL_BATCH).min(len)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub clean: f64,
    /// Fraction correct both before and after the attack.
    pub robust: Option<f64>,
    pub count: usize,
}

/// Clean accuracy, and robust accuracy when `attack` is given.
///
/// An example counts as robust only when its clean prediction is correct and
/// the attacked prediction is too, so `robust <= clean` always.
pub fn evaluate_accuracy<T: Real, M: Differentiable<T>>(
    model: &M,
    data: &Dataset<T>,
    attack: Option<&AttackSpec>,
    rng: &mut impl Rng,
) -> Result<Accuracy> {
    if data.is_empty() {
        return Err(Error::invalid("accuracy of an empty dataset"));
    }
    let (mut clean, mut robust) = (0usize, 0usize);
    for idx in chunks(data.len()) {
        let (x, labels) = data.batch(&idx);
        let pred = model.predict(&x)?;
        let ok: Vec<bool> = pred.iter().zip(&labels).map(|(p, y)| p == y).collect();
        clean += ok.iter().filter(|&&b| b).count();
        if let Some(spec) = attack {
            let res = spec.run(model, &x, &labels, rng)?;
            let adv_pred = model.predict(&res.adversarial)?;
            robust += ok
                .iter()
                .zip(adv_pred.iter().zip(&labels))
                .filter(|&(&c, (p, y))| c && p == y)
                .count();
        }
    }
    let n = data.len() as f64;
    Ok(Accuracy {
        clean: clean as f64 / n,
        robust: attack.map(|_| robust as f64 / n),
        count: data.len(),
    })
}

/// Fraction of examples classified correctly, after `attack` if given.
pub fn accuracy<T: Real, M: Differentiable<T>>(
    model: &M,
    data: &Dataset<T>,
    attack: Option<&AttackSpec>,
    rng: &mut impl Rng,
) -> Result<f64> {
    let acc = evaluate_accuracy(model, data, attack, rng)?;
    Ok(acc.robust.unwrap_or(acc.clean))
}

fn channel_axis(shape: &[usize]) -> Result<usize> {
    match shape.len() {
        3 => Ok(0),
        4 => Ok(1),
        _ => Err(Error::shape("image", format!("expected [C, H, W] or [N, C, H, W], got {shape:?}"))),
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    (h / 6.0, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h * 6.0).rem_euclid(6.0);
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u8 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Public for tests that compare hue and saturation before and after a shift.
pub fn hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    rgb_to_hsv(r, g, b)
}

/// Adds `alpha` to the HSV value channel (clamped to `[0, 1]`). Grayscale
/// images shift their single channel directly.
pub fn brightness_adjust<T: Real>(x: &Tensor<T>, alpha: f64) -> Result<Tensor<T>> {
    if !(-1.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("brightness shift {alpha} outside [-1, 1]")));
    }
    let axis = channel_axis(x.shape())?;
    let c = x.shape()[axis];
    let plane: usize = x.shape()[axis + 1..].iter().product();
    match c {
        1 => Ok(x.map(|v| T::lit((v.as_f64() + alpha).clamp(0.0, 1.0)))),
        3 => {
            let mut out = x.clone();
            for img in out.data_mut().chunks_mut(3 * plane) {
                for i in 0..plane {
                    let (h, s, v) = rgb_to_hsv(img[i].as_f64(), img[plane + i].as_f64(), img[2 * plane + i].as_f64());
                    let (r, g, b) = hsv_to_rgb(h, s, (v + alpha).clamp(0.0, 1.0));
                    img[i] = T::lit(r);
                    img[plane + i] = T::lit(g);
                    img[2 * plane + i] = T::lit(b);
                }
            }
            Ok(out)
        }
        _ => Err(Error::shape("brightness", format!("{c} channels, expected 1 or 3"))),
    }
}

/// Elementwise `x^gamma`.
pub fn gamma_map<T: Real>(x: &Tensor<T>, gamma: f64) -> Result<Tensor<T>> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Domain(format!("gamma must be positive, got {gamma}")));
    }
    if gamma == 1.0 {
        return Ok(x.clone());
    }
    let g = T::lit(gamma);
    Ok(x.map(|v| v.powf(g)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    Brightness,
    Gamma,
}

impl ShiftKind {
    pub fn name(self) -> &'static str {
        match self {
            ShiftKind::Brightness => "brightness",
            ShiftKind::Gamma => "gamma",
        }
    }

    pub fn apply<T: Real>(self, x: &Tensor<T>, param: f64) -> Result<Tensor<T>> {
        match self {
            ShiftKind::Brightness => brightness_adjust(x, param),
            ShiftKind::Gamma => gamma_map(x, param),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub kind: ShiftKind,
    pub param: f64,
    pub value: f64,
    pub count: usize,
}

/// Per-example l2 norms of the cross-entropy gradient w.r.t. the input.
pub fn input_gradient_norms<T: Real, M: Differentiable<T>>(
    model: &M,
    x: &Tensor<T>,
    labels: &[usize],
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let logits = model.forward(&mut g, xv)?;
    let per = cross_entropy_per_example(&mut g, logits, labels)?;
    // Examples are independent, so the gradient of the sum splits per row.
    let total = g.sum(per)?;
    g.backward(total)?;
    let grad = g.take_grad(xv).expect("input requires grad");
    if !grad.all_finite() {
        return Err(Error::NonFinite("input gradient"));
    }
    Ok((0..grad.batch())
        .map(|i| grad.row(i).iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt())
        .collect())
}

/// Mean input-gradient norm of the loss on shifted data, the gradient taken
/// at the shifted input.
pub fn loss_sensitivity<T: Real, M: Differentiable<T>>(
    model: &M,
    data: &Dataset<T>,
    kind: ShiftKind,
    param: f64,
) -> Result<SensitivityReport> {
    if data.is_empty() {
        return Err(Error::invalid("sensitivity of an empty dataset"));
    }
    let mut sum = 0.0;
    for idx in chunks(data.len()) {
        let (x, labels) = data.batch(&idx);
        let shifted = kind.apply(&x, param)?;
        sum += input_gradient_norms(model, &shifted, &labels)?.iter().sum::<f64>();
    }
    Ok(SensitivityReport {
        kind,
        param,
        value: sum / data.len() as f64,
        count: data.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SalienceMap {
    pub height: usize,
    pub width: usize,
    /// Row-major, normalized to `[0, 1]`.
    pub values: Vec<f64>,
    pub samples: usize,
    pub sigma: f64,
}

impl SalienceMap {
    /// Binary PGM (P5); 0 maps to black and 1 to 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.values.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        out
    }
}

/// Encodes a `[C, H, W]` image in `[0, 1]` as P5 (one channel) or P6 (three).
pub fn image_to_pnm<T: Real>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let s = image.shape();
    let (c, h, w) = match s {
        [c, h, w] | [1, c, h, w] => (*c, *h, *w),
        _ => return Err(Error::shape("pnm", format!("expected one image, got {s:?}"))),
    };
    let px = |v: T| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8;
    let plane = h * w;
    let d = image.data();
    match c {
        1 => {
            let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
            out.extend(d.iter().map(|&v| px(v)));
            Ok(out)
        }
        3 => {
            let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
            for i in 0..plane {
                out.extend([px(d[i]), px(d[plane + i]), px(d[2 * plane + i])]);
            }
            Ok(out)
        }
        _ => Err(Error::shape("pnm", format!("{c} channels"))),
    }
}

/// Averages the gradient of the `label` logit over `n` Gaussian-noised
/// copies of `x`, then takes the absolute value, the maximum over channels
/// and a min-max normalization.
pub fn smoothgrad<T: Real, M: Differentiable<T>>(
    model: &M,
    x: &Tensor<T>,
    label: usize,
    n: usize,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<SalienceMap> {
    let [c, h, w] = model.input_shape();
    if x.len() != c * h * w {
        return Err(Error::shape("smoothgrad", format!("{:?} vs model input {:?}", x.shape(), [c, h, w])));
    }
    if label >= model.classes() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: model.classes(),
        });
    }
    if n == 0 || !(sigma >= 0.0) {
        return Err(Error::invalid("smoothgrad needs n >= 1 and sigma >= 0"));
    }
    let noise = Normal::new(0.0, sigma).expect("sigma checked");
    let mut acc = vec![0.0f64; c * h * w];
    for _ in 0..n {
        let noisy = Tensor::from_fn(&[1, c, h, w], |i| {
            let eps = if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            x.data()[i] + T::lit(eps)
        });
        let mut g = Graph::new();
        let xv = g.leaf(noisy, true);
        let logits = model.forward(&mut g, xv)?;
        let picked = g.gather(logits, vec![label], vec![1])?;
        let score = g.sum(picked)?;
        g.backward(score)?;
        let grad = g.take_grad(xv).expect("input requires grad");
        if !grad.all_finite() {
            return Err(Error::NonFinite("smoothgrad gradient"));
        }
        for (a, v) in acc.iter_mut().zip(grad.data()) {
            *a += v.as_f64();
        }
    }
    let plane = h * w;
    let mut values: Vec<f64> = (0..plane)
        .map(|p| (0..c).map(|ch| (acc[ch * plane + p] / n as f64).abs()).fold(0.0, f64::max))
        .collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        for v in &mut values {
            *v = (*v - lo) / (hi - lo);
        }
    } else {
        values.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(SalienceMap {
        height: h,
        width: w,
        values,
        samples: n,
        sigma,
    })
}
