//! Dense kernels against direct scalar oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlfat_core::autodiff::kernels::{conv2d_forward, log_softmax_rows, matmul, ConvGeometry};
use rlfat_core::autodiff::{adam_step, cross_entropy, kl_divergence, AdamState, Graph, Tensor};

/// Nested-loop convolution summing channel, then kernel row, then kernel
/// column, the same order as the im2col kernel.
fn conv_oracle(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], stride: usize, pad: usize) -> Vec<f64> {
    let [n, c, h, wd] = xs;
    let [o, _, kh, kw] = ws;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((b * c + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w[((oc * c + ic) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for case in 0..40 {
        let c = rng.random_range(1..4);
        let h = rng.random_range(3..9);
        let wd = rng.random_range(3..9);
        let k = rng.random_range(1..=3.min(h).min(wd));
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..2);
        let xs = [2, c, h, wd];
        let ws = [3, c, k, k];
        let x: Vec<f64> = (0..xs.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..ws.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let geom = ConvGeometry::new(&xs, &ws, stride, pad).unwrap();
        let fast = conv2d_forward(&x, &w, &geom);
        let slow = conv_oracle(&x, xs, &w, ws, stride, pad);
        assert_eq!(fast.len(), slow.len());
        let worst = fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-12, "case {case}: {worst:e}");
    }
}

#[test]
fn conv_hand_example() {
    // 3x3 ones image, 2x2 kernel [[1,2],[3,4]], no padding.
    let x = vec![1.0; 9];
    let w = vec![1.0, 2.0, 3.0, 4.0];
    let geom = ConvGeometry::new(&[1, 1, 3, 3], &[1, 1, 2, 2], 1, 0).unwrap();
    assert_eq!(conv2d_forward(&x, &w, &geom), vec![10.0; 4]);
    let geom = ConvGeometry::new(&[1, 1, 3, 3], &[1, 1, 2, 2], 1, 1).unwrap();
    let out = conv2d_forward(&x, &w, &geom);
    assert_eq!(out[0], 4.0);
    assert_eq!(out[5], 10.0);
}

#[test]
fn matmul_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (m, k, n) = (4, 7, 3);
    let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c = matmul(&a, &b, m, k, n);
    for i in 0..m {
        for j in 0..n {
            let s: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            assert!((c[i * n + j] - s).abs() < 1e-12);
        }
    }
}

#[test]
fn log_softmax_scalar_oracle() {
    let row = [1.0, 2.0, 3.0];
    let z: f64 = row.iter().map(|v: &f64| v.exp()).sum();
    let out = log_softmax_rows(&row, 3);
    for (o, v) in out.iter().zip(row) {
        assert!((o - (v - z.ln())).abs() < 1e-12);
    }
    // Large logits stay finite.
    let out = log_softmax_rows(&[1000.0f64, 0.0], 2);
    assert!(out.iter().all(|v| v.is_finite()));
    assert!(out[0].abs() < 1e-12);
}

#[test]
fn cross_entropy_and_kl_scalar_oracles() {
    let logits = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.0, 0.0, 0.0]).unwrap();
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let ce = cross_entropy(&mut g, l, &[2, 1]).unwrap();
    let lse0 = (0.5f64.exp() + (-1.0f64).exp() + 2.0f64.exp()).ln();
    let expected = ((lse0 - 2.0) + 3.0f64.ln()) / 2.0;
    assert!((g.value(ce).item() - expected).abs() < 1e-12);

    let q = g.constant(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap());
    let kl = kl_divergence(&mut g, l, q).unwrap();
    let p: Vec<f64> = [0.5f64, -1.0, 2.0].iter().map(|v| (v - lse0).exp()).collect();
    let kl0: f64 = p.iter().map(|pi| pi * (pi.ln() - (1.0f64 / 3.0).ln())).sum();
    assert!((g.value(kl).item() - kl0 / 2.0).abs() < 1e-12);
    let self_kl = kl_divergence(&mut g, l, l).unwrap();
    assert_eq!(g.value(self_kl).item(), 0.0);
}

#[test]
fn adam_first_step_is_signed_lr() {
    // With bias correction the first update is lr * g / (|g| + eps').
    let mut params = vec![Tensor::new(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap()];
    let grads = vec![Tensor::new(vec![3], vec![0.3f64, -4.0, 0.0]).unwrap()];
    let mut state = AdamState::new(&params);
    adam_step(&mut params, &grads, &mut state, 0.01).unwrap();
    let p = params[0].data();
    assert!((p[0] - (1.0 - 0.01)).abs() < 1e-6);
    assert!((p[1] - (-2.0 + 0.01)).abs() < 1e-6);
    assert_eq!(p[2], 0.5);
    assert_eq!(state.step, 1);
}

#[test]
fn adam_second_step_oracle() {
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
    let g1 = 0.5;
    let g2 = -0.25;
    let mut params = vec![Tensor::scalar(0.0f64)];
    let mut state = AdamState::new(&params);
    adam_step(&mut params, &[Tensor::scalar(g1)], &mut state, lr).unwrap();
    adam_step(&mut params, &[Tensor::scalar(g2)], &mut state, lr).unwrap();
    let mut m = 0.0;
    let mut v = 0.0;
    let mut p = 0.0;
    for (t, g) in [(1, g1), (2, g2)] {
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        p -= lr * mh / (vh.sqrt() + eps);
    }
    assert!((params[0].item() - p).abs() < 1e-12);
}
