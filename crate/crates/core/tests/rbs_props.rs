use std::collections::HashMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rlfat_core::rbs::{self, RbsPlan, SplitMode};
use rlfat_core::{Graph, Tensor};

fn image(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    Tensor::from_fn(&[c, h, w], |i| ((i as u64).wrapping_mul(2654435761).wrapping_add(seed) % 1000) as f64)
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn permutation_invariants(c in 1usize..4, h in 1usize..12, w in 1usize..12, k_raw in 1usize..12, seed: u64) {
        let k = 1 + k_raw % h.min(w);
        let x = image(c, h, w, seed);
        let plan = RbsPlan::from_seed(seed, h, w, k, SplitMode::Random).unwrap();
        plan.validate().unwrap();
        let y = plan.apply(&x).unwrap();
        prop_assert_eq!(sorted(y.data()), sorted(x.data()));
        prop_assert_eq!(plan.invert(&y).unwrap(), x.clone());
        let id = RbsPlan::from_seed(seed, h, w, 1, SplitMode::Random).unwrap();
        prop_assert!(id.is_identity());
        prop_assert_eq!(id.apply(&x).unwrap(), x);
    }

    #[test]
    fn text_round_trip(h in 2usize..20, w in 2usize..20, seed: u64) {
        let plan = RbsPlan::from_seed(seed, h, w, 2, SplitMode::Random).unwrap();
        let parsed: RbsPlan = plan.to_string().parse().unwrap();
        prop_assert_eq!(parsed, plan);
    }

    #[test]
    fn gather_realizes_the_batch_transform(n in 1usize..4, c in 1usize..3, seed: u64) {
        let x = Tensor::from_fn(&[n, c, 5, 7], |i| i as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (y, plans) = rbs::apply_batch(&mut rng, &x, 3, SplitMode::Random).unwrap();
        let idx = rbs::batch_gather_indices(&plans, x.shape());
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let out = g.gather(v, idx, x.shape().to_vec()).unwrap();
        prop_assert_eq!(g.value(out), &y);
        prop_assert_eq!(rbs::apply_plans(&plans, &x).unwrap(), y);
    }
}

#[test]
fn swap_frequency_is_uniform_for_two_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 10_000;
    let mut counts: HashMap<(Vec<usize>, Vec<usize>), usize> = HashMap::new();
    for _ in 0..n {
        let p = RbsPlan::sample(&mut rng, 28, 28, 2).unwrap();
        *counts.entry((p.col_perm, p.row_perm)).or_default() += 1;
    }
    assert_eq!(counts.len(), 4);
    for (k, c) in &counts {
        let f = *c as f64 / n as f64;
        assert!((f - 0.25).abs() <= 0.02, "{k:?}: {f}");
    }
    let col_swaps: usize = counts.iter().filter(|(k, _)| k.0 == vec![1, 0]).map(|(_, c)| c).sum();
    assert!((col_swaps as f64 / n as f64 - 0.5).abs() <= 0.02);
}

#[test]
fn every_plan_equally_likely_on_tiny_image() {
    // 3x3 with k = 2: two cut positions and two orders per axis.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 16_000;
    let mut counts: HashMap<(Vec<usize>, Vec<usize>, Vec<usize>, Vec<usize>), usize> = HashMap::new();
    for _ in 0..n {
        let p = RbsPlan::sample(&mut rng, 3, 3, 2).unwrap();
        *counts.entry((p.col_cuts, p.col_perm, p.row_cuts, p.row_perm)).or_default() += 1;
    }
    assert_eq!(counts.len(), 16);
    for c in counts.values() {
        assert!((*c as f64 / n as f64 - 1.0 / 16.0).abs() <= 0.01);
    }
}

#[test]
fn batch_images_get_independent_plans() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::<f64>::zeros(&[2, 1, 8, 8]);
    let trials = 4000;
    let mut same = 0;
    for _ in 0..trials {
        let (_, plans) = rbs::apply_batch(&mut rng, &x, 2, SplitMode::Random).unwrap();
        same += (plans[0].col_perm == plans[1].col_perm) as usize;
    }
    let f = same as f64 / trials as f64;
    assert!((f - 0.5).abs() < 0.04, "{f}");
}
