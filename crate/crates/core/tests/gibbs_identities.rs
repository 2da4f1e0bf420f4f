mod common;

use common::{config, kink_distance, random_input, random_params, ARCHS};
use pacmlp::gibbs::{
    energy, hidden_gibbs, layer_gibbs, linearization_residual, log_partition,
    marginal_by_enumeration, output_marginal, poe_check,
};
use pacmlp::mlp::{backward, cross_entropy_loss, forward, MlpConfig, MlpParams};
use pacmlp::rng::SplitMix64;
use pacmlp::Vector;
use proptest::prelude::*;

#[test]
fn loss_splits_into_energy_and_log_partition() {
    let mut rng = SplitMix64::new(11);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let cfg = config(ARCHS[i % ARCHS.len()]);
        let p = random_params(cfg, &mut rng, 2.0);
        let x = random_input(cfg.m, &mut rng);
        let y = rng.below(cfg.l);
        let tr = forward(&p, &x).unwrap();
        let loss = cross_entropy_loss(&tr, y).unwrap();
        let split = energy(&tr, y).unwrap() + log_partition(&tr);
        worst = worst.max((loss - split).abs());
    }
    assert!(worst < 1e-12, "{worst}");
}

#[test]
fn poe_factorization_on_random_heads() {
    let mut rng = SplitMix64::new(12);
    for _ in 0..100 {
        let cfg = MlpConfig::new(3, 4, 1 + rng.below(8), 2 + rng.below(9)).unwrap();
        let p = random_params(cfg, &mut rng, 3.0);
        let f2: Vec<f64> = (0..cfg.k).map(|_| rng.uniform(0.0, 5.0)).collect();
        let r = poe_check(&p, &f2.into()).unwrap();
        assert!(r.max_abs_log_residual < 1e-9, "{}", r.max_abs_log_residual);
        assert!(r.per_class.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn enumerated_marginal_matches_output_softmax() {
    let mut rng = SplitMix64::new(13);
    for i in 0..50 {
        let cfg = config(ARCHS[i % ARCHS.len()]);
        let p = random_params(cfg, &mut rng, 1.5);
        let tr = forward(&p, &random_input(cfg.m, &mut rng)).unwrap();
        let brute = marginal_by_enumeration(&tr);
        let out = output_marginal(&tr);
        for (a, b) in brute.iter().zip(out.probs.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(out.probs, tr.qy);
    }
}

#[test]
fn first_order_residual_halves_with_step() {
    let mut rng = SplitMix64::new(14);
    let cfg = MlpConfig::new(4, 6, 5, 3).unwrap();
    let mut checked = 0;
    while checked < 20 {
        let p = random_params(cfg, &mut rng, 1.0);
        let x = random_input(cfg.m, &mut rng);
        if kink_distance(&p, &x) < 0.05 {
            continue;
        }
        let dir: Vec<f64> = (0..cfg.param_count()).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let moved = |alpha: f64| {
            let flat: Vec<f64> = p
                .flatten()
                .iter()
                .zip(&dir)
                .map(|(a, d)| a + alpha * d)
                .collect();
            MlpParams::from_flat(cfg, &flat).unwrap()
        };
        let r1 = linearization_residual(&p, &moved(1e-3), &x).unwrap();
        let r2 = linearization_residual(&p, &moved(1e-4), &x).unwrap();
        assert!(r2 <= 0.2 * r1 || r1 < 1e-13, "{r1} {r2}");
        let y = rng.below(cfg.l);
        let grad = backward(&p, &forward(&p, &x).unwrap(), y).unwrap().flatten();
        let descent = |alpha: f64| {
            let flat: Vec<f64> = p.flatten().iter().zip(&grad).map(|(a, g)| a - alpha * g).collect();
            MlpParams::from_flat(cfg, &flat).unwrap()
        };
        let mut prev = linearization_residual(&p, &descent(1e-2), &x).unwrap();
        for e in 1..=5 {
            let r = linearization_residual(&p, &descent(1e-2 * 0.5f64.powi(e)), &x).unwrap();
            assert!(r < prev || prev == 0.0, "{prev} -> {r}");
            prev = r;
        }
        checked += 1;
    }
}

fn finite_activations() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 1..12)
}

proptest! {
    #[test]
    fn gibbs_probs_normalized_and_consistent(v in finite_activations()) {
        let g = layer_gibbs(&Vector::from(v.clone())).unwrap();
        prop_assert!((g.probs.sum() - 1.0).abs() < 1e-12);
        for t in 0..v.len() {
            let p = g.probs[t];
            prop_assert!(p >= 0.0 && p <= 1.0);
            prop_assert!((p - (-g.energies[t] - g.log_z).exp()).abs() < 1e-12);
        }
        prop_assert_eq!(g.mode(), g.probs.argmax());
    }

    #[test]
    fn hidden_measures_follow_activations(seed in any::<u64>(), which in 0usize..5) {
        let mut rng = SplitMix64::new(seed);
        let cfg = config(ARCHS[which]);
        let p = random_params(cfg, &mut rng, 1.0);
        let tr = forward(&p, &random_input(cfg.m, &mut rng)).unwrap();
        let (q1, q2) = hidden_gibbs(&tr);
        prop_assert_eq!(q1.energies.iter().map(|e| -e).collect::<Vec<_>>(), tr.f1.as_slice().to_vec());
        prop_assert_eq!(q2.len(), cfg.k);
        prop_assert!((tr.qy.sum() - 1.0).abs() < 1e-12);
        for (f, g) in tr.f1.iter().zip(tr.g1.iter()) {
            prop_assert_eq!(*f, g.max(0.0));
        }
        for (f, g) in tr.f2.iter().zip(tr.g2.iter()) {
            prop_assert_eq!(*f, g.max(0.0));
        }
    }
}
