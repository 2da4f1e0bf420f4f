mod common;

use std::ops::ControlFlow;

use common::random_params;
use pacmlp::bound::evaluate;
use pacmlp::data::separable_toy;
use pacmlp::mlp::{backward_batch, forward_batch, init_params, Gradients, MlpConfig, MlpParams};
use pacmlp::optim::{epoch_order, run_all, step, train, Optimizer, OptimizerState, TrainConfig};
use pacmlp::rng::SplitMix64;
use pacmlp::Error;
use proptest::prelude::*;

fn toy_net() -> MlpConfig {
    MlpConfig::new(2, 4, 4, 2).unwrap()
}

fn grads_from(p: &MlpParams, vals: &[f64]) -> Gradients {
    let g = MlpParams::from_flat(p.config, vals).unwrap();
    let mut out = Gradients::zeros_like(p);
    for (dst, src) in out.blocks_mut().into_iter().zip(g.blocks()) {
        dst.copy_from_slice(src);
    }
    out
}

proptest! {
    #[test]
    fn momentum_without_memory_is_sgd(seed in any::<u64>(), steps in 1usize..20, lr in 1e-4f64..0.5) {
        let mut rng = SplitMix64::new(seed);
        let cfg = MlpConfig::new(3, 2, 2, 2).unwrap();
        let mut a = random_params(cfg, &mut rng, 1.0);
        let mut b = a.clone();
        let mut sgd = TrainConfig::new(Optimizer::Sgd);
        sgd.lr = lr;
        let mut mom = TrainConfig::new(Optimizer::Momentum);
        mom.lr = lr;
        mom.momentum_coef = 0.0;
        let mut sa = OptimizerState::new(&a, Optimizer::Sgd);
        let mut sb = OptimizerState::new(&b, Optimizer::Momentum);
        for _ in 0..steps {
            let vals: Vec<f64> = (0..cfg.param_count()).map(|_| rng.uniform(-3.0, 3.0)).collect();
            let g = grads_from(&a, &vals);
            step(&mut a, &g, &mut sa, &sgd).unwrap();
            step(&mut b, &g, &mut sb, &mom).unwrap();
        }
        for (x, y) in a.flatten().iter().zip(b.flatten()) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
        prop_assert_eq!(sb.step_count, steps as u64);
    }

    #[test]
    fn adam_step_tends_to_learning_rate(g in prop_oneof![1e-3f64..1e3, -1e3f64..-1e-3]) {
        let cfg = MlpConfig::new(1, 1, 1, 1).unwrap();
        let mut p = MlpParams::zeros(cfg);
        let grads = grads_from(&p, &vec![g; cfg.param_count()]);
        let tc = TrainConfig::new(Optimizer::Adam);
        let mut state = OptimizerState::new(&p, Optimizer::Adam);
        let mut last = 0.0;
        for _ in 0..10_000 {
            let before = p.w1.get(0, 0);
            step(&mut p, &grads, &mut state, &tc).unwrap();
            last = (p.w1.get(0, 0) - before).abs();
        }
        prop_assert!((last - tc.lr).abs() < 1e-6, "{}", last);
    }
}

#[test]
fn full_batch_sgd_step_is_exact() {
    let data = separable_toy(20, 2, 3).unwrap();
    let p0 = init_params(toy_net(), 4);
    let mut tc = TrainConfig::new(Optimizer::Sgd);
    tc.lr = 0.05;
    tc.epochs = 1;
    tc.batch_size = data.len();
    tc.shuffle_seed = 9;
    let (p1, _) = train(p0.clone(), &data, &tc, run_all).unwrap();

    let (x, y) = data.batch(&epoch_order(9, 1, data.len()));
    let g = backward_batch(&p0, &x, &forward_batch(&p0, &x).unwrap(), &y).unwrap();
    let expected: Vec<f64> = p0
        .flatten()
        .iter()
        .zip(g.flatten())
        .map(|(t, gv)| t - tc.lr * gv)
        .collect();
    assert_eq!(p1.flatten(), expected);
}

#[test]
fn full_batch_loss_is_monotone_on_toy_set() {
    let data = separable_toy(20, 2, 5).unwrap();
    let mut tc = TrainConfig::new(Optimizer::Sgd);
    tc.lr = 0.01;
    tc.epochs = 300;
    tc.batch_size = data.len();
    let start = evaluate(&init_params(toy_net(), 6), &data).unwrap().empirical_risk();
    let (_, hist) = train(init_params(toy_net(), 6), &data, &tc, run_all).unwrap();
    let mut prev = start;
    for m in &hist {
        assert!(m.train_loss <= prev, "epoch {}: {} > {prev}", m.epoch, m.train_loss);
        prev = m.train_loss;
    }
    assert!(prev < start);
}

#[test]
fn toy_set_is_fit_exactly() {
    for seed in 1..=5 {
        let data = separable_toy(20, 2, seed).unwrap();
        let mut tc = TrainConfig::new(Optimizer::Sgd);
        tc.lr = 0.1;
        tc.epochs = 200;
        tc.shuffle_seed = seed;
        let (_, hist) = train(init_params(toy_net(), seed), &data, &tc, run_all).unwrap();
        assert_eq!(hist.len(), 200);
        assert_eq!(hist.last().unwrap().train_error, 0.0, "seed {seed}");
    }
}

#[test]
fn training_is_deterministic_and_zero_epochs_is_identity() {
    let data = separable_toy(30, 3, 8).unwrap();
    let cfg = MlpConfig::new(3, 5, 4, 2).unwrap();
    for opt in Optimizer::ALL {
        let mut tc = TrainConfig::new(opt);
        tc.epochs = 5;
        tc.batch_size = 7;
        tc.shuffle_seed = 3;
        let a = train(init_params(cfg, 2), &data, &tc, run_all).unwrap();
        let b = train(init_params(cfg, 2), &data, &tc, run_all).unwrap();
        assert_eq!(a, b);
        tc.epochs = 0;
        let (p, h) = train(init_params(cfg, 2), &data, &tc, run_all).unwrap();
        assert_eq!(p, init_params(cfg, 2));
        assert!(h.is_empty());
    }
}

#[test]
fn observer_can_stop_training() {
    let data = separable_toy(30, 3, 8).unwrap();
    let cfg = MlpConfig::new(3, 5, 4, 2).unwrap();
    let mut tc = TrainConfig::new(Optimizer::Adam);
    tc.epochs = 50;
    let (_, h) = train(init_params(cfg, 2), &data, &tc, |c| {
        if c.metrics.epoch == 3 {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })
    .unwrap();
    assert_eq!(h.len(), 3);
}

#[test]
fn training_rejects_bad_inputs() {
    let data = separable_toy(10, 2, 1).unwrap();
    let empty = data.select(&[]);
    let tc = TrainConfig::new(Optimizer::Sgd);
    assert!(matches!(
        train(init_params(toy_net(), 1), &empty, &tc, run_all),
        Err(Error::Empty(_))
    ));
    let wrong = MlpConfig::new(3, 4, 4, 2).unwrap();
    assert!(train(init_params(wrong, 1), &data, &tc, run_all).is_err());
    let mut hot = tc;
    hot.lr = 1e300;
    hot.epochs = 3;
    assert!(matches!(
        train(init_params(toy_net(), 1), &data, &hot, run_all),
        Err(Error::NonFinite(_))
    ));
}
