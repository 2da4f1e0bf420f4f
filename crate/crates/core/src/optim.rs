//! SGD, Momentum and Adam update rules and a deterministic minibatch loop.

use std::fmt;
use std::ops::ControlFlow;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bound::{evaluate, DGapParams, DatasetStats};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::mlp::{backward_batch, forward_batch, Gradients, MlpParams};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd,
    Momentum,
    Adam,
}

impl Optimizer {
    pub const ALL: [Optimizer; 3] = [Optimizer::Sgd, Optimizer::Momentum, Optimizer::Adam];

    pub fn as_str(self) -> &'static str {
        match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Momentum => "momentum",
            Optimizer::Adam => "adam",
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(Optimizer::Sgd),
            "momentum" => Ok(Optimizer::Momentum),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::InvalidParameter(format!(
                "unknown optimizer `{other}` (sgd, momentum, adam)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub lr: f64,
    pub momentum_coef: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
}

impl TrainConfig {
    /// Standard defaults: `lr = 0.01` for Sgd/Momentum (`μ = 0.9`),
    /// `lr = 0.001` for Adam, batch 64.
    pub fn new(optimizer: Optimizer) -> Self {
        Self {
            optimizer,
            lr: Self::default_lr(optimizer),
            momentum_coef: 0.9,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 100,
            batch_size: 64,
            shuffle_seed: 0,
        }
    }

    pub fn default_lr(optimizer: Optimizer) -> f64 {
        match optimizer {
            Optimizer::Sgd | Optimizer::Momentum => 0.01,
            Optimizer::Adam => 0.001,
        }
    }

    /// Checks rates and coefficients. `epochs = 0` is allowed and trains
    /// nothing.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| {
            Err(Error::InvalidParameter(format!("{what} out of range: {v}")))
        };
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate", self.lr);
        }
        for (name, v) in [
            ("momentum", self.momentum_coef),
            ("adam beta1", self.adam_beta1),
            ("adam beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(name, v);
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam eps", self.adam_eps);
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step_count: u64,
    pub velocity: Option<Gradients>,
    pub first_moment: Option<Gradients>,
    pub second_moment: Option<Gradients>,
}

impl OptimizerState {
    pub fn new(params: &MlpParams, optimizer: Optimizer) -> Self {
        let zeros = || Some(Gradients::zeros_like(params));
        match optimizer {
            Optimizer::Sgd => Self {
                step_count: 0,
                velocity: None,
                first_moment: None,
                second_moment: None,
            },
            Optimizer::Momentum => Self {
                step_count: 0,
                velocity: zeros(),
                first_moment: None,
                second_moment: None,
            },
            Optimizer::Adam => Self {
                step_count: 0,
                velocity: None,
                first_moment: zeros(),
                second_moment: zeros(),
            },
        }
    }
}

fn missing(what: &str) -> Error {
    Error::InvalidParameter(format!("optimizer state has no {what} buffer"))
}

/// Applies one update in place and increments `state.step_count`.
pub fn step(
    params: &mut MlpParams,
    grads: &Gradients,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    params.same_shape(grads.block_lens())?;
    for buf in [&state.velocity, &state.first_moment, &state.second_moment]
        .into_iter()
        .flatten()
    {
        params.same_shape(buf.block_lens())?;
    }
    let lr = cfg.lr;
    state.step_count += 1;
    match cfg.optimizer {
        Optimizer::Sgd => {
            for (theta, g) in params.blocks_mut().into_iter().zip(grads.blocks()) {
                for (p, &gv) in theta.iter_mut().zip(g) {
                    *p -= lr * gv;
                }
            }
        }
        Optimizer::Momentum => {
            let mu = cfg.momentum_coef;
            let vel = state.velocity.as_mut().ok_or_else(|| missing("velocity"))?;
            for ((theta, g), v) in params
                .blocks_mut()
                .into_iter()
                .zip(grads.blocks())
                .zip(vel.blocks_mut())
            {
                for ((p, &gv), vv) in theta.iter_mut().zip(g).zip(v.iter_mut()) {
                    *vv = mu * *vv + gv;
                    *p -= lr * *vv;
                }
            }
        }
        Optimizer::Adam => {
            let (b1, b2, eps) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
            let t = state.step_count as f64;
            let c1 = 1.0 - b1.powf(t);
            let c2 = 1.0 - b2.powf(t);
            let m = state.first_moment.as_mut().ok_or_else(|| missing("first moment"))?;
            let v = state.second_moment.as_mut().ok_or_else(|| missing("second moment"))?;
            for (((theta, g), mb), vb) in params
                .blocks_mut()
                .into_iter()
                .zip(grads.blocks())
                .zip(m.blocks_mut())
                .zip(v.blocks_mut())
            {
                for (((p, &gv), mv), vv) in theta.iter_mut().zip(g).zip(mb.iter_mut()).zip(vb.iter_mut()) {
                    *mv = b1 * *mv + (1.0 - b1) * gv;
                    *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                    let m_hat = *mv / c1;
                    let v_hat = *vv / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

/// Sample order for `epoch` (1-based): a Fisher-Yates permutation drawn
/// from `SplitMix64::keyed(shuffle_seed, epoch)`.
pub fn epoch_order(shuffle_seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    SplitMix64::keyed(shuffle_seed, epoch as u64).permutation(n)
}

/// Training-set metrics after one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_error: f64,
    pub bound_proxy: f64,
    pub mean_log_z: f64,
    pub mean_d_gap: f64,
}

impl EpochMetrics {
    pub fn from_stats(epoch: usize, s: &DatasetStats, dp: DGapParams) -> Self {
        Self {
            epoch,
            train_loss: s.empirical_risk(),
            train_error: s.error_rate(),
            bound_proxy: s.mean_energy(),
            mean_log_z: s.mean_log_z(),
            mean_d_gap: s.mean_d_gap(dp),
        }
    }
}

/// What the per-epoch observer sees.
pub struct EpochContext<'a> {
    pub params: &'a MlpParams,
    pub train: &'a DatasetStats,
    pub metrics: &'a EpochMetrics,
}

/// Trains for `cfg.epochs` epochs. After each epoch the whole training set
/// is evaluated and passed to `observer`, which may stop training early by
/// returning `ControlFlow::Break`.
pub fn train(
    mut params: MlpParams,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&EpochContext<'_>) -> ControlFlow<()>,
) -> Result<(MlpParams, Vec<EpochMetrics>)> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    cfg.validate()?;
    if data.dim() != params.config.m || data.num_classes() > params.config.l {
        return Err(Error::shape(
            format!("network {}", params.config),
            format!("data dim {} with {} classes", data.dim(), data.num_classes()),
        ));
    }
    let mut state = OptimizerState::new(&params, cfg.optimizer);
    let mut history = Vec::with_capacity(cfg.epochs);
    let dp = DGapParams::default();
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(cfg.shuffle_seed, epoch, data.len());
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = data.batch(chunk);
            let trace = forward_batch(&params, &x)?;
            let grads = backward_batch(&params, &x, &trace, &labels)?;
            step(&mut params, &grads, &mut state, cfg)?;
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("parameters after update (learning rate too high?)"));
        }
        let stats = evaluate(&params, data)?;
        let metrics = EpochMetrics::from_stats(epoch, &stats, dp);
        history.push(metrics);
        let ctx = EpochContext {
            params: &params,
            train: &stats,
            metrics: &metrics,
        };
        if observer(&ctx).is_break() {
            break;
        }
    }
    Ok((params, history))
}

/// Observer that never stops training.
pub fn run_all(_: &EpochContext<'_>) -> ControlFlow<()> {
    ControlFlow::Continue(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::MlpConfig;

    fn scalar_net() -> (MlpParams, Gradients) {
        let p = MlpParams::zeros(MlpConfig::new(1, 1, 1, 1).unwrap());
        let g = Gradients::zeros_like(&p);
        (p, g)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        for opt in Optimizer::ALL {
            let (mut p, g) = scalar_net();
            p.w1.set(0, 0, 0.7);
            let before = p.clone();
            let cfg = TrainConfig::new(opt);
            let mut s = OptimizerState::new(&p, opt);
            step(&mut p, &g, &mut s, &cfg).unwrap();
            assert_eq!(p, before);
            assert_eq!(s.step_count, 1);
        }
    }

    #[test]
    fn sgd_one_line() {
        let (mut p, mut g) = scalar_net();
        p.w1.set(0, 0, 1.0);
        g.w1.set(0, 0, 0.5);
        let cfg = TrainConfig {
            lr: 0.1,
            ..TrainConfig::new(Optimizer::Sgd)
        };
        let mut s = OptimizerState::new(&p, Optimizer::Sgd);
        step(&mut p, &g, &mut s, &cfg).unwrap();
        assert_eq!(p.w1.get(0, 0), 0.95);
    }

    #[test]
    fn adam_first_step() {
        let (mut p, mut g) = scalar_net();
        g.w1.set(0, 0, 1.0);
        let cfg = TrainConfig::new(Optimizer::Adam);
        let mut s = OptimizerState::new(&p, Optimizer::Adam);
        step(&mut p, &g, &mut s, &cfg).unwrap();
        // scripts/oracles.py: -0.001 / (1 + 1e-8)
        assert!((p.w1.get(0, 0) + 0.000_999_999_990_000_000_1).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (mut p, _) = scalar_net();
        let other = MlpParams::zeros(MlpConfig::new(2, 1, 1, 1).unwrap());
        let g = Gradients::zeros_like(&other);
        let mut s = OptimizerState::new(&p, Optimizer::Sgd);
        assert!(step(&mut p, &g, &mut s, &TrainConfig::new(Optimizer::Sgd)).is_err());
    }

    #[test]
    fn parse_and_validate() {
        assert_eq!("Adam".parse::<Optimizer>().unwrap(), Optimizer::Adam);
        assert!("rmsprop".parse::<Optimizer>().is_err());
        let mut c = TrainConfig::new(Optimizer::Momentum);
        assert!(c.validate().is_ok());
        c.momentum_coef = 1.0;
        assert!(c.validate().is_err());
        c = TrainConfig { batch_size: 0, ..TrainConfig::new(Optimizer::Sgd) };
        assert!(c.validate().is_err());
    }

    #[test]
    fn epoch_orders_are_permutations_and_vary() {
        let a = epoch_order(3, 1, 50);
        let b = epoch_order(3, 2, 50);
        assert_ne!(a, b);
        assert_eq!(a, epoch_order(3, 1, 50));
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
    }
}
