#![allow(dead_code)]

use pacmlp::mlp::{forward, MlpConfig, MlpParams};
use pacmlp::rng::SplitMix64;
use pacmlp::Vector;

pub const ARCHS: [(usize, usize, usize, usize); 5] =
    [(2, 3, 3, 2), (4, 3, 3, 2), (5, 8, 6, 4), (10, 16, 8, 10), (1, 1, 1, 3)];

pub fn config(a: (usize, usize, usize, usize)) -> MlpConfig {
    MlpConfig::new(a.0, a.1, a.2, a.3).unwrap()
}

/// Every parameter uniform in `±scale`.
pub fn random_params(config: MlpConfig, rng: &mut SplitMix64, scale: f64) -> MlpParams {
    let n = config.param_count();
    let flat: Vec<f64> = (0..n).map(|_| rng.uniform(-scale, scale)).collect();
    MlpParams::from_flat(config, &flat).unwrap()
}

pub fn random_input(m: usize, rng: &mut SplitMix64) -> Vector {
    (0..m).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<_>>().into()
}

/// Smallest pre-activation magnitude in either hidden layer.
pub fn kink_distance(params: &MlpParams, x: &Vector) -> f64 {
    let tr = forward(params, x).unwrap();
    tr.g1
        .iter()
        .chain(tr.g2.iter())
        .fold(f64::INFINITY, |m, g| m.min(g.abs()))
}
