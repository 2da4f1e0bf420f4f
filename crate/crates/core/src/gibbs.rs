//! Gibbs measures over layer outcomes and the identities that tie them to
//! the network's loss.
//!
//! A hidden layer with activations `f` defines `Q(t) = exp(f_t) / Z` with
//! energy `-f_t`. The output layer uses the logits `gy`, so its measure is
//! exactly the network's softmax prediction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{forward, Activation, ForwardTrace, MlpParams};
use crate::numerics::{logsumexp_slice, softmax_into, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsMeasure {
    pub probs: Vector,
    pub log_z: f64,
    pub energies: Vector,
}

impl GibbsMeasure {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Most likely outcome; lowest index on ties.
    pub fn mode(&self) -> usize {
        self.probs.argmax()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoeResidual {
    pub max_abs_log_residual: f64,
    pub per_class: Vector,
}

pub fn layer_gibbs(activations: &Vector) -> Result<GibbsMeasure> {
    if activations.is_empty() {
        return Err(Error::Empty("activations"));
    }
    if !activations.is_finite() {
        return Err(Error::NonFinite("activations"));
    }
    Ok(measure_of(activations.as_slice()))
}

fn measure_of(values: &[f64]) -> GibbsMeasure {
    let mut probs = vec![0.0; values.len()];
    let log_z = softmax_into(values, &mut probs);
    GibbsMeasure {
        probs: probs.into(),
        log_z,
        energies: values.iter().map(|v| -v).collect::<Vec<_>>().into(),
    }
}

/// Gibbs measures of the two hidden layers, built from `f1` and `f2`.
pub fn hidden_gibbs(trace: &ForwardTrace) -> (GibbsMeasure, GibbsMeasure) {
    (measure_of(trace.f1.as_slice()), measure_of(trace.f2.as_slice()))
}

/// Class distribution as a Gibbs measure over energies `-gy`.
pub fn output_marginal(trace: &ForwardTrace) -> GibbsMeasure {
    measure_of(trace.gy.as_slice())
}

/// Marginal over classes by explicit summation over both hidden layers'
/// outcomes, `Σ_k Σ_t Q(l|k) Q(k|t) Q(t|x)`.
///
/// Each conditional is the Gibbs measure of the realized activations, so
/// the inner sums collapse and the result equals `softmax(gy)`.
pub fn marginal_by_enumeration(trace: &ForwardTrace) -> Vector {
    let (q1, q2) = hidden_gibbs(trace);
    let qy = output_marginal(trace);
    let mut out = vec![0.0; qy.len()];
    for (l, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for k in 0..q2.len() {
            for t in 0..q1.len() {
                acc += qy.probs[l] * q2.probs[k] * q1.probs[t];
            }
        }
        *o = acc;
    }
    out.into()
}

/// Energy of `label`: the negative logit `-gy[label]`.
pub fn energy(trace: &ForwardTrace, label: usize) -> Result<f64> {
    let classes = trace.gy.len();
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(-trace.gy[label])
}

/// `log Z = logsumexp(gy)`.
pub fn log_partition(trace: &ForwardTrace) -> f64 {
    logsumexp_slice(trace.gy.as_slice())
}

/// Compares the output measure with its product-of-experts factorization
/// over the layer-2 Gibbs measure, both sides in log space.
///
/// ```text
/// left_l    = gy_l - logsumexp(gy)
/// log Z''_l = logsumexp(gy) - by_l - Σ_k W3[k][l] · logsumexp(f2)
/// right_l   = -log Z''_l + Σ_k W3[k][l] · (f2_k - logsumexp(f2))
/// ```
pub fn poe_check(params: &MlpParams, f2: &Vector) -> Result<PoeResidual> {
    let c = params.config;
    if f2.len() != c.k {
        return Err(Error::shape(
            format!("layer 2 of {}", c.k),
            format!("f2 of {}", f2.len()),
        ));
    }
    if f2.is_empty() || !f2.is_finite() {
        return Err(Error::NonFinite("f2"));
    }
    let gy: Vec<f64> = (0..c.l)
        .map(|l| {
            let mut acc = 0.0;
            for k in 0..c.k {
                acc += f2[k] * params.w3.get(k, l);
            }
            acc + params.by[l]
        })
        .collect();
    let lse_y = logsumexp_slice(&gy);
    let lse_2 = logsumexp_slice(f2.as_slice());

    let per_class: Vec<f64> = (0..c.l)
        .map(|l| {
            let left = gy[l] - lse_y;
            let col_sum: f64 = (0..c.k).map(|k| params.w3.get(k, l)).sum();
            let log_z2 = lse_y - params.by[l] - col_sum * lse_2;
            let experts: f64 = (0..c.k)
                .map(|k| params.w3.get(k, l) * (f2[k] - lse_2))
                .sum();
            let right = -log_z2 + experts;
            (left - right).abs()
        })
        .collect();
    let max_abs_log_residual = per_class.iter().fold(0.0f64, |m, &v| m.max(v));
    Ok(PoeResidual {
        max_abs_log_residual,
        per_class: per_class.into(),
    })
}

/// First-order remainder of the layer-2 activations under a parameter move.
///
/// Returns `‖f2(after) - f2(before) - J·Δθ‖ / max(‖Δθ‖, 1e-300)` where `J`
/// is the Jacobian of `f2` at `before` with respect to the parameters it
/// depends on, `W1, b1, W2, b2`, and `Δθ` is restricted to those blocks.
pub fn linearization_residual(
    before: &MlpParams,
    after: &MlpParams,
    x: &Vector,
) -> Result<f64> {
    before.same_shape(after.block_lens())?;
    if before.config.activation != after.config.activation {
        return Err(Error::InvalidParameter(
            "activation differs between parameter sets".into(),
        ));
    }
    let act = before.config.activation;
    let tb = forward(before, x)?;
    let ta = forward(after, x)?;
    let c = before.config;

    let dw1: Vec<f64> = diff(after.w1.as_slice(), before.w1.as_slice());
    let db1: Vec<f64> = diff(after.b1.as_slice(), before.b1.as_slice());
    let dw2: Vec<f64> = diff(after.w2.as_slice(), before.w2.as_slice());
    let db2: Vec<f64> = diff(after.b2.as_slice(), before.b2.as_slice());

    let gate = |g: f64| match act {
        Activation::Relu => {
            if g > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Identity => 1.0,
    };

    // Directional derivative of f1 then f2 along Δθ.
    let mut df1 = vec![0.0; c.t];
    for (t, d) in df1.iter_mut().enumerate() {
        let mut acc = db1[t];
        for m in 0..c.m {
            acc += x[m] * dw1[m * c.t + t];
        }
        *d = gate(tb.g1[t]) * acc;
    }
    let mut residual_sq = 0.0;
    for k in 0..c.k {
        let mut acc = db2[k];
        for t in 0..c.t {
            acc += tb.f1[t] * dw2[t * c.k + k] + df1[t] * before.w2.get(t, k);
        }
        let jvp = gate(tb.g2[k]) * acc;
        let r = ta.f2[k] - tb.f2[k] - jvp;
        residual_sq += r * r;
    }

    let step_sq: f64 = [&dw1, &db1, &dw2, &db2]
        .iter()
        .flat_map(|b| b.iter())
        .map(|v| v * v)
        .sum();
    Ok(residual_sq.sqrt() / step_sq.sqrt().max(1e-300))
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{init_params, MlpConfig};
    use crate::numerics::Matrix;

    const TABLE1_IMG0: [f64; 8] = [27.53, 8.98, 0.0, 6.89, 14.07, 0.0, 25.85, 0.0];

    #[test]
    fn table1_row_probabilities() {
        let g = layer_gibbs(&TABLE1_IMG0.to_vec().into()).unwrap();
        assert!((g.probs[0] - 0.843).abs() < 1e-3);
        assert!((g.probs[6] - 0.157).abs() < 1e-3);
        for t in [1, 2, 3, 4, 5, 7] {
            assert!(g.probs[t] < 1e-5);
        }
        assert!(g.probs.iter().all(|&p| p > 0.0 && p < 1.0));
        assert!((g.log_z - 27.700_902_787_440_627).abs() < 1e-12);
        assert_eq!(g.mode(), 0);
    }

    #[test]
    fn exact_ratio_and_constants() {
        let g = layer_gibbs(&vec![0.0, 3f64.ln()].into()).unwrap();
        assert!((g.probs[0] - 0.25).abs() < 1e-15 && (g.probs[1] - 0.75).abs() < 1e-15);
        assert!((g.log_z - 4f64.ln()).abs() < 1e-15);
        let u = layer_gibbs(&vec![2.5; 4].into()).unwrap();
        assert!(u.probs.iter().all(|&p| (p - 0.25).abs() < 1e-15));
        assert!(u.energies.iter().all(|&e| e == -2.5));
        assert!(layer_gibbs(&Vector::zeros(0)).is_err());
    }

    #[test]
    fn energies_reproduce_probs() {
        let g = layer_gibbs(&TABLE1_IMG0.to_vec().into()).unwrap();
        for t in 0..8 {
            let p = (-g.energies[t] - g.log_z).exp();
            assert!((p - g.probs[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn energy_and_partition_examples() {
        let p = MlpParams::zeros(MlpConfig::new(1, 1, 1, 10).unwrap());
        let tr = forward(&p, &vec![0.0].into()).unwrap();
        assert_eq!(energy(&tr, 4).unwrap(), 0.0);
        assert!((log_partition(&tr) - 10f64.ln()).abs() < 1e-15);
        assert!(energy(&tr, 10).is_err());
    }

    #[test]
    fn identity_net_marginal() {
        let cfg = MlpConfig::new(2, 2, 2, 2).unwrap();
        let mut p = MlpParams::zeros(cfg);
        p.w1 = Matrix::identity(2);
        p.w2 = Matrix::identity(2);
        p.w3 = Matrix::identity(2);
        let tr = forward(&p, &vec![1.0, -1.0].into()).unwrap();
        let q = output_marginal(&tr);
        assert!((q.probs[0] - 0.7311).abs() < 1e-4);
        assert_eq!(q.probs, tr.qy);
    }

    #[test]
    fn enumeration_collapses_to_softmax() {
        for seed in 0..10 {
            let p = init_params(MlpConfig::new(3, 4, 3, 5).unwrap(), seed);
            let tr = forward(&p, &vec![0.5, -1.0, 2.0].into()).unwrap();
            let brute = marginal_by_enumeration(&tr);
            for l in 0..5 {
                assert!((brute[l] - tr.qy[l]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn poe_small_head_and_zero_head() {
        let mut p = init_params(MlpConfig::new(1, 1, 2, 3).unwrap(), 11);
        p.by = vec![0.3, -0.7, 1.1].into();
        let r = poe_check(&p, &vec![1.0, 2.0].into()).unwrap();
        assert!(r.max_abs_log_residual < 1e-10);
        let z = MlpParams::zeros(MlpConfig::new(1, 1, 2, 3).unwrap());
        let r = poe_check(&z, &vec![1.0, 2.0].into()).unwrap();
        assert_eq!(r.max_abs_log_residual, 0.0);
        assert!(poe_check(&z, &vec![1.0].into()).is_err());
    }

    #[test]
    fn zero_move_has_zero_residual() {
        let p = init_params(MlpConfig::new(3, 4, 3, 2).unwrap(), 1);
        let r = linearization_residual(&p, &p, &vec![0.2, 0.4, -0.1].into()).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn affine_layer_two_is_exactly_linear() {
        let cfg = MlpConfig::new(3, 4, 3, 2)
            .unwrap()
            .with_activation(Activation::Identity);
        let before = init_params(cfg, 2);
        let mut after = before.clone();
        let mut rng = crate::rng::SplitMix64::new(8);
        for v in after.w2.as_mut_slice().iter_mut().chain(after.b2.as_mut_slice()) {
            *v += rng.uniform(-0.5, 0.5);
        }
        let r = linearization_residual(&before, &after, &vec![0.2, 0.4, -0.1].into()).unwrap();
        assert!(r < 1e-12, "{r}");
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let a = init_params(MlpConfig::new(3, 4, 3, 2).unwrap(), 1);
        let b = init_params(MlpConfig::new(3, 5, 3, 2).unwrap(), 1);
        assert!(linearization_residual(&a, &b, &vec![0.0; 3].into()).is_err());
    }
}
