//! Generalization-bound arithmetic and dataset-level energy statistics.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::mlp::{forward_batch, MlpParams};
use crate::numerics::{argmax, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub delta: f64,
    pub a: f64,
    pub b: f64,
    /// Per-sample `log P(Y|X)`.
    pub log_pyx: f64,
}

impl BoundParams {
    pub fn new(delta: f64, a: f64, b: f64, log_pyx: f64) -> Result<Self> {
        let p = Self {
            delta,
            a,
            b,
            log_pyx,
        };
        p.validate()?;
        Ok(p)
    }

    /// `δ = 0.05`, `a = 0`, `b = 10`, `log P(Y|X) = ln(1/L)`.
    pub fn for_classes(classes: usize) -> Self {
        Self {
            delta: 0.05,
            a: 0.0,
            b: 10.0,
            log_pyx: -(classes.max(1) as f64).ln(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "delta must lie in (0, 1], got {}",
                self.delta
            )));
        }
        if !(self.b > self.a) || !self.a.is_finite() || !self.b.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "loss range needs b > a, got a={} b={}",
                self.a, self.b
            )));
        }
        if !(self.log_pyx <= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "log_pyx must be <= 0, got {}",
                self.log_pyx
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DGapParams {
    pub epsilon: f64,
}

impl Default for DGapParams {
    fn default() -> Self {
        Self { epsilon: 1e-3 }
    }
}

impl DGapParams {
    pub fn new(epsilon: f64) -> Self {
        Self { epsilon }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        let off = (classes.saturating_sub(1)) as f64 * self.epsilon;
        if !(self.epsilon > 0.0) || !(1.0 - off > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "epsilon {} invalid for {classes} classes",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// `(ln P̂*(label), ln P̂*(other))`.
    fn log_target(&self, classes: usize) -> (f64, f64) {
        (
            (1.0 - (classes - 1) as f64 * self.epsilon).ln(),
            self.epsilon.ln(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub n: usize,
    pub empirical_risk: f64,
    pub mean_energy: f64,
    pub mean_log_z: f64,
    pub bound_general: f64,
    pub bound_corollary2: f64,
    pub bound_proxy: f64,
    pub mean_d_gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    pub neg_n_risk: f64,
    pub kl_q_relaxed_posterior: f64,
    pub mean_d_gap: f64,
}

/// Sums of per-sample quantities over a dataset, accumulated in sample
/// order.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n: usize,
    pub classes: usize,
    pub errors: usize,
    /// `Σ logsumexp(gy) - gy[y]`
    pub sum_loss: f64,
    /// `Σ -gy[y]`
    pub sum_energy: f64,
    /// `logsumexp(gy)` of the first sample.
    pub log_z_ref: f64,
    /// `Σ logsumexp(gy) - log_z_ref`, so that equal values average exactly.
    pub sum_log_z_dev: f64,
    /// `Σ H(q)`
    pub sum_entropy: f64,
    /// `Σ q[y]`
    pub sum_true_prob: f64,
    /// `Σ (1 - q[y])`, summed over the other classes directly
    pub sum_other_prob: f64,
}

const EVAL_CHUNK: usize = 256;

/// One forward pass over `data` collecting every statistic the reports use.
pub fn evaluate(params: &MlpParams, data: &LabeledDataset) -> Result<DatasetStats> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if data.dim() != params.config.m {
        return Err(Error::shape(
            format!("network input {}", params.config.m),
            format!("dataset dim {}", data.dim()),
        ));
    }
    if data.num_classes() > params.config.l {
        return Err(Error::shape(
            format!("network output {}", params.config.l),
            format!("dataset classes {}", data.num_classes()),
        ));
    }
    let mut s = DatasetStats {
        classes: params.config.l,
        ..Default::default()
    };
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, labels) = data.batch(chunk);
        let tr = forward_batch(params, &x)?;
        for (r, &y) in labels.iter().enumerate() {
            let gy = tr.gy.row(r);
            let q = tr.qy.row(r);
            let log_z = tr.log_z[r];
            if s.n == 0 {
                s.log_z_ref = log_z;
            }
            s.n += 1;
            if argmax(q) != y {
                s.errors += 1;
            }
            s.sum_loss += log_z - gy[y];
            s.sum_energy += -gy[y];
            s.sum_log_z_dev += log_z - s.log_z_ref;
            // H(q) = Σ q (log Z - gy), finite even where q underflows.
            s.sum_entropy += q.iter().zip(gy).map(|(&p, &g)| p * (log_z - g)).sum::<f64>();
            s.sum_true_prob += q[y];
            s.sum_other_prob += q
                .iter()
                .enumerate()
                .filter(|&(l, _)| l != y)
                .map(|(_, &p)| p)
                .sum::<f64>();
        }
    }
    Ok(s)
}

impl DatasetStats {
    fn nf(&self) -> f64 {
        self.n as f64
    }

    pub fn empirical_risk(&self) -> f64 {
        self.sum_loss / self.nf()
    }

    pub fn error_rate(&self) -> f64 {
        self.errors as f64 / self.nf()
    }

    pub fn mean_energy(&self) -> f64 {
        self.sum_energy / self.nf()
    }

    pub fn mean_log_z(&self) -> f64 {
        self.log_z_ref + self.sum_log_z_dev / self.nf()
    }

    /// `Σ_i Σ_l q ln q - Σ_i Σ_l q ln P̂*`.
    pub fn kl_to_relaxed_posterior(&self, dp: DGapParams) -> f64 {
        let (ln_hit, ln_miss) = dp.log_target(self.classes);
        -self.sum_entropy - self.sum_true_prob * ln_hit - self.sum_other_prob * ln_miss
    }

    /// Mean of `-ln q[y] + Σ q ln P̂* + H(q)`.
    pub fn mean_d_gap(&self, dp: DGapParams) -> f64 {
        let (ln_hit, ln_miss) = dp.log_target(self.classes);
        (self.sum_loss
            + self.sum_true_prob * ln_hit
            + self.sum_other_prob * ln_miss
            + self.sum_entropy)
            / self.nf()
    }

    pub fn bound_report(&self, p: &BoundParams, dp: DGapParams) -> Result<BoundReport> {
        let risk = self.empirical_risk();
        Ok(BoundReport {
            n: self.n,
            empirical_risk: risk,
            mean_energy: self.mean_energy(),
            mean_log_z: self.mean_log_z(),
            bound_general: pac_bayes_bound_general(risk, -self.nf() * p.log_pyx, self.n, p)?,
            bound_corollary2: corollary2_value(risk, self.n, p)?,
            bound_proxy: self.mean_energy(),
            mean_d_gap: self.mean_d_gap(dp),
        })
    }
}

/// Mean cross-entropy loss over `data`.
pub fn empirical_risk(params: &MlpParams, data: &LabeledDataset) -> Result<f64> {
    Ok(evaluate(params, data)?.empirical_risk())
}

/// Mean true-label energy `(1/n) Σ -gy[y]`.
pub fn bound_proxy(params: &MlpParams, data: &LabeledDataset) -> Result<f64> {
    Ok(evaluate(params, data)?.mean_energy())
}

/// `(b-a)/(1-e^{a-b}) · (1 - exp(-risk - (kl + ln(1/δ))/n + a))`.
pub fn pac_bayes_bound_general(
    expected_risk: f64,
    kl: f64,
    n: usize,
    p: &BoundParams,
) -> Result<f64> {
    p.validate()?;
    if n == 0 {
        return Err(Error::InvalidParameter("n must be >= 1".into()));
    }
    if !(kl >= 0.0) {
        return Err(Error::InvalidParameter(format!("kl must be >= 0, got {kl}")));
    }
    let scale = (p.b - p.a) / -(p.a - p.b).exp_m1();
    let exponent = -expected_risk - (kl + (1.0 / p.delta).ln()) / n as f64 + p.a;
    Ok(scale * -exponent.exp_m1())
}

/// Bound for a loss in `[0, 1]` with inverse temperature `beta`:
/// `1/(1-e^{-β}) · (1 - exp(-β·risk - (kl + ln(1/δ))/n))`.
pub fn pac_bayes_bound_unit(
    risk: f64,
    kl: f64,
    n: usize,
    delta: f64,
    beta: f64,
) -> Result<f64> {
    if !(beta > 0.0) || !(delta > 0.0 && delta <= 1.0) || n == 0 {
        return Err(Error::InvalidParameter(format!(
            "need beta > 0, delta in (0, 1], n >= 1; got beta={beta} delta={delta} n={n}"
        )));
    }
    let tail = (kl + (1.0 / delta).ln()) / n as f64;
    Ok((-beta * risk - tail).exp_m1() / (-beta).exp_m1())
}

/// `b/(1-e^{-b}) · (1 - exp(ln δ / n + log_pyx - mean_loss))` where
/// `mean_loss` is the sample mean of `E + log Z`.
pub fn corollary2_value(mean_loss: f64, n: usize, p: &BoundParams) -> Result<f64> {
    p.validate()?;
    if p.a != 0.0 {
        return Err(Error::InvalidParameter(format!(
            "cross entropy is nonnegative, so the lower loss limit a must be 0, got {}",
            p.a
        )));
    }
    if n == 0 {
        return Err(Error::InvalidParameter("n must be >= 1".into()));
    }
    let scale = p.b / -(-p.b).exp_m1();
    Ok(scale * -(p.delta.ln() / n as f64 + p.log_pyx - mean_loss).exp_m1())
}

/// Full bound report with the default `ε` for the d-gap.
pub fn corollary2_bound(
    params: &MlpParams,
    data: &LabeledDataset,
    p: &BoundParams,
) -> Result<BoundReport> {
    corollary2_bound_with(params, data, p, DGapParams::default())
}

pub fn corollary2_bound_with(
    params: &MlpParams,
    data: &LabeledDataset,
    p: &BoundParams,
    dp: DGapParams,
) -> Result<BoundReport> {
    dp.validate(params.config.l)?;
    evaluate(params, data)?.bound_report(p, dp)
}

/// `-log q[y] + Σ_l q[l] log P̂*(l) + H(q)` for the ε-relaxed one-hot target.
pub fn d_gap(q: &Vector, label: usize, dp: DGapParams) -> Result<f64> {
    let classes = q.len();
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    if q.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (q.sum() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(
            "q is not a probability vector".into(),
        ));
    }
    dp.validate(classes)?;
    let (ln_hit, ln_miss) = dp.log_target(classes);
    let mut cross = 0.0;
    let mut entropy = 0.0;
    for (l, &p) in q.iter().enumerate() {
        cross += p * if l == label { ln_hit } else { ln_miss };
        if p > 0.0 {
            entropy -= p * p.ln();
        }
    }
    Ok(-q[label].ln() + cross + entropy)
}

pub fn elbo_report(params: &MlpParams, data: &LabeledDataset, dp: DGapParams) -> Result<ElboReport> {
    dp.validate(params.config.l)?;
    let s = evaluate(params, data)?;
    Ok(ElboReport {
        neg_n_risk: -s.sum_loss,
        kl_q_relaxed_posterior: s.kl_to_relaxed_posterior(dp),
        mean_d_gap: s.mean_d_gap(dp),
    })
}
