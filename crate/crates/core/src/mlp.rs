//! The three-layer perceptron `x → f1 → f2 → softmax(gy)`.
//!
//! ```text
//! g1 = x·W1 + b1      f1 = σ(g1)      (T hidden units)
//! g2 = f1·W2 + b2     f2 = σ(g2)      (K hidden units)
//! gy = f2·W3 + by     qy = softmax(gy) (L classes)
//! ```
//!
//! `W1[m][t]` is the weight of the edge from input `m` to unit `t`, so column
//! `t` of `W1` is the filter of unit `t`. The energy of class `l` is the
//! negative logit `-gy[l]`; cross entropy is `logsumexp(gy) - gy[label]`.
//!
//! Single-sample `forward`/`backward` are the batched kernels run on a
//! batch of one, so per-sample and minibatch results agree bit-for-bit.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    argmax, column_sums_acc, gemm_nn_acc, gemm_tn_acc, logsumexp_slice, softmax_into, Matrix,
    Vector,
};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    Relu,
    /// Affine hidden layers; used to check linearization exactness.
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, g: f64) -> f64 {
        match self {
            Activation::Relu => g.max(0.0),
            Activation::Identity => g,
        }
    }

    /// Subgradient; ReLU uses 0 at the kink.
    #[inline]
    fn derivative(self, g: f64) -> f64 {
        match self {
            Activation::Relu => {
                if g > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub m: usize,
    pub t: usize,
    pub k: usize,
    pub l: usize,
    pub activation: Activation,
}

impl MlpConfig {
    pub fn new(m: usize, t: usize, k: usize, l: usize) -> Result<Self> {
        let cfg = Self {
            m,
            t,
            k,
            l,
            activation: Activation::Relu,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.t == 0 || self.k == 0 || self.l == 0 {
            return Err(Error::InvalidParameter(format!(
                "all layer sizes must be >= 1, got {self}"
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.m * self.t + self.t + self.t * self.k + self.k + self.k * self.l + self.l
    }
}

impl fmt::Display for MlpConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}-{}-{}", self.m, self.t, self.k, self.l)
    }
}

impl FromStr for MlpConfig {
    type Err = Error;

    /// Parses `M-T-K-L`.
    fn from_str(s: &str) -> Result<Self> {
        let dims: Vec<usize> = s
            .split('-')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidParameter(format!("bad architecture `{s}`")))?;
        match dims.as_slice() {
            &[m, t, k, l] => MlpConfig::new(m, t, k, l),
            _ => Err(Error::InvalidParameter(format!(
                "architecture `{s}` must have four layer sizes"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub config: MlpConfig,
    pub w1: Matrix,
    pub b1: Vector,
    pub w2: Matrix,
    pub b2: Vector,
    pub w3: Matrix,
    pub by: Vector,
}

/// Partial derivatives of the loss, one entry per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Matrix,
    pub b1: Vector,
    pub w2: Matrix,
    pub b2: Vector,
    pub w3: Matrix,
    pub by: Vector,
}

macro_rules! param_blocks {
    ($t:ty) => {
        impl $t {
            /// Parameter blocks in checkpoint order `w1, b1, w2, b2, w3, by`.
            pub fn blocks(&self) -> [&[f64]; 6] {
                [
                    self.w1.as_slice(),
                    self.b1.as_slice(),
                    self.w2.as_slice(),
                    self.b2.as_slice(),
                    self.w3.as_slice(),
                    self.by.as_slice(),
                ]
            }

            pub fn blocks_mut(&mut self) -> [&mut [f64]; 6] {
                [
                    self.w1.as_mut_slice(),
                    self.b1.as_mut_slice(),
                    self.w2.as_mut_slice(),
                    self.b2.as_mut_slice(),
                    self.w3.as_mut_slice(),
                    self.by.as_mut_slice(),
                ]
            }

            pub fn block_lens(&self) -> [usize; 6] {
                self.blocks().map(<[f64]>::len)
            }

            pub fn flatten(&self) -> Vec<f64> {
                self.blocks().concat()
            }

            pub fn is_finite(&self) -> bool {
                self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
            }
        }
    };
}

param_blocks!(MlpParams);
param_blocks!(Gradients);

impl MlpParams {
    pub fn zeros(config: MlpConfig) -> Self {
        let MlpConfig { m, t, k, l, .. } = config;
        Self {
            config,
            w1: Matrix::zeros(m, t),
            b1: Vector::zeros(t),
            w2: Matrix::zeros(t, k),
            b2: Vector::zeros(k),
            w3: Matrix::zeros(k, l),
            by: Vector::zeros(l),
        }
    }

    /// Zeroes the output layer, so the initial prediction is uniform.
    pub fn with_zero_head(mut self) -> Self {
        self.w3.as_mut_slice().fill(0.0);
        self.by.as_mut_slice().fill(0.0);
        self
    }

    /// Rebuilds parameters from a flat vector in block order.
    pub fn from_flat(config: MlpConfig, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(config);
        if flat.len() != config.param_count() {
            return Err(Error::shape(
                format!("{} parameters", config.param_count()),
                format!("{} values", flat.len()),
            ));
        }
        let mut offset = 0;
        for block in p.blocks_mut() {
            let n = block.len();
            block.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(p)
    }

    pub fn same_shape(&self, other_lens: [usize; 6]) -> Result<()> {
        if self.block_lens() != other_lens {
            return Err(Error::shape(
                format!("{:?}", self.block_lens()),
                format!("{other_lens:?}"),
            ));
        }
        Ok(())
    }

    const MAGIC: &'static [u8; 8] = b"PACMLP01";

    /// Checkpoint bytes: magic, four little-endian `u32` dims `M,T,K,L`,
    /// then every block as little-endian `f64` in `w1,b1,w2,b2,w3,by` order.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let c = self.config;
        let mut out = Vec::with_capacity(24 + 8 * c.param_count());
        out.extend_from_slice(Self::MAGIC);
        for d in [c.m, c.t, c.k, c.l] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for block in self.blocks() {
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses checkpoint bytes; the activation is always ReLU.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 24 || &bytes[..8] != Self::MAGIC {
            return Err(Error::BadCheckpoint("missing PACMLP01 magic".into()));
        }
        let dim = |i: usize| {
            let off = 8 + 4 * i;
            u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize
        };
        let config = MlpConfig::new(dim(0), dim(1), dim(2), dim(3))
            .map_err(|e| Error::BadCheckpoint(e.to_string()))?;
        let body = &bytes[24..];
        if body.len() != 8 * config.param_count() {
            return Err(Error::BadCheckpoint(format!(
                "expected {} parameter bytes for {config}, found {}",
                8 * config.param_count(),
                body.len()
            )));
        }
        let flat: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::BadCheckpoint("non-finite parameter".into()));
        }
        Self::from_flat(config, &flat)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::experiments::write_atomic(path, &self.to_checkpoint_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

impl Gradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        let p = MlpParams::zeros(params.config);
        Self {
            w1: p.w1,
            b1: p.b1,
            w2: p.w2,
            b2: p.b2,
            w3: p.w3,
            by: p.by,
        }
    }

    /// Adds `other` entrywise.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn divide(&mut self, n: f64) {
        for block in self.blocks_mut() {
            for v in block {
                *v /= n;
            }
        }
    }

    /// Mean of per-sample gradients, summed in slice order.
    pub fn mean(grads: &[Gradients]) -> Option<Gradients> {
        let (first, rest) = grads.split_first()?;
        let mut acc = Gradients {
            w1: Matrix::zeros(first.w1.rows(), first.w1.cols()),
            b1: Vector::zeros(first.b1.len()),
            w2: Matrix::zeros(first.w2.rows(), first.w2.cols()),
            b2: Vector::zeros(first.b2.len()),
            w3: Matrix::zeros(first.w3.rows(), first.w3.cols()),
            by: Vector::zeros(first.by.len()),
        };
        acc.accumulate(first);
        for g in rest {
            acc.accumulate(g);
        }
        acc.divide(grads.len() as f64);
        Some(acc)
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|b| b.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero. Blocks
/// are drawn in order `w1, w2, w3` from one SplitMix64 stream.
pub fn init_params(config: MlpConfig, seed: u64) -> MlpParams {
    let mut rng = SplitMix64::new(seed);
    let mut p = MlpParams::zeros(config);
    let MlpConfig { m, t, k, l, .. } = config;
    for (w, fan_in, fan_out) in [(&mut p.w1, m, t), (&mut p.w2, t, k), (&mut p.w3, k, l)] {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for v in w.as_mut_slice() {
            *v = rng.uniform(-limit, limit);
        }
    }
    p
}

/// All intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub x: Vector,
    pub g1: Vector,
    pub f1: Vector,
    pub g2: Vector,
    pub f2: Vector,
    pub gy: Vector,
    pub qy: Vector,
}

/// Forward pass of a whole batch; one row per sample.
#[derive(Debug, Clone)]
pub struct BatchTrace {
    pub g1: Matrix,
    pub f1: Matrix,
    pub g2: Matrix,
    pub f2: Matrix,
    pub gy: Matrix,
    pub qy: Matrix,
    /// `logsumexp` of each row of `gy`.
    pub log_z: Vec<f64>,
}

fn affine(input: &Matrix, w: &Matrix, b: &Vector) -> Matrix {
    let mut out = Matrix::zeros(input.rows(), w.cols());
    gemm_nn_acc(input, w, &mut out);
    for r in 0..out.rows() {
        for (o, &bv) in out.row_mut(r).iter_mut().zip(b.as_slice()) {
            *o += bv;
        }
    }
    out
}

fn activate(g: &Matrix, act: Activation) -> Matrix {
    let data = g.as_slice().iter().map(|&v| act.apply(v)).collect();
    Matrix::from_raw(g.rows(), g.cols(), data)
}

/// Hidden-layer-2 activations only; skips the output head.
pub(crate) fn hidden2_batch(params: &MlpParams, x: &Matrix) -> (Matrix, Matrix, Matrix, Matrix) {
    let act = params.config.activation;
    let g1 = affine(x, &params.w1, &params.b1);
    let f1 = activate(&g1, act);
    let g2 = affine(&f1, &params.w2, &params.b2);
    let f2 = activate(&g2, act);
    (g1, f1, g2, f2)
}

pub fn forward_batch(params: &MlpParams, x: &Matrix) -> Result<BatchTrace> {
    if x.cols() != params.config.m {
        return Err(Error::shape(
            format!("input batch {}", x.shape_str()),
            format!("network input {}", params.config.m),
        ));
    }
    let (g1, f1, g2, f2) = hidden2_batch(params, x);
    let gy = affine(&f2, &params.w3, &params.by);
    let mut qy = Matrix::zeros(gy.rows(), gy.cols());
    let mut log_z = Vec::with_capacity(gy.rows());
    for r in 0..gy.rows() {
        log_z.push(softmax_into(gy.row(r), qy.row_mut(r)));
    }
    Ok(BatchTrace {
        g1,
        f1,
        g2,
        f2,
        gy,
        qy,
        log_z,
    })
}

pub fn forward(params: &MlpParams, x: &Vector) -> Result<ForwardTrace> {
    if x.len() != params.config.m {
        return Err(Error::shape(
            format!("input of {}", x.len()),
            format!("network input {}", params.config.m),
        ));
    }
    let xm = Matrix::from_raw(1, x.len(), x.as_slice().to_vec());
    let b = forward_batch(params, &xm)?;
    let v = |m: Matrix| Vector::new(m.into_vec());
    Ok(ForwardTrace {
        x: x.clone(),
        g1: v(b.g1),
        f1: v(b.f1),
        g2: v(b.g2),
        f2: v(b.f2),
        gy: v(b.gy),
        qy: v(b.qy),
    })
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// `-log qy[label]`, evaluated as `logsumexp(gy) - gy[label]`.
pub fn cross_entropy_loss(trace: &ForwardTrace, label: usize) -> Result<f64> {
    check_label(label, trace.gy.len())?;
    Ok(logsumexp_slice(trace.gy.as_slice()) - trace.gy[label])
}

/// Argmax of `qy`, lowest index on ties.
pub fn predict(trace: &ForwardTrace) -> usize {
    argmax(trace.qy.as_slice())
}

/// Mean gradient of the batch loss. Sums over samples in row order, then
/// divides by the batch size.
pub fn backward_batch(
    params: &MlpParams,
    x: &Matrix,
    trace: &BatchTrace,
    labels: &[usize],
) -> Result<Gradients> {
    let rows = x.rows();
    if labels.len() != rows || trace.qy.rows() != rows {
        return Err(Error::shape(
            format!("batch of {rows}"),
            format!("{} labels / {} trace rows", labels.len(), trace.qy.rows()),
        ));
    }
    if rows == 0 {
        return Err(Error::Empty("batch"));
    }
    let MlpConfig {
        t, k, l, activation, ..
    } = params.config;
    for &y in labels {
        check_label(y, l)?;
    }

    // dL/dgy = qy - onehot
    let mut dy = trace.qy.clone();
    for (r, &y) in labels.iter().enumerate() {
        dy.row_mut(r)[y] -= 1.0;
    }

    let mut grads = Gradients::zeros_like(params);
    gemm_tn_acc(&trace.f2, &dy, &mut grads.w3);
    column_sums_acc(&dy, grads.by.as_mut_slice());

    let mut dg2 = Matrix::zeros(rows, k);
    gemm_nn_acc(&dy, &params.w3.transpose(), &mut dg2);
    for (d, &g) in dg2.as_mut_slice().iter_mut().zip(trace.g2.as_slice()) {
        *d *= activation.derivative(g);
    }
    gemm_tn_acc(&trace.f1, &dg2, &mut grads.w2);
    column_sums_acc(&dg2, grads.b2.as_mut_slice());

    let mut dg1 = Matrix::zeros(rows, t);
    gemm_nn_acc(&dg2, &params.w2.transpose(), &mut dg1);
    for (d, &g) in dg1.as_mut_slice().iter_mut().zip(trace.g1.as_slice()) {
        *d *= activation.derivative(g);
    }
    gemm_tn_acc(x, &dg1, &mut grads.w1);
    column_sums_acc(&dg1, grads.b1.as_mut_slice());

    grads.divide(rows as f64);
    Ok(grads)
}

/// Exact gradient of `cross_entropy_loss(trace, label)`.
pub fn backward(params: &MlpParams, trace: &ForwardTrace, label: usize) -> Result<Gradients> {
    let c = params.config;
    let lens = [
        trace.x.len(),
        trace.g1.len(),
        trace.g2.len(),
        trace.gy.len(),
    ];
    if lens != [c.m, c.t, c.k, c.l] {
        return Err(Error::shape(format!("network {c}"), format!("trace {lens:?}")));
    }
    let row = |v: &Vector| Matrix::from_raw(1, v.len(), v.as_slice().to_vec());
    let batch = BatchTrace {
        g1: row(&trace.g1),
        f1: row(&trace.f1),
        g2: row(&trace.g2),
        f2: row(&trace.f2),
        gy: row(&trace.gy),
        qy: row(&trace.qy),
        log_z: vec![logsumexp_slice(trace.gy.as_slice())],
    };
    backward_batch(params, &row(&trace.x), &batch, &[label])
}
