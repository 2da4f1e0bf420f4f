//! Multilayer perceptrons trained from scratch, instrumented with the
//! probabilistic quantities of an energy-based reading of the network:
//! per-layer Gibbs measures, the energy/partition split of cross entropy,
//! ELBO terms, a KL-asymmetry diagnostic and a PAC-Bayes bound.

pub mod bound;
pub mod data;
pub mod error;
pub mod experiments;
pub mod gibbs;
pub mod mlp;
pub mod numerics;
pub mod optim;
pub mod rng;

pub use error::{Error, Result};
pub use numerics::{Matrix, Vector};
