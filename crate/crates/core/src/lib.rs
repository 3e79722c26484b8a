//! Initial-state selection for off-policy RL by a condition-number
//! instability score, regressed over state space with a Gaussian process.
//!
//! The numeric core (networks, GP, metric, SAC) is generic over [`Scalar`];
//! the aliases below fix it to `f64`, which is what the harness uses.

pub mod envs;
pub mod metric;
pub mod nn;
pub mod rng;
pub mod sac;
pub mod scalar;
pub mod selector;

pub use scalar::Scalar;

pub type ParameterVector = nn::ParameterVector<f64>;
pub type SacAgent = sac::SacAgent<f64>;
pub type GpModel = selector::GpModel<f64>;
pub type GpHyper = selector::GpHyper<f64>;
pub type MetricSample = metric::MetricSample<f64>;
