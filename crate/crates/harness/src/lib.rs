//! Experiment harness: configuration, seeded training runs, evaluation,
//! noise sweeps and CSV run records.

pub mod config;
pub mod evaluate;
pub mod overhead;
pub mod records;
pub mod runner;

use startsel::envs::EnvError;
use startsel::metric::MetricError;
use startsel::nn::NnError;
use startsel::sac::SacError;
use startsel::selector::SelectorError;
use thiserror::Error;

pub use config::{ExperimentConfig, Precision, Strategy};
pub use runner::{run_seeds, run_training, run_training_with, RunOutcome, StartChooser};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("records: {0}")]
    Records(String),
    #[error("coverage: {0}")]
    Coverage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("env: {0}")]
    Env(#[from] EnvError),
    #[error("sac: {0}")]
    Sac(#[from] SacError),
    #[error("metric: {0}")]
    Metric(#[from] MetricError),
    #[error("selector: {0}")]
    Selector(#[from] SelectorError),
    #[error("aborted: {0}")]
    Aborted(String),
}

impl HarnessError {
    /// Non-finite training signals stop one seed but not the experiment.
    pub fn is_training_fault(&self) -> bool {
        fn metric(e: &MetricError) -> bool {
            match e {
                MetricError::NonFinite { .. } | MetricError::WeightUnderflow => true,
                MetricError::Nn(NnError::NonFinite { .. }) => true,
                MetricError::AtIndex { source, .. } => metric(source),
                _ => false,
            }
        }
        match self {
            HarnessError::Sac(SacError::NonFiniteLoss { .. } | SacError::NonFinitePolicy { .. }) => true,
            HarnessError::Sac(SacError::Nn(NnError::NonFinite { .. })) => true,
            HarnessError::Metric(e) => metric(e),
            HarnessError::Selector(SelectorError::NotPositiveDefinite) => true,
            HarnessError::Env(EnvError::NonFinite { .. }) => true,
            _ => false,
        }
    }

    /// Process exit code: 2 for configuration problems, 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            _ => 3,
        }
    }
}
