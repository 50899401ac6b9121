//! Orchestration layer for the `aggfolio` binary: configuration loading,
//! synthetic data generation, forecast production, the end-to-end backtest,
//! leave-one-out importance, and regret verification. Everything here is a
//! thin, deterministic composition of the core library; all randomness flows
//! from the config's master seed through named sub-streams.

pub mod backtest;
pub mod config;
pub mod importance;
pub mod pipeline;
pub mod synth;
pub mod verify;

use aggfolio_core::aggregation::AggregationError;
use aggfolio_core::data::DataError;
use aggfolio_core::experts::ExpertError;
use aggfolio_core::loss::LossError;
use aggfolio_core::metrics::MetricsError;
use aggfolio_core::oracle::OracleError;
use aggfolio_core::portfolio::PortfolioError;
use thiserror::Error;

/// Process-level error with a stable exit-code mapping: 1 for configuration
/// problems, 2 for data or computation failures, 3 for violated invariants.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("invariant violation: {0}")]
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Invariant(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(format!("io error: {e}"))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ExpertError> for CliError {
    fn from(e: ExpertError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PortfolioError> for CliError {
    fn from(e: PortfolioError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<AggregationError> for CliError {
    fn from(e: AggregationError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::CapacityExceeded { .. } | OracleError::NoDefaultStep { .. } => {
                CliError::Data(format!("{e}; use fewer experts or a coarser oracle_step"))
            }
            other => CliError::Data(other.to_string()),
        }
    }
}
