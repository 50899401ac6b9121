//! Online aggregation of expert return forecasts and the portfolio layer built on top of it.
//!
//! The crate is organised around a monthly loop: experts forecast cross-sections of asset
//! returns, forecasts are sorted into deciles to form long and short legs, and an online
//! aggregation rule (uniform or Bernstein-style second-order exponential weights) reweights
//! the experts each month from realized leg losses. Supporting modules cover the data
//! pipeline (lagging, cross-sectional ranking, imputation, refit schedules), expert
//! construction (trained linear models under Huber loss, bagged replicas, synthetic
//! oracles), portfolio statistics, and a brute-force simplex-grid oracle used to verify
//! regret empirically.

pub mod aggregation;
pub mod data;
pub mod experts;
pub mod loss;
pub mod metrics;
pub mod oracle;
pub mod portfolio;
pub mod seed;

pub use aggregation::{AggregationState, OnlineRun, Rule, StepOutcome, WeightVector};
pub use data::{Frequency, Month, PanelRow, RawPanel, RefitSchedule, RefitWindow};
pub use experts::{
    ExpertKind, ExpertSpec, ForecastPanel, LinearHuberSpec, LinearModel, NoiseSchedule, Subsample,
};
pub use loss::LossKind;
pub use metrics::{DrawdownMode, PortfolioStats};
pub use oracle::OracleResult;
pub use portfolio::{
    AssetRow, CrossSection, DualAggregation, LegHoldings, Side, StrategySeries, UniverseSelector,
    Weighting,
};
