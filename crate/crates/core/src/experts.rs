//! Forecast producers and the panel that collects their output.
//!
//! An expert is anything that emits one return forecast per (asset, month):
//! a linear model trained on ranked features with a robust loss, a synthetic
//! oracle that observes realized returns through noise, a constant, or an
//! external file of forecasts. Bagged replicas of a trainable expert differ
//! only in the row subsample each one fits on; every random choice is driven
//! by an explicit seed so a rerun reproduces the panel byte for byte.

use crate::data::{DataError, Month, RawPanel};
use crate::loss::{huber_gradient, huber_loss, LossError};
use crate::seed::derive_seed;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io;
use thiserror::Error;

fn fmt_line(line: &Option<u64>) -> String {
    match line {
        Some(n) => format!(" at line {n}"),
        None => String::new(),
    }
}

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error("invalid expert spec: {0}")]
    InvalidSpec(String),
    #[error("expert {name} is not trainable and cannot be bagged")]
    NotTrainable { name: String },
    #[error("duplicate forecast for expert {expert}, asset {asset}, {month}{}", fmt_line(.line))]
    DuplicateForecast { expert: String, asset: String, month: Month, line: Option<u64> },
    #[error("bad forecast row at line {line}: {message}")]
    ParseRow { line: u64, message: String },
    #[error("forecast header mismatch: expected {expected:?}, got {got:?}")]
    HeaderMismatch { expected: Vec<String>, got: Vec<String> },
    #[error("non-finite value: {context}")]
    NonFinite { context: String },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

/// Observation-noise level as a function of the step index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSchedule {
    /// The same sigma at every step.
    Constant(f64),
    /// `(start_step, sigma)` segments; each sigma applies from its start
    /// step until the next segment begins.
    Piecewise(Vec<(usize, f64)>),
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<(), ExpertError> {
        let check = |sigma: f64| -> Result<(), ExpertError> {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(ExpertError::InvalidSpec(format!(
                    "noise sigma must be finite and non-negative, got {sigma}"
                )));
            }
            Ok(())
        };
        match self {
            NoiseSchedule::Constant(sigma) => check(*sigma),
            NoiseSchedule::Piecewise(segments) => {
                if segments.is_empty() {
                    return Err(ExpertError::InvalidSpec(
                        "piecewise noise schedule needs at least one segment".to_string(),
                    ));
                }
                if segments[0].0 != 0 {
                    return Err(ExpertError::InvalidSpec(format!(
                        "piecewise noise schedule must start at step 0, got {}",
                        segments[0].0
                    )));
                }
                for pair in segments.windows(2) {
                    if pair[1].0 <= pair[0].0 {
                        return Err(ExpertError::InvalidSpec(format!(
                            "piecewise segments must have strictly increasing starts: {} then {}",
                            pair[0].0, pair[1].0
                        )));
                    }
                }
                segments.iter().try_for_each(|&(_, sigma)| check(sigma))
            }
        }
    }

    /// Sigma in force at step `t`.
    pub fn sigma_at(&self, t: usize) -> f64 {
        match self {
            NoiseSchedule::Constant(sigma) => *sigma,
            NoiseSchedule::Piecewise(segments) => segments
                .iter()
                .rev()
                .find(|(start, _)| *start <= t)
                .map(|(_, sigma)| *sigma)
                .unwrap_or(0.0),
        }
    }
}

/// Row subsampling for a trainable expert.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Subsample {
    /// Fraction of rows to keep, in (0, 1].
    pub fraction: f64,
    pub seed: u64,
}

/// Hyperparameters for the robust linear expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHuberSpec {
    /// Huber threshold.
    pub xi: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// L1 penalty on coefficients (the intercept is never penalized).
    pub l1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample: Option<Subsample>,
}

impl LinearHuberSpec {
    pub fn validate(&self) -> Result<(), ExpertError> {
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(ExpertError::InvalidSpec(format!("xi must be positive, got {}", self.xi)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ExpertError::InvalidSpec(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(ExpertError::InvalidSpec("epochs must be at least 1".to_string()));
        }
        if !(self.l1 >= 0.0 && self.l1.is_finite()) {
            return Err(ExpertError::InvalidSpec(format!(
                "l1 penalty must be non-negative, got {}",
                self.l1
            )));
        }
        if let Some(sub) = &self.subsample {
            validate_fraction(sub.fraction)?;
        }
        Ok(())
    }
}

fn validate_fraction(fraction: f64) -> Result<(), ExpertError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(ExpertError::InvalidSpec(format!(
            "subsample fraction must lie in (0, 1], got {fraction}"
        )));
    }
    Ok(())
}

/// What kind of forecasts an expert produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    /// Forecasts read from a CSV file.
    External { path: String },
    /// Linear model trained per refit window with a Huber + L1 objective.
    LinearHuber(LinearHuberSpec),
    /// Realized return plus scheduled Gaussian observation noise.
    NoisyOracle {
        schedule: NoiseSchedule,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// The same forecast for every asset and month.
    Constant { value: f64 },
}

/// A named forecast producer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertSpec {
    pub name: String,
    pub kind: ExpertKind,
}

impl ExpertSpec {
    pub fn validate(&self) -> Result<(), ExpertError> {
        if self.name.is_empty() {
            return Err(ExpertError::InvalidSpec("expert name must be non-empty".to_string()));
        }
        match &self.kind {
            ExpertKind::LinearHuber(spec) => spec.validate(),
            ExpertKind::NoisyOracle { schedule, .. } => schedule.validate(),
            ExpertKind::Constant { value } => {
                if !value.is_finite() {
                    return Err(ExpertError::InvalidSpec(format!(
                        "constant forecast must be finite, got {value}"
                    )));
                }
                Ok(())
            }
            ExpertKind::External { path } => {
                if path.is_empty() {
                    return Err(ExpertError::InvalidSpec(
                        "external forecast path must be non-empty".to_string(),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// Fitted linear forecaster.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
}

impl LinearModel {
    pub fn zeros(n_features: usize) -> Self {
        Self { intercept: 0.0, coefficients: vec![0.0; n_features] }
    }

    pub fn predict(&self, features: &[f64]) -> Result<f64, ExpertError> {
        if features.len() != self.coefficients.len() {
            return Err(ExpertError::ShapeMismatch(format!(
                "{} features vs {} coefficients",
                features.len(),
                self.coefficients.len()
            )));
        }
        Ok(self.intercept + self.coefficients.iter().zip(features).map(|(c, x)| c * x).sum::<f64>())
    }
}

fn check_design(xs: &[Vec<f64>], ys: &[f64]) -> Result<usize, ExpertError> {
    if xs.is_empty() {
        return Err(ExpertError::Empty("training rows".to_string()));
    }
    if xs.len() != ys.len() {
        return Err(ExpertError::ShapeMismatch(format!(
            "{} feature rows vs {} targets",
            xs.len(),
            ys.len()
        )));
    }
    let width = xs[0].len();
    for (i, row) in xs.iter().enumerate() {
        if row.len() != width {
            return Err(ExpertError::ShapeMismatch(format!(
                "row {i} has {} features, expected {width}",
                row.len()
            )));
        }
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(ExpertError::NonFinite { context: format!("feature {j} in row {i}") });
        }
        if !ys[i].is_finite() {
            return Err(ExpertError::NonFinite { context: format!("target in row {i}") });
        }
    }
    Ok(width)
}

/// Mean Huber loss of the model's predictions plus an L1 penalty on the
/// coefficients (the intercept is excluded).
pub fn huber_l1_objective(
    xs: &[Vec<f64>],
    ys: &[f64],
    model: &LinearModel,
    xi: f64,
    l1: f64,
) -> Result<f64, ExpertError> {
    check_design(xs, ys)?;
    let mut total = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        total += huber_loss(y, model.predict(x)?, xi)?;
    }
    let penalty: f64 = model.coefficients.iter().map(|c| c.abs()).sum();
    Ok(total / xs.len() as f64 + l1 * penalty)
}

/// Subgradient of [`huber_l1_objective`] in the model parameters, using
/// sign(0) = 0 for the penalty term. Returns (intercept, coefficients)
/// components.
pub fn huber_l1_gradient(
    xs: &[Vec<f64>],
    ys: &[f64],
    model: &LinearModel,
    xi: f64,
    l1: f64,
) -> Result<(f64, Vec<f64>), ExpertError> {
    let width = check_design(xs, ys)?;
    if width != model.coefficients.len() {
        return Err(ExpertError::ShapeMismatch(format!(
            "{} coefficients vs {width} feature columns",
            model.coefficients.len()
        )));
    }
    let n = xs.len() as f64;
    let mut g_intercept = 0.0;
    let mut g_coef = vec![0.0; width];
    for (x, &y) in xs.iter().zip(ys) {
        let residual = y - model.predict(x)?;
        // d/d(prediction) of the Huber term; the chain rule flips the sign
        // of the residual derivative.
        let g_pred = -huber_gradient(residual, xi)?;
        g_intercept += g_pred / n;
        for (g, &xj) in g_coef.iter_mut().zip(x) {
            *g += g_pred * xj / n;
        }
    }
    for (g, &c) in g_coef.iter_mut().zip(&model.coefficients) {
        *g += l1 * c.signum() * f64::from(c != 0.0);
    }
    Ok((g_intercept, g_coef))
}

/// Deterministic sorted row subsample: keep `max(1, round(fraction * n))`
/// of `n` indices, drawn without replacement from a seeded generator.
pub fn subsample_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>, ExpertError> {
    validate_fraction(fraction)?;
    if n == 0 {
        return Err(ExpertError::Empty("rows to subsample".to_string()));
    }
    let k = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = rand::seq::index::sample(&mut rng, n, k).into_vec();
    indices.sort_unstable();
    Ok(indices)
}

/// Fit the linear expert by full-batch subgradient descent from a zero
/// start, over the spec's subsample of rows when one is set. The row order
/// is fixed, so identical inputs give an identical model.
pub fn train_linear_huber(
    xs: &[Vec<f64>],
    ys: &[f64],
    spec: &LinearHuberSpec,
) -> Result<LinearModel, ExpertError> {
    spec.validate()?;
    let width = check_design(xs, ys)?;
    let (rows, targets): (Vec<Vec<f64>>, Vec<f64>) = match &spec.subsample {
        None => (xs.to_vec(), ys.to_vec()),
        Some(sub) => {
            let idx = subsample_indices(xs.len(), sub.fraction, sub.seed)?;
            (idx.iter().map(|&i| xs[i].clone()).collect(), idx.iter().map(|&i| ys[i]).collect())
        }
    };
    let mut model = LinearModel::zeros(width);
    for _ in 0..spec.epochs {
        let (g0, g) = huber_l1_gradient(&rows, &targets, &model, spec.xi, spec.l1)?;
        model.intercept -= spec.learning_rate * g0;
        for (c, gj) in model.coefficients.iter_mut().zip(&g) {
            *c -= spec.learning_rate * gj;
        }
    }
    Ok(model)
}

/// Expand a trainable expert into `replicas` bagged copies named
/// `{base}_1 .. {base}_n`, each with its own derived subsample seed.
pub fn bag_experts(
    base: &ExpertSpec,
    replicas: usize,
    fraction: f64,
    master_seed: u64,
) -> Result<Vec<ExpertSpec>, ExpertError> {
    base.validate()?;
    validate_fraction(fraction)?;
    if replicas == 0 {
        return Err(ExpertError::InvalidSpec("bagging needs at least one replica".to_string()));
    }
    let spec = match &base.kind {
        ExpertKind::LinearHuber(spec) => spec,
        _ => return Err(ExpertError::NotTrainable { name: base.name.clone() }),
    };
    Ok((1..=replicas)
        .map(|i| {
            let name = format!("{}_{i}", base.name);
            let seed = derive_seed(master_seed, &format!("bag:{}:{i}", base.name));
            ExpertSpec {
                name,
                kind: ExpertKind::LinearHuber(LinearHuberSpec {
                    subsample: Some(Subsample { fraction, seed }),
                    ..spec.clone()
                }),
            }
        })
        .collect())
}

/// Forecasts per (month, asset), one slot per expert in first-appearance
/// order. Slots are None until an expert fills them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForecastPanel {
    experts: Vec<String>,
    cells: BTreeMap<(Month, String), Vec<Option<f64>>>,
    filled: usize,
}

impl ForecastPanel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn experts(&self) -> &[String] {
        &self.experts
    }

    pub fn expert_index(&self, name: &str) -> Option<usize> {
        self.experts.iter().position(|e| e == name)
    }

    /// Number of filled forecast slots.
    pub fn len(&self) -> usize {
        self.filled
    }

    pub fn is_empty(&self) -> bool {
        self.filled == 0
    }

    pub fn months(&self) -> Vec<Month> {
        let mut months: Vec<Month> = self.cells.keys().map(|(m, _)| *m).collect();
        months.dedup();
        months
    }

    /// Forecast slots for one (month, asset), padded to the expert count.
    pub fn get(&self, month: Month, asset: &str) -> Option<Vec<Option<f64>>> {
        self.cells.get(&(month, asset.to_string())).map(|cell| {
            let mut padded = cell.clone();
            padded.resize(self.experts.len(), None);
            padded
        })
    }

    pub fn insert(
        &mut self,
        expert: &str,
        month: Month,
        asset: &str,
        value: f64,
    ) -> Result<(), ExpertError> {
        self.insert_at_line(expert, month, asset, value, None)
    }

    fn insert_at_line(
        &mut self,
        expert: &str,
        month: Month,
        asset: &str,
        value: f64,
        line: Option<u64>,
    ) -> Result<(), ExpertError> {
        if !value.is_finite() {
            return Err(ExpertError::NonFinite {
                context: format!("forecast for expert {expert}, asset {asset}, {month}"),
            });
        }
        let idx = match self.expert_index(expert) {
            Some(idx) => idx,
            None => {
                self.experts.push(expert.to_string());
                self.experts.len() - 1
            }
        };
        let cell = self.cells.entry((month, asset.to_string())).or_default();
        if cell.len() <= idx {
            cell.resize(idx + 1, None);
        }
        if cell[idx].is_some() {
            return Err(ExpertError::DuplicateForecast {
                expert: expert.to_string(),
                asset: asset.to_string(),
                month,
                line,
            });
        }
        cell[idx] = Some(value);
        self.filled += 1;
        Ok(())
    }
}

/// Fill a constant expert's forecasts for every asset present in the panel
/// over the given months.
pub fn fill_constant(
    forecasts: &mut ForecastPanel,
    panel: &RawPanel,
    months: &[Month],
    name: &str,
    value: f64,
) -> Result<(), ExpertError> {
    if !value.is_finite() {
        return Err(ExpertError::InvalidSpec(format!(
            "constant forecast must be finite, got {value}"
        )));
    }
    for &month in months {
        for (asset, _) in panel.rows_at(month) {
            forecasts.insert(name, month, asset, value)?;
        }
    }
    Ok(())
}

/// Fill a noisy-oracle expert: realized return plus `sigma_at(t)` times a
/// standard normal draw, where `t` indexes the given months. The draw is
/// taken even when sigma is zero, so schedules that differ only in sigma
/// consume the generator identically and a zero-noise oracle reproduces the
/// realized returns bit for bit.
pub fn fill_noisy_oracle(
    forecasts: &mut ForecastPanel,
    panel: &RawPanel,
    months: &[Month],
    name: &str,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<(), ExpertError> {
    schedule.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (t, &month) in months.iter().enumerate() {
        let sigma = schedule.sigma_at(t);
        for (asset, row) in panel.rows_at(month) {
            let eps: f64 = StandardNormal.sample(&mut rng);
            forecasts.insert(name, month, asset, row.ret + sigma * eps)?;
        }
    }
    Ok(())
}

const FORECAST_HEADER: [&str; 4] = ["expert", "asset_id", "date", "forecast"];

/// Read an external forecast file (`expert,asset_id,date,forecast`).
pub fn ingest_forecasts<R: io::Read>(reader: R) -> Result<ForecastPanel, ExpertError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != FORECAST_HEADER {
        return Err(ExpertError::HeaderMismatch {
            expected: FORECAST_HEADER.iter().map(|s| s.to_string()).collect(),
            got: header,
        });
    }
    let mut panel = ForecastPanel::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line());
        let parse_err = |message: String| ExpertError::ParseRow {
            line: line.unwrap_or_default(),
            message,
        };
        if record.len() != 4 {
            return Err(parse_err(format!("expected 4 fields, got {}", record.len())));
        }
        let expert = &record[0];
        let asset = &record[1];
        if expert.is_empty() || asset.is_empty() {
            return Err(parse_err("empty expert or asset id".to_string()));
        }
        let month: Month =
            record[2].parse().map_err(|e| parse_err(format!("bad date {:?}: {e}", &record[2])))?;
        let value: f64 = record[3]
            .parse()
            .map_err(|_| parse_err(format!("bad forecast {:?}", &record[3])))?;
        if !value.is_finite() {
            return Err(parse_err(format!("non-finite forecast {value}")));
        }
        panel.insert_at_line(expert, month, asset, value, line)?;
    }
    if panel.is_empty() {
        return Err(ExpertError::Empty("forecast file".to_string()));
    }
    Ok(panel)
}

/// Write a forecast panel in the external file layout, expert-major with
/// months and assets ascending, so ingesting the output reproduces the
/// panel exactly.
pub fn export_forecasts<W: io::Write>(
    out: W,
    forecasts: &ForecastPanel,
) -> Result<(), ExpertError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(FORECAST_HEADER)?;
    for (idx, expert) in forecasts.experts.iter().enumerate() {
        for ((month, asset), cell) in &forecasts.cells {
            if let Some(value) = cell.get(idx).copied().flatten() {
                w.write_record([
                    expert.clone(),
                    asset.clone(),
                    month.to_string(),
                    value.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Write fitted models as `expert,feature,coefficient` rows, one intercept
/// row (feature name `intercept`) followed by the named coefficients.
pub fn export_coefficients<W: io::Write>(
    out: W,
    fits: &[(String, Vec<String>, LinearModel)],
) -> Result<(), ExpertError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["expert", "feature", "coefficient"])?;
    for (expert, features, model) in fits {
        if features.len() != model.coefficients.len() {
            return Err(ExpertError::ShapeMismatch(format!(
                "expert {expert} has {} feature names for {} coefficients",
                features.len(),
                model.coefficients.len()
            )));
        }
        w.write_record([expert.clone(), "intercept".to_string(), model.intercept.to_string()])?;
        for (feature, coeff) in features.iter().zip(&model.coefficients) {
            w.write_record([expert.clone(), feature.clone(), coeff.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
