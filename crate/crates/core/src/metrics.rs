//! Portfolio performance statistics on monthly return series.
//!
//! Annualization uses 12 periods per year unless told otherwise: annualized
//! mean is `12 * mean`, annualized volatility is `sqrt(12) * sample std`
//! (n-1 denominator). Kurtosis is reported raw (a normal series sits near 3),
//! not excess. Drawdowns run on the cumulative-sum path by default, treating
//! monthly returns as additive; a compounded-wealth variant is available
//! behind [`DrawdownMode`].

use serde::{Deserialize, Serialize};
use std::io;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty series")]
    Empty,
    #[error("need at least {needed} observations, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("non-finite value: {context}")]
    NonFinite { context: String },
    #[error("compounded wealth path hits a non-positive value at step {index}")]
    WealthNonPositive { index: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("missing yearly value for strategy {strategy} in year column {year}")]
    MissingYearly { strategy: String, year: usize },
    #[error("all leave-one-out deltas are zero; importance is undefined")]
    DegenerateImportance,
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

/// Path convention for drawdowns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawdownMode {
    /// Peak-to-trough drop of the cumulative sum of returns.
    #[default]
    LogCumulative,
    /// Peak-to-trough relative drop of compounded wealth.
    Compounded,
}

/// Summary block for one strategy's monthly returns.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PortfolioStats {
    pub ann_return: f64,
    pub ann_vol: f64,
    /// Standardized third central moment; None when the series is constant.
    pub skewness: Option<f64>,
    /// Standardized fourth central moment; None when the series is constant.
    pub kurtosis: Option<f64>,
    /// Raw kurtosis convention: the value is not excess-of-3.
    pub kurtosis_is_excess: bool,
    /// Annualized return over annualized volatility; None at zero volatility.
    pub sharpe: Option<f64>,
    pub max_drawdown: f64,
    pub max_one_month_loss: f64,
    /// Periods-per-year times mean one-sided monthly turnover; None when no
    /// holdings were tracked.
    pub avg_annual_turnover: Option<f64>,
}

fn check_finite(returns: &[f64]) -> Result<(), MetricsError> {
    for (i, &r) in returns.iter().enumerate() {
        if !r.is_finite() {
            return Err(MetricsError::NonFinite { context: format!("return at index {i}") });
        }
    }
    Ok(())
}

/// Largest peak-to-trough drop over the configured path. Zero for a series
/// whose path never falls below a previous level.
pub fn max_drawdown(returns: &[f64], mode: DrawdownMode) -> Result<f64, MetricsError> {
    if returns.is_empty() {
        return Err(MetricsError::Empty);
    }
    check_finite(returns)?;
    match mode {
        DrawdownMode::LogCumulative => {
            let mut cum = 0.0;
            let mut peak = f64::NEG_INFINITY;
            let mut worst = 0.0;
            for &r in returns {
                cum += r;
                if cum > peak {
                    peak = cum;
                }
                let dd = peak - cum;
                if dd > worst {
                    worst = dd;
                }
            }
            Ok(worst)
        }
        DrawdownMode::Compounded => {
            let mut wealth = 1.0;
            let mut peak = f64::NEG_INFINITY;
            let mut worst = 0.0;
            for (i, &r) in returns.iter().enumerate() {
                wealth *= 1.0 + r;
                if wealth <= 0.0 {
                    return Err(MetricsError::WealthNonPositive { index: i });
                }
                if wealth > peak {
                    peak = wealth;
                }
                let dd = (peak - wealth) / peak;
                if dd > worst {
                    worst = dd;
                }
            }
            Ok(worst)
        }
    }
}

/// Quadratic-time reference for [`max_drawdown`]: scan every ordered pair of
/// path points. Kept simple on purpose so the fast version can be checked
/// against it.
pub fn max_drawdown_pairwise(returns: &[f64], mode: DrawdownMode) -> Result<f64, MetricsError> {
    if returns.is_empty() {
        return Err(MetricsError::Empty);
    }
    check_finite(returns)?;
    let path: Vec<f64> = match mode {
        DrawdownMode::LogCumulative => returns
            .iter()
            .scan(0.0, |acc, &r| {
                *acc += r;
                Some(*acc)
            })
            .collect(),
        DrawdownMode::Compounded => {
            let mut wealth = 1.0;
            let mut path = Vec::with_capacity(returns.len());
            for (i, &r) in returns.iter().enumerate() {
                wealth *= 1.0 + r;
                if wealth <= 0.0 {
                    return Err(MetricsError::WealthNonPositive { index: i });
                }
                path.push(wealth);
            }
            path
        }
    };
    let mut worst = 0.0;
    for i in 0..path.len() {
        for j in i..path.len() {
            let dd = match mode {
                DrawdownMode::LogCumulative => path[i] - path[j],
                DrawdownMode::Compounded => (path[i] - path[j]) / path[i],
            };
            if dd > worst {
                worst = dd;
            }
        }
    }
    Ok(worst)
}

/// Annualized average one-sided turnover: the monthly two-sided figures are
/// halved, averaged, and scaled by periods per year.
pub fn annualized_turnover(monthly: &[f64], periods_per_year: u32) -> Result<f64, MetricsError> {
    if monthly.is_empty() {
        return Err(MetricsError::Empty);
    }
    check_finite(monthly)?;
    let mean = monthly.iter().map(|m| m / 2.0).sum::<f64>() / monthly.len() as f64;
    Ok(periods_per_year as f64 * mean)
}

/// Summary statistics with the default drawdown path and no turnover.
pub fn summarize(returns: &[f64], periods_per_year: u32) -> Result<PortfolioStats, MetricsError> {
    summarize_full(returns, periods_per_year, DrawdownMode::default(), None)
}

/// Summary statistics with an explicit drawdown convention and, when holdings
/// were tracked, the monthly two-sided turnover series (length T-1).
pub fn summarize_full(
    returns: &[f64],
    periods_per_year: u32,
    drawdown_mode: DrawdownMode,
    monthly_turnover: Option<&[f64]>,
) -> Result<PortfolioStats, MetricsError> {
    if returns.is_empty() {
        return Err(MetricsError::Empty);
    }
    if returns.len() < 2 {
        return Err(MetricsError::TooShort { needed: 2, got: returns.len() });
    }
    check_finite(returns)?;
    let n = returns.len() as f64;
    let ppy = periods_per_year as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    let mut m4 = 0.0;
    for &r in returns {
        let d = r - mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    let sample_var = m2 / (n - 1.0);
    m2 /= n;
    m3 /= n;
    m4 /= n;

    let ann_return = ppy * mean;
    let ann_vol = ppy.sqrt() * sample_var.sqrt();
    let sharpe = if ann_vol > 0.0 { Some(ann_return / ann_vol) } else { None };
    let (skewness, kurtosis) = if m2 > 0.0 {
        (Some(m3 / m2.powf(1.5)), Some(m4 / (m2 * m2)))
    } else {
        (None, None)
    };
    let max_one_month_loss = -returns.iter().cloned().fold(f64::INFINITY, f64::min);
    let avg_annual_turnover = match monthly_turnover {
        Some(series) => Some(annualized_turnover(series, periods_per_year)?),
        None => None,
    };
    Ok(PortfolioStats {
        ann_return,
        ann_vol,
        skewness,
        kurtosis,
        kurtosis_is_excess: false,
        sharpe,
        max_drawdown: max_drawdown(returns, drawdown_mode)?,
        max_one_month_loss,
        avg_annual_turnover,
    })
}

/// Yearly rank counts: `values[s][y]` is strategy s's indicator in year y,
/// ranked descending per year with ties broken by ascending strategy name.
/// Returns `counts[s][r]`, the number of years strategy s took rank r+1.
pub fn rank_distribution(
    values: &[Vec<f64>],
    names: &[String],
) -> Result<Vec<Vec<usize>>, MetricsError> {
    let s = values.len();
    if s == 0 {
        return Err(MetricsError::Empty);
    }
    if names.len() != s {
        return Err(MetricsError::ShapeMismatch(format!(
            "{} value rows vs {} names",
            s,
            names.len()
        )));
    }
    let years = values[0].len();
    if years == 0 {
        return Err(MetricsError::Empty);
    }
    for (i, row) in values.iter().enumerate() {
        if row.len() != years {
            return Err(MetricsError::ShapeMismatch(format!(
                "strategy {} has {} years, expected {years}",
                names[i],
                row.len()
            )));
        }
        for (y, v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(MetricsError::MissingYearly { strategy: names[i].clone(), year: y });
            }
        }
    }
    let mut counts = vec![vec![0usize; s]; s];
    let mut order: Vec<usize> = (0..s).collect();
    for y in 0..years {
        order.sort_by(|&a, &b| {
            values[b][y]
                .total_cmp(&values[a][y])
                .then_with(|| names[a].cmp(&names[b]))
        });
        for (rank, &strategy) in order.iter().enumerate() {
            counts[strategy][rank] += 1;
        }
    }
    Ok(counts)
}

/// Leave-one-out importance: `full - leave_one_out[k]` for each expert,
/// normalized by the sum of absolute deltas so magnitudes sum to one.
pub fn expert_importance(full: f64, leave_one_out: &[f64]) -> Result<Vec<f64>, MetricsError> {
    if leave_one_out.is_empty() {
        return Err(MetricsError::Empty);
    }
    if !full.is_finite() {
        return Err(MetricsError::NonFinite { context: "full-ensemble indicator".to_string() });
    }
    check_finite(leave_one_out)?;
    let raw: Vec<f64> = leave_one_out.iter().map(|&v| full - v).collect();
    let total: f64 = raw.iter().map(|r| r.abs()).sum();
    if total == 0.0 {
        return Err(MetricsError::DegenerateImportance);
    }
    Ok(raw.into_iter().map(|r| r / total).collect())
}

/// Stats table in the reporting layout, one strategy per row.
pub fn write_stats_csv<W: io::Write>(
    out: W,
    rows: &[(String, PortfolioStats)],
) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "strategy",
        "ann_ret",
        "ann_vol",
        "skew",
        "kurt",
        "sharpe",
        "max_dd",
        "max_1m_loss",
        "turnover",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (name, s) in rows {
        w.write_record([
            name.clone(),
            s.ann_return.to_string(),
            s.ann_vol.to_string(),
            opt(s.skewness),
            opt(s.kurtosis),
            opt(s.sharpe),
            s.max_drawdown.to_string(),
            s.max_one_month_loss.to_string(),
            opt(s.avg_annual_turnover),
        ])?;
    }
    w.flush()?;
    Ok(())
}
