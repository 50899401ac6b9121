//! Decile long-short portfolio construction and the two-leg online blend.
//!
//! Each month, every expert's forecasts sort the cross-section into ten
//! deciles; the top decile is the long leg, the bottom decile the short leg.
//! The realized return of each leg is what the aggregation layer sees: expert
//! leg returns act as predictions, and the leg built from realized returns
//! themselves (the best hindsight sort) acts as the target. Because leg
//! returns are linear in holdings, mixing leg returns with the online weights
//! is the same as trading the blended book.
//!
//! Ties in any sort are broken by ascending asset id, so a month's portfolio
//! is a pure function of its inputs.

use crate::aggregation::{run_online, run_online_from, warm_start, OnlineRun, Rule};
use crate::data::Month;
use crate::loss::LossKind;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::io;
use thiserror::Error;

/// Minimum cross-section size for a decile sort.
pub const MIN_UNIVERSE: usize = 10;

#[derive(Debug, Error)]
pub enum PortfolioError {
    #[error("universe too small: need at least {needed} assets, got {got}")]
    UniverseTooSmall { needed: usize, got: usize },
    #[error("duplicate asset id {id} in cross-section {month}")]
    DuplicateAsset { id: String, month: Month },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value: {context}")]
    NonFinite { context: String },
    #[error("non-positive market cap for asset {id} in {month}; value weighting needs positive caps")]
    NonPositiveCap { id: String, month: Month },
    #[error("expert index {index} out of range for {count} experts")]
    ExpertIndexOutOfRange { index: usize, count: usize },
    #[error("pretrain span {pretrain} must be shorter than the stream length {total}")]
    PretrainTooLong { pretrain: usize, total: usize },
    #[error("empty input: {0}")]
    Empty(String),
    #[error(transparent)]
    Aggregation(#[from] crate::aggregation::AggregationError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

/// Which extreme decile a leg trades.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// Top decile: highest forecasts.
    Long,
    /// Bottom decile: lowest forecasts.
    Short,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Side::Long => write!(f, "long"),
            Side::Short => write!(f, "short"),
        }
    }
}

/// Within-leg weighting scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// One over leg size.
    Equal,
    /// Proportional to market cap.
    Value,
}

/// Cross-section filter applied before the decile sort.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UniverseSelector {
    All,
    /// Keep the n largest caps (ties by ascending id).
    TopByCap(usize),
    /// Keep the n smallest caps (ties by ascending id).
    BottomByCap(usize),
}

/// One asset's data for a single month.
#[derive(Debug, Clone, PartialEq)]
pub struct AssetRow {
    pub id: String,
    /// Return realized over the portfolio holding month.
    pub realized: f64,
    pub cap: f64,
    /// One forecast per expert, in expert order.
    pub forecasts: Vec<f64>,
}

/// All tradable assets for one month, sorted by id with validated shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossSection {
    month: Month,
    assets: Vec<AssetRow>,
}

impl CrossSection {
    pub fn new(month: Month, mut assets: Vec<AssetRow>) -> Result<Self, PortfolioError> {
        if assets.is_empty() {
            return Err(PortfolioError::Empty(format!("cross-section {month}")));
        }
        assets.sort_by(|a, b| a.id.cmp(&b.id));
        let n_experts = assets[0].forecasts.len();
        for pair in assets.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(PortfolioError::DuplicateAsset { id: pair[1].id.clone(), month });
            }
        }
        for row in &assets {
            if row.forecasts.len() != n_experts {
                return Err(PortfolioError::ShapeMismatch(format!(
                    "asset {} in {} has {} forecasts, expected {}",
                    row.id,
                    month,
                    row.forecasts.len(),
                    n_experts
                )));
            }
            if !row.realized.is_finite() || !row.cap.is_finite() {
                return Err(PortfolioError::NonFinite {
                    context: format!("asset {} in {}", row.id, month),
                });
            }
            if let Some(k) = row.forecasts.iter().position(|f| !f.is_finite()) {
                return Err(PortfolioError::NonFinite {
                    context: format!("forecast {} for asset {} in {}", k, row.id, month),
                });
            }
        }
        Ok(Self { month, assets })
    }

    pub fn month(&self) -> Month {
        self.month
    }

    pub fn assets(&self) -> &[AssetRow] {
        &self.assets
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    pub fn n_experts(&self) -> usize {
        self.assets[0].forecasts.len()
    }
}

/// Holdings of a single leg for one month; weights sum to one, ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct LegHoldings {
    pub month: Month,
    pub side: Side,
    pub weights: Vec<(String, f64)>,
}

/// Decile membership (1 through 10) per input position, sorting ascending by
/// score with ties broken by ascending id. The extreme deciles hold exactly
/// floor(n/10) assets each; deciles 2 through 9 split the rest, with the
/// earlier ones taking the extras.
pub fn decile_assign(scores: &[f64], ids: &[String]) -> Result<Vec<u8>, PortfolioError> {
    if scores.len() != ids.len() {
        return Err(PortfolioError::ShapeMismatch(format!(
            "{} scores vs {} ids",
            scores.len(),
            ids.len()
        )));
    }
    let n = scores.len();
    if n < MIN_UNIVERSE {
        return Err(PortfolioError::UniverseTooSmall { needed: MIN_UNIVERSE, got: n });
    }
    for (i, &s) in scores.iter().enumerate() {
        if !s.is_finite() {
            return Err(PortfolioError::NonFinite { context: format!("score for id {}", ids[i]) });
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then_with(|| ids[a].cmp(&ids[b])));

    let extreme = n / 10;
    let interior = n - 2 * extreme;
    let base = interior / 8;
    let extras = interior % 8;
    let mut sizes = [0usize; 10];
    sizes[0] = extreme;
    sizes[9] = extreme;
    for d in 1..9 {
        sizes[d] = base + usize::from(d - 1 < extras);
    }

    let mut assignment = vec![0u8; n];
    let mut cursor = 0usize;
    for (d, &size) in sizes.iter().enumerate() {
        for &idx in &order[cursor..cursor + size] {
            assignment[idx] = (d + 1) as u8;
        }
        cursor += size;
    }
    Ok(assignment)
}

/// Shared leg builder: sort by the given scores, take the extreme decile for
/// the side, weight within the leg, and return holdings plus the realized
/// leg return.
fn leg_from_scores(
    cs: &CrossSection,
    scores: &[f64],
    side: Side,
    weighting: Weighting,
) -> Result<(LegHoldings, f64), PortfolioError> {
    let ids: Vec<String> = cs.assets.iter().map(|a| a.id.clone()).collect();
    let assignment = decile_assign(scores, &ids)?;
    let wanted = match side {
        Side::Long => 10u8,
        Side::Short => 1u8,
    };
    let members: Vec<usize> =
        (0..cs.assets.len()).filter(|&i| assignment[i] == wanted).collect();
    let mut weights = Vec::with_capacity(members.len());
    match weighting {
        Weighting::Equal => {
            let w = 1.0 / members.len() as f64;
            for &i in &members {
                weights.push((cs.assets[i].id.clone(), w));
            }
        }
        Weighting::Value => {
            let mut total = 0.0;
            for &i in &members {
                if cs.assets[i].cap <= 0.0 {
                    return Err(PortfolioError::NonPositiveCap {
                        id: cs.assets[i].id.clone(),
                        month: cs.month,
                    });
                }
                total += cs.assets[i].cap;
            }
            for &i in &members {
                weights.push((cs.assets[i].id.clone(), cs.assets[i].cap / total));
            }
        }
    }
    // Members come out in ascending-id order already (assets are sorted).
    let ret = members
        .iter()
        .zip(&weights)
        .map(|(&i, (_, w))| w * cs.assets[i].realized)
        .sum();
    Ok((LegHoldings { month: cs.month, side, weights }, ret))
}

/// Leg built from one expert's forecasts.
pub fn build_leg(
    cs: &CrossSection,
    expert: usize,
    side: Side,
    weighting: Weighting,
) -> Result<(LegHoldings, f64), PortfolioError> {
    if expert >= cs.n_experts() {
        return Err(PortfolioError::ExpertIndexOutOfRange { index: expert, count: cs.n_experts() });
    }
    let scores: Vec<f64> = cs.assets.iter().map(|a| a.forecasts[expert]).collect();
    leg_from_scores(cs, &scores, side, weighting)
}

/// Hindsight leg: the same sort applied to realized returns themselves. This
/// is the aggregation target for the corresponding side, and an expert whose
/// forecasts equal the realized returns reproduces it bit for bit.
pub fn target_leg(
    cs: &CrossSection,
    side: Side,
    weighting: Weighting,
) -> Result<(LegHoldings, f64), PortfolioError> {
    let scores: Vec<f64> = cs.assets.iter().map(|a| a.realized).collect();
    leg_from_scores(cs, &scores, side, weighting)
}

/// Apply a universe filter, keeping the result sorted by id.
pub fn filter_universe(
    cs: &CrossSection,
    selector: UniverseSelector,
) -> Result<CrossSection, PortfolioError> {
    let kept: Vec<AssetRow> = match selector {
        UniverseSelector::All => cs.assets.clone(),
        UniverseSelector::TopByCap(n) | UniverseSelector::BottomByCap(n) => {
            let mut order: Vec<usize> = (0..cs.assets.len()).collect();
            match selector {
                UniverseSelector::TopByCap(_) => order.sort_by(|&a, &b| {
                    cs.assets[b]
                        .cap
                        .total_cmp(&cs.assets[a].cap)
                        .then_with(|| cs.assets[a].id.cmp(&cs.assets[b].id))
                }),
                _ => order.sort_by(|&a, &b| {
                    cs.assets[a]
                        .cap
                        .total_cmp(&cs.assets[b].cap)
                        .then_with(|| cs.assets[a].id.cmp(&cs.assets[b].id))
                }),
            }
            let keep = n.min(order.len());
            order[..keep].iter().map(|&i| cs.assets[i].clone()).collect()
        }
    };
    if kept.len() < MIN_UNIVERSE {
        return Err(PortfolioError::UniverseTooSmall { needed: MIN_UNIVERSE, got: kept.len() });
    }
    CrossSection::new(cs.month, kept)
}

/// Blend per-expert leg holdings with the given expert weights into one book.
pub fn blend_holdings(
    legs: &[LegHoldings],
    expert_weights: &[f64],
) -> Result<BTreeMap<String, f64>, PortfolioError> {
    if legs.is_empty() {
        return Err(PortfolioError::Empty("leg holdings".to_string()));
    }
    if legs.len() != expert_weights.len() {
        return Err(PortfolioError::ShapeMismatch(format!(
            "{} legs vs {} expert weights",
            legs.len(),
            expert_weights.len()
        )));
    }
    let mut book = BTreeMap::new();
    for (leg, &w) in legs.iter().zip(expert_weights) {
        for (id, holding) in &leg.weights {
            *book.entry(id.clone()).or_insert(0.0) += w * holding;
        }
    }
    Ok(book)
}

/// Net book of a long-short strategy: long weights minus short weights.
pub fn signed_book(
    long: &BTreeMap<String, f64>,
    short: &BTreeMap<String, f64>,
) -> BTreeMap<String, f64> {
    let mut book = long.clone();
    for (id, w) in short {
        *book.entry(id.clone()).or_insert(0.0) -= w;
    }
    book
}

/// Two-sided turnover between consecutive books: the previous book drifts
/// with the next month's returns, and the distance to the next book is
/// summed over the union of assets. Assets absent from a book hold zero;
/// assets with no return entry drift with zero return.
pub fn monthly_turnover(
    prev_book: &BTreeMap<String, f64>,
    next_book: &BTreeMap<String, f64>,
    next_returns: &BTreeMap<String, f64>,
) -> f64 {
    let mut total = 0.0;
    for (id, &w_next) in next_book {
        let w_prev = prev_book.get(id).copied().unwrap_or(0.0);
        let r = next_returns.get(id).copied().unwrap_or(0.0);
        total += (w_next - w_prev * (1.0 + r)).abs();
    }
    for (id, &w_prev) in prev_book {
        if !next_book.contains_key(id) {
            let r = next_returns.get(id).copied().unwrap_or(0.0);
            total += (w_prev * (1.0 + r)).abs();
        }
    }
    total
}

/// Online blend over both legs plus the resulting long-short series.
#[derive(Debug, Clone, PartialEq)]
pub struct DualAggregation {
    pub long: OnlineRun,
    pub short: OnlineRun,
    /// Long mixture minus short mixture, per reported month.
    pub long_short: Vec<f64>,
}

/// Run the online rule independently on each leg. The first `pretrain`
/// months only update weights; reported series start after them.
pub fn long_short_aggregate(
    long_streams: &[Vec<f64>],
    short_streams: &[Vec<f64>],
    long_targets: &[f64],
    short_targets: &[f64],
    rule: Rule,
    loss: LossKind,
    pretrain: usize,
) -> Result<DualAggregation, PortfolioError> {
    if long_streams.len() != short_streams.len() {
        return Err(PortfolioError::ShapeMismatch(format!(
            "{} long streams vs {} short streams",
            long_streams.len(),
            short_streams.len()
        )));
    }
    let total = long_targets.len();
    if short_targets.len() != total {
        return Err(PortfolioError::ShapeMismatch(format!(
            "{} long targets vs {} short targets",
            total,
            short_targets.len()
        )));
    }
    if pretrain >= total {
        return Err(PortfolioError::PretrainTooLong { pretrain, total });
    }

    let run_leg = |streams: &[Vec<f64>], targets: &[f64]| -> Result<OnlineRun, PortfolioError> {
        if pretrain == 0 {
            return Ok(run_online(rule, streams, targets, loss)?);
        }
        for (k, s) in streams.iter().enumerate() {
            if s.len() != total {
                return Err(PortfolioError::ShapeMismatch(format!(
                    "stream {k} has {} steps, targets have {total}",
                    s.len()
                )));
            }
        }
        let heads: Vec<Vec<f64>> = streams.iter().map(|s| s[..pretrain].to_vec()).collect();
        let tails: Vec<Vec<f64>> = streams.iter().map(|s| s[pretrain..].to_vec()).collect();
        let state = warm_start(rule, &heads, &targets[..pretrain], loss)?;
        Ok(run_online_from(state, &tails, &targets[pretrain..], loss)?)
    };

    let long = run_leg(long_streams, long_targets)?;
    let short = run_leg(short_streams, short_targets)?;
    let long_short = long
        .outcomes
        .iter()
        .zip(&short.outcomes)
        .map(|(l, s)| l.mixture_value - s.mixture_value)
        .collect();
    Ok(DualAggregation { long, short, long_short })
}

/// A labelled monthly return series with optional per-month books for
/// turnover accounting.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategySeries {
    pub label: String,
    pub months: Vec<Month>,
    pub returns: Vec<f64>,
    pub books: Option<Vec<BTreeMap<String, f64>>>,
}

impl StrategySeries {
    pub fn new(label: impl Into<String>, months: Vec<Month>, returns: Vec<f64>) -> Self {
        Self { label: label.into(), months, returns, books: None }
    }

    /// Two-sided monthly turnover between consecutive books, when tracked.
    /// `asset_returns[t]` holds the returns realized while `books[t]` was
    /// held, i.e. the drift applied before rebalancing into `books[t + 1]`.
    pub fn monthly_turnover_series(
        &self,
        asset_returns: &[BTreeMap<String, f64>],
    ) -> Option<Vec<f64>> {
        let books = self.books.as_ref()?;
        let mut series = Vec::with_capacity(books.len().saturating_sub(1));
        for t in 0..books.len().saturating_sub(1) {
            let empty = BTreeMap::new();
            let rets = asset_returns.get(t).unwrap_or(&empty);
            series.push(monthly_turnover(&books[t], &books[t + 1], rets));
        }
        Some(series)
    }
}

/// Long-format return table: one row per (series, month).
pub fn write_series_csv<W: io::Write>(
    out: W,
    series: &[StrategySeries],
) -> Result<(), PortfolioError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["date", "strategy", "return"])?;
    for s in series {
        if s.months.len() != s.returns.len() {
            return Err(PortfolioError::ShapeMismatch(format!(
                "series {}: {} months vs {} returns",
                s.label,
                s.months.len(),
                s.returns.len()
            )));
        }
        for (m, r) in s.months.iter().zip(&s.returns) {
            w.write_record([m.to_string(), s.label.clone(), r.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Holdings table: one row per (month, strategy, side, asset).
pub fn write_holdings_csv<W: io::Write>(
    out: W,
    entries: &[(Month, String, Side, BTreeMap<String, f64>)],
) -> Result<(), PortfolioError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["date", "strategy", "side", "asset_id", "weight"])?;
    for (month, strategy, side, book) in entries {
        for (id, weight) in book {
            w.write_record([
                month.to_string(),
                strategy.clone(),
                side.to_string(),
                id.clone(),
                weight.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
