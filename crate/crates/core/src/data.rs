//! Data pipeline: calendar months, asset panels, feature lagging,
//! cross-sectional ranking, median imputation, and refit schedules.
//!
//! The processing order is fixed: lag each feature by its update frequency,
//! rank-transform each (month, feature) cross-section to [-1, 1], then fill
//! gaps with the cross-sectional median of the transformed values (0 when the
//! missing half splits symmetric ranks). Running the pipeline on its own
//! output is the identity.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid calendar month: year {year}, month {month}")]
    InvalidMonth { year: i32, month: u32 },
    #[error("cannot parse month from {0:?}, expected YYYY-MM")]
    MonthParse(String),
    #[error("no observed values to work with: {context}")]
    AllMissing { context: String },
    #[error("non-finite value: {context}")]
    NonFinite { context: String },
    #[error("duplicate row for asset {asset} at {month}{}", fmt_line(.line))]
    DuplicateRow { asset: String, month: Month, line: Option<u64> },
    #[error("row parse failed at line {line}: {message}")]
    ParseRow { line: u64, message: String },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("bad refit schedule: {0}")]
    BadSchedule(String),
    #[error("row for asset {asset} at {month} carries {got} feature values, panel has {expected}")]
    DimensionMismatch { asset: String, month: Month, expected: usize, got: usize },
    #[error("asset {asset} has a listing gap at {gap}")]
    NonContiguous { asset: String, gap: Month },
    #[error("panel holds no rows")]
    EmptyPanel,
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("schema file error: {0}")]
    Json(#[from] serde_json::Error),
}

fn fmt_line(line: &Option<u64>) -> String {
    match line {
        Some(l) => format!(" (line {l})"),
        None => String::new(),
    }
}

/// Calendar month with integer arithmetic, formatted as `YYYY-MM`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Month(i32);

impl Month {
    pub fn from_parts(year: i32, month: u32) -> Result<Self, DataError> {
        if !(1..=12).contains(&month) {
            return Err(DataError::InvalidMonth { year, month });
        }
        Ok(Month(year * 12 + month as i32 - 1))
    }

    pub fn from_index(index: i32) -> Self {
        Month(index)
    }

    pub fn index(&self) -> i32 {
        self.0
    }

    pub fn year(&self) -> i32 {
        self.0.div_euclid(12)
    }

    pub fn month(&self) -> u32 {
        (self.0.rem_euclid(12) + 1) as u32
    }

    pub fn plus_months(&self, n: i32) -> Month {
        Month(self.0 + n)
    }

    /// Signed number of months from `earlier` to `self`.
    pub fn months_since(&self, earlier: Month) -> i32 {
        self.0 - earlier.0
    }

    pub fn january(year: i32) -> Month {
        Month(year * 12)
    }

    pub fn december(year: i32) -> Month {
        Month(year * 12 + 11)
    }
}

impl fmt::Display for Month {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year(), self.month())
    }
}

impl FromStr for Month {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, DataError> {
        let err = || DataError::MonthParse(s.to_string());
        let (y, m) = s.split_once('-').ok_or_else(err)?;
        let year: i32 = y.parse().map_err(|_| err())?;
        let month: u32 = m.parse().map_err(|_| err())?;
        Month::from_parts(year, month).map_err(|_| err())
    }
}

impl Serialize for Month {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Month {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(|_| D::Error::custom(format!("invalid month {s:?}")))
    }
}

/// How often a feature is refreshed; fixes the availability lag applied
/// before any training or forecasting sees the value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frequency {
    Monthly,
    Quarterly,
    Annual,
    /// Already lagged upstream; the pipeline applies no further shift.
    Prelagged,
}

impl Frequency {
    pub fn lag_months(&self) -> i32 {
        match self {
            Frequency::Monthly => 1,
            Frequency::Quarterly => 4,
            Frequency::Annual => 6,
            Frequency::Prelagged => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDef {
    pub name: String,
    pub frequency: Frequency,
}

/// One asset-month observation: the return realized over the month following
/// the row's date, the market cap at the date, and the feature values
/// observed at the date (missing allowed).
#[derive(Debug, Clone, PartialEq)]
pub struct PanelRow {
    pub ret: f64,
    pub mktcap: f64,
    pub values: Vec<Option<f64>>,
}

/// Panel of asset-month rows with a fixed feature list.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPanel {
    features: Vec<FeatureDef>,
    rows: BTreeMap<Month, BTreeMap<String, PanelRow>>,
    n_rows: usize,
}

impl RawPanel {
    pub fn new(features: Vec<FeatureDef>) -> Self {
        RawPanel { features, rows: BTreeMap::new(), n_rows: 0 }
    }

    pub fn features(&self) -> &[FeatureDef] {
        &self.features
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_assets(&self) -> usize {
        let mut assets = BTreeSet::new();
        for month_rows in self.rows.values() {
            assets.extend(month_rows.keys());
        }
        assets.len()
    }

    pub fn n_months(&self) -> usize {
        self.rows.len()
    }

    pub fn months(&self) -> impl Iterator<Item = Month> + '_ {
        self.rows.keys().copied()
    }

    pub fn first_month(&self) -> Option<Month> {
        self.rows.keys().next().copied()
    }

    pub fn last_month(&self) -> Option<Month> {
        self.rows.keys().next_back().copied()
    }

    /// Rows of one month in ascending asset order.
    pub fn rows_at(&self, month: Month) -> impl Iterator<Item = (&String, &PanelRow)> {
        self.rows.get(&month).into_iter().flatten()
    }

    pub fn get(&self, month: Month, asset: &str) -> Option<&PanelRow> {
        self.rows.get(&month).and_then(|m| m.get(asset))
    }

    pub fn insert_row(
        &mut self,
        asset: &str,
        month: Month,
        row: PanelRow,
    ) -> Result<(), DataError> {
        self.insert_row_at_line(asset, month, row, None)
    }

    fn insert_row_at_line(
        &mut self,
        asset: &str,
        month: Month,
        row: PanelRow,
        line: Option<u64>,
    ) -> Result<(), DataError> {
        if row.values.len() != self.features.len() {
            return Err(DataError::DimensionMismatch {
                asset: asset.to_string(),
                month,
                expected: self.features.len(),
                got: row.values.len(),
            });
        }
        if !row.ret.is_finite() {
            return Err(DataError::NonFinite {
                context: format!("return for asset {asset} at {month}"),
            });
        }
        if !row.mktcap.is_finite() {
            return Err(DataError::NonFinite {
                context: format!("market cap for asset {asset} at {month}"),
            });
        }
        for (j, v) in row.values.iter().enumerate() {
            if let Some(x) = v {
                if !x.is_finite() {
                    return Err(DataError::NonFinite {
                        context: format!(
                            "feature {} for asset {asset} at {month}",
                            self.features[j].name
                        ),
                    });
                }
            }
        }
        let month_rows = self.rows.entry(month).or_default();
        if month_rows.contains_key(asset) {
            return Err(DataError::DuplicateRow { asset: asset.to_string(), month, line });
        }
        month_rows.insert(asset.to_string(), row);
        self.n_rows += 1;
        Ok(())
    }

    /// Check that each asset's months form one contiguous run.
    pub fn validate_contiguity(&self) -> Result<(), DataError> {
        let mut spans: BTreeMap<&String, (Month, Month, usize)> = BTreeMap::new();
        for (&month, month_rows) in &self.rows {
            for asset in month_rows.keys() {
                spans
                    .entry(asset)
                    .and_modify(|(first, last, count)| {
                        if month < *first {
                            *first = month;
                        }
                        if month > *last {
                            *last = month;
                        }
                        *count += 1;
                    })
                    .or_insert((month, month, 1));
            }
        }
        for (asset, (first, last, count)) in spans {
            let span = (last.months_since(first) + 1) as usize;
            if span != count {
                // Find the first missing month for the report.
                let mut m = first;
                while m <= last {
                    if self.get(m, asset).is_none() {
                        return Err(DataError::NonContiguous { asset: asset.clone(), gap: m });
                    }
                    m = m.plus_months(1);
                }
            }
        }
        Ok(())
    }
}

/// Cross-sectional rank transform. Observed values get average ranks, mapped
/// affinely so the smallest rank lands at -1 and the largest at +1; a
/// degenerate cross-section (single value or all ties) maps to 0. Missing
/// entries pass through untouched.
pub fn rank_transform(values: &[Option<f64>]) -> Result<Vec<Option<f64>>, DataError> {
    let observed: Vec<(usize, f64)> = values
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|x| (i, x)))
        .collect();
    if observed.is_empty() {
        return Err(DataError::AllMissing { context: "rank transform".to_string() });
    }
    for &(i, x) in &observed {
        if !x.is_finite() {
            return Err(DataError::NonFinite { context: format!("rank input at index {i}") });
        }
    }
    let mut order: Vec<usize> = (0..observed.len()).collect();
    order.sort_by(|&a, &b| observed[a].1.total_cmp(&observed[b].1));

    // Average ranks within tied groups.
    let n = observed.len();
    let mut ranks = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && observed[order[end]].1 == observed[order[start]].1 {
            end += 1;
        }
        // positions are 1-based; tied block [start, end) shares the mean position
        let avg = (start + 1 + end) as f64 / 2.0;
        for &slot in &order[start..end] {
            ranks[slot] = avg;
        }
        start = end;
    }

    let min = ranks.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = ranks.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![None; values.len()];
    for (slot, &(i, _)) in observed.iter().enumerate() {
        let x = if max > min { -1.0 + 2.0 * (ranks[slot] - min) / (max - min) } else { 0.0 };
        out[i] = Some(x);
    }
    Ok(out)
}

/// Replace missing entries with the median of the observed ones (mean of the
/// two central order statistics for even counts).
pub fn impute_median(values: &[Option<f64>]) -> Result<Vec<f64>, DataError> {
    let mut observed: Vec<f64> = values.iter().filter_map(|v| *v).collect();
    if observed.is_empty() {
        return Err(DataError::AllMissing { context: "median imputation".to_string() });
    }
    observed.sort_by(f64::total_cmp);
    let n = observed.len();
    let median = if n % 2 == 1 {
        observed[n / 2]
    } else {
        (observed[n / 2 - 1] + observed[n / 2]) / 2.0
    };
    Ok(values.iter().map(|v| v.unwrap_or(median)).collect())
}

/// Shift every feature back by its frequency lag, so a row only carries
/// values that were observable at its date. Rows whose entire lagged feature
/// set is unavailable are dropped. The output is tagged prelagged.
pub fn lag_features(panel: &RawPanel) -> Result<RawPanel, DataError> {
    let lags: Vec<i32> = panel.features.iter().map(|f| f.frequency.lag_months()).collect();
    let features: Vec<FeatureDef> = panel
        .features
        .iter()
        .map(|f| FeatureDef { name: f.name.clone(), frequency: Frequency::Prelagged })
        .collect();
    let mut out = RawPanel::new(features);
    for (&month, month_rows) in &panel.rows {
        for (asset, row) in month_rows {
            let values: Vec<Option<f64>> = lags
                .iter()
                .enumerate()
                .map(|(j, &lag)| {
                    panel
                        .get(month.plus_months(-lag), asset)
                        .and_then(|source| source.values[j])
                })
                .collect();
            if values.iter().all(Option::is_none) {
                continue;
            }
            out.insert_row(
                asset,
                month,
                PanelRow { ret: row.ret, mktcap: row.mktcap, values },
            )?;
        }
    }
    Ok(out)
}

/// Full preprocessing pass: lag, then per (month, feature) rank transform and
/// median imputation. Leading months where some feature has no observed value
/// anywhere in the cross-section are dropped as burn-in; the same condition
/// later in the sample is an error. The result has no missing values and is a
/// fixed point of this function.
pub fn preprocess(panel: &RawPanel) -> Result<RawPanel, DataError> {
    let lagged = lag_features(panel)?;
    let n_features = lagged.features.len();
    let mut out = RawPanel::new(lagged.features.clone());
    let mut burn_in = true;
    for (&month, month_rows) in &lagged.rows {
        let assets: Vec<&String> = month_rows.keys().collect();
        let mut columns: Vec<Vec<Option<f64>>> = Vec::with_capacity(n_features);
        for j in 0..n_features {
            columns.push(assets.iter().map(|a| month_rows[*a].values[j]).collect());
        }
        if burn_in && columns.iter().any(|c| c.iter().all(Option::is_none)) {
            continue;
        }
        burn_in = false;
        let mut transformed: Vec<Vec<f64>> = Vec::with_capacity(n_features);
        for (j, column) in columns.iter().enumerate() {
            let ranked = rank_transform(column).map_err(|e| match e {
                DataError::AllMissing { .. } => DataError::AllMissing {
                    context: format!("feature {} at {month}", lagged.features[j].name),
                },
                other => other,
            })?;
            transformed.push(impute_median(&ranked)?);
        }
        for (i, asset) in assets.iter().enumerate() {
            let row = &month_rows[*asset];
            let values: Vec<Option<f64>> =
                (0..n_features).map(|j| Some(transformed[j][i])).collect();
            out.insert_row(asset, month, PanelRow { ret: row.ret, mktcap: row.mktcap, values })?;
        }
    }
    if out.n_rows == 0 {
        return Err(DataError::EmptyPanel);
    }
    Ok(out)
}

/// One refit window: expanding training years, a rolling validation span,
/// and a single out-of-sample test year.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefitWindow {
    pub train_start: i32,
    pub train_end: i32,
    pub validation_start: i32,
    pub validation_end: i32,
    pub test_year: i32,
}

impl RefitWindow {
    pub fn train_months(&self) -> (Month, Month) {
        (Month::january(self.train_start), Month::december(self.train_end))
    }

    pub fn test_months(&self) -> (Month, Month) {
        (Month::january(self.test_year), Month::december(self.test_year))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefitSchedule {
    pub windows: Vec<RefitWindow>,
}

impl RefitSchedule {
    pub fn first_test_month(&self) -> Option<Month> {
        self.windows.first().map(|w| Month::january(w.test_year))
    }

    pub fn last_test_month(&self) -> Option<Month> {
        self.windows.last().map(|w| Month::december(w.test_year))
    }
}

/// Yearly walk-forward schedule: training expands by one year per window,
/// validation is a fixed-length span rolling directly behind the test year.
pub fn build_schedule(
    start_year: i32,
    initial_train_years: u32,
    validation_years: u32,
    final_test_year: i32,
) -> Result<RefitSchedule, DataError> {
    if initial_train_years == 0 || validation_years == 0 {
        return Err(DataError::BadSchedule(
            "training and validation spans must cover at least one year".to_string(),
        ));
    }
    let first_test = start_year + initial_train_years as i32 + validation_years as i32;
    if final_test_year < first_test {
        return Err(DataError::BadSchedule(format!(
            "final test year {final_test_year} precedes the first feasible test year {first_test}"
        )));
    }
    let windows = (first_test..=final_test_year)
        .map(|test_year| {
            let validation_end = test_year - 1;
            let validation_start = validation_end - validation_years as i32 + 1;
            RefitWindow {
                train_start: start_year,
                train_end: validation_start - 1,
                validation_start,
                validation_end,
                test_year,
            }
        })
        .collect();
    Ok(RefitSchedule { windows })
}

/// Read the sidecar schema file: a JSON object mapping feature name to
/// frequency tag.
pub fn load_schema(path: &Path) -> Result<BTreeMap<String, Frequency>, DataError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| DataError::SchemaMismatch(format!("{}: {e}", path.display())))
}

/// Load a panel from `asset_id,date,ret,mktcap,<feature...>` CSV plus its
/// schema sidecar. Empty feature cells are missing values.
pub fn load_panel(csv_path: &Path, schema_path: &Path) -> Result<RawPanel, DataError> {
    let schema = load_schema(schema_path)?;
    let file = std::fs::File::open(csv_path)?;
    read_panel(file, &schema)
}

/// Same as [`load_panel`] from an open reader.
pub fn read_panel<R: io::Read>(
    reader: R,
    schema: &BTreeMap<String, Frequency>,
) -> Result<RawPanel, DataError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let fixed = ["asset_id", "date", "ret", "mktcap"];
    if headers.len() < fixed.len() {
        return Err(DataError::SchemaMismatch(format!(
            "header has {} columns, expected at least {}",
            headers.len(),
            fixed.len()
        )));
    }
    for (i, want) in fixed.iter().enumerate() {
        if &headers[i] != *want {
            return Err(DataError::SchemaMismatch(format!(
                "column {i} is {:?}, expected {want:?}",
                &headers[i]
            )));
        }
    }
    let feature_names: Vec<String> = headers.iter().skip(fixed.len()).map(String::from).collect();
    for name in &feature_names {
        if !schema.contains_key(name) {
            return Err(DataError::SchemaMismatch(format!(
                "feature column {name:?} is not in the schema file"
            )));
        }
    }
    for name in schema.keys() {
        if !feature_names.iter().any(|f| f == name) {
            return Err(DataError::SchemaMismatch(format!(
                "schema feature {name:?} is missing from the csv header"
            )));
        }
    }
    let features: Vec<FeatureDef> = feature_names
        .iter()
        .map(|name| FeatureDef { name: name.clone(), frequency: schema[name] })
        .collect();

    let mut panel = RawPanel::new(features);
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let fail = |message: String| DataError::ParseRow { line, message };
        if record.len() != fixed.len() + feature_names.len() {
            return Err(fail(format!(
                "expected {} fields, got {}",
                fixed.len() + feature_names.len(),
                record.len()
            )));
        }
        let asset = record[0].to_string();
        if asset.is_empty() {
            return Err(fail("empty asset_id".to_string()));
        }
        let month: Month =
            record[1].parse().map_err(|e: DataError| fail(e.to_string()))?;
        let ret: f64 =
            record[2].parse().map_err(|_| fail(format!("bad return {:?}", &record[2])))?;
        let mktcap: f64 =
            record[3].parse().map_err(|_| fail(format!("bad mktcap {:?}", &record[3])))?;
        let mut values = Vec::with_capacity(feature_names.len());
        for (j, field) in record.iter().skip(fixed.len()).enumerate() {
            if field.is_empty() {
                values.push(None);
            } else {
                let v: f64 = field.parse().map_err(|_| {
                    fail(format!("bad value {field:?} for feature {}", feature_names[j]))
                })?;
                if !v.is_finite() {
                    return Err(fail(format!(
                        "non-finite value for feature {}",
                        feature_names[j]
                    )));
                }
                values.push(Some(v));
            }
        }
        panel
            .insert_row_at_line(&asset, month, PanelRow { ret, mktcap, values }, Some(line))
            .map_err(|e| match e {
                DataError::DuplicateRow { asset, month, .. } => {
                    DataError::DuplicateRow { asset, month, line: Some(line) }
                }
                DataError::NonFinite { context } => fail(format!("non-finite {context}")),
                other => other,
            })?;
    }
    if panel.n_rows == 0 {
        return Err(DataError::EmptyPanel);
    }
    panel.validate_contiguity()?;
    Ok(panel)
}

/// Write a panel in the same layout [`read_panel`] accepts, rows ordered by
/// (month, asset). Missing values become empty cells.
pub fn write_panel<W: io::Write>(out: W, panel: &RawPanel) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["asset_id".to_string(), "date".into(), "ret".into(), "mktcap".into()];
    header.extend(panel.features.iter().map(|f| f.name.clone()));
    w.write_record(&header)?;
    for (&month, month_rows) in &panel.rows {
        for (asset, row) in month_rows {
            let mut record = vec![
                asset.clone(),
                month.to_string(),
                row.ret.to_string(),
                row.mktcap.to_string(),
            ];
            record.extend(row.values.iter().map(|v| match v {
                Some(x) => x.to_string(),
                None => String::new(),
            }));
            w.write_record(&record)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// The schema sidecar for a panel, as JSON text.
pub fn schema_json(panel: &RawPanel) -> String {
    let map: BTreeMap<&str, Frequency> =
        panel.features.iter().map(|f| (f.name.as_str(), f.frequency)).collect();
    serde_json::to_string_pretty(&map).expect("schema map serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(year: i32, month: u32) -> Month {
        Month::from_parts(year, month).unwrap()
    }

    #[test]
    fn month_round_trip_and_arithmetic() {
        let jan = m(2008, 1);
        assert_eq!(jan.to_string(), "2008-01");
        assert_eq!("2008-01".parse::<Month>().unwrap(), jan);
        assert_eq!(jan.plus_months(11), m(2008, 12));
        assert_eq!(jan.plus_months(12), m(2009, 1));
        assert_eq!(jan.plus_months(-1), m(2007, 12));
        assert_eq!(m(2009, 3).months_since(jan), 14);
        assert!(Month::from_parts(2008, 13).is_err());
        assert!(Month::from_parts(2008, 0).is_err());
        assert!("2008".parse::<Month>().is_err());
        assert!("2008-1x".parse::<Month>().is_err());
    }

    #[test]
    fn month_serde_uses_iso_text() {
        let j: String = serde_json::to_string(&m(1987, 6)).unwrap();
        assert_eq!(j, "\"1987-06\"");
        let back: Month = serde_json::from_str(&j).unwrap();
        assert_eq!(back, m(1987, 6));
    }

    #[test]
    fn rank_handles_ties_by_averaging() {
        let out = rank_transform(&[Some(1.0), Some(2.0), Some(2.0), Some(4.0)]).unwrap();
        let got: Vec<f64> = out.into_iter().map(Option::unwrap).collect();
        assert_eq!(got, vec![-1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn rank_simple_and_degenerate_cases() {
        let out = rank_transform(&[Some(10.0), Some(20.0), Some(30.0)]).unwrap();
        assert_eq!(out, vec![Some(-1.0), Some(0.0), Some(1.0)]);
        assert_eq!(rank_transform(&[Some(5.0), Some(5.0)]).unwrap(), vec![Some(0.0), Some(0.0)]);
        assert_eq!(rank_transform(&[Some(3.0)]).unwrap(), vec![Some(0.0)]);
        assert_eq!(
            rank_transform(&[Some(1.0), None, Some(3.0)]).unwrap(),
            vec![Some(-1.0), None, Some(1.0)]
        );
        assert!(rank_transform(&[None, None]).is_err());
        assert!(rank_transform(&[]).is_err());
        assert!(rank_transform(&[Some(f64::NAN)]).is_err());
    }

    #[test]
    fn median_imputation_fills_gaps() {
        assert_eq!(impute_median(&[Some(1.0), None, Some(3.0)]).unwrap(), vec![1.0, 2.0, 3.0]);
        // Symmetric ranks put the fill at zero.
        assert_eq!(
            impute_median(&[Some(-1.0), Some(0.0), Some(1.0), None]).unwrap(),
            vec![-1.0, 0.0, 1.0, 0.0]
        );
        assert!(impute_median(&[None]).is_err());
    }

    fn tiny_panel() -> RawPanel {
        // Two assets over 2000-01..2000-12, one monthly and one quarterly
        // feature. Values encode their observation month index so lag tests
        // can read the shift directly.
        let features = vec![
            FeatureDef { name: "mom".into(), frequency: Frequency::Monthly },
            FeatureDef { name: "qf".into(), frequency: Frequency::Quarterly },
        ];
        let mut panel = RawPanel::new(features);
        for asset in ["A", "B"] {
            for t in 0..12 {
                let month = m(2000, 1).plus_months(t);
                let row = PanelRow {
                    ret: 0.01 * (t + 1) as f64,
                    mktcap: 100.0,
                    values: vec![Some(month.index() as f64), Some(month.index() as f64)],
                };
                panel.insert_row(asset, month, row).unwrap();
            }
        }
        panel
    }

    #[test]
    fn lag_shifts_each_feature_by_its_frequency() {
        let lagged = lag_features(&tiny_panel()).unwrap();
        // First month with any lagged value is 2000-02 (monthly lag 1).
        assert_eq!(lagged.first_month().unwrap(), m(2000, 2));
        let row = lagged.get(m(2000, 6), "A").unwrap();
        assert_eq!(row.values[0], Some(m(2000, 5).index() as f64));
        assert_eq!(row.values[1], Some(m(2000, 2).index() as f64));
        // Quarterly value is missing before its 4-month lag clears.
        let early = lagged.get(m(2000, 3), "A").unwrap();
        assert_eq!(early.values[0], Some(m(2000, 2).index() as f64));
        assert_eq!(early.values[1], None);
        // Output is tagged prelagged, so lagging again is the identity.
        let again = lag_features(&lagged).unwrap();
        assert_eq!(again, lagged);
    }

    #[test]
    fn lag_drops_rows_with_nothing_available() {
        let lagged = lag_features(&tiny_panel()).unwrap();
        assert!(lagged.get(m(2000, 1), "A").is_none());
        assert_eq!(lagged.n_rows(), 2 * 11);
    }

    #[test]
    fn preprocess_is_idempotent_and_complete() {
        let processed = preprocess(&tiny_panel()).unwrap();
        // Burn-in: first usable month is the first where both features exist.
        assert_eq!(processed.first_month().unwrap(), m(2000, 5));
        for month in processed.months().collect::<Vec<_>>() {
            for (_, row) in processed.rows_at(month) {
                assert!(row.values.iter().all(|v| v.is_some()));
                for v in &row.values {
                    let x = v.unwrap();
                    assert!((-1.0..=1.0).contains(&x));
                }
            }
        }
        let twice = preprocess(&processed).unwrap();
        assert_eq!(twice, processed);
    }

    #[test]
    fn schedule_expanding_train_rolling_validation() {
        let schedule = build_schedule(1957, 18, 12, 2016).unwrap();
        assert_eq!(schedule.windows.len(), 30);
        let first = schedule.windows[0];
        assert_eq!(first.train_start, 1957);
        assert_eq!(first.train_end, 1974);
        assert_eq!(first.validation_start, 1975);
        assert_eq!(first.validation_end, 1986);
        assert_eq!(first.test_year, 1987);
        let last = schedule.windows[29];
        assert_eq!(last.test_year, 2016);
        assert_eq!(last.train_end, 2003);
        assert_eq!(last.validation_end, 2015);
    }

    #[test]
    fn schedule_small_example_and_errors() {
        let s = build_schedule(2000, 2, 1, 2004).unwrap();
        assert_eq!(s.windows.len(), 2);
        assert_eq!((s.windows[0].train_start, s.windows[0].train_end), (2000, 2001));
        assert_eq!(s.windows[0].test_year, 2003);
        assert_eq!((s.windows[1].train_start, s.windows[1].train_end), (2000, 2002));
        assert_eq!(s.windows[1].test_year, 2004);
        assert!(build_schedule(2000, 0, 1, 2004).is_err());
        assert!(build_schedule(2000, 2, 0, 2004).is_err());
        assert!(build_schedule(2000, 2, 1, 2002).is_err());
    }

    #[test]
    fn panel_rejects_duplicates_and_bad_values() {
        let mut panel = RawPanel::new(vec![FeatureDef {
            name: "x".into(),
            frequency: Frequency::Monthly,
        }]);
        let row = PanelRow { ret: 0.01, mktcap: 1.0, values: vec![Some(1.0)] };
        panel.insert_row("A", m(2000, 1), row.clone()).unwrap();
        assert!(matches!(
            panel.insert_row("A", m(2000, 1), row.clone()),
            Err(DataError::DuplicateRow { .. })
        ));
        let bad_ret = PanelRow { ret: f64::NAN, mktcap: 1.0, values: vec![Some(1.0)] };
        assert!(panel.insert_row("B", m(2000, 1), bad_ret).is_err());
        let bad_dim = PanelRow { ret: 0.0, mktcap: 1.0, values: vec![] };
        assert!(matches!(
            panel.insert_row("B", m(2000, 1), bad_dim),
            Err(DataError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn contiguity_gap_is_reported() {
        let mut panel = RawPanel::new(vec![]);
        let row = PanelRow { ret: 0.0, mktcap: 1.0, values: vec![] };
        panel.insert_row("A", m(2000, 1), row.clone()).unwrap();
        panel.insert_row("A", m(2000, 3), row).unwrap();
        match panel.validate_contiguity() {
            Err(DataError::NonContiguous { asset, gap }) => {
                assert_eq!(asset, "A");
                assert_eq!(gap, m(2000, 2));
            }
            other => panic!("expected contiguity error, got {other:?}"),
        }
    }

    fn schema() -> BTreeMap<String, Frequency> {
        BTreeMap::from([
            ("mom".to_string(), Frequency::Monthly),
            ("qf".to_string(), Frequency::Quarterly),
        ])
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let panel = tiny_panel();
        let mut buf = Vec::new();
        write_panel(&mut buf, &panel).unwrap();
        let back = read_panel(buf.as_slice(), &schema()).unwrap();
        assert_eq!(back, panel);
    }

    #[test]
    fn csv_reports_line_numbers() {
        let text = "asset_id,date,ret,mktcap,mom,qf\n\
                    A,2000-01,0.01,100,1,1\n\
                    A,2000-01,0.02,100,2,2\n";
        match read_panel(text.as_bytes(), &schema()) {
            Err(DataError::DuplicateRow { asset, line, .. }) => {
                assert_eq!(asset, "A");
                assert_eq!(line, Some(3));
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
        let bad = "asset_id,date,ret,mktcap,mom,qf\n\
                   A,2000-01,zzz,100,1,1\n";
        match read_panel(bad.as_bytes(), &schema()) {
            Err(DataError::ParseRow { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_schema_mismatches() {
        let text = "asset_id,date,ret,mktcap,unknown\nA,2000-01,0.01,100,1\n";
        assert!(matches!(
            read_panel(text.as_bytes(), &schema()),
            Err(DataError::SchemaMismatch(_))
        ));
        let missing = "asset_id,date,ret,mktcap,mom\nA,2000-01,0.01,100,1\n";
        assert!(matches!(
            read_panel(missing.as_bytes(), &schema()),
            Err(DataError::SchemaMismatch(_))
        ));
        let bad_tag = serde_json::from_str::<BTreeMap<String, Frequency>>(
            "{\"mom\": \"weekly\"}",
        );
        assert!(bad_tag.is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn rank_output_bounded(values in proptest::collection::vec(-1e6f64..1e6, 1..40)) {
            let wrapped: Vec<Option<f64>> = values.iter().map(|&v| Some(v)).collect();
            let out = rank_transform(&wrapped).unwrap();
            for v in out.into_iter().flatten() {
                prop_assert!((-1.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn rank_invariant_under_increasing_affine_maps(
            values in proptest::collection::vec(-100.0f64..100.0, 2..30),
            a in 0.1f64..10.0,
            b in -50.0f64..50.0,
        ) {
            let wrapped: Vec<Option<f64>> = values.iter().map(|&v| Some(v)).collect();
            let mapped: Vec<Option<f64>> = values.iter().map(|&v| Some(a * v + b)).collect();
            let lhs = rank_transform(&wrapped).unwrap();
            let rhs = rank_transform(&mapped).unwrap();
            for (x, y) in lhs.iter().zip(&rhs) {
                prop_assert!((x.unwrap() - y.unwrap()).abs() < 1e-12);
            }
        }
    }
}
