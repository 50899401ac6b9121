//! Leave-one-out expert importance: re-run the aggregation without each
//! expert in turn and report how much of the headline indicators it carried.

use std::collections::BTreeMap;

use aggfolio_core::metrics::{expert_importance, summarize, MetricsError};
use rayon::prelude::*;

use crate::backtest::{build_engine, build_manifest, write_files, PERIODS_PER_YEAR};
use crate::config::ExperimentConfig;
use crate::CliError;

/// Indicators whose leave-one-out degradation is reported, in output order.
pub const INDICATORS: [&str; 4] = ["ann_return", "ann_vol", "sharpe", "cumulative"];

fn indicator_values(returns: &[f64]) -> Result<[f64; 4], CliError> {
    let st = summarize(returns, PERIODS_PER_YEAR)?;
    let sharpe = st.sharpe.ok_or_else(|| {
        CliError::Data(
            "aggregate series has zero volatility; sharpe-based importance is undefined"
                .to_string(),
        )
    })?;
    Ok([st.ann_return, st.ann_vol, sharpe, returns.iter().sum()])
}

pub struct ImportanceTable {
    pub expert_names: Vec<String>,
    /// `raw[i][e]`: indicator i under the full ensemble minus without expert e.
    pub raw: Vec<Vec<f64>>,
    /// Per indicator, deltas scaled so absolute values sum to one; all zero
    /// when every delta vanishes.
    pub normalized: Vec<Vec<f64>>,
    /// Indicators whose deltas all vanished.
    pub degenerate: Vec<&'static str>,
}

pub fn run_importance(cfg: &ExperimentConfig) -> Result<ImportanceTable, CliError> {
    let engine = build_engine(cfg)?;
    let k = engine.n_experts();
    if k < 2 {
        return Err(CliError::Config(
            "leave-one-out importance needs at least two experts".to_string(),
        ));
    }
    let full = indicator_values(&engine.aggregate(cfg.rule)?.long_short)?;
    let loo: Vec<[f64; 4]> = (0..k)
        .into_par_iter()
        .map(|dropped| {
            let keep: Vec<usize> = (0..k).filter(|&e| e != dropped).collect();
            indicator_values(&engine.aggregate_subset(cfg.rule, &keep)?.long_short)
        })
        .collect::<Result<_, _>>()?;

    let mut raw = Vec::with_capacity(INDICATORS.len());
    let mut normalized = Vec::with_capacity(INDICATORS.len());
    let mut degenerate = Vec::new();
    for (i, &indicator) in INDICATORS.iter().enumerate() {
        let loo_i: Vec<f64> = loo.iter().map(|v| v[i]).collect();
        raw.push(loo_i.iter().map(|v| full[i] - v).collect());
        match expert_importance(full[i], &loo_i) {
            Ok(n) => normalized.push(n),
            Err(MetricsError::DegenerateImportance) => {
                degenerate.push(indicator);
                normalized.push(vec![0.0; k]);
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(ImportanceTable { expert_names: engine.expert_names, raw, normalized, degenerate })
}

/// Indicator-major rows: expert, indicator, raw_delta, normalized.
pub fn render_importance_csv(table: &ImportanceTable) -> Result<Vec<u8>, CliError> {
    let csv_err = |e: csv::Error| CliError::Data(format!("importance csv: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["expert", "indicator", "raw_delta", "normalized"]).map_err(csv_err)?;
    for (i, &indicator) in INDICATORS.iter().enumerate() {
        for (e, name) in table.expert_names.iter().enumerate() {
            w.write_record([
                name.as_str(),
                indicator,
                &table.raw[i][e].to_string(),
                &table.normalized[i][e].to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.into_inner().map_err(|e| CliError::Data(format!("importance csv: {e}")))
}

pub fn cmd_importance(cfg: &ExperimentConfig) -> Result<String, CliError> {
    let out_dir = cfg.resolve_output_dir()?;
    let table = run_importance(cfg)?;
    let mut files = BTreeMap::new();
    files.insert("importance.csv".to_string(), render_importance_csv(&table)?);
    let manifest = build_manifest(cfg, &files)?;
    files.insert("manifest.json".to_string(), manifest);
    write_files(&out_dir, &files)?;
    let mut message = format!(
        "wrote leave-one-out importance for {} experts to {}",
        table.expert_names.len(),
        out_dir.display()
    );
    if !table.degenerate.is_empty() {
        message.push_str(&format!(
            "; all-zero (degenerate) indicators: {}",
            table.degenerate.join(", ")
        ));
    }
    Ok(message)
}
