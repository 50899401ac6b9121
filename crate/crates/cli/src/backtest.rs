//! Full decile long-short backtest: panel to forecasts to monthly
//! cross-sections to per-expert legs to online aggregation, rendered as a
//! deterministic set of report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use aggfolio_core::aggregation::{write_weights_csv, Rule};
use aggfolio_core::data::Month;
use aggfolio_core::metrics::{summarize_full, write_stats_csv, PortfolioStats};
use aggfolio_core::portfolio::{
    blend_holdings, build_leg, filter_universe, signed_book, target_leg, write_holdings_csv,
    write_series_csv, AssetRow, CrossSection, DualAggregation, LegHoldings, Side, StrategySeries,
};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::pipeline::{expand_experts, prepare_data, produce_forecasts};
use crate::CliError;

pub const PERIODS_PER_YEAR: u32 = 12;

/// Label under which an aggregation rule's portfolio is reported.
pub fn rule_label(rule: Rule) -> &'static str {
    match rule {
        Rule::Uni => "PtfUNI",
        Rule::BoaFixed { .. } | Rule::BoaAdaptive => "PtfBOA",
    }
}

/// Everything the monthly loop produced. Leg streams and holdings are indexed
/// by absolute position in `forecast_months` (pretrain months first, then
/// each reported month); aggregation runs cover only the reported months.
pub struct Engine {
    pub cfg: ExperimentConfig,
    pub expert_names: Vec<String>,
    pub forecast_months: Vec<Month>,
    pub reported_months: Vec<Month>,
    /// `long_streams[k][t]`: expert k's long-decile return at forecast month t.
    pub long_streams: Vec<Vec<f64>>,
    pub short_streams: Vec<Vec<f64>>,
    /// Perfect-foresight leg returns the aggregation chases.
    pub long_targets: Vec<f64>,
    pub short_targets: Vec<f64>,
    /// `legs_long[t][k]`: expert k's long holdings at forecast month t.
    legs_long: Vec<Vec<LegHoldings>>,
    legs_short: Vec<Vec<LegHoldings>>,
    target_legs_long: Vec<LegHoldings>,
    target_legs_short: Vec<LegHoldings>,
    /// Realized returns of the filtered universe, per forecast month.
    rets: Vec<BTreeMap<String, f64>>,
}

/// Run the data pipeline and build every expert leg, one cross-section per
/// forecast month. Every expert must cover every tradable asset-month.
pub fn build_engine(cfg: &ExperimentConfig) -> Result<Engine, CliError> {
    let prepared = prepare_data(cfg)?;
    let experts = expand_experts(&cfg.experts, cfg.bagging.as_ref(), cfg.seed)?;
    let forecasts = produce_forecasts(
        &prepared.panel,
        &prepared.schedule,
        &experts,
        &prepared.forecast_months,
        cfg.seed,
    )?;
    let expert_names: Vec<String> = experts.iter().map(|s| s.name.clone()).collect();
    let k = expert_names.len();
    let t_total = prepared.forecast_months.len();

    let mut long_streams = vec![Vec::with_capacity(t_total); k];
    let mut short_streams = vec![Vec::with_capacity(t_total); k];
    let mut long_targets = Vec::with_capacity(t_total);
    let mut short_targets = Vec::with_capacity(t_total);
    let mut legs_long = Vec::with_capacity(t_total);
    let mut legs_short = Vec::with_capacity(t_total);
    let mut target_legs_long = Vec::with_capacity(t_total);
    let mut target_legs_short = Vec::with_capacity(t_total);
    let mut rets = Vec::with_capacity(t_total);

    for &month in &prepared.forecast_months {
        // Select the universe on caps alone, then require full forecast
        // coverage on what survives: external forecast files only need to
        // cover the traded universe.
        let prelim: Vec<AssetRow> = prepared
            .panel
            .rows_at(month)
            .map(|(id, row)| AssetRow {
                id: id.clone(),
                realized: row.ret,
                cap: row.mktcap,
                forecasts: Vec::new(),
            })
            .collect();
        let universe = filter_universe(&CrossSection::new(month, prelim)?, cfg.universe)?;
        let rows = universe
            .assets()
            .iter()
            .map(|a| {
                let cell = forecasts.get(month, &a.id).unwrap_or_else(|| vec![None; k]);
                let mut vals = Vec::with_capacity(k);
                for (e, v) in cell.iter().enumerate() {
                    match v {
                        Some(x) => vals.push(*x),
                        None => {
                            return Err(CliError::Data(format!(
                                "expert {} has no forecast for asset {} at {month}",
                                expert_names[e], a.id
                            )))
                        }
                    }
                }
                Ok(AssetRow { id: a.id.clone(), realized: a.realized, cap: a.cap, forecasts: vals })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let cs = CrossSection::new(month, rows)?;

        let mut month_long = Vec::with_capacity(k);
        let mut month_short = Vec::with_capacity(k);
        for e in 0..k {
            let (leg, ret) = build_leg(&cs, e, Side::Long, cfg.weighting)?;
            long_streams[e].push(ret);
            month_long.push(leg);
            let (leg, ret) = build_leg(&cs, e, Side::Short, cfg.weighting)?;
            short_streams[e].push(ret);
            month_short.push(leg);
        }
        legs_long.push(month_long);
        legs_short.push(month_short);

        let (leg, ret) = target_leg(&cs, Side::Long, cfg.weighting)?;
        long_targets.push(ret);
        target_legs_long.push(leg);
        let (leg, ret) = target_leg(&cs, Side::Short, cfg.weighting)?;
        short_targets.push(ret);
        target_legs_short.push(leg);

        rets.push(cs.assets().iter().map(|a| (a.id.clone(), a.realized)).collect());
    }

    Ok(Engine {
        cfg: cfg.clone(),
        expert_names,
        forecast_months: prepared.forecast_months,
        reported_months: prepared.reported_months,
        long_streams,
        short_streams,
        long_targets,
        short_targets,
        legs_long,
        legs_short,
        target_legs_long,
        target_legs_short,
        rets,
    })
}

impl Engine {
    pub fn n_experts(&self) -> usize {
        self.expert_names.len()
    }

    /// Aggregate both legs under `rule` with the configured loss and
    /// pretraining window.
    pub fn aggregate(&self, rule: Rule) -> Result<DualAggregation, CliError> {
        self.aggregate_subset(rule, &(0..self.n_experts()).collect::<Vec<_>>())
    }

    /// Aggregation restricted to the experts in `keep` (ascending indices),
    /// as used by leave-one-out importance.
    pub fn aggregate_subset(&self, rule: Rule, keep: &[usize]) -> Result<DualAggregation, CliError> {
        let pick = |streams: &[Vec<f64>]| -> Vec<Vec<f64>> {
            keep.iter().map(|&e| streams[e].clone()).collect()
        };
        Ok(aggfolio_core::portfolio::long_short_aggregate(
            &pick(&self.long_streams),
            &pick(&self.short_streams),
            &self.long_targets,
            &self.short_targets,
            rule,
            self.cfg.loss,
            self.cfg.pretrain_months,
        )?)
    }

    /// Universe returns aligned with the reported books: entry t covers the
    /// holding period of the book formed at reported month t.
    pub fn reported_rets(&self) -> &[BTreeMap<String, f64>] {
        &self.rets[self.cfg.pretrain_months..]
    }

    fn leg_book(leg: &LegHoldings) -> BTreeMap<String, f64> {
        leg.weights.iter().cloned().collect()
    }

    /// One expert's long-short series over the reported months, with signed
    /// books for turnover accounting.
    pub fn expert_series(&self, e: usize) -> StrategySeries {
        let p = self.cfg.pretrain_months;
        let span = p..self.forecast_months.len();
        let returns: Vec<f64> =
            span.clone().map(|t| self.long_streams[e][t] - self.short_streams[e][t]).collect();
        let books = span
            .map(|t| {
                signed_book(
                    &Self::leg_book(&self.legs_long[t][e]),
                    &Self::leg_book(&self.legs_short[t][e]),
                )
            })
            .collect();
        let mut s =
            StrategySeries::new(self.expert_names[e].clone(), self.reported_months.clone(), returns);
        s.books = Some(books);
        s
    }

    /// The perfect-foresight decile strategy over the reported months.
    pub fn target_series(&self) -> StrategySeries {
        let p = self.cfg.pretrain_months;
        let span = p..self.forecast_months.len();
        let returns: Vec<f64> =
            span.clone().map(|t| self.long_targets[t] - self.short_targets[t]).collect();
        let books = span
            .map(|t| {
                signed_book(
                    &Self::leg_book(&self.target_legs_long[t]),
                    &Self::leg_book(&self.target_legs_short[t]),
                )
            })
            .collect();
        let mut s = StrategySeries::new("Target", self.reported_months.clone(), returns);
        s.books = Some(books);
        s
    }

    /// Blended long and short books at reported index `t`, using the weights
    /// the run applied at that step. `keep` names the expert indices the run
    /// was built from, in order.
    pub fn blended_books(
        &self,
        dual: &DualAggregation,
        keep: &[usize],
        t: usize,
    ) -> Result<(BTreeMap<String, f64>, BTreeMap<String, f64>), CliError> {
        let abs = self.cfg.pretrain_months + t;
        let pick = |legs: &[LegHoldings]| -> Vec<LegHoldings> {
            keep.iter().map(|&e| legs[e].clone()).collect()
        };
        let long = blend_holdings(
            &pick(&self.legs_long[abs]),
            dual.long.weights_applied(t).as_slice(),
        )?;
        let short = blend_holdings(
            &pick(&self.legs_short[abs]),
            dual.short.weights_applied(t).as_slice(),
        )?;
        Ok((long, short))
    }

    /// Aggregated long-short series with blended signed books.
    pub fn blended_series(
        &self,
        label: &str,
        dual: &DualAggregation,
        keep: &[usize],
    ) -> Result<StrategySeries, CliError> {
        let mut books = Vec::with_capacity(self.reported_months.len());
        for t in 0..self.reported_months.len() {
            let (long, short) = self.blended_books(dual, keep, t)?;
            books.push(signed_book(&long, &short));
        }
        let mut s =
            StrategySeries::new(label, self.reported_months.clone(), dual.long_short.clone());
        s.books = Some(books);
        Ok(s)
    }
}

/// In-memory backtest report: file name to rendered bytes, plus the stats
/// table for callers that post-process it.
pub struct BacktestOutput {
    pub files: BTreeMap<String, Vec<u8>>,
    pub stats: Vec<(String, PortfolioStats)>,
    pub main_label: &'static str,
}

pub fn run_backtest(cfg: &ExperimentConfig) -> Result<BacktestOutput, CliError> {
    let engine = build_engine(cfg)?;
    let k = engine.n_experts();
    let all: Vec<usize> = (0..k).collect();
    let main_label = rule_label(cfg.rule);

    let main = engine.aggregate(cfg.rule)?;
    // The uniform baseline always ships with the report; when the configured
    // rule already is the baseline one series suffices.
    let baseline = match cfg.rule {
        Rule::Uni => None,
        _ => Some(engine.aggregate(Rule::Uni)?),
    };

    let mut series: Vec<StrategySeries> = Vec::new();
    series.push(engine.blended_series(main_label, &main, &all)?);
    if let Some(uni) = &baseline {
        series.push(engine.blended_series("PtfUNI", uni, &all)?);
    }
    series.push(engine.target_series());
    for e in 0..k {
        series.push(engine.expert_series(e));
    }
    let n_strategies = series.len();

    // Per-leg mixture sub-series ride along in series.csv without turnover
    // accounting of their own.
    series.push(StrategySeries::new(
        format!("{main_label}_long"),
        engine.reported_months.clone(),
        main.long.mixture_series(),
    ));
    series.push(StrategySeries::new(
        format!("{main_label}_short"),
        engine.reported_months.clone(),
        main.short.mixture_series(),
    ));

    let universe_rets = engine.reported_rets();
    let mut stats = Vec::with_capacity(n_strategies);
    for s in &series[..n_strategies] {
        let turnover = s.monthly_turnover_series(universe_rets);
        stats.push((
            s.label.clone(),
            summarize_full(&s.returns, PERIODS_PER_YEAR, cfg.drawdown_mode, turnover.as_deref())?,
        ));
    }

    let mut holdings = Vec::with_capacity(2 * engine.reported_months.len());
    for (t, &month) in engine.reported_months.iter().enumerate() {
        let (long, short) = engine.blended_books(&main, &all, t)?;
        holdings.push((month, main_label.to_string(), Side::Long, long));
        holdings.push((month, main_label.to_string(), Side::Short, short));
    }

    let mut files = BTreeMap::new();
    let mut buf = Vec::new();
    write_series_csv(&mut buf, &series)?;
    files.insert("series.csv".to_string(), buf);

    let mut buf = Vec::new();
    write_weights_csv(&mut buf, &engine.reported_months, &engine.expert_names, &main.long)?;
    files.insert("weights_long.csv".to_string(), buf);

    let mut buf = Vec::new();
    write_weights_csv(&mut buf, &engine.reported_months, &engine.expert_names, &main.short)?;
    files.insert("weights_short.csv".to_string(), buf);

    let mut buf = Vec::new();
    write_holdings_csv(&mut buf, &holdings)?;
    files.insert("holdings.csv".to_string(), buf);

    let mut buf = Vec::new();
    write_stats_csv(&mut buf, &stats)?;
    files.insert("stats.csv".to_string(), buf);

    files.insert(
        "summary.txt".to_string(),
        render_summary(cfg, &engine, &stats, &main, main_label).into_bytes(),
    );

    Ok(BacktestOutput { files, stats, main_label })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn render_summary(
    cfg: &ExperimentConfig,
    engine: &Engine,
    stats: &[(String, PortfolioStats)],
    main: &DualAggregation,
    main_label: &str,
) -> String {
    let mut s = String::new();
    let first = engine.reported_months.first().map(|m| m.to_string()).unwrap_or_default();
    let last = engine.reported_months.last().map(|m| m.to_string()).unwrap_or_default();
    let _ = writeln!(s, "decile long-short backtest: {main_label}");
    let _ = writeln!(
        s,
        "months: {first}..{last} ({} reported, {} pretrain)",
        engine.reported_months.len(),
        cfg.pretrain_months
    );
    let _ = writeln!(
        s,
        "rule: {:?}; loss: {:?}; weighting: {:?}; universe: {:?}",
        cfg.rule, cfg.loss, cfg.weighting, cfg.universe
    );
    let _ = writeln!(s, "experts ({}): {}", engine.n_experts(), engine.expert_names.join(", "));
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:<24} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "strategy", "ann_ret", "ann_vol", "sharpe", "max_dd", "turnover"
    );
    for (label, st) in stats {
        let _ = writeln!(
            s,
            "{label:<24} {:>9.4} {:>9.4} {:>9} {:>9.4} {:>9}",
            st.ann_return,
            st.ann_vol,
            fmt_opt(st.sharpe),
            st.max_drawdown,
            fmt_opt(st.avg_annual_turnover),
        );
    }
    let _ = writeln!(s);
    for (side, run) in [("long", &main.long), ("short", &main.short)] {
        let weights = run.weights_applied(run.len()).as_slice();
        let rendered: Vec<String> = engine
            .expert_names
            .iter()
            .zip(weights)
            .map(|(name, w)| format!("{name}={w:.4}"))
            .collect();
        let _ = writeln!(s, "final {side} weights: {}", rendered.join(" "));
    }
    s
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut hex = String::with_capacity(64);
    for b in digest {
        let _ = write!(hex, "{b:02x}");
    }
    hex
}

#[derive(Serialize)]
struct FileDigest {
    sha256: String,
    bytes: usize,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool_version: &'static str,
    seed: u64,
    config_sha256: String,
    config: &'a ExperimentConfig,
    files: BTreeMap<&'a str, FileDigest>,
}

/// Reproducibility record: tool version, master seed, a digest of the
/// canonical config encoding, the config itself, and a digest per report
/// file. Deliberately carries no timestamps so reruns are byte-identical.
pub fn build_manifest(
    cfg: &ExperimentConfig,
    files: &BTreeMap<String, Vec<u8>>,
) -> Result<Vec<u8>, CliError> {
    let canonical =
        serde_json::to_vec(cfg).map_err(|e| CliError::Data(format!("config digest: {e}")))?;
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config_sha256: sha256_hex(&canonical),
        config: cfg,
        files: files
            .iter()
            .map(|(name, bytes)| {
                (name.as_str(), FileDigest { sha256: sha256_hex(bytes), bytes: bytes.len() })
            })
            .collect(),
    };
    let mut bytes =
        serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::Data(format!("manifest: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Write every report file under `dir`, removing this run's partial output
/// if any single write fails.
pub fn write_files(dir: &Path, files: &BTreeMap<String, Vec<u8>>) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Data(format!("creating {}: {e}", dir.display())))?;
    let mut written = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let path = dir.join(name);
        if let Err(e) = std::fs::write(&path, bytes) {
            let message = format!("writing {}: {e}", path.display());
            let _ = std::fs::remove_file(&path);
            for earlier in &written {
                let _ = std::fs::remove_file(earlier);
            }
            return Err(CliError::Data(message));
        }
        written.push(path);
    }
    Ok(())
}

pub fn cmd_backtest(cfg: &ExperimentConfig) -> Result<String, CliError> {
    let out_dir = cfg.resolve_output_dir()?;
    let output = run_backtest(cfg)?;
    let mut files = output.files;
    let manifest = build_manifest(cfg, &files)?;
    files.insert("manifest.json".to_string(), manifest);
    write_files(&out_dir, &files)?;
    Ok(format!(
        "{}: wrote {} report files to {}",
        output.main_label,
        files.len(),
        out_dir.display()
    ))
}
