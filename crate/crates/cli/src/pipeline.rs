//! Forecast production: expand bagged experts, train linear models per
//! walk-forward window, synthesize oracle and constant forecasts, and ingest
//! external forecast files — all into one expert-ordered forecast panel.

use crate::config::{BaggingConfig, DataSource, ExperimentConfig, ScheduleConfig};
use crate::synth;
use crate::CliError;
use aggfolio_core::data::{build_schedule, load_panel, preprocess, Month, RawPanel, RefitSchedule};
use aggfolio_core::experts::{
    bag_experts, fill_constant, fill_noisy_oracle, ingest_forecasts, train_linear_huber,
    ExpertKind, ExpertSpec, ForecastPanel, LinearHuberSpec, LinearModel, Subsample,
};
use aggfolio_core::seed::derive_seed;
use rayon::prelude::*;
use std::collections::{BTreeMap, BTreeSet};

/// Per-expert sub-seed: an explicit spec seed wins, otherwise one is derived
/// from the master seed under the expert's name.
pub fn expert_seed(master_seed: u64, spec: &ExpertSpec) -> u64 {
    match &spec.kind {
        ExpertKind::NoisyOracle { seed: Some(seed), .. } => *seed,
        _ => derive_seed(master_seed, &format!("expert:{}", spec.name)),
    }
}

/// Replace each bagging base with its replicas, preserving expert order.
pub fn expand_experts(
    experts: &[ExpertSpec],
    bagging: Option<&BaggingConfig>,
    master_seed: u64,
) -> Result<Vec<ExpertSpec>, CliError> {
    let expanded = match bagging {
        None => experts.to_vec(),
        Some(bag) => {
            let bag_seed = bag.seed.unwrap_or_else(|| derive_seed(master_seed, "bagging"));
            let mut out = Vec::new();
            for spec in experts {
                if bag.bases.contains(&spec.name) {
                    out.extend(
                        bag_experts(spec, bag.replicas, bag.fraction, bag_seed)
                            .map_err(|e| CliError::Config(e.to_string()))?,
                    );
                } else {
                    out.push(spec.clone());
                }
            }
            out
        }
    };
    let mut names = BTreeSet::new();
    for spec in &expanded {
        if !names.insert(spec.name.clone()) {
            return Err(CliError::Config(format!(
                "expert name {} collides after bagging expansion",
                spec.name
            )));
        }
    }
    Ok(expanded)
}

/// Preprocessed panel plus the month spans the run will touch.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub panel: RawPanel,
    pub schedule: RefitSchedule,
    /// Pretrain months followed by every test month.
    pub forecast_months: Vec<Month>,
    /// The months whose portfolio returns are reported.
    pub reported_months: Vec<Month>,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData, CliError> {
    let raw = match &cfg.data {
        DataSource::Panel { csv, schema } => load_panel(csv, schema)?,
        DataSource::Synthetic(synth_cfg) => synth::generate(synth_cfg, cfg.seed)?,
    };
    let panel = preprocess(&raw)?;
    let ScheduleConfig { start_year, train_years, validation_years, final_test_year } =
        cfg.schedule;
    let schedule = build_schedule(start_year, train_years, validation_years, final_test_year)
        .map_err(|e| CliError::Config(e.to_string()))?;

    let first_test = schedule
        .first_test_month()
        .ok_or_else(|| CliError::Config("schedule has no windows".to_string()))?;
    let last_test = schedule.last_test_month().expect("non-empty schedule");
    let first_needed = first_test.plus_months(-(cfg.pretrain_months as i32));
    let panel_first = panel
        .first_month()
        .ok_or_else(|| CliError::Data("panel is empty after preprocessing".to_string()))?;
    let panel_last = panel.last_month().expect("non-empty panel");
    if first_needed < panel_first || last_test > panel_last {
        return Err(CliError::Data(format!(
            "panel covers {panel_first}..{panel_last} but the run needs {first_needed}..{last_test} \
             ({} pretrain months before the first test month)",
            cfg.pretrain_months
        )));
    }

    let total = last_test.months_since(first_needed) + 1;
    let forecast_months: Vec<Month> =
        (0..total).map(|i| first_needed.plus_months(i)).collect();
    let reported_months = forecast_months[cfg.pretrain_months..].to_vec();
    Ok(PreparedData { panel, schedule, forecast_months, reported_months })
}

/// Fill forecasts for experts that are synthesized rather than trained or
/// ingested. Returns whether the spec was one of those.
pub fn fill_synthetic_expert(
    forecasts: &mut ForecastPanel,
    panel: &RawPanel,
    months: &[Month],
    spec: &ExpertSpec,
    master_seed: u64,
) -> Result<bool, CliError> {
    match &spec.kind {
        ExpertKind::Constant { value } => {
            fill_constant(forecasts, panel, months, &spec.name, *value)?;
            Ok(true)
        }
        ExpertKind::NoisyOracle { schedule, .. } => {
            fill_noisy_oracle(
                forecasts,
                panel,
                months,
                &spec.name,
                schedule,
                expert_seed(master_seed, spec),
            )?;
            Ok(true)
        }
        _ => Ok(false),
    }
}

fn feature_vector(values: &[Option<f64>], asset: &str, month: Month) -> Result<Vec<f64>, CliError> {
    values
        .iter()
        .enumerate()
        .map(|(j, v)| {
            v.ok_or_else(|| {
                CliError::Data(format!(
                    "feature {j} missing for asset {asset} in {month} after preprocessing"
                ))
            })
        })
        .collect()
}

/// Training rows for one window: every (asset, month) in the train span that
/// the panel covers, feature vector as x and the row's forward return as y.
fn training_rows(
    panel: &RawPanel,
    train_span: (Month, Month),
) -> Result<(Vec<Vec<f64>>, Vec<f64>), CliError> {
    let (start, end) = train_span;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for month in panel.months().filter(|m| *m >= start && *m <= end) {
        for (asset, row) in panel.rows_at(month) {
            xs.push(feature_vector(&row.values, asset, month)?);
            ys.push(row.ret);
        }
    }
    if xs.is_empty() {
        return Err(CliError::Data(format!(
            "training span {start}..{end} holds no panel rows"
        )));
    }
    Ok((xs, ys))
}

/// Reseed a trainable spec for one window so bagged subsamples differ across
/// refits while staying reproducible.
fn reseed_for_window(spec: &LinearHuberSpec, test_year: i32) -> LinearHuberSpec {
    let subsample = spec.subsample.map(|sub| Subsample {
        fraction: sub.fraction,
        seed: derive_seed(sub.seed, &format!("window:{test_year}")),
    });
    LinearHuberSpec { subsample, ..spec.clone() }
}

/// Produce the full forecast panel for the run, expert slots in spec order.
///
/// Trainable experts are refit once per schedule window (in parallel) on the
/// window's train span and forecast that window's test year; the pretrain
/// months are forecast by the first window's fit, which is trained strictly
/// before them. Oracle and constant experts are synthesized over all months;
/// external files are ingested and copied.
pub fn produce_forecasts(
    panel: &RawPanel,
    schedule: &RefitSchedule,
    experts: &[ExpertSpec],
    forecast_months: &[Month],
    master_seed: u64,
) -> Result<ForecastPanel, CliError> {
    // Train-span rows are shared by every trainable expert.
    let trainable: Vec<usize> = experts
        .iter()
        .enumerate()
        .filter(|(_, s)| matches!(s.kind, ExpertKind::LinearHuber(_)))
        .map(|(i, _)| i)
        .collect();
    let mut fits: BTreeMap<(usize, usize), LinearModel> = BTreeMap::new();
    if !trainable.is_empty() {
        let window_rows: Vec<(Vec<Vec<f64>>, Vec<f64>)> = schedule
            .windows
            .iter()
            .map(|w| training_rows(panel, w.train_months()))
            .collect::<Result<_, _>>()?;
        let jobs: Vec<(usize, usize)> = trainable
            .iter()
            .flat_map(|&e| (0..schedule.windows.len()).map(move |w| (e, w)))
            .collect();
        let trained: Vec<((usize, usize), LinearModel)> = jobs
            .par_iter()
            .map(|&(e, w)| {
                let ExpertKind::LinearHuber(spec) = &experts[e].kind else { unreachable!() };
                let windowed = reseed_for_window(spec, schedule.windows[w].test_year);
                let (xs, ys) = &window_rows[w];
                train_linear_huber(xs, ys, &windowed)
                    .map(|model| ((e, w), model))
                    .map_err(|err| {
                        CliError::Data(format!("training expert {}: {err}", experts[e].name))
                    })
            })
            .collect::<Result<_, _>>()?;
        fits.extend(trained);
    }

    // Months before the first test year fall back to the first window's fit.
    let window_by_year: BTreeMap<i32, usize> =
        schedule.windows.iter().enumerate().map(|(i, w)| (w.test_year, i)).collect();
    let window_for_month = |m: Month| -> usize {
        window_by_year.get(&m.year()).copied().unwrap_or(0)
    };

    let mut forecasts = ForecastPanel::new();
    for (e, spec) in experts.iter().enumerate() {
        match &spec.kind {
            ExpertKind::LinearHuber(_) => {
                for &month in forecast_months {
                    let model = &fits[&(e, window_for_month(month))];
                    for (asset, row) in panel.rows_at(month) {
                        let x = feature_vector(&row.values, asset, month)?;
                        forecasts.insert(&spec.name, month, asset, model.predict(&x)?)?;
                    }
                }
            }
            ExpertKind::External { path } => {
                let file = std::fs::File::open(path).map_err(|err| {
                    CliError::Data(format!("cannot open forecast file {path}: {err}"))
                })?;
                let external = ingest_forecasts(file)?;
                let idx = external.expert_index(&spec.name).ok_or_else(|| {
                    CliError::Data(format!(
                        "forecast file {path} has no rows for expert {}",
                        spec.name
                    ))
                })?;
                for &month in forecast_months {
                    for (asset, _) in panel.rows_at(month) {
                        if let Some(value) =
                            external.get(month, asset).and_then(|cell| cell[idx])
                        {
                            forecasts.insert(&spec.name, month, asset, value)?;
                        }
                    }
                }
            }
            _ => {
                fill_synthetic_expert(&mut forecasts, panel, forecast_months, spec, master_seed)?;
            }
        }
    }
    Ok(forecasts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SyntheticConfig;
    use aggfolio_core::experts::NoiseSchedule;

    fn lin_spec(name: &str) -> ExpertSpec {
        ExpertSpec {
            name: name.to_string(),
            kind: ExpertKind::LinearHuber(LinearHuberSpec {
                xi: 0.999,
                learning_rate: 0.3,
                epochs: 60,
                l1: 0.0,
                subsample: None,
            }),
        }
    }

    #[test]
    fn bagging_expansion_preserves_order_and_rejects_collisions() {
        let experts = vec![
            ExpertSpec { name: "flat".into(), kind: ExpertKind::Constant { value: 0.0 } },
            lin_spec("lin"),
        ];
        let bag = BaggingConfig {
            bases: vec!["lin".to_string()],
            replicas: 2,
            fraction: 0.8,
            seed: None,
        };
        let out = expand_experts(&experts, Some(&bag), 7).unwrap();
        let names: Vec<&str> = out.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["flat", "lin_1", "lin_2"]);
        // Deterministic given the master seed.
        assert_eq!(out, expand_experts(&experts, Some(&bag), 7).unwrap());
        assert_ne!(out, expand_experts(&experts, Some(&bag), 8).unwrap());

        let colliding = vec![lin_spec("lin"), lin_spec("lin_1")];
        assert!(matches!(
            expand_experts(&colliding, Some(&bag), 7),
            Err(CliError::Config(_))
        ));
    }

    fn synth_config(pretrain: usize) -> ExperimentConfig {
        ExperimentConfig {
            version: 1,
            seed: 11,
            output_dir: None,
            data: DataSource::Synthetic(SyntheticConfig {
                assets: 30,
                months: 72,
                start: Month::from_parts(2000, 1).unwrap(),
                seed: None,
                factor_vol: 0.04,
                beta_spread: 0.3,
                signal_strength: 0.02,
                idio_vol: 0.05,
                obs_noise: 0.5,
                cap_spread: 1.5,
            }),
            experts: vec![lin_spec("lin")],
            bagging: None,
            schedule: ScheduleConfig {
                start_year: 2000,
                train_years: 2,
                validation_years: 1,
                final_test_year: 2005,
            },
            weighting: aggfolio_core::portfolio::Weighting::Equal,
            universe: aggfolio_core::portfolio::UniverseSelector::All,
            rule: aggfolio_core::aggregation::Rule::BoaAdaptive,
            loss: aggfolio_core::loss::LossKind::Squared,
            pretrain_months: pretrain,
            oracle_step: None,
            drawdown_mode: Default::default(),
        }
    }

    fn synth_prepared(pretrain: usize) -> (PreparedData, u64) {
        let cfg = synth_config(pretrain);
        (prepare_data(&cfg).unwrap(), cfg.seed)
    }

    #[test]
    fn prepared_months_cover_pretrain_plus_tests() {
        let (prepared, _) = synth_prepared(6);
        // Tests run 2003..2005; pretrain claims the back half of 2002.
        assert_eq!(prepared.forecast_months.len(), 6 + 36);
        assert_eq!(prepared.forecast_months[0], Month::from_parts(2002, 7).unwrap());
        assert_eq!(prepared.reported_months[0], Month::from_parts(2003, 1).unwrap());
        assert_eq!(
            *prepared.reported_months.last().unwrap(),
            Month::from_parts(2005, 12).unwrap()
        );
        assert_eq!(prepared.schedule.windows.len(), 3);
    }

    #[test]
    fn trained_forecasts_cover_every_asset_month() {
        let (prepared, seed) = synth_prepared(6);
        let experts = vec![
            lin_spec("lin"),
            ExpertSpec {
                name: "oracle".into(),
                kind: ExpertKind::NoisyOracle { schedule: NoiseSchedule::Constant(0.0), seed: None },
            },
        ];
        let fp = produce_forecasts(
            &prepared.panel,
            &prepared.schedule,
            &experts,
            &prepared.forecast_months,
            seed,
        )
        .unwrap();
        assert_eq!(fp.experts(), ["lin", "oracle"]);
        for &m in &prepared.forecast_months {
            for (asset, row) in prepared.panel.rows_at(m) {
                let cell = fp.get(m, asset).unwrap();
                assert!(cell[0].is_some(), "missing lin forecast {asset} {m}");
                assert_eq!(cell[1], Some(row.ret), "zero-noise oracle must echo returns");
            }
        }
        // Deterministic end to end.
        let fp2 = produce_forecasts(
            &prepared.panel,
            &prepared.schedule,
            &experts,
            &prepared.forecast_months,
            seed,
        )
        .unwrap();
        assert_eq!(fp, fp2);
    }

    #[test]
    fn trained_expert_finds_the_planted_signal() {
        // The linear fit on the ranked lagged signal should correlate
        // positively with realized returns out of sample.
        let (prepared, seed) = synth_prepared(0);
        let fp = produce_forecasts(
            &prepared.panel,
            &prepared.schedule,
            &[lin_spec("lin")],
            &prepared.forecast_months,
            seed,
        )
        .unwrap();
        let (mut sum_xy, mut sum_x2, mut sum_y2) = (0.0, 0.0, 0.0);
        for &m in &prepared.forecast_months {
            for (asset, row) in prepared.panel.rows_at(m) {
                let f = fp.get(m, asset).unwrap()[0].unwrap();
                sum_xy += f * row.ret;
                sum_x2 += f * f;
                sum_y2 += row.ret * row.ret;
            }
        }
        let corr = sum_xy / (sum_x2.sqrt() * sum_y2.sqrt());
        assert!(corr > 0.05, "out-of-sample correlation too weak: {corr}");
    }

    #[test]
    fn pretrain_longer_than_panel_head_is_a_data_error() {
        // 200 pretrain months reach far before the panel's first usable month.
        let cfg = synth_config(200);
        assert!(matches!(prepare_data(&cfg), Err(CliError::Data(_))));
    }
}
