//! Experiment configuration: a versioned JSON document with strict schema
//! validation. Unknown keys are rejected so drifting experiment definitions
//! fail loudly instead of silently changing meaning.

use crate::synth::SyntheticConfig;
use crate::CliError;
use aggfolio_core::aggregation::Rule;
use aggfolio_core::experts::{ExpertKind, ExpertSpec};
use aggfolio_core::loss::LossKind;
use aggfolio_core::metrics::DrawdownMode;
use aggfolio_core::portfolio::{UniverseSelector, Weighting};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

/// Schema version this build understands.
pub const CONFIG_VERSION: u32 = 1;

/// Fallback output directory when the config has none.
pub const OUTPUT_DIR_ENV: &str = "AGGFOLIO_OUTPUT_DIR";

/// Where the return panel comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// CSV panel plus its feature-frequency schema sidecar.
    Panel { csv: PathBuf, schema: PathBuf },
    /// Generated in-process from seeded factor-plus-noise dynamics.
    Synthetic(SyntheticConfig),
}

/// Bagging block: replace each named base expert with seeded subsample
/// replicas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaggingConfig {
    pub bases: Vec<String>,
    pub replicas: usize,
    pub fraction: f64,
    /// Derived from the master seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Walk-forward schedule parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub start_year: i32,
    pub train_years: u32,
    pub validation_years: u32,
    pub final_test_year: i32,
}

fn default_universe() -> UniverseSelector {
    UniverseSelector::All
}

/// The complete experiment definition. One master seed drives every random
/// choice through named sub-streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub data: DataSource,
    pub experts: Vec<ExpertSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bagging: Option<BaggingConfig>,
    pub schedule: ScheduleConfig,
    pub weighting: Weighting,
    #[serde(default = "default_universe")]
    pub universe: UniverseSelector,
    pub rule: Rule,
    pub loss: LossKind,
    /// Months immediately before the first test month used only to warm the
    /// aggregation weights.
    #[serde(default)]
    pub pretrain_months: usize,
    /// Grid step for the verification oracle; per-K default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_step: Option<f64>,
    #[serde(default)]
    pub drawdown_mode: DrawdownMode,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "config version {} not supported; this build expects {CONFIG_VERSION}",
                self.version
            )));
        }
        if self.experts.is_empty() {
            return Err(CliError::Config("at least one expert is required".to_string()));
        }
        let mut names = BTreeSet::new();
        for spec in &self.experts {
            spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
            if !names.insert(spec.name.as_str()) {
                return Err(CliError::Config(format!("duplicate expert name {}", spec.name)));
            }
        }
        if let Some(bagging) = &self.bagging {
            if bagging.bases.is_empty() {
                return Err(CliError::Config("bagging block lists no base experts".to_string()));
            }
            if bagging.replicas == 0 {
                return Err(CliError::Config("bagging needs at least one replica".to_string()));
            }
            if !(bagging.fraction > 0.0 && bagging.fraction <= 1.0) {
                return Err(CliError::Config(format!(
                    "bagging fraction must lie in (0, 1], got {}",
                    bagging.fraction
                )));
            }
            for base in &bagging.bases {
                match self.experts.iter().find(|s| &s.name == base) {
                    None => {
                        return Err(CliError::Config(format!(
                            "bagging base {base} does not name a configured expert"
                        )))
                    }
                    Some(spec) if !matches!(spec.kind, ExpertKind::LinearHuber(_)) => {
                        return Err(CliError::Config(format!(
                            "bagging base {base} is not a trainable expert"
                        )))
                    }
                    Some(_) => {}
                }
            }
        }
        if let Some(step) = self.oracle_step {
            if !(step > 0.0 && step <= 1.0) {
                return Err(CliError::Config(format!(
                    "oracle_step must lie in (0, 1], got {step}"
                )));
            }
        }
        if let DataSource::Synthetic(synth) = &self.data {
            synth.validate().map_err(CliError::Config)?;
        }
        Ok(())
    }

    /// Output directory: explicit config value, else the environment
    /// variable, else an error.
    pub fn resolve_output_dir(&self) -> Result<PathBuf, CliError> {
        if let Some(dir) = &self.output_dir {
            return Ok(dir.clone());
        }
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => Ok(PathBuf::from(dir)),
            _ => Err(CliError::Config(format!(
                "no output directory: set output_dir in the config or the {OUTPUT_DIR_ENV} environment variable"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> serde_json::Value {
        serde_json::json!({
            "version": 1,
            "seed": 7,
            "output_dir": "out",
            "data": {"synthetic": {"assets": 50, "months": 60, "start": "1995-01"}},
            "experts": [
                {"name": "flat", "kind": {"constant": {"value": 0.0}}},
                {"name": "lin", "kind": {"linear_huber": {
                    "xi": 0.999, "learning_rate": 0.3, "epochs": 50, "l1": 0.0}}}
            ],
            "schedule": {"start_year": 1995, "train_years": 2, "validation_years": 1,
                         "final_test_year": 1999},
            "weighting": "equal",
            "rule": "boa_adaptive",
            "loss": "squared",
            "pretrain_months": 6
        })
    }

    #[test]
    fn minimal_config_parses_and_validates() {
        let cfg: ExperimentConfig = serde_json::from_value(minimal_json()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.universe, UniverseSelector::All);
        assert_eq!(cfg.drawdown_mode, DrawdownMode::LogCumulative);
        assert_eq!(cfg.oracle_step, None);
        assert_eq!(cfg.resolve_output_dir().unwrap(), PathBuf::from("out"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut json = minimal_json();
        json["mystery_knob"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ExperimentConfig>(json).is_err());
    }

    #[test]
    fn version_mismatch_is_a_config_error() {
        let mut json = minimal_json();
        json["version"] = serde_json::json!(2);
        let cfg: ExperimentConfig = serde_json::from_value(json).unwrap();
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }

    #[test]
    fn duplicate_expert_names_rejected() {
        let mut json = minimal_json();
        json["experts"][1]["name"] = serde_json::json!("flat");
        let cfg: ExperimentConfig = serde_json::from_value(json).unwrap();
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }

    #[test]
    fn bagging_base_must_resolve_and_be_trainable() {
        let mut json = minimal_json();
        json["bagging"] =
            serde_json::json!({"bases": ["nope"], "replicas": 2, "fraction": 0.8});
        let cfg: ExperimentConfig = serde_json::from_value(json.clone()).unwrap();
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));

        json["bagging"]["bases"] = serde_json::json!(["flat"]);
        let cfg: ExperimentConfig = serde_json::from_value(json.clone()).unwrap();
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));

        json["bagging"]["bases"] = serde_json::json!(["lin"]);
        let cfg: ExperimentConfig = serde_json::from_value(json).unwrap();
        cfg.validate().unwrap();
    }

    #[test]
    fn rule_and_loss_variants_parse() {
        let mut json = minimal_json();
        json["rule"] = serde_json::json!({"boa_fixed": {"eta": 0.5}});
        json["loss"] = serde_json::json!({"huber": {"xi": 2.0}});
        json["universe"] = serde_json::json!({"top_by_cap": 30});
        let cfg: ExperimentConfig = serde_json::from_value(json).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.universe, UniverseSelector::TopByCap(30));
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg: ExperimentConfig = serde_json::from_value(minimal_json()).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
