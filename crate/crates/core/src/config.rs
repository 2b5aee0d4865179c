//! JSON experiment configuration.
//!
//! A run file names one causal-quantity kind, one data generator and a list
//! of strategies; every other field is optional and filled from
//! generator-dependent defaults by [`RunConfig::resolve`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acquisition::Strategy;
use crate::datagen::{Generator, TreatmentMode, DEFAULT_NOISE_SD, DEFAULT_ORACLE_SAMPLES};
use crate::error::{Error, Result};
use crate::estimators::CqKind;
use crate::harness::{CmeSettings, DataSettings, GpSettings, InterestSettings, McSettings, TrialConfig};

pub const SPEC_VERSION: i64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_version")]
    pub spec_version: i64,
    pub cq_kind: CqKind,
    pub generator: Generator,
    #[serde(default)]
    pub treatment_mode: Option<TreatmentMode>,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub noise_sd: Option<f64>,
    #[serde(default)]
    pub target_n: Option<usize>,
    #[serde(default)]
    pub covariates: Option<PathBuf>,
    #[serde(default)]
    pub strategies: Option<Vec<Strategy>>,
    #[serde(default)]
    pub warm_start: Option<usize>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub budget: Option<usize>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub interest: Option<InterestSettings>,
    #[serde(default)]
    pub mc: Option<McSettings>,
    #[serde(default)]
    pub gp: Option<GpSettings>,
    #[serde(default)]
    pub cme: Option<CmeSettings>,
    #[serde(default)]
    pub oracle_samples: Option<usize>,
    #[serde(default)]
    pub softmax_temperature: Option<f64>,
    #[serde(default)]
    pub record_wall_time: Option<bool>,
    /// Output directory; the `--out` flag takes precedence.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_version() -> i64 {
    SPEC_VERSION
}

fn schema_from_path(err: serde_path_to_error::Error<serde_json::Error>) -> Error {
    let path = err.path().to_string();
    let inner = err.into_inner();
    let message = inner.to_string();
    // Missing keys are reported at their parent; name the key itself.
    let missing = message.strip_prefix("missing field `").and_then(|m| m.split('`').next());
    let key = match missing {
        Some(field) if path == "." => field.to_string(),
        Some(field) => format!("{path}.{field}"),
        None => path,
    };
    Error::schema(key, message)
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: RunConfig = serde_path_to_error::deserialize(de).map_err(schema_from_path)?;
        config.resolve()
    }

    /// Fills every optional field and validates the result.
    pub fn resolve(mut self) -> Result<Self> {
        if self.spec_version != SPEC_VERSION {
            return Err(Error::Version(self.spec_version));
        }
        let simulation_scale = self.generator != Generator::Visualization;
        self.treatment_mode.get_or_insert(if simulation_scale {
            TreatmentMode::Binary
        } else {
            TreatmentMode::Continuous
        });
        self.n.get_or_insert(if simulation_scale { 600 } else { 500 });
        self.noise_sd.get_or_insert(DEFAULT_NOISE_SD);
        self.target_n.get_or_insert(500);
        self.strategies
            .get_or_insert_with(|| vec!["random".parse().unwrap(), "tvr_cme".parse().unwrap()]);
        self.warm_start.get_or_insert(if simulation_scale { 100 } else { 20 });
        self.batch_size.get_or_insert(5);
        self.budget.get_or_insert(if simulation_scale { 100 } else { 180 });
        self.seeds.get_or_insert_with(|| (0..20).collect());
        self.interest.get_or_insert_with(InterestSettings::default);
        self.mc.get_or_insert_with(McSettings::default);
        self.gp.get_or_insert_with(GpSettings::default);
        self.cme.get_or_insert_with(CmeSettings::default);
        self.oracle_samples.get_or_insert(DEFAULT_ORACLE_SAMPLES);
        self.record_wall_time.get_or_insert(false);

        let strategies = self.strategies.as_ref().unwrap();
        if strategies.is_empty() {
            return Err(Error::schema("strategies", "at least one strategy is required"));
        }
        for (i, s) in strategies.iter().enumerate() {
            if strategies[..i].contains(s) {
                return Err(Error::schema("strategies", format!("`{s}` is listed twice")));
            }
        }
        if let Some(t) = self.softmax_temperature {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::schema("softmax_temperature", "must be positive"));
            }
        }
        let noise = self.noise_sd.unwrap();
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(Error::schema("noise_sd", "must be non-negative"));
        }
        for trial in self.trial_configs() {
            trial.validate()?;
        }
        Ok(self)
    }

    /// One trial configuration per strategy. Call on a resolved config.
    pub fn trial_configs(&self) -> Vec<TrialConfig> {
        let data = DataSettings {
            generator: self.generator,
            treatment_mode: self.treatment_mode.expect("resolved config"),
            n: self.n.expect("resolved config"),
            noise_sd: self.noise_sd.expect("resolved config"),
            target_n: self.target_n.expect("resolved config"),
            covariates: self.covariates.clone(),
        };
        self.strategies
            .as_deref()
            .unwrap_or_default()
            .iter()
            .map(|&strategy| TrialConfig {
                cq_kind: self.cq_kind,
                data: data.clone(),
                strategy,
                warm_start: self.warm_start.unwrap(),
                batch_size: self.batch_size.unwrap(),
                budget: self.budget.unwrap(),
                interest: self.interest.clone().unwrap(),
                seeds: self.seeds.clone().unwrap(),
                mc: self.mc.clone().unwrap(),
                gp: self.gp.clone().unwrap(),
                cme: self.cme.clone().unwrap(),
                oracle_samples: self.oracle_samples.unwrap(),
                softmax_temperature: self.softmax_temperature,
                record_wall_time: self.record_wall_time.unwrap(),
            })
            .collect()
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Reads, validates and resolves a run file.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    RunConfig::from_json(&text)
}
