//! Run configuration: one TOML file per run, with command-line flags
//! layered on top.

use std::fmt;
use std::path::{Path, PathBuf};

use cace_core::data::Schema;
use cace_core::estimators::EstimatorConfig;
use cace_core::simulation::{calibrate_scenario, Scenario, StudyOptions};
use cace_core::weights::{required_fits, EstimandKind, ShareVariant};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<InputConfig>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub variance: VarianceConfig,
    #[serde(default)]
    pub output: OutputConfig,
    pub simulate: Option<SimulateConfig>,
    pub scenario: Option<Scenario>,
    /// Directory of the config file; relative paths resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Input file and its column mapping.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub path: PathBuf,
    #[serde(default = "default_cluster")]
    pub cluster: String,
    #[serde(default = "default_treat")]
    pub treat: String,
    #[serde(default = "default_receipt")]
    pub receipt: String,
    #[serde(default = "default_outcome")]
    pub outcome: String,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
}

fn default_cluster() -> String {
    "cluster".into()
}
fn default_treat() -> String {
    "treat".into()
}
fn default_receipt() -> String {
    "receipt".into()
}
fn default_outcome() -> String {
    "y".into()
}
fn default_delimiter() -> char {
    ','
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Defaults to all six estimators.
    pub estimators: Option<Vec<EstimandKind>>,
    #[serde(default)]
    pub wls: Vec<String>,
    #[serde(default)]
    pub logit_t: Vec<String>,
    #[serde(default)]
    pub logit_c: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SeMode {
    Adjusted,
    Unadjusted,
    #[default]
    Both,
}

impl SeMode {
    pub fn shows_adjusted(self) -> bool {
        self != SeMode::Unadjusted
    }

    pub fn shows_unadjusted(self) -> bool {
        self != SeMode::Adjusted
    }
}

impl fmt::Display for SeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SeMode::Adjusted => "adjusted",
            SeMode::Unadjusted => "unadjusted",
            SeMode::Both => "both",
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarianceConfig {
    #[serde(default)]
    pub se: SeMode,
    #[serde(default)]
    pub g_correction: bool,
    pub df_override: Option<f64>,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub share_variant: ShareVariant,
}

fn default_level() -> f64 {
    0.95
}

impl Default for VarianceConfig {
    fn default() -> Self {
        Self {
            se: SeMode::default(),
            g_correction: false,
            df_override: None,
            level: default_level(),
            share_variant: ShareVariant::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub threads: Option<usize>,
    pub estimators: Option<Vec<EstimandKind>>,
    #[serde(default = "default_truth_population")]
    pub truth_population: usize,
}

fn default_replications() -> usize {
    StudyOptions::default().replications
}
fn default_seed() -> u64 {
    StudyOptions::default().master_seed
}
fn default_truth_population() -> usize {
    StudyOptions::default().truth_population
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            replications: default_replications(),
            seed: default_seed(),
            threads: None,
            estimators: None,
            truth_population: default_truth_population(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub level: Option<f64>,
    pub g_correction: bool,
    pub se: Option<SeMode>,
}

fn config_error(message: impl Into<String>) -> CliError {
    CliError::new("config", message)
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| config_error(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &base)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(out) = &o.out {
            self.output.dir = Some(out.clone());
        }
        if let Some(level) = o.level {
            self.variance.level = level;
        }
        if o.g_correction {
            self.variance.g_correction = true;
        }
        if let Some(se) = o.se {
            self.variance.se = se;
        }
        if o.seed.is_some() || o.threads.is_some() {
            let sim = self.simulate.get_or_insert_with(SimulateConfig::default);
            if let Some(seed) = o.seed {
                sim.seed = seed;
            }
            if let Some(threads) = o.threads {
                sim.threads = Some(threads);
            }
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Output directory; defaults to `cace-out` in the working directory.
    pub fn output_dir(&self) -> PathBuf {
        self.output
            .dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("cace-out"))
    }

    pub fn estimators(&self) -> Vec<EstimandKind> {
        self.model
            .estimators
            .clone()
            .unwrap_or_else(|| EstimandKind::ALL.to_vec())
    }

    pub fn schema(&self) -> Result<Schema, CliError> {
        let input = self
            .input
            .as_ref()
            .ok_or_else(|| config_error("missing [input] section"))?;
        let mut s = Schema::new(&input.cluster, &input.treat, &input.receipt, &input.outcome);
        s.wls = self.model.wls.clone();
        s.logit_t = self.model.logit_t.clone();
        s.logit_c = self.model.logit_c.clone();
        s.delimiter = input.delimiter;
        Ok(s)
    }

    pub fn estimator_config(&self) -> EstimatorConfig {
        EstimatorConfig {
            level: self.variance.level,
            g_correction: self.variance.g_correction,
            share_variant: self.variance.share_variant,
            df_override: self.variance.df_override,
            ..EstimatorConfig::default()
        }
    }

    fn validate_common(&self) -> Result<(), CliError> {
        let level = self.variance.level;
        if !(level > 0.0 && level < 1.0) {
            return Err(config_error(format!("level = {level} must lie in (0, 1)")));
        }
        if let Some(df) = self.variance.df_override {
            if !(df >= 1.0) {
                return Err(config_error(format!(
                    "df_override = {df} must be at least 1"
                )));
            }
        }
        Ok(())
    }

    pub fn validate_estimate(&self) -> Result<(), CliError> {
        self.validate_common()?;
        self.schema()?;
        let kinds = self.estimators();
        if kinds.is_empty() {
            return Err(config_error("model.estimators is empty"));
        }
        let variant = self.variance.share_variant;
        if variant == ShareVariant::Average && kinds.contains(&EstimandKind::CaceTcRatio) {
            return Err(config_error(
                "share_variant = \"average\" applies only to the strata-share back-out, not to cace_tc_ratio",
            ));
        }
        for &kind in &kinds {
            let (needs_t, needs_c) = required_fits(kind, variant);
            if needs_t && self.model.logit_t.is_empty() {
                return Err(config_error(format!(
                    "{} needs treatment receipt-model covariates (model.logit_t is empty)",
                    kind.key()
                )));
            }
            if needs_c && self.model.logit_c.is_empty() {
                return Err(config_error(format!(
                    "{} needs control receipt-model covariates (model.logit_c is empty)",
                    kind.key()
                )));
            }
        }
        Ok(())
    }

    pub fn validate_diagnose(&self) -> Result<(), CliError> {
        self.validate_common()?;
        self.schema()?;
        if self.model.logit_t.is_empty() && self.model.logit_c.is_empty() {
            return Err(config_error(
                "diagnose needs at least one receipt-model covariate list (model.logit_t or model.logit_c)",
            ));
        }
        Ok(())
    }

    /// Validated scenario and study options for `simulate`.
    pub fn study(&self) -> Result<(Scenario, StudyOptions), CliError> {
        self.validate_common()?;
        let scenario = self
            .scenario
            .clone()
            .ok_or_else(|| config_error("missing [scenario] section"))?;
        scenario
            .validate()
            .map_err(|e| config_error(e.to_string()))?;
        calibrate_scenario(&scenario).map_err(|e| config_error(e.to_string()))?;
        let sim = self.simulate.clone().unwrap_or_default();
        if sim.replications < 2 {
            return Err(config_error("simulate.replications must be at least 2"));
        }
        if sim.threads == Some(0) {
            return Err(config_error("threads must be at least 1"));
        }
        let mut opts = StudyOptions {
            replications: sim.replications,
            master_seed: sim.seed,
            threads: sim.threads,
            truth_population: sim.truth_population,
            estimator: self.estimator_config(),
            ..StudyOptions::default()
        };
        if let Some(kinds) = sim.estimators {
            if kinds.is_empty() {
                return Err(config_error("simulate.estimators is empty"));
            }
            opts.kinds = kinds;
        }
        Ok((scenario, opts))
    }
}
