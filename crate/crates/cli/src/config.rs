//! TOML run configuration, flag overrides and the digest stamped into outputs.

use std::path::{Path, PathBuf};

use gridgp_core::experiment::{DsseSection, ExperimentConfig, SCHEMA_VERSION};
use gridgp_core::gp_recursive::Schedule;
use gridgp_core::hyper::GridSpec;
use gridgp_core::impute::{Method, ModelConfig};
use gridgp_core::kernel::{Hyperparameters, NoiseMode};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpSection {
    pub lengthscale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
    pub task_correlation: f64,
}

impl Default for GpSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            lengthscale: m.hp.lengthscale,
            signal_variance: m.hp.signal_variance,
            noise_variance: m.hp.noise_variance,
            task_correlation: m.rho,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub method: Method,
    pub schedule: Schedule,
    pub mode: NoiseMode,
    pub alpha: f64,
    pub basis_max: usize,
    pub standardize: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            method: Method::RgpG,
            schedule: m.schedule,
            mode: m.noise_mode,
            alpha: m.alpha,
            basis_max: m.basis_max,
            standardize: m.standardize,
        }
    }
}

/// External data. Anything left unset is synthesized from `[experiment]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputSection {
    pub measurements: Option<PathBuf>,
    /// Edge list `from,to`; nodes are numbered in sorted-label order.
    pub graph: Option<PathBuf>,
    pub task_signs: Option<Vec<f64>>,
    /// Replaces the generated PF model in `dsse`.
    pub pf_model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub checks: Vec<String>,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self { checks: crate::verify::CHECKS.iter().map(|s| s.to_string()).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub gp: GpSection,
    pub model: ModelSection,
    pub input: InputSection,
    pub tune: GridSpec,
    pub dsse: DsseSection,
    pub experiment: ExperimentConfig,
    pub verify: VerifySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 1,
            gp: GpSection::default(),
            model: ModelSection::default(),
            input: InputSection::default(),
            tune: GridSpec::default(),
            dsse: DsseSection::default(),
            experiment: ExperimentConfig::default(),
            verify: VerifySection::default(),
        }
    }
}

/// Flag values; `None` leaves the file or default value in place.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub method: Option<Method>,
    pub schedule: Option<Schedule>,
    pub mode: Option<NoiseMode>,
    pub alpha: Option<f64>,
    pub measurements: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    pub checks: Option<Vec<String>>,
}

impl RunConfig {
    /// Parses a config file; relative input paths resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let raw: toml::Table =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if raw.get("experiment").and_then(|e| e.get("seed")).is_some() {
            return Err(CliError::Config("set `seed` at the top level, not under [experiment]".into()));
        }
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.input.measurements, &mut cfg.input.graph, &mut cfg.input.pf_model].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Flag > file > default, then validation. The experiment section shares the top-level seed.
    pub fn merged(mut self, o: &Overrides) -> Result<Self, CliError> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(m) = o.method {
            self.model.method = m;
            self.experiment.model.methods = vec![m];
            if m != Method::Linear {
                self.dsse.inputs = vec![m];
            }
        }
        if let Some(s) = o.schedule {
            self.model.schedule = s;
        }
        if let Some(m) = o.mode {
            self.model.mode = m;
            self.experiment.model.mode = m;
        }
        if let Some(a) = o.alpha {
            self.model.alpha = a;
            self.experiment.model.alpha = a;
        }
        if o.measurements.is_some() {
            self.input.measurements.clone_from(&o.measurements);
        }
        if o.graph.is_some() {
            self.input.graph.clone_from(&o.graph);
        }
        if let Some(c) = &o.checks {
            self.verify.checks.clone_from(c);
        }
        self.experiment.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !(self.model.alpha.is_finite() && self.model.alpha >= 0.0) {
            return Err(CliError::Config(format!("alpha must be >= 0, got {}", self.model.alpha)));
        }
        self.model_config()?;
        self.experiment.validate().map_err(|e| CliError::Config(format!("[experiment]: {e}")))?;
        for c in &self.verify.checks {
            if !crate::verify::CHECKS.contains(&c.as_str()) {
                return Err(CliError::Config(format!(
                    "unknown check '{c}' (known: {})",
                    crate::verify::CHECKS.join(", ")
                )));
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let g = &self.gp;
        let hp = Hyperparameters::new(g.lengthscale, g.signal_variance, g.noise_variance)
            .map_err(|e| CliError::Config(format!("[gp]: {e}")))?;
        if !(g.task_correlation.abs() < 1.0) {
            return Err(CliError::Config(format!("task_correlation must lie in (-1, 1), got {}", g.task_correlation)));
        }
        Ok(ModelConfig {
            hp,
            rho: g.task_correlation,
            alpha: self.model.alpha,
            basis_max: self.model.basis_max,
            schedule: self.model.schedule,
            noise_mode: self.model.mode,
            standardize: self.model.standardize,
        })
    }

    /// SHA-256 of the subcommand name and the canonical JSON of the effective config.
    pub fn digest(&self, subcommand: &str) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(subcommand.as_bytes());
        h.update([0]);
        h.update(json.as_bytes());
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, CliError> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, text).unwrap();
        RunConfig::from_file(&p)
    }

    #[test]
    fn empty_file_is_defaults() {
        assert_eq!(parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(parse("colour = 1"), Err(CliError::Config(_))));
        assert!(matches!(parse("[gp]\nlength = 3.0"), Err(CliError::Config(_))));
        assert!(matches!(parse("[experiment.profile]\nwobble = 1"), Err(CliError::Config(_))));
    }

    #[test]
    fn type_errors_are_config_errors() {
        assert!(matches!(parse("seed = \"one\""), Err(CliError::Config(_))));
        assert!(matches!(parse("[model]\nmethod = \"kriging\""), Err(CliError::Config(_))));
    }

    #[test]
    fn experiment_seed_must_be_top_level() {
        assert!(matches!(parse("[experiment]\nseed = 4"), Err(CliError::Config(_))));
    }

    #[test]
    fn flags_override_file() {
        let cfg = parse("seed = 3\n[model]\nalpha = 0.2\nmethod = \"rgp\"").unwrap();
        let o = Overrides { method: Some(Method::RgpG), alpha: Some(0.05), ..Default::default() };
        let m = cfg.merged(&o).unwrap();
        assert_eq!(m.model.alpha, 0.05);
        assert_eq!(m.model.method, Method::RgpG);
        assert_eq!(m.seed, 3);
        assert_eq!(m.experiment.seed, 3);
        assert_eq!(m.model_config().unwrap().alpha, 0.05);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "[input]\nmeasurements = \"m.csv\"").unwrap();
        let cfg = RunConfig::from_file(&p).unwrap();
        assert_eq!(cfg.input.measurements.unwrap(), dir.path().join("m.csv"));
    }

    #[test]
    fn digest_tracks_content_and_subcommand() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.digest("impute"), b.digest("impute"));
        assert_ne!(a.digest("impute"), a.digest("tune"));
        b.gp.lengthscale += 1.0;
        assert_ne!(a.digest("impute"), b.digest("impute"));
    }

    #[test]
    fn bad_schema_version_and_check_names() {
        assert!(parse("schema_version = 9").unwrap().merged(&Overrides::default()).is_err());
        let o = Overrides { checks: Some(vec!["theorem9".into()]), ..Default::default() };
        assert!(RunConfig::default().merged(&o).is_err());
    }
}
