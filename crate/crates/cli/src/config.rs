//! The run configuration document and its command-line overrides.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ddescent_core::sweep::{expand_regime, RegimeConfig, RegimeSpec};
use ddescent_core::synthgen::Friedman1Spec;
use ddescent_core::vcf_ingest::IngestConfig;
use ddescent_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Which targets the test partition is scored against.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTarget {
    /// The targets stored in the dataset.
    #[default]
    Observed,
    /// The noise-free signal; synthetic data only.
    NoiseFree,
}

impl std::str::FromStr for EvalTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "observed" | "noisy" => Ok(EvalTarget::Observed),
            "noise_free" => Ok(EvalTarget::NoiseFree),
            _ => Err(Error::Config(format!(
                "evaluate_against must be observed or noise_free, got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emit {
    Csv,
    Svg,
    Json,
}

/// Friedman data shape; the generator seed comes from the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthData {
    pub n_samples: usize,
    pub n_features: usize,
    pub noise_sigma: f64,
}

impl Default for SynthData {
    fn default() -> Self {
        let d = Friedman1Spec::default();
        Self {
            n_samples: d.n_samples,
            n_features: d.n_features,
            noise_sigma: d.noise_sigma,
        }
    }
}

impl SynthData {
    pub fn spec(&self, seed: u64) -> Friedman1Spec {
        Friedman1Spec {
            n_samples: self.n_samples,
            n_features: self.n_features,
            noise_sigma: self.noise_sigma,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synth(SynthData),
    Ingest(IngestConfig),
    /// A dataset CSV as written by `synth` or `ingest`.
    Csv { path: PathBuf },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synth(SynthData::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub split_fraction: f64,
    /// Stratify the split on the targets; defaults to true when the targets
    /// are binary.
    pub stratify: Option<bool>,
    pub evaluate_against: EvalTarget,
    pub regimes: Vec<RegimeConfig>,
    pub replicates: usize,
    pub output_dir: PathBuf,
    pub emit: Vec<Emit>,
    pub workers: Option<usize>,
    /// Shape-classification tolerance; derived from replicate spread when
    /// unset.
    pub noise_tol: Option<f64>,
    pub log_x: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            split_fraction: 0.7,
            stratify: None,
            evaluate_against: EvalTarget::Observed,
            regimes: Vec::new(),
            replicates: 1,
            output_dir: PathBuf::from("out"),
            emit: vec![Emit::Csv, Emit::Svg, Emit::Json],
            workers: None,
            noise_tol: None,
            log_x: false,
        }
    }
}

fn safe_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

impl RunConfig {
    /// Parse a JSON document. Relative input paths are resolved against
    /// `base` (the directory holding the document).
    pub fn from_json(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        if let Some(base) = base {
            cfg.resolve_inputs(base);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path.parent()).map_err(|e| e.context(path.display()))
    }

    fn resolve_inputs(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data {
            DataConfig::Synth(_) => {}
            DataConfig::Ingest(ic) => {
                fix(&mut ic.vcf_dir);
                fix(&mut ic.metadata);
            }
            DataConfig::Csv { path } => fix(path),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config(format!(
                "split_fraction must lie in (0, 1), got {}",
                self.split_fraction
            )));
        }
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if let Some(t) = self.noise_tol {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("noise_tol must be finite and >= 0, got {t}")));
            }
        }
        match &self.data {
            DataConfig::Synth(s) => s.spec(self.seed).validate()?,
            _ if self.evaluate_against == EvalTarget::NoiseFree => {
                return Err(Error::Config(
                    "evaluate_against = noise_free needs synthetic data".into(),
                ))
            }
            _ => {}
        }
        Ok(())
    }

    /// Expanded regime grids; names must be unique and usable as file names.
    pub fn regime_specs(&self) -> Result<Vec<RegimeSpec>> {
        let specs: Vec<RegimeSpec> = self
            .regimes
            .iter()
            .map(|r| expand_regime(r, self.seed))
            .collect::<Result<_>>()?;
        let mut seen = BTreeSet::new();
        for s in &specs {
            if !safe_name(&s.name) {
                return Err(Error::Config(format!(
                    "regime name {:?} must use only letters, digits, '_', '-' and '.'",
                    s.name
                )));
            }
            if !seen.insert(s.name.as_str()) {
                return Err(Error::Config(format!("duplicate regime name {:?}", s.name)));
            }
        }
        Ok(specs)
    }

    pub fn emits(&self, e: Emit) -> bool {
        self.emit.contains(&e)
    }
}

/// Scalar fields settable from the command line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub replicates: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub split_fraction: Option<f64>,
    pub evaluate_against: Option<EvalTarget>,
    pub workers: Option<usize>,
    pub n_samples: Option<usize>,
    pub n_features: Option<usize>,
    pub noise_sigma: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.replicates {
            cfg.replicates = v;
        }
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.split_fraction {
            cfg.split_fraction = v;
        }
        if let Some(v) = self.evaluate_against {
            cfg.evaluate_against = v;
        }
        if let Some(v) = self.workers {
            cfg.workers = Some(v);
        }
        if self.n_samples.is_some() || self.n_features.is_some() || self.noise_sigma.is_some() {
            let mut s = match cfg.data {
                DataConfig::Synth(s) => s,
                _ => SynthData::default(),
            };
            if let Some(v) = self.n_samples {
                s.n_samples = v;
            }
            if let Some(v) = self.n_features {
                s.n_features = v;
            }
            if let Some(v) = self.noise_sigma {
                s.noise_sigma = v;
            }
            cfg.data = DataConfig::Synth(s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_round_trip() {
        let cfg = RunConfig::from_json("{}", None).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.split_fraction, 0.7);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text, None).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_fields_and_bad_values() {
        assert!(matches!(RunConfig::from_json(r#"{"sed": 1}"#, None), Err(Error::Config(_))));
        let bad = RunConfig {
            split_fraction: 1.0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = RunConfig {
            replicates: 0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let p4 = RunConfig::from_json(r#"{"data": {"synth": {"n_features": 4}}}"#, None).unwrap();
        assert!(matches!(p4.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn relative_inputs_follow_the_config_file() {
        let cfg = RunConfig::from_json(
            r#"{"data": {"ingest": {"vcf_dir": "vcf", "metadata": "/abs/meta.csv"}}}"#,
            Some(Path::new("/cfg")),
        )
        .unwrap();
        let DataConfig::Ingest(ic) = cfg.data else { panic!() };
        assert_eq!(ic.vcf_dir, Path::new("/cfg/vcf"));
        assert_eq!(ic.metadata, Path::new("/abs/meta.csv"));
    }

    #[test]
    fn regime_names_must_be_unique_and_safe() {
        let r = |name: &str| RegimeConfig {
            name: Some(name.into()),
            kind: "leaf_sweep".into(),
            ..Default::default()
        };
        let cfg = RunConfig {
            regimes: vec![r("a"), r("a")],
            ..Default::default()
        };
        assert!(matches!(cfg.regime_specs(), Err(Error::Config(_))));
        let cfg = RunConfig {
            regimes: vec![r("../x")],
            ..Default::default()
        };
        assert!(matches!(cfg.regime_specs(), Err(Error::Config(_))));
    }

    #[test]
    fn flags_override_config() {
        let mut cfg = RunConfig::from_json(r#"{"seed": 3, "replicates": 4}"#, None).unwrap();
        Overrides {
            seed: Some(9),
            noise_sigma: Some(0.5),
            ..Default::default()
        }
        .apply(&mut cfg);
        assert_eq!((cfg.seed, cfg.replicates), (9, 4));
        assert_eq!(cfg.data, DataConfig::Synth(SynthData { noise_sigma: 0.5, ..SynthData::default() }));
    }
}
