//! Experiment configuration (TOML, versioned, unknown keys rejected).

use std::path::{Path, PathBuf};

use featlab::model::{default_sigma0, init_weights, InitSpec, WeightMatrix};
use featlab::optim::OptimizerConfig;
use featlab::synthgen::{generate, make_basis, BasisMode, Dataset, DistributionSpec, FeatureBasis};
use featlab::useful::UsefulConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Offsets that derive the test-set and initialization seeds from a run seed.
pub const TEST_SEED_OFFSET: u64 = 1_000_003;
pub const INIT_SEED_OFFSET: u64 = 2_000_003;

fn three() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub d: usize,
    #[serde(default = "three")]
    pub patches: usize,
    pub beta_e: f64,
    pub beta_d: f64,
    pub alpha: f64,
    pub sigma_p: f64,
    pub n_train: usize,
    #[serde(default)]
    pub n_test: usize,
    #[serde(default)]
    pub orthogonalize_noise: bool,
    #[serde(default)]
    pub basis: Option<BasisMode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub filters: usize,
    /// Defaults to `sqrt(ln d / d)`.
    #[serde(default)]
    pub sigma_0: Option<f64>,
    #[serde(default)]
    pub enforce_positive_projections: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json]
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default = "one")]
    pub test_every: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: default_dir(),
            formats: default_formats(),
            checkpoint_every: None,
            test_every: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckName {
    Gap,
    Order,
    Factor,
    Ratio,
    Recursion,
}

impl CheckName {
    pub fn name(self) -> &'static str {
        match self {
            CheckName::Gap => "gap",
            CheckName::Order => "order",
            CheckName::Factor => "factor",
            CheckName::Ratio => "ratio",
            CheckName::Recursion => "recursion",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    /// Crossing threshold for the gap and order checks; `1 / beta_e` when absent.
    pub threshold: Option<f64>,
    pub slow_multiple: f64,
    pub recursion_instances: usize,
    pub factor_instances: usize,
    pub factor_filters: usize,
    pub factor_examples: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            threshold: None,
            slow_multiple: featlab::harness::DEFAULT_SLOW_MULTIPLE,
            recursion_instances: 1000,
            factor_instances: 50,
            factor_filters: 4,
            factor_examples: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrumSection {
    pub k: usize,
    pub steps: usize,
    /// Lanczos start-vector seed; the run seed when absent.
    pub lanczos_seed: Option<u64>,
    pub subsample: Option<usize>,
    /// Defaults to the final weights written by `train`.
    pub checkpoint: Option<PathBuf>,
    pub dense_oracle: bool,
}

impl Default for SpectrumSection {
    fn default() -> Self {
        SpectrumSection {
            k: 5,
            steps: 50,
            lanczos_seed: None,
            subsample: None,
            checkpoint: None,
            dense_oracle: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub useful: Option<UsefulConfig>,
    #[serde(default)]
    pub outputs: OutputSection,
    #[serde(default)]
    pub checks: Vec<CheckName>,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub spectrum: SpectrumSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.seeds.is_empty() {
            return bad("seeds must list at least one seed".into());
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return bad("seeds contain duplicates".into());
        }
        self.distribution(self.dataset.n_train, 0)
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.model.filters == 0 {
            return bad("model.filters must be >= 1".into());
        }
        self.init_spec(0)
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.optimizer.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.outputs.formats.is_empty() {
            return bad("outputs.formats must not be empty".into());
        }
        if self.outputs.test_every == 0 || self.outputs.checkpoint_every == Some(0) {
            return bad("outputs.test_every and outputs.checkpoint_every must be >= 1".into());
        }
        if let Some(u) = &self.useful {
            if u.factor == 0 {
                return bad("useful.factor must be >= 1".into());
            }
        }
        if self.spectrum.k == 0 || self.spectrum.steps < self.spectrum.k {
            return bad(format!(
                "spectrum needs steps >= k >= 1 (k = {}, steps = {})",
                self.spectrum.k, self.spectrum.steps
            ));
        }
        Ok(())
    }

    /// Replaces the seed list and/or output directory.
    pub fn with_overrides(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            self.seeds = vec![s];
        }
        if let Some(dir) = out {
            self.outputs.dir = dir;
        }
        self
    }

    pub fn sigma_0(&self) -> f64 {
        self.model.sigma_0.unwrap_or_else(|| default_sigma0(self.dataset.d))
    }

    pub fn distribution(&self, n: usize, seed: u64) -> DistributionSpec {
        let s = &self.dataset;
        DistributionSpec {
            d: s.d,
            patches: s.patches,
            beta_e: s.beta_e,
            beta_d: s.beta_d,
            alpha: s.alpha,
            sigma_p: s.sigma_p,
            n,
            seed,
            orthogonalize_noise: s.orthogonalize_noise,
        }
    }

    pub fn basis(&self) -> Result<FeatureBasis, CliError> {
        let mode = self.dataset.basis.unwrap_or(BasisMode::Canonical);
        make_basis(self.dataset.d, mode).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn train_set(&self, seed: u64) -> Result<Dataset, CliError> {
        let spec = self.distribution(self.dataset.n_train, seed);
        generate(&spec, &self.basis()?).map_err(|e| CliError::runtime("generating training data", e))
    }

    pub fn test_set(&self, seed: u64) -> Result<Option<Dataset>, CliError> {
        if self.dataset.n_test == 0 {
            return Ok(None);
        }
        let spec = self.distribution(self.dataset.n_test, seed.wrapping_add(TEST_SEED_OFFSET));
        generate(&spec, &self.basis()?)
            .map(Some)
            .map_err(|e| CliError::runtime("generating test data", e))
    }

    pub fn init_spec(&self, seed: u64) -> InitSpec {
        InitSpec {
            sigma_0: self.sigma_0(),
            seed: seed.wrapping_add(INIT_SEED_OFFSET),
            enforce_positive_projections: self.model.enforce_positive_projections,
        }
    }

    pub fn initial_weights(&self, seed: u64, basis: &FeatureBasis) -> Result<WeightMatrix, CliError> {
        init_weights(&self.init_spec(seed), self.model.filters, self.dataset.d, basis)
            .map_err(|e| CliError::runtime("initializing weights", e))
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.outputs.dir.join(format!("seed-{seed}"))
    }

    pub fn wants(&self, f: Format) -> bool {
        self.outputs.formats.contains(&f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
seeds = [0]

[dataset]
d = 10
beta_e = 1.0
beta_d = 0.2
alpha = 0.9
sigma_p = 0.5
n_train = 20

[model]
filters = 3

[optimizer]
kind = "gd"
eta = 0.1
iterations = 5
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.dataset.patches, 3);
        assert_eq!(cfg.outputs.formats, vec![Format::Csv, Format::Json]);
        assert_eq!(cfg.spectrum.k, 5);
        assert!(cfg.checks.is_empty());
        assert!((cfg.sigma_0() - default_sigma0(10)).abs() < 1e-15);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let typo = MINIMAL.replace("beta_e = 1.0", "beta_e = 1.0\nbeta_f = 2.0");
        let err = ExperimentConfig::from_toml_str(&typo).unwrap_err().to_string();
        assert!(err.contains("beta_f"), "{err}");
        let top = format!("extra = 1\n{MINIMAL}");
        assert!(ExperimentConfig::from_toml_str(&top).is_err());
    }

    #[test]
    fn unknown_check_lists_valid_names() {
        let cfg = MINIMAL.replace("seeds = [0]", "seeds = [0]\nchecks = [\"gap\", \"bogus\"]");
        let err = ExperimentConfig::from_toml_str(&cfg).unwrap_err().to_string();
        for name in ["gap", "order", "factor", "ratio", "recursion"] {
            assert!(err.contains(name), "{err}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        for (from, to) in [
            ("schema_version = 1", "schema_version = 2"),
            ("seeds = [0]", "seeds = []"),
            ("seeds = [0]", "seeds = [1, 1]"),
            ("alpha = 0.9", "alpha = 1.5"),
            ("filters = 3", "filters = 0"),
            ("eta = 0.1", "eta = -0.1"),
        ] {
            let text = MINIMAL.replace(from, to);
            assert!(ExperimentConfig::from_toml_str(&text).is_err(), "{to}");
        }
    }

    #[test]
    fn useful_and_basis_sections_parse() {
        let text = format!("{MINIMAL}\n[useful]\nfactor = 3\nseparating = {{ fixed = {{ iteration = 4 }} }}\n")
            .replace("n_train = 20", "n_train = 20\nbasis = { rotated = { seed = 5 } }");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg.useful.unwrap().factor, 3);
        assert_eq!(cfg.dataset.basis, Some(BasisMode::Rotated { seed: 5 }));
    }

    #[test]
    fn seeds_are_derived_and_overridable() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL)
            .unwrap()
            .with_overrides(Some(7), Some(PathBuf::from("x")));
        assert_eq!(cfg.seeds, vec![7]);
        assert_eq!(cfg.seed_dir(7), PathBuf::from("x/seed-7"));
        assert_ne!(cfg.init_spec(7).seed, 7);
    }
}
