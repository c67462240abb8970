use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use prodg::backends::toy::ToyWorldConfig;
use prodg::backends::AdapterOptions;
use prodg::{BackendKinds, BankConfig, ExplainOptions, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::exit::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub workdir: PathBuf,
    /// Relative paths resolve against the workdir.
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { workdir: "prodg-run".into(), checkpoints: "checkpoints".into(), reports: "reports".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscoveryConfig {
    pub class_names: Vec<String>,
    /// One UTF-8 name per line; takes precedence over `class_names`.
    pub class_names_file: Option<PathBuf>,
    pub images_per_class: usize,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self { class_names: Vec::new(), class_names_file: None, images_per_class: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub fixed_seed: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_samples: 8, fixed_seed: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub inputs: usize,
    pub logit_tolerance: f64,
    pub orthogonality_tolerance: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { inputs: 256, logit_tolerance: 1e-4, orthogonality_tolerance: 1e-5 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendSection {
    #[serde(flatten)]
    pub kinds: BackendKinds,
    pub options: AdapterOptions,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub backends: BackendSection,
    pub toy: ToyWorldConfig,
    pub bank: BankConfig,
    pub discovery: DiscoveryConfig,
    pub train: TrainConfig,
    pub explain: ExplainOptions,
    pub eval: EvalConfig,
    pub verify: VerifyConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn workdir(&self) -> &Path {
        &self.paths.workdir
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.paths.workdir.join(&self.paths.checkpoints)
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.paths.workdir.join(&self.paths.reports)
    }

    /// Checks everything that can be checked without building backends.
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        t.loss.validate().map_err(|e| UsageError(e.to_string()))?;
        if t.warmup > t.iterations {
            bail!(UsageError(format!("warmup {} exceeds iterations {}", t.warmup, t.iterations)));
        }
        if self.explain.k == 0 || self.explain.samples_per_channel == 0 {
            bail!(UsageError("explain.k and explain.samples_per_channel must be at least 1".into()));
        }
        if !(self.explain.threshold_frac > 0.0 && self.explain.threshold_frac <= 1.0) {
            bail!(UsageError("explain.threshold_frac must lie in (0, 1]".into()));
        }
        if self.discovery.images_per_class == 0 {
            bail!(UsageError("discovery.images_per_class must be at least 1".into()));
        }
        if self.verify.inputs == 0 {
            bail!(UsageError("verify.inputs must be at least 1".into()));
        }
        Ok(())
    }

    /// Class names from the file if given, else from the config list.
    pub fn class_names(&self) -> Result<Vec<String>> {
        if let Some(path) = &self.discovery.class_names_file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| UsageError(format!("cannot read class file {}: {e}", path.display())))?;
            let names = parse_class_names(&text);
            if names.is_empty() {
                bail!(UsageError(format!("class file {} lists no names", path.display())));
            }
            return Ok(names);
        }
        Ok(self.discovery.class_names.clone())
    }
}

/// One name per line; surrounding whitespace and blank lines are dropped.
pub fn parse_class_names(text: &str) -> Vec<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()
}

/// Applies `PRODG_SEED` when no explicit seed flag was given.
pub fn apply_env_seed(cfg: &mut RunConfig, flag: Option<u64>) -> Result<()> {
    if let Some(seed) = flag {
        cfg.train.seed = seed;
        return Ok(());
    }
    if let Ok(value) = std::env::var("PRODG_SEED") {
        cfg.train.seed =
            value.trim().parse().with_context(|| format!("PRODG_SEED must be an unsigned integer, got {value:?}")).map_err(
                |e| UsageError(format!("{e:#}")),
            )?;
    }
    Ok(())
}
