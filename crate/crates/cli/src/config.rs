use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ghost_core::experiments::ExperimentConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub embeddings: Option<PathBuf>,
    pub lemmas: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub map: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackParams {
    pub iters: usize,
    pub lr: f64,
    pub restarts: usize,
    /// Sentences attacked per run.
    pub limit: usize,
}

impl Default for AttackParams {
    fn default() -> Self {
        Self {
            iters: 300,
            lr: 0.05,
            restarts: 4,
            limit: 64,
        }
    }
}

/// The JSON config file. Command-line flags override every field.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub paths: Paths,
    pub experiment: ExperimentConfig,
    pub attack: AttackParams,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Fixes the master seed (flag, then `GHOST_SEED`, then the file, then 0)
    /// and derives every component seed from it.
    pub fn with_seed(mut self, flag: Option<u64>) -> Self {
        let seed = flag.or(self.seed).unwrap_or(0);
        self.seed = Some(seed);
        self.experiment = self.experiment.with_seed(seed);
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

/// A required input: the flag wins over the config file, and the file must exist.
pub fn input(flag: &Option<PathBuf>, file: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    let Some(p) = flag.clone().or_else(|| file.clone()) else {
        bail!("missing input: pass --{name} or set paths.{} in the config", name.replace('-', "_"));
    };
    if !p.exists() {
        bail!("input file not found: {}", p.display());
    }
    Ok(p)
}

/// An optional input that must exist when given.
pub fn optional_input(flag: &Option<PathBuf>, file: &Option<PathBuf>) -> Result<Option<PathBuf>> {
    match flag.clone().or_else(|| file.clone()) {
        Some(p) if !p.exists() => bail!("input file not found: {}", p.display()),
        other => Ok(other),
    }
}

pub fn output(flag: &Option<PathBuf>, file: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    match flag.clone().or_else(|| file.clone()) {
        Some(p) => Ok(p),
        None => bail!("missing output: pass --{name}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_files_fill_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"experiment": {"search": {"k0": 12}}, "seed": 4}"#).unwrap();
        assert_eq!(c.experiment.search.k0, 12);
        assert_eq!(c.experiment.search.tau_o, 0.1);
        assert_eq!(c.attack, AttackParams::default());
        let c = c.with_seed(None);
        assert_eq!(c.seed(), 4);
        assert_eq!(c.clone().with_seed(Some(9)).seed(), 9);
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
