//! `RunConfig`: a TOML file whose keys any command-line flag can override.
//! Relative paths in the file resolve against the file's directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use povmap::gbrt::TargetMode;
use povmap::groundtruth::RelocationMode;
use povmap::pipeline::{ExperimentConfig, RecencyMode, SearchSpec, WeightConfig, WeightScheme};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Bundle manifest, or a directory holding `manifest.toml`.
    pub bundle: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub recency: Option<RecencyMode>,
    pub relocation: Option<RelocationMode>,
    pub weights: Option<WeightScheme>,
    pub ens_beta: Option<f64>,
    pub profile: Option<String>,
    pub seed: Option<u64>,
    pub target_mode: Option<TargetMode>,
    pub test_frac: Option<f64>,
    pub embeddings: Option<bool>,
    /// Explicit search budget; replaces the profile when present.
    pub search: Option<SearchSpec>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.bundle, &mut cfg.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Keys set in `over` win.
    pub fn merge(self, over: RunConfig) -> RunConfig {
        RunConfig {
            bundle: over.bundle.or(self.bundle),
            out: over.out.or(self.out),
            recency: over.recency.or(self.recency),
            relocation: over.relocation.or(self.relocation),
            weights: over.weights.or(self.weights),
            ens_beta: over.ens_beta.or(self.ens_beta),
            profile: over.profile.or(self.profile),
            seed: over.seed.or(self.seed),
            target_mode: over.target_mode.or(self.target_mode),
            test_frac: over.test_frac.or(self.test_frac),
            embeddings: over.embeddings.or(self.embeddings),
            search: over.search.or(self.search),
        }
    }

    pub fn bundle_manifest(&self) -> Result<PathBuf> {
        let Some(b) = &self.bundle else {
            bail!("no bundle given (set `bundle` in the config or pass --bundle)");
        };
        resolve_bundle(b)
    }

    pub fn out_dir(&self) -> Result<PathBuf> {
        self.out
            .clone()
            .context("no output directory given (set `out` in the config or pass --out)")
    }

    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let base = ExperimentConfig::default();
        let profile = self.profile.clone().unwrap_or(base.profile.clone());
        if self.search.is_none() && SearchSpec::profile(&profile).is_none() {
            bail!("unknown search profile `{profile}` (expected ci or full)");
        }
        let mut weights = WeightConfig {
            scheme: self.weights.unwrap_or(base.weights.scheme),
            ..base.weights
        };
        if let Some(b) = self.ens_beta {
            if !(0.0..1.0).contains(&b) {
                bail!("ens_beta must lie in [0, 1)");
            }
            weights.beta = b;
        }
        let test_frac = self.test_frac.unwrap_or(base.test_frac);
        if !(test_frac > 0.0 && test_frac < 1.0) {
            bail!("test_frac must lie in (0, 1)");
        }
        Ok(ExperimentConfig {
            recency: self.recency.unwrap_or(base.recency),
            relocation: self.relocation.unwrap_or(base.relocation),
            weights,
            profile,
            search: self.search.clone(),
            target_mode: self.target_mode.unwrap_or(base.target_mode),
            seed: self.seed.unwrap_or(base.seed),
            test_frac,
            normalizer: base.normalizer,
            features: povmap::features::FeatureConfig {
                include_embeddings: self.embeddings.unwrap_or(false),
                ..base.features
            },
        })
    }
}

/// Accepts a manifest path or a directory containing `manifest.toml`.
pub fn resolve_bundle(p: &Path) -> Result<PathBuf> {
    let manifest = if p.is_dir() { p.join("manifest.toml") } else { p.to_path_buf() };
    if !manifest.is_file() {
        bail!("bundle manifest {} does not exist", manifest.display());
    }
    Ok(manifest)
}

pub fn parse_recency(s: &str) -> Result<RecencyMode, String> {
    RecencyMode::parse(s).ok_or_else(|| format!("unknown recency `{s}` (expected OO, NN, O-N or ON)"))
}

pub fn parse_relocation(s: &str) -> Result<RelocationMode, String> {
    RelocationMode::parse(s).ok_or_else(|| format!("unknown relocation `{s}` (expected none, rc or ruc)"))
}

pub fn parse_weights(s: &str) -> Result<WeightScheme, String> {
    match s {
        "none" => Ok(WeightScheme::None),
        "ens" => Ok(WeightScheme::Ens),
        _ => Err(format!("unknown weight scheme `{s}` (expected none or ens)")),
    }
}

pub fn parse_target_mode(s: &str) -> Result<TargetMode, String> {
    match s {
        "joint" => Ok(TargetMode::Joint),
        "independent" => Ok(TargetMode::Independent),
        _ => Err(format!("unknown target mode `{s}` (expected joint or independent)")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_keys() {
        let file: RunConfig = toml::from_str("recency = \"O-N\"\nrelocation = \"ruc\"\nseed = 3\nweights = \"ens\"").unwrap();
        let flags = RunConfig {
            relocation: Some(RelocationMode::None),
            ..RunConfig::default()
        };
        let e = file.merge(flags).experiment().unwrap();
        assert_eq!(e.recency, RecencyMode::TrainOldTestNew);
        assert_eq!(e.relocation, RelocationMode::None);
        assert_eq!(e.seed, 3);
        assert_eq!(e.weights.scheme, WeightScheme::Ens);
    }

    #[test]
    fn unknown_keys_and_profiles_are_rejected() {
        assert!(toml::from_str::<RunConfig>("recencyy = \"ON\"").is_err());
        let c = RunConfig {
            profile: Some("huge".into()),
            ..RunConfig::default()
        };
        assert!(c.experiment().is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "bundle = \"data\"\nout = \"/abs/out\"").unwrap();
        let c = RunConfig::from_file(&p).unwrap();
        assert_eq!(c.bundle.unwrap(), dir.path().join("data"));
        assert_eq!(c.out.unwrap(), PathBuf::from("/abs/out"));
    }
}
