//! Pipeline configuration. Every field has a default, so a config file only
//! needs the keys it changes; command-line flags are applied on top.

use std::fs;
use std::path::{Path, PathBuf};

use maskprune_core::tune::TuneOptions;
use maskprune_core::ModelShape;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, PathContext};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Flops,
    Latency,
}

/// How far the pipeline runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Stages {
    SearchOnly,
    Rearrange,
    Full,
}

impl Stages {
    pub fn rearrange(self) -> bool {
        self >= Stages::Rearrange
    }

    pub fn tune(self) -> bool {
        self == Stages::Full
    }
}

/// Importance score fed to the mask search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Fisher,
    Magnitude,
    Gradient,
}

/// Shape of a generated toy model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyShape {
    pub layers: usize,
    pub heads: usize,
    pub filters: usize,
    pub hidden: usize,
    pub seq_len: usize,
    pub features: usize,
    pub classes: usize,
}

impl Default for ToyShape {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            filters: 32,
            hidden: 32,
            seq_len: 8,
            features: 8,
            classes: 2,
        }
    }
}

impl ToyShape {
    pub fn to_shape(self) -> CliResult<ModelShape> {
        Ok(ModelShape::new(
            self.layers,
            self.heads,
            self.filters,
            self.hidden,
            self.seq_len,
            self.features,
            self.classes,
        )?)
    }
}

/// Replacement per-unit FLOPs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlopsOverride {
    pub head: f64,
    pub filter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub mode: Mode,
    /// Fraction of the unpruned cost, in (0, 1].
    pub target: f64,
    /// Absolute budget (FLOPs, or seconds in latency mode); overrides `target`.
    pub absolute: Option<f64>,
    /// Examples generated, or the prefix of a loaded data set that is used.
    pub samples: usize,
    pub seed: u64,
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub fisher: Option<PathBuf>,
    /// Lookup table (`.csv`) or fitted model (`.json`); required in latency mode.
    pub latency: Option<PathBuf>,
    /// Used when `model` is not given.
    pub toy: ToyShape,
    pub stages: Stages,
    pub metric: Metric,
    pub rearrange_passes: usize,
    pub tune: TuneOptions,
    pub flops: Option<FlopsOverride>,
    pub out_dir: PathBuf,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Flops,
            target: 0.6,
            absolute: None,
            samples: 256,
            seed: 0,
            model: None,
            data: None,
            fisher: None,
            latency: None,
            toy: ToyShape::default(),
            stages: Stages::Full,
            metric: Metric::Fisher,
            rearrange_passes: 1,
            tune: TuneOptions::default(),
            flops: None,
            out_dir: PathBuf::from("prune-out"),
        }
    }
}

impl PruneConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).reading(path)?;
        let mut cfg: PruneConfig =
            serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        // relative paths in a config file are relative to the file
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.model, &mut cfg.data, &mut cfg.fisher, &mut cfg.latency].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.absolute.is_none() && !(self.target > 0.0 && self.target <= 1.0) {
            return Err(CliError::input(format!("target ratio must lie in (0, 1], got {}", self.target)));
        }
        if let Some(a) = self.absolute {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(CliError::input(format!("absolute constraint must be finite and >= 0, got {a}")));
            }
        }
        if self.samples == 0 {
            return Err(CliError::input("samples must be positive"));
        }
        if self.rearrange_passes == 0 {
            return Err(CliError::input("rearrange_passes must be positive"));
        }
        if self.mode == Mode::Latency && self.latency.is_none() {
            return Err(CliError::input("latency mode needs a latency table or model"));
        }
        if !(self.tune.damp >= 0.0 && self.tune.lower <= self.tune.upper) {
            return Err(CliError::input("tune needs damp >= 0 and lower <= upper"));
        }
        for p in [&self.model, &self.data, &self.fisher, &self.latency].into_iter().flatten() {
            if !p.exists() {
                return Err(CliError::input(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_keeps_defaults() {
        let cfg: PruneConfig = serde_json::from_str(r#"{"target": 0.4, "stages": "search-only"}"#).unwrap();
        assert_eq!(cfg.target, 0.4);
        assert_eq!(cfg.stages, Stages::SearchOnly);
        assert_eq!(cfg.samples, 256);
        assert_eq!(cfg.tune.damp, 1.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<PruneConfig>(r#"{"targt": 0.4}"#).is_err());
    }

    #[test]
    fn stage_toggles() {
        assert!(!Stages::SearchOnly.rearrange());
        assert!(Stages::Rearrange.rearrange() && !Stages::Rearrange.tune());
        assert!(Stages::Full.rearrange() && Stages::Full.tune());
    }
}
