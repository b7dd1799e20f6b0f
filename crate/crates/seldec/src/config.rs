//! Run configuration: one JSON document drives the whole pipeline.
//!
//! Every section has defaults, so a config file only needs the fields it
//! changes. Seeds inside sections are optional; unset seeds are derived
//! from `master_seed` with stage-tagged counters, which makes the master
//! seed the single determinism root.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{DiversityConfig, TrainConfig};
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::rng::SeedScheme;
use crate::selective::{default_grid, validate_grid, ScoreKind};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub train_blocks_per_class: usize,
    pub cal_blocks_per_class: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection { train_blocks_per_class: 20, cal_blocks_per_class: 2, seed: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    pub members: usize,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        EnsembleSection { members: 8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectiveSection {
    pub score_kind: ScoreKind,
    pub grid: Vec<f64>,
}

impl Default for SelectiveSection {
    fn default() -> Self {
        SelectiveSection { score_kind: ScoreKind::Entropy, grid: default_grid() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    pub ece_bins: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection { ece_bins: 15 }
    }
}

/// The complete run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub split: SplitSection,
    pub train: TrainConfig,
    pub diversity: DiversityConfig,
    pub ensemble: EnsembleSection,
    pub selective: SelectiveSection,
    pub metrics: MetricsSection,
    pub output_dir: PathBuf,
    pub master_seed: u64,
}

impl Default for RunConfig {
    /// Full-scale geometry under `out/` with master seed 0.
    fn default() -> Self {
        RunConfig {
            synth: SynthConfig::default(),
            split: SplitSection::default(),
            train: TrainConfig::default(),
            diversity: DiversityConfig::default(),
            ensemble: EnsembleSection::default(),
            selective: SelectiveSection::default(),
            metrics: MetricsSection::default(),
            output_dir: PathBuf::from("out"),
            master_seed: 0,
        }
    }
}

impl RunConfig {
    /// Fast preset: small channel count and window, short training.
    pub fn desk() -> Self {
        RunConfig {
            synth: SynthConfig::desk_scale(),
            train: TrainConfig {
                epochs_max: 60,
                patience: 8,
                ..TrainConfig::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidConfig(vec![format!("cannot read config {}: {e}", path.display())])
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(vec![format!("config parse error: {e}")]))
    }

    /// All violated fields across every section, or empty when valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.synth.violations();
        v.extend(self.train.violations());
        v.extend(self.diversity.violations());
        if self.split.train_blocks_per_class < 1 {
            v.push("split.train_blocks_per_class must be >= 1".into());
        }
        if self.split.cal_blocks_per_class < 1 {
            v.push("split.cal_blocks_per_class must be >= 1".into());
        }
        let needed = self.split.train_blocks_per_class + self.split.cal_blocks_per_class + 1;
        if self.synth.blocks_per_class < needed {
            v.push(format!(
                "split needs {needed} blocks/class (train + cal + 1 test) but \
                 synth.blocks_per_class is {}",
                self.synth.blocks_per_class
            ));
        }
        if self.ensemble.members < 1 {
            v.push("ensemble.members must be >= 1".into());
        }
        if let Err(Error::InvalidConfig(msgs)) = validate_grid(&self.selective.grid) {
            v.extend(msgs.into_iter().map(|m| format!("selective.grid: {m}")));
        }
        if self.metrics.ece_bins < 1 {
            v.push("metrics.ece_bins must be >= 1".into());
        }
        if self.output_dir.as_os_str().is_empty() {
            v.push("output_dir must not be empty".into());
        }
        v
    }

    /// Validates and fills every unset section seed from `master_seed`.
    pub fn resolved(&self) -> Result<RunConfig> {
        let violations = self.violations();
        if !violations.is_empty() {
            return Err(Error::InvalidConfig(violations));
        }
        let scheme = SeedScheme::new(self.master_seed);
        let mut cfg = self.clone();
        cfg.synth.seed.get_or_insert_with(|| scheme.stream("synth", 0, "data"));
        cfg.split.seed.get_or_insert_with(|| scheme.stream("split", 0, "assign"));
        cfg.train.seed.get_or_insert_with(|| scheme.stream("train", 0, "base"));
        Ok(cfg)
    }

    /// Stream seed for one member, derived from the train section seed.
    pub fn member_seed(&self, member_index: usize) -> u64 {
        let base = self
            .train
            .seed
            .unwrap_or_else(|| SeedScheme::new(self.master_seed).stream("train", 0, "base"));
        crate::rng::derive(base, "member", member_index as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        assert!(RunConfig::default().violations().is_empty());
        assert!(RunConfig::desk().violations().is_empty());
    }

    #[test]
    fn violations_list_every_bad_field() {
        let mut cfg = RunConfig::desk();
        cfg.ensemble.members = 0;
        cfg.metrics.ece_bins = 0;
        cfg.split.cal_blocks_per_class = 0;
        let v = cfg.violations();
        assert_eq!(v.len(), 3, "{v:?}");
        assert!(v.iter().any(|m| m.contains("ensemble.members")));
        assert!(v.iter().any(|m| m.contains("ece_bins")));
        assert!(v.iter().any(|m| m.contains("cal_blocks_per_class")));
    }

    #[test]
    fn resolved_fills_seeds_deterministically() {
        let cfg = RunConfig { master_seed: 99, ..RunConfig::desk() };
        let a = cfg.resolved().unwrap();
        let b = cfg.resolved().unwrap();
        assert!(a.synth.seed.is_some());
        assert_eq!(a.synth.seed, b.synth.seed);
        assert_eq!(a.split.seed, b.split.seed);
        assert_eq!(a.member_seed(3), b.member_seed(3));
        assert_ne!(a.member_seed(0), a.member_seed(1));

        let other = RunConfig { master_seed: 100, ..RunConfig::desk() }.resolved().unwrap();
        assert_ne!(a.synth.seed, other.synth.seed);
    }

    #[test]
    fn explicit_seeds_are_preserved() {
        let mut cfg = RunConfig::desk();
        cfg.synth.seed = Some(1234);
        let resolved = cfg.resolved().unwrap();
        assert_eq!(resolved.synth.seed, Some(1234));
    }

    #[test]
    fn partial_json_uses_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"master_seed": 7, "ensemble": {"members": 3}}"#).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.master_seed, 7);
        assert_eq!(cfg.ensemble.members, 3);
        assert_eq!(cfg.metrics.ece_bins, 15);
    }

    #[test]
    fn unknown_fields_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"master_sed": 7}"#).unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::InvalidConfig(_))));
    }
}
