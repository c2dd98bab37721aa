use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forecast::{TrainingConfig, MASK_FRACTION};
use crate::profiling::KMeansConfig;
use crate::vision::BackboneSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringConfig {
    pub k_min: usize,
    pub k_max: usize,
    /// Skip the knee and use this k.
    pub k_override: Option<usize>,
    pub restarts: usize,
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        let km = KMeansConfig::default();
        Self {
            k_min: 1,
            k_max: 10,
            k_override: None,
            restarts: km.restarts,
            tolerance: km.tolerance,
            max_iter: km.max_iter,
        }
    }
}

impl ClusteringConfig {
    pub fn kmeans(&self) -> KMeansConfig {
        KMeansConfig {
            restarts: self.restarts,
            tolerance: self.tolerance,
            max_iter: self.max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub cold_start: bool,
    pub mask_fraction: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            cold_start: true,
            mask_fraction: MASK_FRACTION,
        }
    }
}

/// Everything a run depends on. Relative paths are resolved against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Cell inventory CSV.
    pub cells: PathBuf,
    /// Raster store directory (holds `manifest.json`).
    pub rasters: PathBuf,
    /// Long-format KPI CSV.
    pub kpis: PathBuf,
    /// Runs are written to `output_dir/<run_id>`.
    pub output_dir: PathBuf,
    #[serde(default = "default_kpi")]
    pub kpi_name: String,
    #[serde(default = "default_backbone")]
    pub backbone: String,
    /// safetensors checkpoint for the backbone.
    #[serde(default)]
    pub backbone_weights: Option<PathBuf>,
    /// Use seeded random weights when no checkpoint is given.
    #[serde(default)]
    pub allow_random_init: bool,
    #[serde(default = "default_width_ratio")]
    pub width_ratio: f64,
    #[serde(default)]
    pub seed: u64,
    /// Forward-fill short gaps in KPI series.
    #[serde(default)]
    pub gap_fill: bool,
    #[serde(default)]
    pub clustering: ClusteringConfig,
    /// `training.seed` is ignored; it is derived from `seed`.
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

fn default_kpi() -> String {
    crate::synth::KPI_NAME.to_string()
}

fn default_backbone() -> String {
    "efficientnet_b0".to_string()
}

fn default_width_ratio() -> f64 {
    1.0
}

impl PipelineConfig {
    /// Minimal config with defaults for everything but the paths.
    pub fn new(cells: impl Into<PathBuf>, rasters: impl Into<PathBuf>, kpis: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            cells: cells.into(),
            rasters: rasters.into(),
            kpis: kpis.into(),
            output_dir: output_dir.into(),
            kpi_name: default_kpi(),
            backbone: default_backbone(),
            backbone_weights: None,
            allow_random_init: false,
            width_ratio: default_width_ratio(),
            seed: 0,
            gap_fill: false,
            clustering: ClusteringConfig::default(),
            training: TrainingConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for p in [&mut cfg.cells, &mut cfg.rasters, &mut cfg.kpis, &mut cfg.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(w) = cfg.backbone_weights.as_mut() {
            if w.is_relative() {
                *w = base.join(&*w);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        BackboneSpec::lookup(&self.backbone)?;
        let c = &self.clustering;
        if c.k_min == 0 || c.k_min > c.k_max {
            return Err(Error::Config(format!("invalid k range [{}, {}]", c.k_min, c.k_max)));
        }
        if let Some(k) = c.k_override {
            if k < c.k_min || k > c.k_max {
                return Err(Error::Config(format!("k_override {k} outside [{}, {}]", c.k_min, c.k_max)));
            }
        }
        if c.restarts == 0 || c.max_iter == 0 || !(c.tolerance >= 0.0) {
            return Err(Error::Config("restarts and max_iter must be positive, tolerance non-negative".into()));
        }
        if !(self.width_ratio > 0.0 && self.width_ratio <= 2.0) {
            return Err(Error::Config(format!("width_ratio {} outside (0, 2]", self.width_ratio)));
        }
        let m = self.evaluation.mask_fraction;
        if !(m > 0.0 && m < 1.0) {
            return Err(Error::Config(format!("mask_fraction {m} outside (0, 1)")));
        }
        self.training.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML form, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let canonical = self.to_toml()?;
        Ok(hex(&Sha256::digest(canonical.as_bytes())))
    }

    /// First 16 hex digits of [`PipelineConfig::hash`].
    pub fn run_id(&self) -> Result<String> {
        Ok(self.hash()?[..16].to_string())
    }

    pub fn backbone_spec(&self) -> Result<BackboneSpec> {
        let spec = BackboneSpec::lookup(&self.backbone)?;
        Ok(match &self.backbone_weights {
            Some(w) => spec.with_weights(w),
            None => spec,
        })
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let text = r#"
cells = "data/cells.csv"
rasters = "data/rasters"
kpis = "/abs/kpis.csv"
output_dir = "runs"
backbone = "toy"
"#;
        let cfg = PipelineConfig::from_toml(text, Path::new("/etc/site")).unwrap();
        assert_eq!(cfg.cells, PathBuf::from("/etc/site/data/cells.csv"));
        assert_eq!(cfg.kpis, PathBuf::from("/abs/kpis.csv"));
        assert_eq!(cfg.clustering.k_max, 10);
        assert_eq!(cfg.kpi_name, "traffic_volume");
    }

    #[test]
    fn run_id_tracks_config() {
        let a = PipelineConfig::new("c", "r", "k", "o");
        let mut b = a.clone();
        assert_eq!(a.run_id().unwrap(), b.run_id().unwrap());
        b.seed = 1;
        assert_ne!(a.run_id().unwrap(), b.run_id().unwrap());
        assert_eq!(a.run_id().unwrap().len(), 16);
    }

    #[test]
    fn rejects_bad_values() {
        let base = "cells = \"c\"\nrasters = \"r\"\nkpis = \"k\"\noutput_dir = \"o\"\n";
        for extra in [
            "backbone = \"alexnet\"",
            "[clustering]\nk_min = 5\nk_max = 2",
            "[clustering]\nk_override = 11",
            "width_ratio = 0.0",
            "[evaluation]\nmask_fraction = 1.0",
            "[training]\nhidden_size = 0",
            "mystery = 1",
        ] {
            assert!(PipelineConfig::from_toml(&format!("{base}{extra}"), Path::new(".")).is_err(), "{extra}");
        }
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = PipelineConfig::new("/c", "/r", "/k", "/o");
        cfg.clustering.k_override = Some(3);
        let back = PipelineConfig::from_toml(&cfg.to_toml().unwrap(), Path::new("/")).unwrap();
        assert_eq!(back, cfg);
    }
}
