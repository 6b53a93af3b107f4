//! Pipeline configuration.
//!
//! One TOML file drives every pipeline stage. Unknown keys are rejected,
//! every numeric field is bound-checked with the offending key named, and
//! the whole config hashes to a stable hex digest that run logs and dataset
//! manifests embed, so outputs can be traced back to the exact settings that
//! produced them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterLossKind;
use crate::error::{Error, Result};
use crate::rng::sha256_hex;
use crate::sdf::{default_norm_scale, DEFAULT_TAU};
use crate::synthesis::PlacementConfig;

/// Where inputs live and outputs go. All paths are interpreted relative to
/// the process working directory unless absolute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: String,
    pub checkpoint_dir: String,
    pub output_dir: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: "data".into(),
            checkpoint_dir: "checkpoints".into(),
            output_dir: "out".into(),
        }
    }
}

/// Patch grid geometry shared by shapes and textures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub patch_dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// Truncation bound of the distance fields.
    pub tau: f32,
    /// Millimetres per normalized distance unit; omitted means half the
    /// shortest patch extent.
    pub norm_scale: Option<f64>,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            patch_dims: [16, 16, 16],
            spacing_mm: [1.0, 1.0, 1.0],
            tau: DEFAULT_TAU,
            norm_scale: None,
        }
    }
}

impl GeometryConfig {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.patch_dims[0], self.patch_dims[1], self.patch_dims[2])
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        (self.spacing_mm[0], self.spacing_mm[1], self.spacing_mm[2])
    }

    /// The configured normalization scale, or the geometric default.
    pub fn norm_scale_mm(&self) -> f64 {
        self.norm_scale
            .unwrap_or_else(|| default_norm_scale(self.dims(), self.spacing()))
    }
}

/// Latent widths of the two linear codecs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub shape_latent_dim: usize,
    pub texture_latent_dim: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            shape_latent_dim: 32,
            texture_latent_dim: 16,
        }
    }
}

/// Forward-process noise schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub t_count: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            t_count: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Optimizer settings for the denoisers and the adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub hidden_dims: Vec<usize>,
    /// Weight of the adapter term in the reported combined objective.
    pub lambda: f64,
    /// Adapter training noise, as a multiple of the per-coordinate latent
    /// standard deviation.
    pub sigma_scale: f64,
    pub adapter_lr: f64,
    pub adapter_steps: usize,
    pub adapter_batch_size: usize,
    pub adapter_loss: AdapterLossKind,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 1e-3,
            steps: 3000,
            batch_size: 32,
            hidden_dims: vec![128, 128],
            lambda: 1.0,
            sigma_scale: 0.25,
            adapter_lr: 1e-3,
            adapter_steps: 150,
            adapter_batch_size: 8,
            adapter_loss: AdapterLossKind::MeanAbsolute,
        }
    }
}

/// Evaluation settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Neighborhood size of the precision/recall manifolds.
    pub k: usize,
    pub histogram_bins: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            k: 3,
            histogram_bins: 16,
        }
    }
}

/// Everything a pipeline run needs, loaded from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub geometry: GeometryConfig,
    pub codec: CodecConfig,
    pub schedule: ScheduleConfig,
    pub training: TrainingConfig,
    pub placement: PlacementConfig,
    pub metrics: MetricsConfig,
}

fn bound(key: &str, detail: impl Into<String>) -> Error {
    Error::ConfigBound {
        key: key.to_string(),
        detail: detail.into(),
    }
}

impl PipelineConfig {
    /// Parses a TOML document and bound-checks every field.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::ConfigParse { detail: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates a config file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Renders the config back to TOML, e.g. for a starter file.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization cannot fail")
    }

    /// SHA-256 of the canonical JSON form; stable across reruns and embedded
    /// in manifests and run logs.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialization cannot fail");
        sha256_hex(json.as_bytes())
    }

    /// Checks every numeric field against its documented bound, naming the
    /// offending key on failure.
    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        for (axis, &d) in g.patch_dims.iter().enumerate() {
            if !(2..=512).contains(&d) {
                return Err(bound(
                    "geometry.patch_dims",
                    format!("axis {axis} is {d}, outside [2, 512]"),
                ));
            }
        }
        for (axis, &s) in g.spacing_mm.iter().enumerate() {
            if !(s.is_finite() && s > 0.0 && s <= 100.0) {
                return Err(bound(
                    "geometry.spacing_mm",
                    format!("axis {axis} is {s}, outside (0, 100]"),
                ));
            }
        }
        if !(g.tau.is_finite() && g.tau > 0.0 && g.tau <= 1.0) {
            return Err(bound("geometry.tau", format!("{} is outside (0, 1]", g.tau)));
        }
        if let Some(ns) = g.norm_scale {
            if !(ns.is_finite() && ns > 0.0) {
                return Err(bound("geometry.norm_scale", format!("{ns} must be positive")));
            }
        }
        let voxels = g.patch_dims[0] * g.patch_dims[1] * g.patch_dims[2];
        let c = &self.codec;
        if c.shape_latent_dim == 0 || c.shape_latent_dim > voxels {
            return Err(bound(
                "codec.shape_latent_dim",
                format!("{} is outside [1, {voxels}]", c.shape_latent_dim),
            ));
        }
        if c.texture_latent_dim == 0 || c.texture_latent_dim > voxels {
            return Err(bound(
                "codec.texture_latent_dim",
                format!("{} is outside [1, {voxels}]", c.texture_latent_dim),
            ));
        }
        let s = &self.schedule;
        if !(2..=100_000).contains(&s.t_count) {
            return Err(bound("schedule.t_count", format!("{} is outside [2, 100000]", s.t_count)));
        }
        if !(s.beta_start.is_finite() && s.beta_start > 0.0) {
            return Err(bound("schedule.beta_start", format!("{} must be positive", s.beta_start)));
        }
        if !(s.beta_end.is_finite() && s.beta_end >= s.beta_start && s.beta_end < 1.0) {
            return Err(bound(
                "schedule.beta_end",
                format!("{} is outside [beta_start, 1)", s.beta_end),
            ));
        }
        let t = &self.training;
        if !(t.lr.is_finite() && t.lr > 0.0) {
            return Err(bound("training.lr", format!("{} must be positive", t.lr)));
        }
        if t.steps == 0 {
            return Err(bound("training.steps", "must be at least 1"));
        }
        if t.batch_size == 0 {
            return Err(bound("training.batch_size", "must be at least 1"));
        }
        if t.hidden_dims.is_empty() {
            return Err(bound("training.hidden_dims", "need at least one hidden layer"));
        }
        for &h in &t.hidden_dims {
            if !(1..=4096).contains(&h) {
                return Err(bound("training.hidden_dims", format!("width {h} is outside [1, 4096]")));
            }
        }
        if !(t.lambda.is_finite() && t.lambda >= 0.0) {
            return Err(bound("training.lambda", format!("{} must be non-negative", t.lambda)));
        }
        if !(t.sigma_scale.is_finite() && t.sigma_scale >= 0.0) {
            return Err(bound(
                "training.sigma_scale",
                format!("{} must be non-negative", t.sigma_scale),
            ));
        }
        if !(t.adapter_lr.is_finite() && t.adapter_lr > 0.0) {
            return Err(bound("training.adapter_lr", format!("{} must be positive", t.adapter_lr)));
        }
        if t.adapter_steps == 0 {
            return Err(bound("training.adapter_steps", "must be at least 1"));
        }
        if t.adapter_batch_size == 0 {
            return Err(bound("training.adapter_batch_size", "must be at least 1"));
        }
        self.placement.validate().map_err(|e| match e {
            Error::InvalidArgument { what, detail } => bound(&format!("placement.{what}"), detail),
            other => other,
        })?;
        let m = &self.metrics;
        if m.k == 0 {
            return Err(bound("metrics.k", "must be at least 1"));
        }
        if m.histogram_bins == 0 {
            return Err(bound("metrics.histogram_bins", "must be at least 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_roundtrips() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml();
        let back = PipelineConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = PipelineConfig::from_toml_str("seed = 9\n[codec]\nshape_latent_dim = 8\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.codec.shape_latent_dim, 8);
        assert_eq!(cfg.codec.texture_latent_dim, 16);
        assert_eq!(cfg.schedule.t_count, 200);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = PipelineConfig::from_toml_str("[geometry]\nbogus = 1\n").unwrap_err();
        match err {
            Error::ConfigParse { detail } => assert!(detail.contains("bogus"), "{detail}"),
            other => panic!("expected a parse error, got {other}"),
        }
    }

    #[test]
    fn out_of_bound_values_name_the_key() {
        let cases = [
            ("[geometry]\ntau = -0.5\n", "geometry.tau"),
            ("[geometry]\npatch_dims = [1, 16, 16]\n", "geometry.patch_dims"),
            ("[schedule]\nbeta_end = 2.0\n", "schedule.beta_end"),
            ("[training]\nlr = 0.0\n", "training.lr"),
            ("[placement]\nmin_soft_fraction = 0.0\n", "placement.min_soft_fraction"),
            ("[metrics]\nk = 0\n", "metrics.k"),
            ("[codec]\nshape_latent_dim = 0\n", "codec.shape_latent_dim"),
        ];
        for (text, want_key) in cases {
            match PipelineConfig::from_toml_str(text) {
                Err(Error::ConfigBound { key, .. }) => assert_eq!(key, want_key),
                other => panic!("{text:?}: expected ConfigBound for {want_key}, got {other:?}"),
            }
        }
    }

    #[test]
    fn adapter_loss_parses_both_norms() {
        let l1 = PipelineConfig::from_toml_str("[training]\nadapter_loss = \"l1\"\n").unwrap();
        assert_eq!(l1.training.adapter_loss, AdapterLossKind::MeanAbsolute);
        let l2 = PipelineConfig::from_toml_str("[training]\nadapter_loss = \"l2\"\n").unwrap();
        assert_eq!(l2.training.adapter_loss, AdapterLossKind::MeanSquared);
        assert!(PipelineConfig::from_toml_str("[training]\nadapter_loss = \"l3\"\n").is_err());
    }

    #[test]
    fn hash_is_stable_and_content_sensitive() {
        let a = PipelineConfig::default();
        let b = PipelineConfig::default();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        assert!(a.hash().chars().all(|c| c.is_ascii_hexdigit()));
        let mut c = PipelineConfig::default();
        c.seed = 1;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn norm_scale_defaults_to_half_shortest_extent() {
        let mut cfg = PipelineConfig::default();
        cfg.geometry.patch_dims = [16, 16, 8];
        cfg.geometry.spacing_mm = [1.0, 1.0, 2.0];
        // Shortest extent is 16 mm on every axis here; half of it is 8.
        assert_eq!(cfg.geometry.norm_scale_mm(), 8.0);
        cfg.geometry.norm_scale = Some(5.0);
        assert_eq!(cfg.geometry.norm_scale_mm(), 5.0);
    }

    #[test]
    fn config_file_loads_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pipeline.toml");
        fs::write(&path, PipelineConfig::default().to_toml()).unwrap();
        let cfg = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert!(matches!(
            PipelineConfig::load(dir.path().join("missing.toml")),
            Err(Error::Io { .. })
        ));
    }
}
