//! Flat key-value configuration for every weight and tolerance.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::body::PriorWeights;
use crate::error::{Error, Result};
use crate::optim::LmConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Weight of each confidence-weighted pixel residual.
    pub weight_reprojection: f64,
    /// Geman-McClure scale of the reprojection term, pixels.
    pub reprojection_scale_px: f64,
    pub weight_prior_pose: f64,
    /// Pose prior of the single-view fit, which has no second view to
    /// pin depth.
    pub weight_prior_pose_monocular: f64,
    pub weight_prior_hinge: f64,
    pub weight_prior_shape: f64,
    /// Weight of the cross-shot world-frame joint agreement, per m².
    pub weight_glob: f64,
    pub weight_structure: f64,
    /// Geman-McClure scale of the structure term; 0 selects the grid default.
    pub structure_scale: f64,
    pub samples_per_bone: usize,

    pub lm_max_iterations: usize,
    pub lm_ftol: f64,
    pub lm_gtol: f64,
    pub lm_initial_lambda: f64,
    /// Iterations of the torso-only initialization stage.
    pub init_max_iterations: usize,

    /// Matching costs at or above this value are never matched.
    pub unmatched_cost_threshold: f64,
    /// Same rule for the triangulation baseline, pixels.
    pub triangulation_threshold_px: f64,
    /// Entries whose triangulation cost exceeds this multiple of
    /// `triangulation_threshold_px` skip the full fit.
    pub prefilter_factor: f64,
    pub min_visible_keypoints: usize,

    pub pck_alpha: f64,
    pub pcgd_alpha_deg: f64,
    pub fov_bin_deg: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            weight_reprojection: 1.0,
            reprojection_scale_px: 100.0,
            weight_prior_pose: 0.1,
            weight_prior_pose_monocular: 30.0,
            weight_prior_hinge: 100.0,
            weight_prior_shape: 1.0,
            weight_glob: 10000.0,
            weight_structure: 50.0,
            structure_scale: 0.0,
            samples_per_bone: 8,
            lm_max_iterations: 200,
            lm_ftol: 1e-8,
            lm_gtol: 1e-10,
            lm_initial_lambda: 1e-3,
            init_max_iterations: 50,
            unmatched_cost_threshold: 1500.0,
            triangulation_threshold_px: 25.0,
            prefilter_factor: 10.0,
            min_visible_keypoints: 4,
            pck_alpha: 0.5,
            pcgd_alpha_deg: 20.0,
            fov_bin_deg: 5.0,
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::InvalidInput(format!("config: {e}")))?;
        let config: Config = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::schema(format!("/{}", e.path()).replace('.', "/"), e.inner().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("reprojection_scale_px", self.reprojection_scale_px),
            ("lm_ftol", self.lm_ftol),
            ("lm_gtol", self.lm_gtol),
            ("pcgd_alpha_deg", self.pcgd_alpha_deg),
            ("fov_bin_deg", self.fov_bin_deg),
            ("unmatched_cost_threshold", self.unmatched_cost_threshold),
            ("triangulation_threshold_px", self.triangulation_threshold_px),
            ("prefilter_factor", self.prefilter_factor),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::schema(format!("/{key}"), "must be positive"));
            }
        }
        let nonneg = [
            ("weight_reprojection", self.weight_reprojection),
            ("weight_prior_pose", self.weight_prior_pose),
            ("weight_prior_pose_monocular", self.weight_prior_pose_monocular),
            ("weight_prior_hinge", self.weight_prior_hinge),
            ("weight_prior_shape", self.weight_prior_shape),
            ("weight_glob", self.weight_glob),
            ("weight_structure", self.weight_structure),
            ("structure_scale", self.structure_scale),
            ("lm_initial_lambda", self.lm_initial_lambda),
            ("pck_alpha", self.pck_alpha),
        ];
        for (key, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::schema(format!("/{key}"), "must be non-negative"));
            }
        }
        if self.samples_per_bone == 0 {
            return Err(Error::schema("/samples_per_bone", "must be at least 1"));
        }
        Ok(())
    }

    pub fn priors(&self) -> PriorWeights {
        PriorWeights {
            pose: self.weight_prior_pose,
            hinge: self.weight_prior_hinge,
            shape: self.weight_prior_shape,
        }
    }

    pub fn lm(&self) -> LmConfig {
        LmConfig {
            max_iterations: self.lm_max_iterations,
            ftol: self.lm_ftol,
            gtol: self.lm_gtol,
            initial_lambda: self.lm_initial_lambda,
            ..LmConfig::default()
        }
    }

    pub fn init_lm(&self) -> LmConfig {
        LmConfig {
            max_iterations: self.init_max_iterations,
            ..self.lm()
        }
    }
}
