//! Single-view fitting with a registered camera, a known body shape and the
//! scene density field as context.

use serde::{Deserialize, Serialize};

use crate::body::{BodyModel, BodyParams, NECK, PELVIS, SHAPE_DIM};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::fitting::{initialize, world_joints, BodyFit, FreeSet};
use crate::geometry::{CameraParams, Point3};
use crate::multishot::Detection2D;
use crate::optim::OptimReport;
use crate::scene::{penetration_count, DensityGrid};

/// Which pieces of context the fit may use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub use_camera: bool,
    pub use_shape: bool,
    pub use_structure: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            use_camera: true,
            use_shape: true,
            use_structure: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MonocularContext<'a> {
    pub camera: &'a CameraParams,
    /// Shape recovered at a nearby shot change.
    pub shape_hat: [f64; SHAPE_DIM],
    pub grid: Option<&'a DensityGrid>,
    pub ablation: Ablation,
}

impl MonocularContext<'_> {
    /// Camera the fit actually uses: with `use_camera` off the intrinsics
    /// fall back to the image-diagonal heuristic, extrinsics are kept.
    pub fn fitting_camera(&self) -> CameraParams {
        if self.ablation.use_camera {
            self.camera.clone()
        } else {
            let h = CameraParams::heuristic(self.camera.width, self.camera.height);
            CameraParams {
                rotation_cw: self.camera.rotation_cw,
                translation_cw: self.camera.translation_cw,
                ..h
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MonocularResult {
    pub params: BodyParams,
    pub joints_world: Vec<Point3>,
    pub report: OptimReport,
    /// Surface samples with positive density before and after the fit;
    /// absent without a grid.
    pub penetration_initial: Option<usize>,
    pub penetration_final: Option<usize>,
    pub sample_count: usize,
}

fn penetration(
    model: &BodyModel,
    params: &BodyParams,
    camera: &CameraParams,
    grid: Option<&DensityGrid>,
    samples_per_bone: usize,
) -> Option<usize> {
    grid.map(|g| {
        let samples = model.surface_samples(params, samples_per_bone, false);
        let world: Vec<Point3> = samples.points.iter().map(|q| camera.camera_to_world(q)).collect();
        penetration_count(g, &world)
    })
}

/// Fits pose and camera-frame translation of one detection. `init`
/// replaces the torso-depth initialization when given.
pub fn fit_monocular(
    model: &BodyModel,
    config: &Config,
    detection: &Detection2D,
    context: &MonocularContext,
    init: Option<&BodyParams>,
) -> Result<MonocularResult> {
    let config = &Config {
        weight_prior_pose: config.weight_prior_pose_monocular,
        ..config.clone()
    };
    let ab = context.ablation;
    if ab.use_structure && context.grid.is_none() {
        return Err(Error::InvalidInput("structure term needs a density grid".into()));
    }
    let camera = context.fitting_camera();
    let shape = if ab.use_shape {
        context.shape_hat
    } else {
        BodyParams::rest(model).shape
    };
    let start = match init {
        Some(p) => {
            let mut p = p.clone();
            if ab.use_shape {
                p.shape = shape;
            }
            p
        }
        None => initialize(model, config, &camera, detection, shape)?,
    };
    let free = if ab.use_shape {
        FreeSet::PoseAndTranslation
    } else {
        FreeSet::All
    };
    let mut problem = BodyFit::new(model, config).block(&camera, detection, start.clone(), free);
    if ab.use_structure {
        problem = problem.structure(context.grid.unwrap(), config.structure_scale);
    }
    let (mut fitted, report) = problem.solve(&config.lm())?;
    let params = fitted.remove(0);
    let spb = config.samples_per_bone;
    Ok(MonocularResult {
        joints_world: world_joints(model, &params, &camera),
        penetration_initial: penetration(model, &start, &camera, context.grid, spb),
        penetration_final: penetration(model, &params, &camera, context.grid, spb),
        sample_count: model.bone_count() * spb,
        params,
        report,
    })
}

/// Fraction of confident ground-truth joints whose projection into
/// `other_view` lies within `alpha` torso sizes; the torso size is the
/// ground-truth pelvis-to-neck pixel distance.
pub fn cross_shot_pck(joints_world: &[Point3], other_view: &CameraParams, gt: &Detection2D, alpha: f64) -> Result<f64> {
    if joints_world.len() != gt.keypoints.len() {
        return Err(Error::LengthMismatch {
            left: joints_world.len(),
            right: gt.keypoints.len(),
        });
    }
    let confident: Vec<usize> = (0..gt.keypoints.len()).filter(|&k| gt.confidences[k] > 0.0).collect();
    if confident.is_empty() {
        return Err(Error::NoVisibleJoints);
    }
    let torso = (gt.keypoints[PELVIS] - gt.keypoints[NECK]).norm();
    let correct = confident
        .iter()
        .filter(|&&k| match other_view.project(&joints_world[k]) {
            Ok(p) => (p - gt.keypoints[k]).norm() < alpha * torso,
            Err(_) => false,
        })
        .count();
    Ok(correct as f64 / confident.len() as f64)
}
