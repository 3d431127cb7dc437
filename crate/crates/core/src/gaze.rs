//! Head-pose gaze and the image-plane gaze accuracy metric.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::body::{BodyModel, BodyParams, FORWARD_AXIS, HEAD};
use crate::error::{Error, Result};
use crate::geometry::{CameraParams, Point3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GazeEstimate {
    /// World-frame head joint.
    pub origin: Point3,
    /// Unit world-frame direction.
    pub direction: Vector3<f64>,
    pub frame_id: u32,
}

/// The template forward axis carried through the head's accumulated
/// rotation and the camera extrinsics.
pub fn gaze_from_body(model: &BodyModel, params: &BodyParams, camera: &CameraParams, frame_id: u32) -> GazeEstimate {
    let posed = model.pose(params, false);
    let dir_cam = posed.frames[HEAD] * Vector3::from(FORWARD_AXIS);
    GazeEstimate {
        origin: camera.camera_to_world(&posed.joints[HEAD]),
        direction: (camera.rotation_cw * dir_cam).normalize(),
        frame_id,
    }
}

/// Image-plane angle, in degrees, between the projected gaze and the
/// direction from the projected origin toward the projected target.
pub fn image_gaze_angle_deg(estimate: &GazeEstimate, target: &Point3, view: &CameraParams) -> Result<f64> {
    let o = view.project(&estimate.origin)?;
    let g = view.project(&(estimate.origin + estimate.direction))? - o;
    let t = view.project(target)? - o;
    if g.norm() == 0.0 || t.norm() == 0.0 {
        return Ok(180.0);
    }
    let cross = g.x * t.y - g.y * t.x;
    Ok(cross.abs().atan2(g.dot(&t)).to_degrees())
}

/// Percentage (as a fraction) of estimates whose image-plane angle to the
/// target is below `alpha_deg`. Thresholds of 180° or more accept all.
pub fn pcgd(estimates: &[GazeEstimate], targets: &[Point3], target_view: &CameraParams, alpha_deg: f64) -> Result<f64> {
    if estimates.len() != targets.len() {
        return Err(Error::LengthMismatch {
            left: estimates.len(),
            right: targets.len(),
        });
    }
    if estimates.is_empty() {
        return Err(Error::InvalidInput("no gaze estimates".into()));
    }
    let mut correct = 0;
    for (e, t) in estimates.iter().zip(targets) {
        let angle = image_gaze_angle_deg(e, t, target_view)?;
        if alpha_deg >= 180.0 || angle < alpha_deg {
            correct += 1;
        }
    }
    Ok(correct as f64 / estimates.len() as f64)
}
