//! Simplified articulated body: a 17-joint kinematic tree with capsule
//! surfaces and anthropometric priors.
//!
//! Body frame: up is −y, forward is +z and the body's left is −x, so an
//! unrotated body stands upright in front of a camera whose image y axis
//! points down. The pelvis is the root; its camera-frame position is the
//! root translation.
//!
//! Parameter layout (flattened): `[pose (3 per articulated joint), shape (4),
//! root translation (3)]`. Shape is `[s, torso, arms, legs]`: a global scale
//! followed by regional log-scales.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DVector, Matrix3, Matrix3xX, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{axis_angle_derivatives, rotation_from_axis_angle};

pub const NUM_JOINTS: usize = 17;
pub const SHAPE_DIM: usize = 4;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis",
    "spine",
    "neck",
    "head",
    "nose",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

pub const PELVIS: usize = 0;
pub const SPINE: usize = 1;
pub const NECK: usize = 2;
pub const HEAD: usize = 3;
pub const NOSE: usize = 4;
pub const LEFT_SHOULDER: usize = 5;
pub const RIGHT_SHOULDER: usize = 6;
pub const LEFT_ELBOW: usize = 7;
pub const RIGHT_ELBOW: usize = 8;
pub const LEFT_HIP: usize = 11;
pub const RIGHT_HIP: usize = 12;
pub const LEFT_KNEE: usize = 13;
pub const RIGHT_KNEE: usize = 14;

/// Joints used by the torso-only initialization stage.
pub const TORSO_JOINTS: [usize; 7] = [PELVIS, SPINE, NECK, LEFT_SHOULDER, RIGHT_SHOULDER, LEFT_HIP, RIGHT_HIP];

/// Canonical gaze direction in the head frame.
pub const FORWARD_AXIS: [f64; 3] = [0.0, 0.0, 1.0];

/// Flexion limit for knees and elbows, radians.
pub const MAX_FLEXION: f64 = 2.6;

/// Global-scale bounds.
pub const SCALE_BOUNDS: (f64, f64) = (0.5, 1.5);
/// Bounds on each regional log-scale offset.
pub const REGION_BOUNDS: (f64, f64) = (-0.3, 0.3);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Torso,
    Arms,
    Legs,
}

impl Region {
    fn shape_index(self) -> usize {
        match self {
            Region::Torso => 1,
            Region::Arms => 2,
            Region::Legs => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapsuleRadii {
    pub limb: f64,
    pub torso: f64,
    pub head: f64,
}

impl Default for CapsuleRadii {
    fn default() -> Self {
        CapsuleRadii {
            limb: 0.07,
            torso: 0.12,
            head: 0.09,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapsuleClass {
    Limb,
    Torso,
    Head,
}

/// Kinematic tree and rest geometry of the 1.7 m template.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    /// Parent joint index, `None` for the root.
    pub parents: Vec<Option<usize>>,
    /// Rest offset of each joint from its parent in the parent frame, meters.
    pub offsets: Vec<[f64; 3]>,
    /// Shape region scaling the bone that ends at each joint.
    pub regions: Vec<Region>,
    /// Capsule class of the bone that ends at each joint.
    pub capsules: Vec<CapsuleClass>,
    pub radii: CapsuleRadii,
    /// Crown height above the head joint, meters.
    pub crown_height: f64,
    /// Sole depth below the ankle joints, meters.
    pub sole_depth: f64,
}

impl Default for Skeleton {
    fn default() -> Self {
        use CapsuleClass as C;
        use Region as R;
        let table: [(Option<usize>, [f64; 3], R, C); NUM_JOINTS] = [
            (None, [0.0, 0.0, 0.0], R::Torso, C::Torso),
            (Some(PELVIS), [0.0, -0.25, -0.02], R::Torso, C::Torso),
            (Some(SPINE), [0.0, -0.27, 0.0], R::Torso, C::Torso),
            (Some(NECK), [0.0, -0.13, 0.02], R::Torso, C::Head),
            (Some(HEAD), [0.0, 0.0, 0.10], R::Torso, C::Head),
            (Some(NECK), [-0.18, 0.04, 0.0], R::Torso, C::Torso),
            (Some(NECK), [0.18, 0.04, 0.0], R::Torso, C::Torso),
            (Some(LEFT_SHOULDER), [0.0, 0.29, 0.0], R::Arms, C::Limb),
            (Some(RIGHT_SHOULDER), [0.0, 0.29, 0.0], R::Arms, C::Limb),
            (Some(LEFT_ELBOW), [0.0, 0.26, 0.0], R::Arms, C::Limb),
            (Some(RIGHT_ELBOW), [0.0, 0.26, 0.0], R::Arms, C::Limb),
            (Some(PELVIS), [-0.10, 0.02, 0.0], R::Torso, C::Torso),
            (Some(PELVIS), [0.10, 0.02, 0.0], R::Torso, C::Torso),
            (Some(LEFT_HIP), [0.0, 0.43, 0.0], R::Legs, C::Limb),
            (Some(RIGHT_HIP), [0.0, 0.43, 0.0], R::Legs, C::Limb),
            (Some(LEFT_KNEE), [0.0, 0.42, 0.0], R::Legs, C::Limb),
            (Some(RIGHT_KNEE), [0.0, 0.42, 0.0], R::Legs, C::Limb),
        ];
        Skeleton {
            parents: table.iter().map(|t| t.0).collect(),
            offsets: table.iter().map(|t| t.1).collect(),
            regions: table.iter().map(|t| t.2).collect(),
            capsules: table.iter().map(|t| t.3).collect(),
            radii: CapsuleRadii::default(),
            crown_height: 0.10,
            sole_depth: 0.08,
        }
    }
}

impl Skeleton {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let skeleton: Skeleton =
            serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
        skeleton.validate()?;
        Ok(skeleton)
    }

    pub fn validate(&self) -> Result<()> {
        let n = NUM_JOINTS;
        if self.parents.len() != n || self.offsets.len() != n || self.regions.len() != n || self.capsules.len() != n {
            return Err(Error::InvalidInput(format!(
                "skeleton tables must all have {n} entries"
            )));
        }
        if self.parents[PELVIS].is_some() {
            return Err(Error::InvalidInput("pelvis must be the root".into()));
        }
        for (j, parent) in self.parents.iter().enumerate().skip(1) {
            match parent {
                // Parents precede children, which rules out cycles and extra roots.
                Some(p) if *p < j => {}
                _ => {
                    return Err(Error::InvalidInput(format!(
                        "joint {} must have a parent with a smaller index",
                        JOINT_NAMES[j]
                    )))
                }
            }
        }
        if [self.radii.limb, self.radii.torso, self.radii.head]
            .iter()
            .any(|r| !(*r > 0.0))
        {
            return Err(Error::InvalidInput("capsule radii must be positive".into()));
        }
        Ok(())
    }

    pub fn offset(&self, joint: usize) -> Vector3<f64> {
        Vector3::from(self.offsets[joint])
    }

    /// Joints that carry a rotation (every joint with at least one child).
    pub fn articulated(&self) -> Vec<usize> {
        (0..NUM_JOINTS).filter(|j| self.parents.contains(&Some(*j))).collect()
    }

    pub fn radius(&self, joint: usize) -> f64 {
        match self.capsules[joint] {
            CapsuleClass::Limb => self.radii.limb,
            CapsuleClass::Torso => self.radii.torso,
            CapsuleClass::Head => self.radii.head,
        }
    }

    /// Rest joint positions relative to the pelvis.
    pub fn template_joints(&self) -> Vec<Vector3<f64>> {
        let mut out = vec![Vector3::zeros(); NUM_JOINTS];
        for j in 1..NUM_JOINTS {
            out[j] = out[self.parents[j].unwrap()] + self.offset(j);
        }
        out
    }

    /// Standing height of the template from sole to crown, meters.
    pub fn template_height(&self) -> f64 {
        let joints = self.template_joints();
        let top = joints[HEAD].y - self.crown_height;
        let bottom = joints.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max) + self.sole_depth;
        bottom - top
    }
}

/// Pose, shape and camera-frame root translation of one person instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyParams {
    /// Axis-angle rotations, three values per articulated joint.
    pub pose: Vec<f64>,
    /// `[s, torso, arms, legs]`.
    pub shape: [f64; SHAPE_DIM],
    pub root_translation_cam: [f64; 3],
}

impl BodyParams {
    pub fn rest(model: &BodyModel) -> Self {
        BodyParams {
            pose: vec![0.0; model.pose_dim()],
            shape: [1.0, 0.0, 0.0, 0.0],
            root_translation_cam: [0.0; 3],
        }
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::from(self.root_translation_cam)
    }

    pub fn rotation(&self, slot: usize) -> Vector3<f64> {
        Vector3::new(self.pose[3 * slot], self.pose[3 * slot + 1], self.pose[3 * slot + 2])
    }

    pub fn set_rotation(&mut self, slot: usize, v: &Vector3<f64>) {
        self.pose[3 * slot..3 * slot + 3].copy_from_slice(v.as_slice());
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.pose.len() + SHAPE_DIM + 3);
        v.extend_from_slice(&self.pose);
        v.extend_from_slice(&self.shape);
        v.extend_from_slice(&self.root_translation_cam);
        DVector::from_vec(v)
    }

    pub fn from_slice(model: &BodyModel, values: &[f64]) -> Self {
        let p = model.pose_dim();
        debug_assert_eq!(values.len(), model.param_dim());
        BodyParams {
            pose: values[..p].to_vec(),
            shape: values[p..p + SHAPE_DIM].try_into().unwrap(),
            root_translation_cam: values[p + SHAPE_DIM..p + SHAPE_DIM + 3].try_into().unwrap(),
        }
    }

    pub fn validate(&self, model: &BodyModel) -> Result<()> {
        if self.pose.len() != model.pose_dim() {
            return Err(Error::LengthMismatch {
                left: self.pose.len(),
                right: model.pose_dim(),
            });
        }
        let all_finite = self.pose.iter().all(|v| v.is_finite())
            && self.shape.iter().all(|v| v.is_finite())
            && self.root_translation_cam.iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidInput("body parameters must be finite".into()));
        }
        let s = self.shape[0];
        if !(SCALE_BOUNDS.0..=SCALE_BOUNDS.1).contains(&s) {
            return Err(Error::InvalidInput(format!(
                "global scale {s} outside [{}, {}]",
                SCALE_BOUNDS.0, SCALE_BOUNDS.1
            )));
        }
        for slot in 0..model.pose_dim() / 3 {
            if self.rotation(slot).norm() > PI + 1e-12 {
                return Err(Error::InvalidInput(format!(
                    "axis-angle magnitude exceeds pi at slot {slot}"
                )));
            }
        }
        Ok(())
    }
}

/// Joint positions (and optionally their parameter Jacobians) in the camera frame.
#[derive(Clone, Debug)]
pub struct Posed {
    pub joints: Vec<Vector3<f64>>,
    /// Global rotation of each joint's frame.
    pub frames: Vec<Matrix3<f64>>,
    /// One 3×P Jacobian per joint.
    pub jacobians: Option<Vec<Matrix3xX<f64>>>,
}

/// Capsule surface points of a posed body.
#[derive(Clone, Debug)]
pub struct SurfaceSamples {
    pub points: Vec<Vector3<f64>>,
    /// Child joint of the bone each sample belongs to.
    pub bones: Vec<usize>,
    /// Capsule radius of each sample's bone.
    pub radii: Vec<f64>,
    pub jacobians: Option<Vec<Matrix3xX<f64>>>,
}

/// Weights of the anthropometric prior terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorWeights {
    pub pose: f64,
    pub hinge: f64,
    pub shape: f64,
}

impl Default for PriorWeights {
    fn default() -> Self {
        PriorWeights {
            pose: 0.1,
            hinge: 100.0,
            shape: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PriorBreakdown {
    pub pose: f64,
    pub hinge: f64,
    pub shape: f64,
}

impl PriorBreakdown {
    pub fn total(&self) -> f64 {
        self.pose + self.hinge + self.shape
    }
}

/// A skeleton plus the derived index tables used during posing.
#[derive(Clone, Debug)]
pub struct BodyModel {
    skeleton: Skeleton,
    /// Pose slot of each joint, if articulated.
    slot_of: Vec<Option<usize>>,
    articulated: Vec<usize>,
    /// `subtree[a]` lists `a` and all its descendants.
    subtree: Vec<Vec<usize>>,
    bones: Vec<usize>,
    /// Hinge joints with the sign turning the x rotation into flexion.
    hinges: Vec<(usize, f64)>,
}

impl Default for BodyModel {
    fn default() -> Self {
        BodyModel::new(Skeleton::default()).expect("default skeleton is valid")
    }
}

impl BodyModel {
    pub fn new(skeleton: Skeleton) -> Result<Self> {
        skeleton.validate()?;
        let articulated = skeleton.articulated();
        let mut slot_of = vec![None; NUM_JOINTS];
        for (slot, &j) in articulated.iter().enumerate() {
            slot_of[j] = Some(slot);
        }
        let mut subtree: Vec<Vec<usize>> = (0..NUM_JOINTS).map(|j| vec![j]).collect();
        for j in (1..NUM_JOINTS).rev() {
            let mut ancestor = skeleton.parents[j];
            while let Some(a) = ancestor {
                subtree[a].push(j);
                ancestor = skeleton.parents[a];
            }
        }
        for list in &mut subtree {
            list.sort_unstable();
        }
        let bones = (1..NUM_JOINTS).collect();
        // Knees flex backward (−z), elbows forward (+z); a positive x rotation
        // swings a downward bone toward +z.
        let hinges = vec![
            (LEFT_KNEE, -1.0),
            (RIGHT_KNEE, -1.0),
            (LEFT_ELBOW, 1.0),
            (RIGHT_ELBOW, 1.0),
        ]
        .into_iter()
        .filter(|(j, _)| slot_of[*j].is_some())
        .collect();
        Ok(BodyModel {
            skeleton,
            slot_of,
            articulated,
            subtree,
            bones,
            hinges,
        })
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn pose_dim(&self) -> usize {
        3 * self.articulated.len()
    }

    pub fn param_dim(&self) -> usize {
        self.pose_dim() + SHAPE_DIM + 3
    }

    pub fn shape_offset(&self) -> usize {
        self.pose_dim()
    }

    pub fn translation_offset(&self) -> usize {
        self.pose_dim() + SHAPE_DIM
    }

    pub fn slot(&self, joint: usize) -> Option<usize> {
        self.slot_of[joint]
    }

    pub fn articulated(&self) -> &[usize] {
        &self.articulated
    }

    pub fn bone_count(&self) -> usize {
        self.bones.len()
    }

    pub fn hinges(&self) -> &[(usize, f64)] {
        &self.hinges
    }

    fn bone_scale(&self, params: &BodyParams, joint: usize) -> f64 {
        params.shape[0] * params.shape[self.skeleton.regions[joint].shape_index()].exp()
    }

    /// Posed joint positions in the camera frame.
    pub fn forward_kinematics(&self, params: &BodyParams) -> Vec<Vector3<f64>> {
        self.pose(params, false).joints
    }

    /// Forward kinematics with optional analytic Jacobians.
    pub fn pose(&self, params: &BodyParams, with_jacobian: bool) -> Posed {
        let sk = &self.skeleton;
        let mut local = vec![Matrix3::identity(); NUM_JOINTS];
        for (slot, &j) in self.articulated.iter().enumerate() {
            local[j] = rotation_from_axis_angle(&params.rotation(slot));
        }
        let mut frames = vec![Matrix3::identity(); NUM_JOINTS];
        let mut joints = vec![Vector3::zeros(); NUM_JOINTS];
        // Offsets after shape scaling, expressed in the world (camera) frame.
        let mut bone_vec = vec![Vector3::zeros(); NUM_JOINTS];
        joints[PELVIS] = params.translation();
        frames[PELVIS] = local[PELVIS];
        for j in 1..NUM_JOINTS {
            let p = sk.parents[j].unwrap();
            bone_vec[j] = frames[p] * (sk.offset(j) * self.bone_scale(params, j));
            joints[j] = joints[p] + bone_vec[j];
            frames[j] = frames[p] * local[j];
        }

        let jacobians = with_jacobian.then(|| {
            let dim = self.param_dim();
            let mut jac = vec![Matrix3xX::zeros(dim); NUM_JOINTS];
            let root = params.translation();
            let s = params.shape[0];
            for (slot, &a) in self.articulated.iter().enumerate() {
                let parent_frame = sk.parents[a].map_or(Matrix3::identity(), |p| frames[p]);
                let derivs = axis_angle_derivatives(&params.rotation(slot));
                for (i, d) in derivs.iter().enumerate() {
                    let w = parent_frame * d * local[a].transpose() * parent_frame.transpose();
                    for &c in &self.subtree[a][1..] {
                        let col = w * (joints[c] - joints[a]);
                        jac[c].set_column(3 * slot + i, &col);
                    }
                }
            }
            let so = self.shape_offset();
            let to = self.translation_offset();
            for j in 0..NUM_JOINTS {
                jac[j].set_column(so, &((joints[j] - root) / s));
                if let Some(p) = sk.parents[j] {
                    for r in 1..SHAPE_DIM {
                        let mut col: Vector3<f64> = jac[p].column(so + r).into_owned();
                        if sk.regions[j].shape_index() == r {
                            col += bone_vec[j];
                        }
                        jac[j].set_column(so + r, &col);
                    }
                }
                jac[j].fixed_view_mut::<3, 3>(0, to).copy_from(&Matrix3::identity());
            }
            jac
        });

        Posed {
            joints,
            frames,
            jacobians,
        }
    }

    /// Deterministic capsule samples, `samples_per_bone` per bone.
    pub fn surface_samples(&self, params: &BodyParams, samples_per_bone: usize, with_jacobian: bool) -> SurfaceSamples {
        let posed = self.pose(params, with_jacobian);
        self.surface_from_posed(params, &posed, samples_per_bone)
    }

    pub(crate) fn surface_from_posed(
        &self,
        params: &BodyParams,
        posed: &Posed,
        samples_per_bone: usize,
    ) -> SurfaceSamples {
        const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;
        let sk = &self.skeleton;
        let k = samples_per_bone.max(1);
        let count = self.bones.len() * k;
        let mut points = Vec::with_capacity(count);
        let mut bones = Vec::with_capacity(count);
        let mut radii = Vec::with_capacity(count);
        let mut jacobians = posed.jacobians.as_ref().map(|_| Vec::with_capacity(count));
        let root = params.translation();
        let s = params.shape[0];
        let so = self.shape_offset();

        for (b, &c) in self.bones.iter().enumerate() {
            let p = sk.parents[c].unwrap();
            let scale = self.bone_scale(params, c);
            let offset = sk.offset(c);
            let (e1, e2) = perpendicular_basis(&offset);
            let radius = sk.radius(c) * scale;
            for i in 0..k {
                let f = (i as f64 + 0.5) / k as f64;
                let phi = b as f64 * 0.5 + i as f64 * GOLDEN_ANGLE;
                let radial = e1 * phi.cos() + e2 * phi.sin();
                let local = offset * (f * scale) + radial * radius;
                let rel = posed.frames[p] * local;
                let q = posed.joints[p] + rel;
                points.push(q);
                bones.push(c);
                radii.push(radius);

                if let (Some(out), Some(jj)) = (jacobians.as_mut(), posed.jacobians.as_ref()) {
                    let mut jac = Matrix3xX::zeros(self.param_dim());
                    let mut ancestor = Some(p);
                    while let Some(a) = ancestor {
                        if let Some(slot) = self.slot_of[a] {
                            let parent_frame = sk.parents[a].map_or(Matrix3::identity(), |pp| posed.frames[pp]);
                            let local_a = parent_frame.transpose() * posed.frames[a];
                            let derivs = axis_angle_derivatives(&params.rotation(slot));
                            for (i, d) in derivs.iter().enumerate() {
                                let w = parent_frame * d * local_a.transpose() * parent_frame.transpose();
                                jac.set_column(3 * slot + i, &(w * (q - posed.joints[a])));
                            }
                        }
                        ancestor = sk.parents[a];
                    }
                    jac.set_column(so, &((q - root) / s));
                    for r in 1..SHAPE_DIM {
                        let mut col: Vector3<f64> = jj[p].column(so + r).into_owned();
                        if sk.regions[c].shape_index() == r {
                            col += rel;
                        }
                        jac.set_column(so + r, &col);
                    }
                    let to = self.translation_offset();
                    jac.fixed_view_mut::<3, 3>(0, to).copy_from(&Matrix3::identity());
                    out.push(jac);
                }
            }
        }
        SurfaceSamples {
            points,
            bones,
            radii,
            jacobians,
        }
    }

    /// Segment endpoints `(parent, child)` of the bone ending at `joint`.
    pub fn bone_segment(&self, joints: &[Vector3<f64>], joint: usize) -> (Vector3<f64>, Vector3<f64>) {
        (joints[self.skeleton.parents[joint].unwrap()], joints[joint])
    }

    /// Prior residuals; their squared sum is the prior energy.
    ///
    /// Layout: quadratic pose residuals for every non-root articulated
    /// component, two hinge residuals per knee/elbow (hyperextension, then
    /// over-flexion), and four shape residuals.
    pub fn prior_residuals(&self, params: &BodyParams, weights: &PriorWeights) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.prior_residual_count());
        let wp = weights.pose.sqrt();
        for (slot, &j) in self.articulated.iter().enumerate() {
            if j == PELVIS {
                continue;
            }
            for i in 0..3 {
                out.push(wp * params.pose[3 * slot + i]);
            }
        }
        let wh = weights.hinge.sqrt();
        for &(j, sign) in &self.hinges {
            let flex = sign * params.pose[3 * self.slot_of[j].unwrap()];
            out.push(wh * flex.min(0.0));
            out.push(wh * (flex - MAX_FLEXION).max(0.0));
        }
        let ws = weights.shape.sqrt();
        out.push(ws * (params.shape[0] - 1.0));
        for r in 1..SHAPE_DIM {
            out.push(ws * params.shape[r]);
        }
        out
    }

    pub fn prior_residual_count(&self) -> usize {
        let pose = 3 * self.articulated.iter().filter(|&&j| j != PELVIS).count();
        pose + 2 * self.hinges.len() + SHAPE_DIM
    }

    /// Jacobian of [`Self::prior_residuals`]; a sparse list of
    /// `(row, column, value)` entries.
    pub fn prior_jacobian(&self, params: &BodyParams, weights: &PriorWeights) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        let mut row = 0;
        let wp = weights.pose.sqrt();
        for (slot, &j) in self.articulated.iter().enumerate() {
            if j == PELVIS {
                continue;
            }
            for i in 0..3 {
                out.push((row, 3 * slot + i, wp));
                row += 1;
            }
        }
        let wh = weights.hinge.sqrt();
        for &(j, sign) in &self.hinges {
            let col = 3 * self.slot_of[j].unwrap();
            let flex = sign * params.pose[col];
            if flex < 0.0 {
                out.push((row, col, wh * sign));
            }
            if flex > MAX_FLEXION {
                out.push((row + 1, col, wh * sign));
            }
            row += 2;
        }
        let ws = weights.shape.sqrt();
        for r in 0..SHAPE_DIM {
            out.push((row + r, self.shape_offset() + r, ws));
        }
        out
    }

    pub fn prior_breakdown(&self, params: &BodyParams, weights: &PriorWeights) -> PriorBreakdown {
        let res = self.prior_residuals(params, weights);
        let n_pose = 3 * self.articulated.iter().filter(|&&j| j != PELVIS).count();
        let n_hinge = 2 * self.hinges.len();
        let sq = |s: &[f64]| s.iter().map(|v| v * v).sum::<f64>();
        PriorBreakdown {
            pose: sq(&res[..n_pose]),
            hinge: sq(&res[n_pose..n_pose + n_hinge]),
            shape: sq(&res[n_pose + n_hinge..]),
        }
    }

    pub fn prior_energy(&self, params: &BodyParams, weights: &PriorWeights) -> f64 {
        self.prior_breakdown(params, weights).total()
    }

    /// Rewrites every axis-angle with magnitude above π as the equivalent
    /// rotation with magnitude below π.
    pub fn wrap_rotations(pose: &mut [f64]) {
        for chunk in pose.chunks_exact_mut(3) {
            let v = Vector3::new(chunk[0], chunk[1], chunk[2]);
            let n = v.norm();
            if n > PI && n.is_finite() {
                let mut angle = n.rem_euclid(2.0 * PI);
                if angle > PI {
                    angle -= 2.0 * PI;
                }
                let wrapped = v * (angle / n);
                chunk.copy_from_slice(wrapped.as_slice());
            }
        }
    }

    /// Per-parameter box bounds; pose components are bounded by ±π.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lower = vec![-PI; self.pose_dim()];
        let mut upper = vec![PI; self.pose_dim()];
        lower.push(SCALE_BOUNDS.0);
        upper.push(SCALE_BOUNDS.1);
        for _ in 1..SHAPE_DIM {
            lower.push(REGION_BOUNDS.0);
            upper.push(REGION_BOUNDS.1);
        }
        for _ in 0..3 {
            lower.push(f64::NEG_INFINITY);
            upper.push(f64::INFINITY);
        }
        (lower, upper)
    }
}

fn perpendicular_basis(direction: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let d = direction.normalize();
    let helper = if d.x.abs() <= d.y.abs() && d.x.abs() <= d.z.abs() {
        Vector3::x()
    } else if d.y.abs() <= d.z.abs() {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let e1 = (helper - d * helper.dot(&d)).normalize();
    let e2 = d.cross(&e1);
    (e1, e2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_params(model: &BodyModel, rng: &mut impl Rng) -> BodyParams {
        let mut params = BodyParams::rest(model);
        for v in params.pose.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        BodyModel::wrap_rotations(&mut params.pose);
        params.shape = [
            rng.random_range(0.7..1.3),
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.2..0.2),
        ];
        params.root_translation_cam = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(3.0..8.0),
        ];
        params
    }

    fn point_segment_distance(q: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
        let ab = b - a;
        let t = ((q - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
        (q - (a + ab * t)).norm()
    }

    #[test]
    fn template_is_a_valid_tree_of_the_right_height() {
        let sk = Skeleton::default();
        sk.validate().unwrap();
        assert_relative_eq!(sk.template_height(), 1.70, epsilon = 1e-6);
        assert_eq!(BodyModel::default().pose_dim(), 36);
        assert_eq!(BodyModel::default().param_dim(), 43);
    }

    #[test]
    fn rejects_cyclic_topology() {
        let mut sk = Skeleton::default();
        sk.parents[SPINE] = Some(NECK);
        assert!(sk.validate().is_err());
        let mut sk = Skeleton::default();
        sk.parents[SPINE] = None;
        assert!(sk.validate().is_err());
    }

    #[test]
    fn rest_pose_reproduces_template() {
        let model = BodyModel::default();
        let joints = model.forward_kinematics(&BodyParams::rest(&model));
        for (got, want) in joints.iter().zip(model.skeleton().template_joints()) {
            assert_eq!(*got, want);
        }
    }

    #[test]
    fn global_scale_scales_every_joint() {
        let model = BodyModel::default();
        let mut params = BodyParams::rest(&model);
        params.shape[0] = 1.1;
        let joints = model.forward_kinematics(&params);
        for (got, want) in joints.iter().zip(model.skeleton().template_joints()) {
            assert!((got - want * 1.1).norm() < 1e-12);
        }
    }

    #[test]
    fn bone_lengths_are_pose_invariant() {
        let model = BodyModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let params = random_params(&model, &mut rng);
            let joints = model.forward_kinematics(&params);
            for j in 1..NUM_JOINTS {
                let (a, b) = model.bone_segment(&joints, j);
                let expected = model.skeleton().offset(j).norm() * model.bone_scale(&params, j);
                assert!(((b - a).norm() - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn root_rotation_is_equivariant() {
        let model = BodyModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let params = random_params(&model, &mut rng);
            let extra = rotation_from_axis_angle(&Vector3::new(0.4, -0.9, 0.2));
            let mut rotated = params.clone();
            let root =
                crate::geometry::axis_angle_from_rotation(&(extra * rotation_from_axis_angle(&params.rotation(0))));
            rotated.set_rotation(0, &root);
            let a = model.forward_kinematics(&params);
            let b = model.forward_kinematics(&rotated);
            let t = params.translation();
            for (pa, pb) in a.iter().zip(&b) {
                assert!((extra * (pa - t) + t - pb).norm() < 1e-9);
            }
        }
    }

    fn max_rel_error(analytic: &Matrix3xX<f64>, fd: &Matrix3xX<f64>) -> f64 {
        (analytic - fd).norm() / fd.norm().max(1e-12)
    }

    #[test]
    fn joint_jacobian_matches_central_differences() {
        let model = BodyModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-6;
        for _ in 0..30 {
            let params = random_params(&model, &mut rng);
            let posed = model.pose(&params, true);
            let jac = posed.jacobians.unwrap();
            let x = params.to_vector();
            let mut fd = vec![Matrix3xX::zeros(model.param_dim()); NUM_JOINTS];
            for k in 0..model.param_dim() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let jp = model.forward_kinematics(&BodyParams::from_slice(&model, xp.as_slice()));
                let jm = model.forward_kinematics(&BodyParams::from_slice(&model, xm.as_slice()));
                for j in 0..NUM_JOINTS {
                    fd[j].set_column(k, &((jp[j] - jm[j]) / (2.0 * h)));
                }
            }
            for j in 0..NUM_JOINTS {
                assert!(max_rel_error(&jac[j], &fd[j]) < 1e-5, "joint {j}");
            }
        }
    }

    #[test]
    fn surface_jacobian_matches_central_differences() {
        let model = BodyModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let h = 1e-6;
        for _ in 0..10 {
            let params = random_params(&model, &mut rng);
            let samples = model.surface_samples(&params, 3, true);
            let jac = samples.jacobians.unwrap();
            let x = params.to_vector();
            for k in 0..model.param_dim() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let sp = model.surface_samples(&BodyParams::from_slice(&model, xp.as_slice()), 3, false);
                let sm = model.surface_samples(&BodyParams::from_slice(&model, xm.as_slice()), 3, false);
                for i in 0..samples.points.len() {
                    let fd = (sp.points[i] - sm.points[i]) / (2.0 * h);
                    let col = jac[i].column(k);
                    assert!((col - fd).norm() <= 1e-5 * fd.norm().max(1e-3), "sample {i}, param {k}");
                }
            }
        }
    }

    #[test]
    fn rest_midpoint_samples_are_deterministic() {
        let model = BodyModel::default();
        let params = BodyParams::rest(&model);
        let a = model.surface_samples(&params, 1, false);
        let b = model.surface_samples(&params, 1, false);
        assert_eq!(a.points, b.points);
        assert_eq!(a.points.len(), model.bone_count());
        let joints = model.forward_kinematics(&params);
        for (i, q) in a.points.iter().enumerate() {
            let (p0, p1) = model.bone_segment(&joints, a.bones[i]);
            let mid = (p0 + p1) / 2.0;
            assert_relative_eq!((q - mid).norm(), a.radii[i], epsilon = 1e-12);
            assert!(((q - mid).dot(&(p1 - p0))).abs() < 1e-12);
        }
    }

    #[test]
    fn samples_scale_with_the_body() {
        let model = BodyModel::default();
        let mut params = BodyParams::rest(&model);
        let base = model.surface_samples(&params, 4, false);
        params.shape[0] = 1.3;
        let scaled = model.surface_samples(&params, 4, false);
        for (a, b) in base.points.iter().zip(&scaled.points) {
            assert!((a * 1.3 - b).norm() < 1e-12);
        }
    }

    #[test]
    fn samples_lie_on_their_capsules() {
        let model = BodyModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let params = random_params(&model, &mut rng);
            let joints = model.forward_kinematics(&params);
            let samples = model.surface_samples(&params, 6, false);
            assert_eq!(samples.points.len(), 16 * 6);
            for i in 0..samples.points.len() {
                let (a, b) = model.bone_segment(&joints, samples.bones[i]);
                let d = point_segment_distance(&samples.points[i], &a, &b);
                assert!((d - samples.radii[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn prior_is_zero_at_rest() {
        let model = BodyModel::default();
        let energy = model.prior_energy(&BodyParams::rest(&model), &PriorWeights::default());
        assert_eq!(energy, 0.0);
    }

    #[test]
    fn knee_hyperextension_hinge_closed_form() {
        let model = BodyModel::default();
        let weights = PriorWeights::default();
        let mut params = BodyParams::rest(&model);
        // Positive x rotation swings the shin forward: the knee bends backward.
        params.pose[3 * model.slot(LEFT_KNEE).unwrap()] = 0.3;
        let b = model.prior_breakdown(&params, &weights);
        assert_relative_eq!(b.hinge, weights.hinge * 0.09, epsilon = 1e-15);
        params.pose[3 * model.slot(LEFT_KNEE).unwrap()] = -0.3;
        assert_eq!(model.prior_breakdown(&params, &weights).hinge, 0.0);
    }

    #[test]
    fn prior_grows_along_coordinate_rays() {
        let model = BodyModel::default();
        let weights = PriorWeights::default();
        let rest = BodyParams::rest(&model).to_vector();
        let tdim = model.translation_offset();
        for k in 0..tdim {
            for dir in [-1.0, 1.0] {
                let mut last = 0.0;
                for step in 1..=60 {
                    let mut x = rest.clone();
                    x[k] += dir * step as f64 * 0.05;
                    let e = model.prior_energy(&BodyParams::from_slice(&model, x.as_slice()), &weights);
                    assert!(e >= last, "param {k} dir {dir}");
                    last = e;
                }
            }
        }
    }

    #[test]
    fn prior_jacobian_matches_differences() {
        let model = BodyModel::default();
        let weights = PriorWeights::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = 1e-6;
        for _ in 0..20 {
            let mut params = random_params(&model, &mut rng);
            // Push a knee and an elbow into the hinge regions.
            params.pose[3 * model.slot(LEFT_KNEE).unwrap()] = 0.4;
            params.pose[3 * model.slot(RIGHT_ELBOW).unwrap()] = 2.9;
            let x = params.to_vector();
            let rows = model.prior_residual_count();
            let mut dense = vec![vec![0.0; model.param_dim()]; rows];
            for (r, c, v) in model.prior_jacobian(&params, &weights) {
                dense[r][c] += v;
            }
            for k in 0..model.param_dim() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let rp = model.prior_residuals(&BodyParams::from_slice(&model, xp.as_slice()), &weights);
                let rm = model.prior_residuals(&BodyParams::from_slice(&model, xm.as_slice()), &weights);
                for r in 0..rows {
                    let fd = (rp[r] - rm[r]) / (2.0 * h);
                    assert!((dense[r][k] - fd).abs() < 1e-6 * fd.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn wrapping_preserves_rotation() {
        let mut pose = vec![2.5, 2.0, -1.0];
        let before = rotation_from_axis_angle(&Vector3::new(pose[0], pose[1], pose[2]));
        BodyModel::wrap_rotations(&mut pose);
        let v = Vector3::new(pose[0], pose[1], pose[2]);
        assert!(v.norm() <= PI);
        assert!((rotation_from_axis_angle(&v) - before).amax() < 1e-12);
    }
}
