//! Body-fitting objective shared by the multi-shot and monocular solvers.
//!
//! A problem holds one or two body blocks. Each block is observed by one
//! camera through one detection and exposes a subset of its parameters to
//! the optimizer. The residual vector is laid out as
//! reprojection (all blocks), priors (all blocks), cross-shot agreement,
//! structure (one per block).

use std::f64::consts::PI;
use std::ops::Range;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Matrix3, Rotation3, RowVector3, Vector2, Vector3};

use crate::body::{
    BodyModel, BodyParams, PriorWeights, MAX_FLEXION, NUM_JOINTS, PELVIS, SCALE_BOUNDS, SHAPE_DIM, TORSO_JOINTS,
};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::geometry::{
    axis_angle_from_rotation, procrustes_align, rotation_from_axis_angle, triangulate, CameraParams, Point3,
};
use crate::multishot::Detection2D;
use crate::optim::{minimize, EnergyTerm, OptimReport, Problem};
use crate::scene::DensityGrid;

/// Depth below which projections are evaluated at this depth instead, so
/// residuals stay finite for bodies that wander behind the camera.
const DEPTH_GUARD: f64 = 1e-2;

/// Which parameters of a body the optimizer may change.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreeSet {
    All,
    /// Everything except shape.
    PoseAndTranslation,
    /// Root rotation and translation.
    Root,
}

impl FreeSet {
    pub fn indices(self, model: &BodyModel) -> Vec<usize> {
        let to = model.translation_offset();
        match self {
            FreeSet::All => (0..model.param_dim()).collect(),
            FreeSet::PoseAndTranslation => (0..model.pose_dim()).chain(to..to + 3).collect(),
            FreeSet::Root => {
                let root = 3 * model.slot(PELVIS).expect("pelvis is articulated");
                (root..root + 3).chain(to..to + 3).collect()
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Block<'a> {
    pub camera: &'a CameraParams,
    pub detection: &'a Detection2D,
    pub base: BodyParams,
    free: Vec<usize>,
    /// Joints contributing reprojection residuals.
    visible: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct BodyFit<'a> {
    model: &'a BodyModel,
    priors: PriorWeights,
    weight_reprojection: f64,
    reprojection_scale: f64,
    weight_glob: f64,
    weight_structure: f64,
    samples_per_bone: usize,
    blocks: Vec<Block<'a>>,
    glob: bool,
    structure: Option<(&'a DensityGrid, f64)>,
    joint_subset: Option<Vec<usize>>,
}

impl<'a> BodyFit<'a> {
    pub fn new(model: &'a BodyModel, config: &Config) -> Self {
        BodyFit {
            model,
            priors: config.priors(),
            weight_reprojection: config.weight_reprojection,
            reprojection_scale: config.reprojection_scale_px,
            weight_glob: config.weight_glob,
            weight_structure: config.weight_structure,
            samples_per_bone: config.samples_per_bone,
            blocks: Vec::new(),
            glob: false,
            structure: None,
            joint_subset: None,
        }
    }

    /// Restricts reprojection to `joints`. Must precede [`Self::block`].
    pub fn joints(mut self, joints: &[usize]) -> Self {
        self.joint_subset = Some(joints.to_vec());
        self
    }

    pub fn block(
        mut self,
        camera: &'a CameraParams,
        detection: &'a Detection2D,
        base: BodyParams,
        free: FreeSet,
    ) -> Self {
        let visible = (0..NUM_JOINTS)
            .filter(|&k| detection.confidences[k] > 0.0)
            .filter(|k| self.joint_subset.as_ref().is_none_or(|s| s.contains(k)))
            .collect();
        self.blocks.push(Block {
            camera,
            detection,
            base,
            free: free.indices(self.model),
            visible,
        });
        self
    }

    /// Adds the world-frame agreement term between the two blocks.
    pub fn glob(mut self) -> Self {
        self.glob = true;
        self
    }

    /// Adds the density penalty. `robust_scale` of 0 selects the grid default.
    pub fn structure(mut self, grid: &'a DensityGrid, robust_scale: f64) -> Self {
        let scale = if robust_scale > 0.0 {
            robust_scale
        } else {
            grid.default_robust_scale(self.model.bone_count() * self.samples_per_bone)
        };
        self.structure = Some((grid, scale));
        self
    }

    pub fn blocks(&self) -> &[Block<'a>] {
        &self.blocks
    }

    pub fn initial_vector(&self) -> DVector<f64> {
        let mut out = Vec::new();
        for b in &self.blocks {
            let full = b.base.to_vector();
            out.extend(b.free.iter().map(|&i| full[i]));
        }
        DVector::from_vec(out)
    }

    /// Full parameters of every block at `x`.
    pub fn params(&self, x: &DVector<f64>) -> Vec<BodyParams> {
        let mut offset = 0;
        self.blocks
            .iter()
            .map(|b| {
                let mut full = b.base.to_vector();
                for (a, &i) in b.free.iter().enumerate() {
                    full[i] = x[offset + a];
                }
                offset += b.free.len();
                BodyParams::from_slice(self.model, full.as_slice())
            })
            .collect()
    }

    fn reprojection_rows(&self) -> usize {
        self.blocks.iter().map(|b| 2 * b.visible.len()).sum()
    }

    fn prior_rows(&self) -> usize {
        self.blocks.len() * self.model.prior_residual_count()
    }

    fn glob_rows(&self) -> usize {
        if self.glob && self.blocks.len() == 2 {
            3 * NUM_JOINTS
        } else {
            0
        }
    }

    fn structure_rows(&self) -> usize {
        if self.structure.is_some() {
            self.blocks.len()
        } else {
            0
        }
    }

    pub fn solve(&self, lm: &crate::optim::LmConfig) -> Result<(Vec<BodyParams>, OptimReport)> {
        let (x, report) = minimize(self, &self.initial_vector(), lm)?;
        Ok((self.params(&x), report))
    }
}

/// Guarded pinhole projection of a camera-frame point and its 2×3 Jacobian.
fn project_guarded(camera: &CameraParams, p: &Vector3<f64>) -> (Vector2<f64>, Matrix2x3<f64>) {
    if p.z >= DEPTH_GUARD {
        let uv = camera.project_camera_unchecked(p);
        (uv, camera.projection_jacobian(p))
    } else {
        let q = Vector3::new(p.x, p.y, DEPTH_GUARD);
        let uv = camera.project_camera_unchecked(&q);
        let mut jac = camera.projection_jacobian(&q);
        jac.set_column(2, &Vector2::zeros());
        (uv, jac)
    }
}

/// Square-root Geman-McClure reprojection residual for one joint and its
/// derivative with respect to the pixel error.
///
/// `r = √(w) σ d / √(|d|² + σ²)` so that `|r|² = w σ² ρ(|d|)`.
fn robust_pixel(d: &Vector2<f64>, weight: f64, scale: f64) -> (Vector2<f64>, Matrix2<f64>) {
    let s2 = d.norm_squared() + scale * scale;
    let s = s2.sqrt();
    let a = weight.sqrt() * scale;
    let r = d * (a / s);
    let jac = (Matrix2::identity() / s - d * d.transpose() / (s2 * s)) * a;
    (r, jac)
}

impl Problem for BodyFit<'_> {
    fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.free.len()).sum()
    }

    fn residual_count(&self) -> usize {
        self.reprojection_rows() + self.prior_rows() + self.glob_rows() + self.structure_rows()
    }

    fn evaluate(&self, x: &DVector<f64>, mut jacobian: Option<&mut DMatrix<f64>>) -> DVector<f64> {
        let want = jacobian.is_some();
        let params = self.params(x);
        let posed: Vec<_> = params.iter().map(|p| self.model.pose(p, want)).collect();
        let mut r = DVector::zeros(self.residual_count());

        // Column of each full parameter index in x, per block.
        let mut column_maps = Vec::with_capacity(self.blocks.len());
        let mut offset = 0;
        for b in &self.blocks {
            let mut map = vec![None; self.model.param_dim()];
            for (a, &i) in b.free.iter().enumerate() {
                map[i] = Some(offset + a);
            }
            offset += b.free.len();
            column_maps.push(map);
        }
        let scatter = |jac: &mut DMatrix<f64>, row: usize, map: &[Option<usize>], values: &[f64]| {
            for (i, v) in values.iter().enumerate() {
                if let Some(c) = map[i] {
                    jac[(row, c)] += v;
                }
            }
        };

        let mut row = 0;
        for (bi, b) in self.blocks.iter().enumerate() {
            for &k in &b.visible {
                let p = posed[bi].joints[k];
                let (uv, pj) = project_guarded(b.camera, &p);
                let obs = b.detection.keypoints[k];
                let d = uv - obs.coords;
                let w = self.weight_reprojection * b.detection.confidences[k];
                let (res, dr) = robust_pixel(&d, w, self.reprojection_scale);
                r[row] = res.x;
                r[row + 1] = res.y;
                if let Some(jac) = jacobian.as_deref_mut() {
                    let jk = &posed[bi].jacobians.as_ref().unwrap()[k];
                    let full = (dr * pj) * jk;
                    for i in 0..2 {
                        let values: Vec<f64> = full.row(i).iter().copied().collect();
                        scatter(jac, row + i, &column_maps[bi], &values);
                    }
                }
                row += 2;
            }
        }

        for (bi, p) in params.iter().enumerate() {
            let res = self.model.prior_residuals(p, &self.priors);
            for (i, v) in res.iter().enumerate() {
                r[row + i] = *v;
            }
            if let Some(jac) = jacobian.as_deref_mut() {
                for (rr, c, v) in self.model.prior_jacobian(p, &self.priors) {
                    if let Some(col) = column_maps[bi][c] {
                        jac[(row + rr, col)] += v;
                    }
                }
            }
            row += res.len();
        }

        if self.glob_rows() > 0 {
            let w = self.weight_glob.sqrt();
            let cams = [self.blocks[0].camera, self.blocks[1].camera];
            for k in 0..NUM_JOINTS {
                let a = cams[0].camera_to_world(&posed[0].joints[k]);
                let b = cams[1].camera_to_world(&posed[1].joints[k]);
                let diff = (a - b) * w;
                for i in 0..3 {
                    r[row + i] = diff[i];
                }
                if let Some(jac) = jacobian.as_deref_mut() {
                    for (bi, sign) in [(0usize, 1.0), (1usize, -1.0)] {
                        let jk = &posed[bi].jacobians.as_ref().unwrap()[k];
                        let full = cams[bi].rotation_cw * jk * (sign * w);
                        for i in 0..3 {
                            let values: Vec<f64> = full.row(i).iter().copied().collect();
                            scatter(jac, row + i, &column_maps[bi], &values);
                        }
                    }
                }
                row += 3;
            }
        }

        if let Some((grid, scale)) = self.structure {
            let w = self.weight_structure.sqrt();
            for (bi, b) in self.blocks.iter().enumerate() {
                let samples = self
                    .model
                    .surface_from_posed(&params[bi], &posed[bi], self.samples_per_bone);
                let rot = b.camera.rotation_cw;
                let mut total = 0.0;
                let mut dsum = vec![0.0; self.model.param_dim()];
                for (si, q) in samples.points.iter().enumerate() {
                    let (v, g) = grid.sample_with_gradient(&b.camera.camera_to_world(q));
                    total += v;
                    if let Some(jacs) = samples.jacobians.as_ref() {
                        if v > 0.0 || g.norm_squared() > 0.0 {
                            let grad: RowVector3<f64> = g.transpose() * rot;
                            let contrib = grad * &jacs[si];
                            for (i, c) in contrib.iter().enumerate() {
                                dsum[i] += c;
                            }
                        }
                    }
                }
                let s2 = total * total + scale * scale;
                r[row] = w * total / s2.sqrt();
                if let Some(jac) = jacobian.as_deref_mut() {
                    let outer = w * scale * scale / (s2 * s2.sqrt());
                    let values: Vec<f64> = dsum.iter().map(|v| v * outer).collect();
                    scatter(jac, row, &column_maps[bi], &values);
                }
                row += 1;
            }
        }
        debug_assert_eq!(row, r.len());
        r
    }

    fn bounds(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let (lo, hi) = self.model.bounds();
        let mut lower = Vec::with_capacity(self.dim());
        let mut upper = Vec::with_capacity(self.dim());
        for b in &self.blocks {
            lower.extend(b.free.iter().map(|&i| lo[i]));
            upper.extend(b.free.iter().map(|&i| hi[i]));
        }
        Some((lower, upper))
    }

    fn project(&self, x: &mut DVector<f64>) {
        // Wrap whole axis-angle triples first, then clamp to the box.
        let pose_dim = self.model.pose_dim();
        let mut offset = 0;
        for b in &self.blocks {
            let mut a = 0;
            while a + 2 < b.free.len() {
                let i = b.free[a];
                if i < pose_dim && i % 3 == 0 && b.free[a + 1] == i + 1 && b.free[a + 2] == i + 2 {
                    let start = offset + a;
                    let mut triple = [x[start], x[start + 1], x[start + 2]];
                    BodyModel::wrap_rotations(&mut triple);
                    x.rows_mut(start, 3).copy_from_slice(&triple);
                    a += 3;
                } else {
                    a += 1;
                }
            }
            offset += b.free.len();
        }
        let (lo, hi) = self.bounds().unwrap();
        for i in 0..x.len() {
            x[i] = x[i].clamp(lo[i], hi[i]);
        }
    }

    fn term_layout(&self) -> Vec<(EnergyTerm, Range<usize>)> {
        let a = self.reprojection_rows();
        let b = a + self.prior_rows();
        let c = b + self.glob_rows();
        let d = c + self.structure_rows();
        vec![
            (EnergyTerm::Reprojection, 0..a),
            (EnergyTerm::Priors, a..b),
            (EnergyTerm::Glob, b..c),
            (EnergyTerm::Structure, c..d),
        ]
    }
}

/// Root orientation facing along the camera's +z rotated by `yaw` about the
/// body's vertical axis.
fn yaw_rotation(yaw: f64) -> Vector3<f64> {
    Vector3::new(0.0, yaw, 0.0)
}

/// Torso-only initialization: camera-frame root translation from the
/// apparent torso size, then root rotation and translation refined from
/// four yaw candidates. Pose stays at rest and `shape` is kept.
pub fn initialize(
    model: &BodyModel,
    config: &Config,
    camera: &CameraParams,
    detection: &Detection2D,
    shape: [f64; SHAPE_DIM],
) -> Result<BodyParams> {
    let torso: Vec<usize> = TORSO_JOINTS
        .iter()
        .copied()
        .filter(|&k| detection.confidences[k] > 0.0)
        .collect();
    if torso.len() < 2 {
        return Err(Error::InitializationFailed(format!(
            "{} confident torso keypoints, need at least 2",
            torso.len()
        )));
    }
    let mut rest = BodyParams::rest(model);
    rest.shape = shape;
    let template = model.forward_kinematics(&rest);

    let mut len3 = 0.0;
    let mut len2 = 0.0;
    for (a, &i) in torso.iter().enumerate() {
        for &j in &torso[a + 1..] {
            len3 += (template[i] - template[j]).norm();
            len2 += (detection.keypoints[i] - detection.keypoints[j]).norm();
        }
    }
    let focal = 0.5 * (camera.fx + camera.fy);
    let depth = focal * len3 / len2;
    if !depth.is_finite() || depth <= 0.0 {
        return Err(Error::InitializationFailed(format!("torso depth is {depth}")));
    }
    let n = torso.len() as f64;
    let pixel = torso
        .iter()
        .map(|&k| detection.keypoints[k].coords)
        .sum::<Vector2<f64>>()
        / n;
    let ray = Vector3::new(
        (pixel.x - camera.cx) / camera.fx,
        (pixel.y - camera.cy) / camera.fy,
        1.0,
    );
    let template_center = torso.iter().map(|&k| template[k]).sum::<Vector3<f64>>() / n;

    let slot = model.slot(PELVIS).expect("pelvis is articulated");
    let mut best: Option<(f64, BodyParams)> = None;
    for step in 0..4 {
        let yaw = step as f64 * 0.5 * PI;
        let mut candidate = rest.clone();
        let rv = yaw_rotation(if yaw > PI { yaw - 2.0 * PI } else { yaw });
        candidate.set_rotation(slot, &rv);
        let center = rotation_from_axis_angle(&rv) * template_center;
        let t = ray * depth - center;
        candidate.root_translation_cam = [t.x, t.y, t.z];
        let problem = BodyFit::new(model, config)
            .joints(&torso)
            .block(camera, detection, candidate, FreeSet::Root);
        let (mut fitted, report) = problem.solve(&config.init_lm())?;
        let energy = report.final_energy;
        if best.as_ref().is_none_or(|(e, _)| energy < *e) {
            best = Some((energy, fitted.remove(0)));
        }
    }
    Ok(best.expect("four candidates").1)
}

/// World-frame joints of a body fitted in `camera`'s frame.
pub fn world_joints(model: &BodyModel, params: &BodyParams, camera: &CameraParams) -> Vec<Point3> {
    model
        .forward_kinematics(params)
        .iter()
        .map(|p| camera.camera_to_world(p))
        .collect()
}

/// Expresses world-frame body parameters in a camera's frame.
pub fn to_camera_frame(model: &BodyModel, params_world: &BodyParams, camera: &CameraParams) -> BodyParams {
    let slot = model.slot(PELVIS).expect("pelvis is articulated");
    let root = camera.rotation_wc() * rotation_from_axis_angle(&params_world.rotation(slot));
    let t = camera.world_to_camera(&Point3::from(params_world.translation()));
    let mut out = params_world.clone();
    out.set_rotation(slot, &axis_angle_from_rotation(&root));
    out.root_translation_cam = [t.x, t.y, t.z];
    out
}

/// Moves a body fitted in `from`'s frame into `to`'s frame.
pub fn reframe(model: &BodyModel, params: &BodyParams, from: &CameraParams, to: &CameraParams) -> BodyParams {
    let slot = model.slot(PELVIS).expect("pelvis is articulated");
    let mut world = params.clone();
    let root = from.rotation_cw * rotation_from_axis_angle(&params.rotation(slot));
    world.set_rotation(slot, &axis_angle_from_rotation(&root));
    let t = from.camera_to_world(&params.translation());
    world.root_translation_cam = [t.x, t.y, t.z];
    to_camera_frame(model, &world, to)
}

/// Body fitted to the two-view triangulation of the co-visible joints,
/// expressed in `camera_t`'s frame. A rest body is first aligned to the
/// triangulated torso, then all parameters are fitted to the triangulated
/// joints. `None` when fewer than three torso joints triangulate in front
/// of both cameras.
pub fn triangulated_initialization(
    model: &BodyModel,
    config: &Config,
    camera_t: &CameraParams,
    det_t: &Detection2D,
    camera_t1: &CameraParams,
    det_t1: &Detection2D,
) -> Option<BodyParams> {
    let cameras = [camera_t.clone(), camera_t1.clone()];
    let mut points: Vec<Option<Point3>> = vec![None; NUM_JOINTS];
    for (k, slot) in points.iter_mut().enumerate() {
        if det_t.confidences[k] <= 0.0 || det_t1.confidences[k] <= 0.0 {
            continue;
        }
        if let Ok(p) = triangulate(&cameras, &[det_t.keypoints[k], det_t1.keypoints[k]]) {
            if cameras.iter().all(|c| c.world_to_camera(&p).z > 0.0) {
                *slot = Some(p);
            }
        }
    }
    let rest = BodyParams::rest(model);
    let template = model.forward_kinematics(&rest);
    let pairs = |joints: &mut dyn Iterator<Item = usize>| -> (Vec<Point3>, Vec<Point3>) {
        joints
            .filter_map(|k| points[k].map(|p| (Point3::from(template[k] - template[PELVIS]), p)))
            .unzip()
    };
    let (mut source, mut target) = pairs(&mut TORSO_JOINTS.iter().copied());
    if source.len() < 3 {
        // Limbs are less rigid than the torso but still anchor the root.
        (source, target) = pairs(&mut (0..NUM_JOINTS));
    }
    if source.len() < 3 {
        return None;
    }
    let sim = procrustes_align(&source, &target).ok()?;
    if !sim.scale.is_finite() || sim.scale <= 0.0 {
        return None;
    }
    let slot = model.slot(PELVIS).expect("pelvis is articulated");
    let mut world = rest;
    world.shape[0] = sim.scale.clamp(SCALE_BOUNDS.0, SCALE_BOUNDS.1);
    world.set_rotation(slot, &axis_angle_from_rotation(&sim.rotation));
    world.root_translation_cam = sim.translation.into();
    orient_limbs(model, &mut world, &points);
    let aligned = to_camera_frame(model, &world, camera_t);

    let targets: Vec<(usize, Vector3<f64>)> = points
        .iter()
        .enumerate()
        .filter_map(|(k, p)| p.map(|p| (k, camera_t.world_to_camera(&p))))
        .collect();
    let problem = PointFit {
        model,
        priors: config.priors(),
        targets,
    };
    match minimize(&problem, &aligned.to_vector(), &config.init_lm()) {
        Ok((x, _)) => Some(BodyParams::from_slice(model, x.as_slice())),
        Err(_) => Some(aligned),
    }
}

/// Sets each hinge to its measured bend and turns the limb's upper joint so
/// both bones point at the triangulated joints. A straight limb in the
/// wrong plane is a saddle of the point fit.
fn orient_limbs(model: &BodyModel, world: &mut BodyParams, points: &[Option<Point3>]) {
    let parents = &model.skeleton().parents;
    for &(joint, sign) in model.hinges() {
        let Some(upper) = parents[joint] else { continue };
        let (Some(base), Some(upper_slot), Some(slot)) = (parents[upper], model.slot(upper), model.slot(joint)) else {
            continue;
        };
        let Some(child) = (0..NUM_JOINTS).find(|&c| parents[c] == Some(joint)) else {
            continue;
        };
        let (Some(a), Some(b), Some(c)) = (points[upper], points[joint], points[child]) else {
            continue;
        };
        let (u, v) = (b - a, c - b);
        if u.norm() == 0.0 || v.norm() == 0.0 {
            continue;
        }
        let bend = u.angle(&v).min(MAX_FLEXION);
        world.set_rotation(slot, &Vector3::new(sign * bend, 0.0, 0.0));
        world.set_rotation(upper_slot, &Vector3::zeros());

        let frame = model.pose(world, false).frames[base];
        let target = [frame.transpose() * u, frame.transpose() * v];
        let rest = [
            model.skeleton().offset(joint),
            rotation_from_axis_angle(&Vector3::new(sign * bend, 0.0, 0.0)) * model.skeleton().offset(child),
        ];
        let turn = match (
            orthonormal_frame(&rest[0], &rest[1]),
            orthonormal_frame(&target[0], &target[1]),
        ) {
            (Some(from), Some(to)) => to * from.transpose(),
            // Nearly straight: swing the upper bone only.
            _ => match Rotation3::rotation_between(&rest[0], &target[0]) {
                Some(r) => r.into_inner(),
                None => continue,
            },
        };
        world.set_rotation(upper_slot, &axis_angle_from_rotation(&turn));
    }
}

/// Right-handed frame with `x` along `a` and `b` in the xy-plane; `None`
/// when `b` is parallel to `a` and the plane is undefined.
fn orthonormal_frame(a: &Vector3<f64>, b: &Vector3<f64>) -> Option<Matrix3<f64>> {
    let e1 = a.try_normalize(1e-12)?;
    let e2 = (b - e1 * e1.dot(b)).try_normalize(1e-6 * b.norm())?;
    Some(Matrix3::from_columns(&[e1, e2, e1.cross(&e2)]))
}

/// Joint residuals per metre in the point fit: a centimetre weighs about
/// as much as a pixel does in the image terms.
const POINT_RESIDUAL_SCALE: f64 = 100.0;

/// All parameters of one body fitted to camera-frame joint positions.
struct PointFit<'a> {
    model: &'a BodyModel,
    priors: PriorWeights,
    targets: Vec<(usize, Vector3<f64>)>,
}

impl Problem for PointFit<'_> {
    fn dim(&self) -> usize {
        self.model.param_dim()
    }

    fn residual_count(&self) -> usize {
        3 * self.targets.len() + self.model.prior_residual_count()
    }

    fn evaluate(&self, x: &DVector<f64>, jacobian: Option<&mut DMatrix<f64>>) -> DVector<f64> {
        let params = BodyParams::from_slice(self.model, x.as_slice());
        let posed = self.model.pose(&params, jacobian.is_some());
        let mut r = DVector::zeros(self.residual_count());
        for (a, (k, t)) in self.targets.iter().enumerate() {
            r.fixed_rows_mut::<3>(3 * a)
                .copy_from(&((posed.joints[*k] - t) * POINT_RESIDUAL_SCALE));
        }
        let row = 3 * self.targets.len();
        let prior = self.model.prior_residuals(&params, &self.priors);
        r.rows_mut(row, prior.len()).copy_from_slice(&prior);
        if let Some(jac) = jacobian {
            jac.fill(0.0);
            let jacs = posed.jacobians.as_ref().unwrap();
            for (a, (k, _)) in self.targets.iter().enumerate() {
                jac.view_mut((3 * a, 0), (3, self.dim()))
                    .copy_from(&(&jacs[*k] * POINT_RESIDUAL_SCALE));
            }
            for (rr, c, v) in self.model.prior_jacobian(&params, &self.priors) {
                jac[(row + rr, c)] += v;
            }
        }
        r
    }

    fn bounds(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        Some(self.model.bounds())
    }

    fn project(&self, x: &mut DVector<f64>) {
        BodyModel::wrap_rotations(&mut x.as_mut_slice()[..self.model.pose_dim()]);
        let (lo, hi) = self.model.bounds();
        for i in 0..x.len() {
            x[i] = x[i].clamp(lo[i], hi[i]);
        }
    }
}
