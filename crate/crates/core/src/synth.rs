//! Synthetic TV-set scenes with known ground truth.
//!
//! World frame: y up, floor at y = 0, the open fourth wall at z = 0 and the
//! stage in the middle of the room. Cameras stand on a frontal arc looking
//! into the set. Every person is static, so both frames of a boundary show
//! the same instant from two viewpoints.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::body::{
    BodyModel, BodyParams, HEAD, LEFT_ELBOW, LEFT_HIP, LEFT_KNEE, LEFT_SHOULDER, NECK, NUM_JOINTS, PELVIS, RIGHT_ELBOW,
    RIGHT_HIP, RIGHT_KNEE, RIGHT_SHOULDER, SPINE,
};
use crate::error::{Error, Result};
use crate::fitting::to_camera_frame;
use crate::gaze::gaze_from_body;
use crate::geometry::{axis_angle_from_rotation, CameraParams, Point2, Point3};
use crate::io::{write_json, BoundaryRecord, CameraRecord, DetectionRecord, FrameRecord, SceneFile};
use crate::multishot::Detection2D;
use crate::scene::{penetration_count, Aabb, DensityGrid};

pub const FURNITURE_DENSITY: f32 = 100.0;
pub const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;
pub const MIN_PELVIS_SEPARATION: f64 = 0.8;
const SENSOR_WIDTH_MM: f64 = 36.0;
/// Stage rectangle in the ground plane: x range, z range.
const STAGE: ([f64; 2], [f64; 2]) = ([-2.5, 2.5], [1.5, 4.5]);
/// Ground-plane radius the cameras must frame.
const FRAMING_RADIUS: f64 = 3.2;
const MIN_CAMERA_DISTANCE: f64 = 4.0;
const MAX_CAMERA_DISTANCE: f64 = 200.0;
/// Border, as a fraction of the image width, kept free of joints.
const FRAME_MARGIN: f64 = 0.03;
const GAZE_TARGET_DISTANCE: f64 = 2.0;

pub const SCENE_FILE: &str = "scene.json";
pub const GRID_FILE: &str = "grid.bin";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSceneSpec {
    pub seed: u64,
    pub persons: usize,
    /// Room width (x), height (y) and depth (z), meters.
    pub room: [f64; 3],
    pub furniture: usize,
    pub furniture_min: [f64; 3],
    pub furniture_max: [f64; 3],
    pub cameras: usize,
    /// Full-frame-equivalent focal range, millimeters.
    pub focal_mm: [f64; 2],
    pub image: [u32; 2],
    /// Half-angle of the camera arc, degrees.
    pub arc_deg: f64,
    pub noise_sigma_px: f64,
    pub occlusion_p: f64,
    pub boundaries: usize,
    /// Persons missing from frame t+1 of each boundary.
    pub exits: usize,
    /// Persons missing from frame t of each boundary.
    pub entries: usize,
    pub voxel_size: f64,
    /// Multiplier on the pose amplitudes.
    pub pose_scale: f64,
}

impl Default for SynthSceneSpec {
    fn default() -> Self {
        SynthSceneSpec {
            seed: 0,
            persons: 4,
            room: [8.0, 3.0, 6.0],
            furniture: 3,
            furniture_min: [0.6, 0.4, 0.5],
            furniture_max: [1.8, 1.0, 1.2],
            cameras: 4,
            focal_mm: [20.0, 120.0],
            image: [1280, 720],
            arc_deg: 60.0,
            noise_sigma_px: 0.0,
            occlusion_p: 0.0,
            boundaries: 2,
            exits: 0,
            entries: 0,
            voxel_size: 0.1,
            pose_scale: 1.0,
        }
    }
}

impl SynthSceneSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::InvalidInput(format!("spec: {e}")))?;
        let spec: SynthSceneSpec = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::schema(format!("/{}", e.path()).replace('.', "/"), e.inner().to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::schema(format!("/{key}"), msg.to_string()));
        if !(1..=8).contains(&self.persons) {
            return bad("persons", "must lie in 1..=8");
        }
        if self.room.iter().any(|v| !(*v > 0.0)) || self.room[0] < 6.0 || self.room[2] < 5.0 {
            return bad("room", "must be at least 6 m wide and 5 m deep");
        }
        if (0..3).any(|i| !(self.furniture_min[i] > 0.0) || self.furniture_min[i] > self.furniture_max[i]) {
            return bad("furniture_min", "size ranges must be positive and nonempty");
        }
        if self.cameras < 2 {
            return bad("cameras", "need at least two cameras");
        }
        if !(self.focal_mm[0] > 0.0) || self.focal_mm[0] > self.focal_mm[1] {
            return bad("focal_mm", "focal range must be positive and nonempty");
        }
        if self.image.contains(&0) {
            return bad("image", "image size must be positive");
        }
        if !(0.0..90.0).contains(&self.arc_deg) {
            return bad("arc_deg", "must lie in [0, 90)");
        }
        if !(self.noise_sigma_px >= 0.0) || !self.noise_sigma_px.is_finite() {
            return bad("noise_sigma_px", "must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.occlusion_p) {
            return bad("occlusion_p", "must lie in [0, 1]");
        }
        if self.exits + self.entries >= self.persons {
            return bad(
                "exits",
                "exits plus entries must leave at least one person in both frames",
            );
        }
        if !(self.voxel_size > 0.0) {
            return bad("voxel_size", "must be positive");
        }
        if !(self.pose_scale >= 0.0) {
            return bad("pose_scale", "must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonTruth {
    pub identity: usize,
    /// Parameters with the world as the camera frame.
    pub params_world: BodyParams,
    pub joints_world: Vec<[f64; 3]>,
    pub gaze_origin: [f64; 3],
    pub gaze_direction: [f64; 3],
    pub gaze_target: [f64; 3],
}

impl PersonTruth {
    pub fn joints(&self) -> Vec<Point3> {
        self.joints_world.iter().map(|p| Point3::from(*p)).collect()
    }

    pub fn pelvis(&self) -> Point3 {
        Point3::from(self.joints_world[PELVIS])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePerson {
    pub person_idx: usize,
    pub identity: usize,
    /// Parameters in this frame's camera frame.
    pub params: BodyParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub frame_id: u32,
    pub camera: CameraRecord,
    /// Ordered by `person_idx`.
    pub persons: Vec<FramePerson>,
}

impl FrameTruth {
    pub fn identity_of(&self, person_idx: usize) -> Option<usize> {
        self.persons
            .iter()
            .find(|p| p.person_idx == person_idx)
            .map(|p| p.identity)
    }

    pub fn index_of(&self, identity: usize) -> Option<usize> {
        self.persons
            .iter()
            .find(|p| p.identity == identity)
            .map(|p| p.person_idx)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryTruth {
    pub frame_t: u32,
    pub frame_t1: u32,
    /// Detection index pairs `(m, n)` of the same identity, restricted to
    /// detections with at least four visible keypoints.
    pub pairs: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scene_id: String,
    pub seed: u64,
    pub up_axis: [f64; 3],
    pub persons: Vec<PersonTruth>,
    pub frames: Vec<FrameTruth>,
    pub boundaries: Vec<BoundaryTruth>,
    pub furniture: Vec<Aabb>,
}

impl GroundTruth {
    pub fn load(path: &Path) -> Result<Self> {
        crate::io::read_json(path)
    }

    pub fn frame(&self, frame_id: u32) -> Result<&FrameTruth> {
        self.frames
            .iter()
            .find(|f| f.frame_id == frame_id)
            .ok_or_else(|| Error::MissingGroundTruth(format!("frame {frame_id}")))
    }

    pub fn person(&self, identity: usize) -> Result<&PersonTruth> {
        self.persons
            .get(identity)
            .ok_or_else(|| Error::MissingGroundTruth(format!("person {identity}")))
    }

    /// Exact projection of a person's joints into a frame; joints behind
    /// the camera or outside the image get confidence 0.
    pub fn exact_keypoints(&self, frame_id: u32, identity: usize) -> Result<Detection2D> {
        let frame = self.frame(frame_id)?;
        let camera = frame.camera.to_camera()?;
        let person = self.person(identity)?;
        let mut keypoints = [Point2::origin(); NUM_JOINTS];
        let mut confidences = [0.0; NUM_JOINTS];
        for (k, j) in person.joints().iter().enumerate() {
            if let Ok(p) = camera.project(j) {
                if camera.in_image(&p) {
                    keypoints[k] = p;
                    confidences[k] = 1.0;
                }
            }
        }
        Ok(Detection2D {
            keypoints,
            confidences,
            frame_id,
            person_idx: frame.index_of(identity).unwrap_or(usize::MAX),
        })
    }
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub scene: SceneFile,
    pub grid: DensityGrid,
    pub truth: GroundTruth,
}

impl SynthOutput {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.scene.write(&dir.join(SCENE_FILE))?;
        let grid_path = dir.join(GRID_FILE);
        self.grid.write(&grid_path)?;
        write_json(&crate::scene::sidecar_path(&grid_path), &self.grid.sidecar())?;
        write_json(&dir.join(GROUND_TRUTH_FILE), &self.truth)
    }
}

/// Camera at `position` looking at `target` with world `up` pointing up in
/// the image.
pub fn look_at(position: Point3, target: Point3, up: Vector3<f64>) -> Matrix3<f64> {
    let forward = (target - position).normalize();
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right);
    Matrix3::from_columns(&[right, down, forward])
}

fn sample_pose(model: &BodyModel, rng: &mut ChaCha8Rng, scale: f64) -> BodyParams {
    let mut p = BodyParams::rest(model);
    let set = |p: &mut BodyParams, joint: usize, amp: [f64; 3], rng: &mut ChaCha8Rng| {
        let slot = model.slot(joint).unwrap();
        let v = Vector3::new(
            rng.random_range(-1.0..=1.0) * amp[0] * scale,
            rng.random_range(-1.0..=1.0) * amp[1] * scale,
            rng.random_range(-1.0..=1.0) * amp[2] * scale,
        );
        p.set_rotation(slot, &v);
    };
    set(&mut p, SPINE, [0.1, 0.1, 0.05], rng);
    set(&mut p, NECK, [0.1, 0.15, 0.05], rng);
    set(&mut p, HEAD, [0.15, 0.5, 0.1], rng);
    for j in [LEFT_SHOULDER, RIGHT_SHOULDER] {
        set(&mut p, j, [0.4, 0.2, 0.3], rng);
    }
    for j in [LEFT_HIP, RIGHT_HIP] {
        set(&mut p, j, [0.2, 0.1, 0.1], rng);
    }
    for (j, amp) in [
        (LEFT_ELBOW, 0.9),
        (RIGHT_ELBOW, 0.9),
        (LEFT_KNEE, 0.3),
        (RIGHT_KNEE, 0.3),
    ] {
        set(&mut p, j, [0.0, 0.1, 0.1], rng);
        let sign = model.hinges().iter().find(|h| h.0 == j).map_or(1.0, |h| h.1);
        let slot = model.slot(j).unwrap();
        p.pose[3 * slot] = sign * rng.random_range(0.0..=amp) * scale;
    }
    p.shape = [
        rng.random_range(0.88..=1.12),
        rng.random_range(-0.05..=0.05),
        rng.random_range(-0.05..=0.05),
        rng.random_range(-0.05..=0.05),
    ];
    p
}

/// World-frame samples of a body posed with the world as camera frame.
fn world_samples(model: &BodyModel, params: &BodyParams) -> Vec<Point3> {
    model
        .surface_samples(params, 8, false)
        .points
        .into_iter()
        .map(Point3::from)
        .collect()
}

fn place_person(
    model: &BodyModel,
    rng: &mut ChaCha8Rng,
    spec: &SynthSceneSpec,
    grid: &DensityGrid,
    placed: &[PersonTruth],
    attempts: &mut usize,
) -> Result<BodyParams> {
    let slot = model.slot(PELVIS).unwrap();
    loop {
        if *attempts >= MAX_PLACEMENT_ATTEMPTS {
            return Err(Error::RejectionBudgetExceeded { attempts: *attempts });
        }
        *attempts += 1;
        let mut p = sample_pose(model, rng, spec.pose_scale);
        // Face the open wall (−z) up to ±35°.
        let yaw = PI + rng.random_range(-0.6..=0.6);
        let r_world =
            Rotation3::from_axis_angle(&Vector3::y_axis(), yaw) * Rotation3::from_axis_angle(&Vector3::z_axis(), PI);
        p.set_rotation(slot, &axis_angle_from_rotation(r_world.matrix()));
        let x = rng.random_range(STAGE.0[0]..=STAGE.0[1]);
        let z = rng.random_range(STAGE.1[0]..=STAGE.1[1]);
        p.root_translation_cam = [x, 0.0, z];
        // Rest the soles on the floor.
        let joints = model.forward_kinematics(&p);
        let sole = model.skeleton().sole_depth * p.shape[0];
        let lowest = joints.iter().map(|j| j.y).fold(f64::INFINITY, f64::min) - sole;
        p.root_translation_cam[1] = -lowest;

        let pelvis = Vector3::from(p.root_translation_cam);
        let crowded = placed.iter().any(|o| {
            let q = Vector3::from(o.joints_world[PELVIS]);
            let d = pelvis - q;
            (d.x * d.x + d.z * d.z).sqrt() < MIN_PELVIS_SEPARATION
        });
        if crowded {
            continue;
        }
        if penetration_count(grid, &world_samples(model, &p)) > 0 {
            continue;
        }
        return Ok(p);
    }
}

fn sample_furniture(rng: &mut ChaCha8Rng, spec: &SynthSceneSpec) -> Vec<Aabb> {
    let half_w = spec.room[0] / 2.0;
    (0..spec.furniture)
        .map(|_| {
            let size: Vec<f64> = (0..3)
                .map(|i| rng.random_range(spec.furniture_min[i]..=spec.furniture_max[i]))
                .collect();
            let cx = rng.random_range(-half_w + size[0] / 2.0..=half_w - size[0] / 2.0);
            let cz = rng.random_range(1.0 + size[2] / 2.0..=spec.room[2] - size[2] / 2.0);
            let height = size[1].min(spec.room[1]);
            Aabb {
                min: [cx - size[0] / 2.0, 0.0, cz - size[2] / 2.0],
                max: [cx + size[0] / 2.0, height, cz + size[2] / 2.0],
            }
        })
        .collect()
}

/// Cameras on the frontal arc. Each one backs away along its viewing
/// direction until every joint of every person lies inside the image with
/// a margin.
fn sample_cameras(rng: &mut ChaCha8Rng, spec: &SynthSceneSpec, persons: &[PersonTruth]) -> Result<Vec<CameraParams>> {
    let [w, h] = spec.image;
    let arc = spec.arc_deg.to_radians();
    let stage_center_z = 0.5 * (STAGE.1[0] + STAGE.1[1]);
    (0..spec.cameras)
        .map(|c| {
            let lo = -arc + 2.0 * arc * c as f64 / spec.cameras as f64;
            let hi = -arc + 2.0 * arc * (c + 1) as f64 / spec.cameras as f64;
            let azimuth = rng.random_range(lo..=hi);
            let (fl, fh) = (spec.focal_mm[0].ln(), spec.focal_mm[1].ln());
            let focal_mm = rng.random_range(fl..=fh).exp();
            let focal = focal_mm * w as f64 / SENSOR_WIDTH_MM;
            let target = Point3::new(
                rng.random_range(-0.5..=0.5),
                rng.random_range(0.8..=1.2),
                stage_center_z,
            );
            let height = rng.random_range(1.0..=2.2);
            let mut distance = MIN_CAMERA_DISTANCE.max(focal * FRAMING_RADIUS / (w as f64 / 2.0));
            loop {
                let position = Point3::new(
                    target.x + distance * azimuth.sin(),
                    height,
                    target.z - distance * azimuth.cos(),
                );
                let rotation = look_at(position, target, Vector3::y());
                let camera = CameraParams::new(
                    focal,
                    focal,
                    w as f64 / 2.0,
                    h as f64 / 2.0,
                    rotation,
                    position.coords,
                    w,
                    h,
                )?;
                let margin = FRAME_MARGIN * w as f64;
                let framed = persons.iter().flat_map(|p| p.joints()).all(|j| {
                    camera.project(&j).is_ok_and(|uv| {
                        uv.x >= margin && uv.x <= w as f64 - margin && uv.y >= margin && uv.y <= h as f64 - margin
                    })
                });
                if framed || distance > MAX_CAMERA_DISTANCE {
                    return Ok(camera);
                }
                distance *= 1.05;
            }
        })
        .collect()
}

/// Detections of every person in a frame, ordered by `person_idx`.
///
/// Joints behind the camera or outside the image and randomly occluded
/// joints get confidence 0; visible joints get isotropic Gaussian noise and
/// confidence `exp(−|n|²/2σ²)` clipped to `[0.05, 1]`.
pub fn render_keypoints(
    truth: &GroundTruth,
    frame_id: u32,
    noise_sigma: f64,
    occlusion_p: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Detection2D>> {
    let frame = truth.frame(frame_id)?;
    let camera = frame.camera.to_camera()?;
    let mut out = Vec::with_capacity(frame.persons.len());
    for fp in &frame.persons {
        let person = truth.person(fp.identity)?;
        let mut keypoints = [Point2::origin(); NUM_JOINTS];
        let mut confidences = [0.0; NUM_JOINTS];
        for (k, joint) in person.joints().iter().enumerate() {
            // Fixed draw count per joint keeps the stream aligned across
            // noise levels.
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            let occluded = rng.random::<f64>() < occlusion_p;
            let Ok(exact) = camera.project(joint) else {
                continue;
            };
            if occluded || !camera.in_image(&exact) {
                continue;
            }
            let noise = nalgebra::Vector2::new(nx, ny) * noise_sigma;
            keypoints[k] = exact + noise;
            confidences[k] = if noise_sigma > 0.0 {
                (-noise.norm_squared() / (2.0 * noise_sigma * noise_sigma))
                    .exp()
                    .clamp(0.05, 1.0)
            } else {
                1.0
            };
        }
        out.push(Detection2D {
            keypoints,
            confidences,
            frame_id,
            person_idx: fp.person_idx,
        });
    }
    Ok(out)
}

fn rendering_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Generates a scene, its density grid and the ground truth. Geometry
/// depends only on the seed and the scene layout fields, never on the
/// noise or occlusion settings.
pub fn generate(spec: &SynthSceneSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let model = BodyModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let furniture = sample_furniture(&mut rng, spec);
    let dims = [
        (spec.room[0] / spec.voxel_size).round() as usize + 1,
        (spec.room[1] / spec.voxel_size).round() as usize + 1,
        (spec.room[2] / spec.voxel_size).round() as usize + 1,
    ];
    let origin = Point3::new(-spec.room[0] / 2.0, 0.0, 0.0);
    let grid = DensityGrid::from_boxes(origin, spec.voxel_size, dims, &furniture, FURNITURE_DENSITY)?;

    let world = CameraParams::identity(1.0, 1.0, 0.0, 0.0, 1, 1);
    let mut persons: Vec<PersonTruth> = Vec::with_capacity(spec.persons);
    let mut attempts = 0;
    for identity in 0..spec.persons {
        let p = place_person(&model, &mut rng, spec, &grid, &persons, &mut attempts)?;
        let joints = model.forward_kinematics(&p);
        let gaze = gaze_from_body(&model, &p, &world, 0);
        let target = gaze.origin + gaze.direction * GAZE_TARGET_DISTANCE;
        persons.push(PersonTruth {
            identity,
            joints_world: joints.iter().map(|j| [j.x, j.y, j.z]).collect(),
            gaze_origin: gaze.origin.into(),
            gaze_direction: gaze.direction.into(),
            gaze_target: target.into(),
            params_world: p,
        });
    }

    let cameras = sample_cameras(&mut rng, spec, &persons)?;
    let mut frames = Vec::with_capacity(2 * spec.boundaries);
    let mut boundary_records = Vec::with_capacity(spec.boundaries);
    for b in 0..spec.boundaries {
        let first = rng.random_range(0..cameras.len());
        let mut second = rng.random_range(0..cameras.len() - 1);
        if second >= first {
            second += 1;
        }
        let mut ids: Vec<usize> = (0..spec.persons).collect();
        ids.shuffle(&mut rng);
        let exiting: Vec<usize> = ids[..spec.exits].to_vec();
        let entering: Vec<usize> = ids[spec.exits..spec.exits + spec.entries].to_vec();
        let frame_ids = [2 * b as u32, 2 * b as u32 + 1];
        for (side, (&frame_id, cam)) in frame_ids.iter().zip([first, second]).enumerate() {
            let camera = &cameras[cam];
            let absent = if side == 0 { &entering } else { &exiting };
            let mut present: Vec<usize> = (0..spec.persons).filter(|i| !absent.contains(i)).collect();
            present.shuffle(&mut rng);
            let frame_persons = present
                .iter()
                .enumerate()
                .map(|(idx, &identity)| FramePerson {
                    person_idx: idx,
                    identity,
                    params: to_camera_frame(&model, &persons[identity].params_world, camera),
                })
                .collect();
            frames.push(FrameTruth {
                frame_id,
                camera: CameraRecord::from(camera),
                persons: frame_persons,
            });
        }
        boundary_records.push(BoundaryRecord {
            frame_t: frame_ids[0],
            frame_t1: frame_ids[1],
        });
    }

    let mut truth = GroundTruth {
        scene_id: format!("synth-{}", spec.seed),
        seed: spec.seed,
        up_axis: [0.0, 1.0, 0.0],
        persons,
        frames,
        boundaries: Vec::new(),
        furniture,
    };

    let mut render_rng = rendering_rng(spec.seed);
    let mut scene_frames = Vec::with_capacity(truth.frames.len());
    let mut detections_by_frame = Vec::with_capacity(truth.frames.len());
    for frame in &truth.frames {
        let dets = render_keypoints(
            &truth,
            frame.frame_id,
            spec.noise_sigma_px,
            spec.occlusion_p,
            &mut render_rng,
        )?;
        scene_frames.push(FrameRecord {
            frame_id: frame.frame_id,
            camera: frame.camera.clone(),
            detections: dets.iter().map(DetectionRecord::from).collect(),
        });
        detections_by_frame.push(dets);
    }

    for (b, rec) in boundary_records.iter().enumerate() {
        let (ft, ft1) = (&truth.frames[2 * b], &truth.frames[2 * b + 1]);
        let (dt, dt1) = (&detections_by_frame[2 * b], &detections_by_frame[2 * b + 1]);
        let mut pairs: Vec<(usize, usize)> = ft
            .persons
            .iter()
            .filter_map(|p| {
                let n = ft1.index_of(p.identity)?;
                (dt[p.person_idx].visible_count() >= 4 && dt1[n].visible_count() >= 4).then_some((p.person_idx, n))
            })
            .collect();
        pairs.sort_unstable();
        truth.boundaries.push(BoundaryTruth {
            frame_t: rec.frame_t,
            frame_t1: rec.frame_t1,
            pairs,
        });
    }

    let scene = SceneFile {
        scene_id: truth.scene_id.clone(),
        up_axis: truth.up_axis,
        frames: scene_frames,
        boundaries: boundary_records,
        grid_file: Some(GRID_FILE.into()),
    };
    Ok(SynthOutput { scene, grid, truth })
}
