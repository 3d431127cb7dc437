//! Pinhole cameras, rigid transforms, triangulation and similarity alignment.
//!
//! Cameras follow the usual computer-vision convention: the camera looks down
//! its +z axis, +x points right and +y points down, so pixel coordinates have
//! their origin at the top-left corner of the image. Extrinsics are stored
//! camera→world; the world→camera transform is derived on demand.

use nalgebra::{DMatrix, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};

pub type Point2 = nalgebra::Point2<f64>;
pub type Point3 = nalgebra::Point3<f64>;

/// Minimum camera-frame depth for a point to count as in front of the camera.
pub const MIN_DEPTH: f64 = 1e-9;

const ORTHONORMAL_TOL: f64 = 1e-9;
const RANK_TOL: f64 = 1e-10;

/// Intrinsics and camera→world extrinsics of one registered frame.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraParams {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera→world rotation.
    pub rotation_cw: Matrix3<f64>,
    /// Camera→world translation, i.e. the camera center in world coordinates.
    pub translation_cw: Vector3<f64>,
    pub width: u32,
    pub height: u32,
}

impl CameraParams {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation_cw: Matrix3<f64>,
        translation_cw: Vector3<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let camera = CameraParams {
            fx,
            fy,
            cx,
            cy,
            rotation_cw,
            translation_cw,
            width,
            height,
        };
        camera.validate()?;
        Ok(camera)
    }

    /// Camera at the world origin with identity rotation.
    pub fn identity(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        CameraParams {
            fx,
            fy,
            cx,
            cy,
            rotation_cw: Matrix3::identity(),
            translation_cw: Vector3::zeros(),
            width,
            height,
        }
    }

    /// Uncalibrated stand-in: focal length equal to the image diagonal and the
    /// principal point at the image center, identity extrinsics.
    pub fn heuristic(width: u32, height: u32) -> Self {
        let (w, h) = (width as f64, height as f64);
        let focal = (w * w + h * h).sqrt();
        Self::identity(focal, focal, w / 2.0, h / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite())
            && self.rotation_cw.iter().all(|v| v.is_finite())
            && self.translation_cw.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput("camera has non-finite parameters".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("image size must be positive".into()));
        }
        if !is_rotation(&self.rotation_cw, ORTHONORMAL_TOL) {
            return Err(Error::InvalidInput(
                "rotation_cw is not orthonormal with determinant +1".into(),
            ));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// World→camera rotation.
    pub fn rotation_wc(&self) -> Matrix3<f64> {
        self.rotation_cw.transpose()
    }

    pub fn center(&self) -> Point3 {
        Point3::from(self.translation_cw)
    }

    /// Viewing direction (+z of the camera) in world coordinates.
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.rotation_cw.column(2).into_owned()
    }

    pub fn world_to_camera(&self, point_world: &Point3) -> Vector3<f64> {
        self.rotation_cw.tr_mul(&(point_world.coords - self.translation_cw))
    }

    pub fn camera_to_world(&self, point_cam: &Vector3<f64>) -> Point3 {
        Point3::from(self.rotation_cw * point_cam + self.translation_cw)
    }

    /// Projects a camera-frame point.
    pub fn project_camera(&self, point_cam: &Vector3<f64>) -> Result<Point2> {
        let z = point_cam.z;
        if !(z > MIN_DEPTH) {
            return Err(Error::PointBehindCamera { z });
        }
        Ok(Point2::new(
            self.fx * point_cam.x / z + self.cx,
            self.fy * point_cam.y / z + self.cy,
        ))
    }

    /// Projects a camera-frame point without the cheirality check. Only
    /// meaningful for `z > 0`.
    pub(crate) fn project_camera_unchecked(&self, point_cam: &Vector3<f64>) -> Vector2<f64> {
        let z = point_cam.z;
        Vector2::new(self.fx * point_cam.x / z + self.cx, self.fy * point_cam.y / z + self.cy)
    }

    /// Derivative of the pixel coordinates with respect to the camera-frame point.
    pub fn projection_jacobian(&self, point_cam: &Vector3<f64>) -> Matrix2x3<f64> {
        let (x, y, z) = (point_cam.x, point_cam.y, point_cam.z);
        let iz = 1.0 / z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * y * iz2,
        )
    }

    pub fn project(&self, point_world: &Point3) -> Result<Point2> {
        self.project_camera(&self.world_to_camera(point_world))
    }

    /// World point at camera-frame depth `depth` along the ray through `pixel`.
    pub fn backproject(&self, pixel: &Point2, depth: f64) -> Point3 {
        let ray = Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0);
        self.camera_to_world(&(ray * depth))
    }

    /// Horizontal field of view in degrees.
    pub fn horizontal_fov_deg(&self) -> f64 {
        (2.0 * (self.width as f64 / (2.0 * self.fx)).atan()).to_degrees()
    }

    /// Same camera with its extrinsics replaced by the identity.
    pub fn without_extrinsics(&self) -> Self {
        CameraParams {
            rotation_cw: Matrix3::identity(),
            translation_cw: Vector3::zeros(),
            ..self.clone()
        }
    }

    pub fn in_image(&self, pixel: &Point2) -> bool {
        pixel.x >= 0.0 && pixel.y >= 0.0 && pixel.x < self.width as f64 && pixel.y < self.height as f64
    }
}

pub fn is_rotation(m: &Matrix3<f64>, tol: f64) -> bool {
    let gram = m.tr_mul(m);
    (gram - Matrix3::identity()).amax() <= tol && (m.determinant() - 1.0).abs() <= tol
}

/// Rotation matrix for an axis-angle vector (Rodrigues).
pub fn rotation_from_axis_angle(v: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = v.norm_squared();
    let k = skew(v);
    if theta2 < 1e-16 {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let theta = theta2.sqrt();
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / theta2;
    Matrix3::identity() + a * k + b * k * k
}

/// Axis-angle vector of a rotation matrix, with magnitude in `[0, π]`.
pub fn axis_angle_from_rotation(r: &Matrix3<f64>) -> Vector3<f64> {
    // Via the quaternion: the rotation's own log map loses the axis at π.
    let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
    nalgebra::UnitQuaternion::from_rotation_matrix(&rot).scaled_axis()
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Partial derivatives of `rotation_from_axis_angle(v)` with respect to each
/// component of `v`.
pub fn axis_angle_derivatives(v: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let theta2 = v.norm_squared();
    let basis = [Vector3::x(), Vector3::y(), Vector3::z()];
    if theta2 < 1e-8 {
        // Second-order series of I + [v] + [v]^2/2.
        let k = skew(v);
        return basis.map(|e| {
            let ke = skew(&e);
            ke + 0.5 * (ke * k + k * ke)
        });
    }
    let r = rotation_from_axis_angle(v);
    let k = skew(v);
    let i_minus_r = Matrix3::identity() - r;
    basis.map(|e| {
        let comp = v.dot(&e);
        let term = k * comp + skew(&v.cross(&(i_minus_r * e)));
        term * r / theta2
    })
}

/// Triangulates one world point from two or more calibrated views.
///
/// The direct linear solution (smallest right singular vector of the stacked
/// normalized-coordinate constraints) is polished with one Gauss-Newton step
/// on pixel reprojection error; the step is kept only if it lowers that error.
pub fn triangulate(cameras: &[CameraParams], observations: &[Point2]) -> Result<Point3> {
    if cameras.len() != observations.len() {
        return Err(Error::LengthMismatch {
            left: cameras.len(),
            right: observations.len(),
        });
    }
    if cameras.len() < 2 {
        return Err(Error::InvalidInput("triangulation needs at least two views".into()));
    }

    let mut design = DMatrix::<f64>::zeros(2 * cameras.len(), 4);
    for (i, (camera, obs)) in cameras.iter().zip(observations).enumerate() {
        let xn = (obs.x - camera.cx) / camera.fx;
        let yn = (obs.y - camera.cy) / camera.fy;
        let r_wc = camera.rotation_wc();
        let t_wc = -(r_wc * camera.translation_cw);
        for col in 0..3 {
            design[(2 * i, col)] = xn * r_wc[(2, col)] - r_wc[(0, col)];
            design[(2 * i + 1, col)] = yn * r_wc[(2, col)] - r_wc[(1, col)];
        }
        design[(2 * i, 3)] = xn * t_wc.z - t_wc.x;
        design[(2 * i + 1, 3)] = yn * t_wc.z - t_wc.y;
    }
    for mut row in design.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }

    let svd = design.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::DegenerateGeometry("SVD did not converge".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    let largest = svd.singular_values[order[order.len() - 1]];
    if order.len() < 4 || largest <= 0.0 || svd.singular_values[order[1]] / largest < RANK_TOL {
        return Err(Error::DegenerateGeometry(
            "triangulation design matrix is rank-deficient".into(),
        ));
    }
    let h = v_t.row(order[0]).transpose();
    if h[3].abs() < RANK_TOL * h.norm() {
        return Err(Error::DegenerateGeometry(
            "rays are parallel (point at infinity)".into(),
        ));
    }
    let dlt = Point3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);

    Ok(gauss_newton_polish(cameras, observations, dlt))
}

fn reprojection_sq(cameras: &[CameraParams], observations: &[Point2], point: &Point3) -> Option<f64> {
    let mut total = 0.0;
    for (camera, obs) in cameras.iter().zip(observations) {
        let p = camera.project(point).ok()?;
        total += (p - obs).norm_squared();
    }
    Some(total)
}

fn gauss_newton_polish(cameras: &[CameraParams], observations: &[Point2], point: Point3) -> Point3 {
    let Some(before) = reprojection_sq(cameras, observations, &point) else {
        return point;
    };
    let mut jtj = Matrix3::zeros();
    let mut jtr = Vector3::zeros();
    for (camera, obs) in cameras.iter().zip(observations) {
        let pc = camera.world_to_camera(&point);
        let residual = camera.project_camera_unchecked(&pc) - obs.coords;
        let jac = camera.projection_jacobian(&pc) * camera.rotation_wc();
        jtj += jac.transpose() * jac;
        jtr += jac.transpose() * residual;
    }
    let Some(step) = jtj.cholesky().map(|c| c.solve(&jtr)) else {
        return point;
    };
    let candidate = Point3::from(point.coords - step);
    match reprojection_sq(cameras, observations, &candidate) {
        Some(after) if after <= before => candidate,
        _ => point,
    }
}

/// Similarity transform `y ≈ s·R·x + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Similarity {
    pub fn identity() -> Self {
        Similarity {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.scale * (self.rotation * p.coords) + self.translation)
    }
}

/// Least-squares similarity alignment of `source` onto `target` (Umeyama).
pub fn procrustes_align(source: &[Point3], target: &[Point3]) -> Result<Similarity> {
    if source.len() != target.len() {
        return Err(Error::LengthMismatch {
            left: source.len(),
            right: target.len(),
        });
    }
    if source.len() < 3 {
        return Err(Error::InvalidInput(
            "procrustes alignment needs at least three points".into(),
        ));
    }
    let n = source.len() as f64;
    let mu_x = source.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n;
    let mu_y = target.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n;

    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (x, y) in source.iter().zip(target) {
        let dx = x.coords - mu_x;
        let dy = y.coords - mu_y;
        cov += dy * dx.transpose();
        var_x += dx.norm_squared();
    }
    cov /= n;
    var_x /= n;
    if !(var_x > 1e-300) {
        return Err(Error::DegenerateInput("source points are all coincident".into()));
    }

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        d[(2, 2)] = -1.0;
    }
    // The reflection fix must hit the smallest singular value.
    let smallest = (0..3)
        .min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]))
        .unwrap();
    if smallest != 2 && d[(2, 2)] < 0.0 {
        d[(2, 2)] = 1.0;
        d[(smallest, smallest)] = -1.0;
    }
    let rotation = u * d * v_t;
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * d[(i, i)]).sum();
    let scale = trace / var_x;
    let translation = mu_y - scale * rotation * mu_x;
    Ok(Similarity {
        rotation,
        translation,
        scale,
    })
}

/// Sum of squared distances between `transform(source)` and `target`.
pub fn alignment_residual(transform: &Similarity, source: &[Point3], target: &[Point3]) -> f64 {
    source
        .iter()
        .zip(target)
        .map(|(x, y)| (transform.apply(x) - y).norm_squared())
        .sum()
}
