//! Scene JSON: registered cameras, detections and shot boundaries.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::body::NUM_JOINTS;
use crate::error::{Error, Result};
use crate::geometry::{CameraParams, Point2};
use crate::multishot::{Detection2D, ShotBoundaryPair};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera-to-world rotation, row-major.
    #[serde(rename = "R_cw")]
    pub r_cw: [f64; 9],
    #[serde(rename = "T_cw")]
    pub t_cw: [f64; 3],
    pub width: u32,
    pub height: u32,
}

impl CameraRecord {
    pub fn to_camera(&self) -> Result<CameraParams> {
        CameraParams::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            Matrix3::from_row_slice(&self.r_cw),
            Vector3::from(self.t_cw),
            self.width,
            self.height,
        )
    }
}

impl From<&CameraParams> for CameraRecord {
    fn from(c: &CameraParams) -> Self {
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                r[3 * i + j] = c.rotation_cw[(i, j)];
            }
        }
        CameraRecord {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            r_cw: r,
            t_cw: [c.translation_cw.x, c.translation_cw.y, c.translation_cw.z],
            width: c.width,
            height: c.height,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub person_idx: usize,
    pub keypoints: Vec<[f64; 2]>,
    pub confidences: Vec<f64>,
}

impl DetectionRecord {
    pub fn to_detection(&self, frame_id: u32) -> Detection2D {
        let mut keypoints = [Point2::origin(); NUM_JOINTS];
        let mut confidences = [0.0; NUM_JOINTS];
        for k in 0..NUM_JOINTS {
            keypoints[k] = Point2::new(self.keypoints[k][0], self.keypoints[k][1]);
            confidences[k] = self.confidences[k];
        }
        Detection2D {
            keypoints,
            confidences,
            frame_id,
            person_idx: self.person_idx,
        }
    }
}

impl From<&Detection2D> for DetectionRecord {
    fn from(d: &Detection2D) -> Self {
        DetectionRecord {
            person_idx: d.person_idx,
            keypoints: d.keypoints.iter().map(|p| [p.x, p.y]).collect(),
            confidences: d.confidences.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub frame_id: u32,
    pub camera: CameraRecord,
    pub detections: Vec<DetectionRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryRecord {
    pub frame_t: u32,
    pub frame_t1: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub scene_id: String,
    pub up_axis: [f64; 3],
    pub frames: Vec<FrameRecord>,
    pub boundaries: Vec<BoundaryRecord>,
    /// Density grid path relative to the scene file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_file: Option<String>,
}

/// Converts a serde path such as `frames[0].camera.fx` into a JSON pointer.
fn pointer_from_path(path: &str) -> String {
    if path == "." || path.is_empty() {
        return String::new();
    }
    let mut out = String::new();
    for part in path.split('.') {
        let mut rest = part;
        if let Some(i) = rest.find('[') {
            if i > 0 {
                out.push('/');
                out.push_str(&rest[..i]);
            }
            rest = &rest[i..];
            while let Some(end) = rest.find(']') {
                out.push('/');
                out.push_str(&rest[1..end]);
                rest = &rest[end + 1..];
            }
        } else {
            out.push('/');
            out.push_str(rest);
        }
    }
    out
}

/// Parses JSON, reporting failures with the JSON pointer of the offending
/// value.
pub fn from_json_str<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let pointer = pointer_from_path(&e.path().to_string());
        Error::schema(pointer, e.inner().to_string())
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json_str(&text)
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// Writes through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_json(value).as_bytes())
}

impl SceneFile {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let scene: SceneFile = from_json_str(text)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        to_json(self)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let up = Vector3::from(self.up_axis);
        if !up.iter().all(|v| v.is_finite()) || up.norm() < 1e-12 {
            return Err(Error::schema("/up_axis", "must be a finite nonzero vector"));
        }
        for (fi, frame) in self.frames.iter().enumerate() {
            let base = format!("/frames/{fi}");
            if self.frames[..fi].iter().any(|f| f.frame_id == frame.frame_id) {
                return Err(Error::schema(format!("{base}/frame_id"), "duplicate frame id"));
            }
            frame
                .camera
                .to_camera()
                .map_err(|e| Error::schema(format!("{base}/camera"), e.to_string()))?;
            for (di, det) in frame.detections.iter().enumerate() {
                let dbase = format!("{base}/detections/{di}");
                if det.keypoints.len() != NUM_JOINTS {
                    return Err(Error::schema(
                        format!("{dbase}/keypoints"),
                        format!("expected {NUM_JOINTS} keypoints, found {}", det.keypoints.len()),
                    ));
                }
                if det.confidences.len() != NUM_JOINTS {
                    return Err(Error::schema(
                        format!("{dbase}/confidences"),
                        format!("expected {NUM_JOINTS} confidences, found {}", det.confidences.len()),
                    ));
                }
                for (k, c) in det.confidences.iter().enumerate() {
                    if !(0.0..=1.0).contains(c) {
                        return Err(Error::schema(format!("{dbase}/confidences/{k}"), "must lie in [0, 1]"));
                    }
                }
                for (k, p) in det.keypoints.iter().enumerate() {
                    if !p.iter().all(|v| v.is_finite()) {
                        return Err(Error::schema(format!("{dbase}/keypoints/{k}"), "must be finite"));
                    }
                }
                if frame.detections[..di].iter().any(|d| d.person_idx == det.person_idx) {
                    return Err(Error::schema(format!("{dbase}/person_idx"), "duplicate person index"));
                }
            }
        }
        for (bi, b) in self.boundaries.iter().enumerate() {
            for (key, id) in [("frame_t", b.frame_t), ("frame_t1", b.frame_t1)] {
                if self.frame_index(id).is_none() {
                    return Err(Error::schema(
                        format!("/boundaries/{bi}/{key}"),
                        format!("unknown frame id {id}"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn frame_index(&self, frame_id: u32) -> Option<usize> {
        self.frames.iter().position(|f| f.frame_id == frame_id)
    }

    pub fn frame(&self, frame_id: u32) -> Result<&FrameRecord> {
        self.frame_index(frame_id)
            .map(|i| &self.frames[i])
            .ok_or_else(|| Error::InvalidInput(format!("unknown frame id {frame_id}")))
    }

    pub fn camera(&self, frame_id: u32) -> Result<CameraParams> {
        self.frame(frame_id)?.camera.to_camera()
    }

    /// Detections of a frame, ordered by their position in the file.
    pub fn detections(&self, frame_id: u32) -> Result<Vec<Detection2D>> {
        Ok(self
            .frame(frame_id)?
            .detections
            .iter()
            .map(|d| d.to_detection(frame_id))
            .collect())
    }

    pub fn boundary(&self, index: usize) -> Result<BoundaryRecord> {
        self.boundaries.get(index).copied().ok_or_else(|| {
            Error::InvalidInput(format!(
                "boundary {index} does not exist ({} boundaries)",
                self.boundaries.len()
            ))
        })
    }

    pub fn boundary_pair(&self, index: usize) -> Result<ShotBoundaryPair> {
        let b = self.boundary(index)?;
        Ok(ShotBoundaryPair {
            camera_t: self.camera(b.frame_t)?,
            detections_t: self.detections(b.frame_t)?,
            camera_t1: self.camera(b.frame_t1)?,
            detections_t1: self.detections(b.frame_t1)?,
        })
    }

    /// Boundary whose frame-t index is nearest to `frame_id`; ties go to
    /// the earlier boundary.
    pub fn nearest_boundary(&self, frame_id: u32) -> Option<usize> {
        let target = self.frame_index(frame_id)? as i64;
        self.boundaries
            .iter()
            .enumerate()
            .filter_map(|(bi, b)| {
                let ft = self.frame_index(b.frame_t)? as i64;
                let ft1 = self.frame_index(b.frame_t1)? as i64;
                Some(((ft - target).abs().min((ft1 - target).abs()), ft.min(ft1), bi))
            })
            .min()
            .map(|(_, _, bi)| bi)
    }

    pub fn grid_path(&self, scene_path: &Path) -> Option<PathBuf> {
        self.grid_file.as_ref().map(|g| {
            let p = Path::new(g);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                scene_path.parent().unwrap_or(Path::new("")).join(p)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> SceneFile {
        SceneFile {
            scene_id: "s".into(),
            up_axis: [0.0, 1.0, 0.0],
            frames: vec![FrameRecord {
                frame_id: 3,
                camera: CameraRecord::from(&CameraParams::identity(500.0, 500.0, 320.0, 240.0, 640, 480)),
                detections: vec![DetectionRecord {
                    person_idx: 0,
                    keypoints: vec![[1.5, 2.25]; NUM_JOINTS],
                    confidences: vec![0.5; NUM_JOINTS],
                }],
            }],
            boundaries: vec![BoundaryRecord {
                frame_t: 3,
                frame_t1: 3,
            }],
            grid_file: Some("grid.bin".into()),
        }
    }

    #[test]
    fn pointer_conversion() {
        assert_eq!(pointer_from_path("frames[0].camera.fx"), "/frames/0/camera/fx");
        assert_eq!(
            pointer_from_path("frames[2].detections[1].keypoints[4][1]"),
            "/frames/2/detections/1/keypoints/4/1"
        );
        assert_eq!(pointer_from_path("scene_id"), "/scene_id");
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let text = minimal().to_json();
        let back = SceneFile::from_json_str(&text).unwrap();
        assert_eq!(back, minimal());
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn type_errors_carry_pointers() {
        let text = minimal().to_json().replace("\"fx\": 500.0", "\"fx\": \"wide\"");
        match SceneFile::from_json_str(&text) {
            Err(Error::Schema { pointer, .. }) => assert_eq!(pointer, "/frames/0/camera/fx"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn semantic_errors_carry_pointers() {
        let mut s = minimal();
        s.frames[0].detections[0].confidences[7] = 1.5;
        match SceneFile::from_json_str(&s.to_json()) {
            Err(Error::Schema { pointer, .. }) => assert_eq!(pointer, "/frames/0/detections/0/confidences/7"),
            other => panic!("{other:?}"),
        }
        let mut s = minimal();
        s.boundaries[0].frame_t1 = 9;
        assert!(
            matches!(SceneFile::from_json_str(&s.to_json()), Err(Error::Schema { pointer, .. }) if pointer == "/boundaries/0/frame_t1")
        );
        let mut s = minimal();
        s.frames[0].camera.r_cw[0] = 2.0;
        assert!(
            matches!(SceneFile::from_json_str(&s.to_json()), Err(Error::Schema { pointer, .. }) if pointer == "/frames/0/camera")
        );
    }

    #[test]
    fn nearest_boundary_prefers_earlier_on_ties() {
        let mut s = minimal();
        let f = s.frames[0].clone();
        s.frames = (0..6)
            .map(|i| FrameRecord {
                frame_id: i,
                ..f.clone()
            })
            .collect();
        s.boundaries = vec![
            BoundaryRecord {
                frame_t: 0,
                frame_t1: 1,
            },
            BoundaryRecord {
                frame_t: 4,
                frame_t1: 5,
            },
        ];
        assert_eq!(s.nearest_boundary(0), Some(0));
        assert_eq!(s.nearest_boundary(2), Some(0));
        assert_eq!(s.nearest_boundary(3), Some(1));
        assert_eq!(s.nearest_boundary(5), Some(1));
        // Frame 2.5 does not exist; frame index 2 is one from frame 1 and two from frame 4.
        s.boundaries = vec![
            BoundaryRecord {
                frame_t: 4,
                frame_t1: 5,
            },
            BoundaryRecord {
                frame_t: 0,
                frame_t1: 0,
            },
        ];
        assert_eq!(s.nearest_boundary(2), Some(1));
    }
}
