//! Multi-shot fitting across a shot boundary and identity association.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body::{BodyModel, BodyParams, NUM_JOINTS, TORSO_JOINTS};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::fitting::{initialize, reframe, triangulated_initialization, BodyFit, FreeSet};
use crate::geometry::{triangulate, CameraParams, Point2};
use crate::optim::{OptimReport, Problem};

/// Penalty, in pixels, for a joint triangulated behind one of the cameras.
const BEHIND_CAMERA_PENALTY_PX: f64 = 1e4;

/// 2D keypoints of one person in one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection2D {
    pub keypoints: [Point2; NUM_JOINTS],
    /// 0 marks an unobserved joint.
    pub confidences: [f64; NUM_JOINTS],
    pub frame_id: u32,
    pub person_idx: usize,
}

impl Detection2D {
    pub fn visible_count(&self) -> usize {
        self.confidences.iter().filter(|&&c| c > 0.0).count()
    }

    pub fn validate(&self) -> Result<()> {
        for (k, c) in self.confidences.iter().enumerate() {
            if !(0.0..=1.0).contains(c) {
                return Err(Error::InvalidInput(format!(
                    "confidence {c} of joint {k} outside [0, 1]"
                )));
            }
            if *c > 0.0 && !self.keypoints[k].coords.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidInput(format!("keypoint {k} is not finite")));
            }
        }
        Ok(())
    }
}

/// Two registered frames straddling a cut.
#[derive(Clone, Debug)]
pub struct ShotBoundaryPair {
    pub camera_t: CameraParams,
    pub detections_t: Vec<Detection2D>,
    pub camera_t1: CameraParams,
    pub detections_t1: Vec<Detection2D>,
}

/// Which camera information the solver may use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    #[default]
    Calibrated,
    /// True intrinsics, identity extrinsics.
    Partial,
    /// Heuristic intrinsics, identity extrinsics.
    Uncalibrated,
}

impl CalibrationMode {
    pub fn camera(self, camera: &CameraParams) -> CameraParams {
        match self {
            CalibrationMode::Calibrated => camera.clone(),
            CalibrationMode::Partial => camera.without_extrinsics(),
            CalibrationMode::Uncalibrated => CameraParams::heuristic(camera.width, camera.height),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PairFit {
    pub params_t: BodyParams,
    pub params_t1: BodyParams,
    pub cost: f64,
    pub report: OptimReport,
}

/// Jointly fits one body seen in both frames; the converged energy is the
/// matching cost.
///
/// Each frame is initialized from its torso alone. Those bodies, each one
/// carried into the other frame, and a body fitted to the two-view
/// triangulation give up to four starting pairs, each refined on the torso
/// with only the roots free. With a triangulated start the best refined
/// start seeds a single full solve; without one (unregistered cameras)
/// every start is solved and the lowest energy kept.
pub fn pairwise_fit(
    model: &BodyModel,
    config: &Config,
    camera_t: &CameraParams,
    camera_t1: &CameraParams,
    det_t: &Detection2D,
    det_t1: &Detection2D,
) -> Result<PairFit> {
    let unit = BodyParams::rest(model).shape;
    let init_t = initialize(model, config, camera_t, det_t, unit)?;
    let init_t1 = initialize(model, config, camera_t1, det_t1, unit)?;
    let mut starts = vec![
        (init_t.clone(), init_t1.clone()),
        (init_t.clone(), reframe(model, &init_t, camera_t, camera_t1)),
        (reframe(model, &init_t1, camera_t1, camera_t), init_t1),
    ];
    let triangulated = triangulated_initialization(model, config, camera_t, det_t, camera_t1, det_t1);
    let multi_start = triangulated.is_none();
    if let Some(tri) = triangulated {
        let tri_t1 = reframe(model, &tri, camera_t, camera_t1);
        starts.push((tri, tri_t1));
    }

    let torso: Vec<usize> = TORSO_JOINTS
        .iter()
        .copied()
        .filter(|&k| det_t.confidences[k] > 0.0 || det_t1.confidences[k] > 0.0)
        .collect();
    let full = |a: BodyParams, b: BodyParams| {
        BodyFit::new(model, config)
            .block(camera_t, det_t, a, FreeSet::All)
            .block(camera_t1, det_t1, b, FreeSet::All)
            .glob()
    };
    let mut refined: Vec<(f64, BodyParams, BodyParams)> = Vec::with_capacity(starts.len());
    for (a, b) in starts {
        let stage = BodyFit::new(model, config)
            .joints(&torso)
            .block(camera_t, det_t, a, FreeSet::Root)
            .block(camera_t1, det_t1, b, FreeSet::Root)
            .glob();
        let Ok((mut fitted, _)) = stage.solve(&config.init_lm()) else {
            continue;
        };
        let b = fitted.pop().unwrap();
        let a = fitted.pop().unwrap();
        let problem = full(a, b);
        let x = problem.initial_vector();
        let energy = problem.evaluate(&x, None).norm_squared();
        if energy.is_finite() {
            let mut p = problem.params(&x);
            let b = p.pop().unwrap();
            refined.push((energy, p.pop().unwrap(), b));
        }
    }
    // Stable sort keeps the start order on ties.
    refined.sort_by(|x, y| x.0.total_cmp(&y.0));
    if !multi_start {
        refined.truncate(1);
    }

    let mut best: Option<(Vec<BodyParams>, OptimReport)> = None;
    let mut last_error = None;
    for (_, a, b) in refined {
        match full(a, b).solve(&config.lm()) {
            Ok((fitted, report)) => {
                if best.as_ref().is_none_or(|(_, r)| report.final_energy < r.final_energy) {
                    best = Some((fitted, report));
                }
            }
            Err(e) => last_error = Some(e),
        }
    }
    let (mut fitted, report) = best.ok_or_else(|| {
        last_error.unwrap_or_else(|| Error::InitializationFailed("no starting pair could be refined".into()))
    })?;
    let params_t1 = fitted.pop().unwrap();
    let params_t = fitted.pop().unwrap();
    Ok(PairFit {
        params_t,
        params_t1,
        cost: report.final_energy,
        report,
    })
}

/// The same objective with identity extrinsics and image-diagonal focal
/// lengths.
pub fn uncalibrated_fit(
    model: &BodyModel,
    config: &Config,
    camera_t: &CameraParams,
    camera_t1: &CameraParams,
    det_t: &Detection2D,
    det_t1: &Detection2D,
) -> Result<PairFit> {
    let mode = CalibrationMode::Uncalibrated;
    pairwise_fit(
        model,
        config,
        &mode.camera(camera_t),
        &mode.camera(camera_t1),
        det_t,
        det_t1,
    )
}

/// Mean symmetric reprojection error, in pixels, of per-joint two-view
/// triangulations over the co-visible joints.
pub fn triangulation_cost(
    camera_t: &CameraParams,
    camera_t1: &CameraParams,
    det_t: &Detection2D,
    det_t1: &Detection2D,
) -> Result<f64> {
    let shared: Vec<usize> = (0..NUM_JOINTS)
        .filter(|&k| det_t.confidences[k] > 0.0 && det_t1.confidences[k] > 0.0)
        .collect();
    if shared.len() < 4 {
        return Err(Error::InvalidInput(format!(
            "{} co-visible joints, need at least 4",
            shared.len()
        )));
    }
    let cameras = [camera_t.clone(), camera_t1.clone()];
    let mut total = 0.0;
    for &k in &shared {
        let obs = [det_t.keypoints[k], det_t1.keypoints[k]];
        let point = triangulate(&cameras, &obs)?;
        let mut err = 0.0;
        for (cam, o) in cameras.iter().zip(&obs) {
            err += match cam.project(&point) {
                Ok(p) => (p - o).norm(),
                Err(_) => BEHIND_CAMERA_PENALTY_PX,
            };
        }
        total += 0.5 * err;
    }
    Ok(total / shared.len() as f64)
}

/// Maximum-cardinality, then minimum-cost assignment over the allowed
/// (`Some`) entries of a rectangular cost matrix.
pub fn hungarian(cost: &[Vec<Option<f64>>]) -> Vec<(usize, usize)> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let finite: f64 = cost.iter().flatten().flatten().map(|c| c.abs()).sum();
    let big = 2.0 * finite + 1.0;
    let n = rows.max(cols);
    let entry = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            cost[i][j].unwrap_or(big)
        } else {
            big
        }
    };

    // Shortest augmenting paths with potentials, 1-based with a virtual
    // column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut assigned_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        assigned_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = assigned_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = entry(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[assigned_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if assigned_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assigned_row[j0] = assigned_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter_map(|j| {
            let i = assigned_row[j];
            (i >= 1 && i <= rows && j <= cols && cost[i - 1][j - 1].is_some()).then_some((i - 1, j - 1))
        })
        .collect();
    pairs.sort_unstable();
    pairs
}

/// Exhaustive counterpart of [`hungarian`] with the same objective.
pub fn brute_force_assignment(cost: &[Vec<Option<f64>>]) -> Vec<(usize, usize)> {
    fn recurse(
        cost: &[Vec<Option<f64>>],
        row: usize,
        used: &mut Vec<bool>,
        current: &mut Vec<(usize, usize)>,
        total: f64,
        best: &mut (usize, f64, Vec<(usize, usize)>),
    ) {
        if row == cost.len() {
            let better = current.len() > best.0 || (current.len() == best.0 && total < best.1);
            if better {
                *best = (current.len(), total, current.clone());
            }
            return;
        }
        recurse(cost, row + 1, used, current, total, best);
        for j in 0..used.len() {
            if let (false, Some(c)) = (used[j], cost[row][j]) {
                used[j] = true;
                current.push((row, j));
                recurse(cost, row + 1, used, current, total + c, best);
                current.pop();
                used[j] = false;
            }
        }
    }
    let cols = cost.first().map_or(0, |r| r.len());
    let mut best = (0, 0.0, Vec::new());
    recurse(cost, 0, &mut vec![false; cols], &mut Vec::new(), 0.0, &mut best);
    best.2
}

/// Sum of the matched entries.
pub fn assignment_cost(cost: &[Vec<Option<f64>>], pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| cost[i][j].unwrap()).sum()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatchedPair {
    pub m: usize,
    pub n: usize,
    pub cost: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params_t: Option<BodyParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params_t1: Option<BodyParams>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_t: Vec<usize>,
    pub unmatched_t1: Vec<usize>,
    /// `null` marks entries that were not fitted or failed.
    pub cost_matrix: Vec<Vec<Option<f64>>>,
}

impl MatchResult {
    pub fn matched_pairs(&self) -> Vec<(usize, usize)> {
        self.pairs.iter().map(|p| (p.m, p.n)).collect()
    }
}

fn finish(
    m: usize,
    n: usize,
    raw: Vec<Vec<Option<f64>>>,
    threshold: f64,
    mut fits: Vec<Vec<Option<PairFit>>>,
) -> MatchResult {
    let allowed: Vec<Vec<Option<f64>>> = raw
        .iter()
        .map(|row| row.iter().map(|c| c.filter(|c| *c < threshold)).collect())
        .collect();
    let assignment = hungarian(&allowed);
    let mut pairs = Vec::with_capacity(assignment.len());
    for &(i, j) in &assignment {
        let cost = allowed[i][j].unwrap();
        let fit = fits.get_mut(i).and_then(|r| r[j].take());
        let (params_t, params_t1) = match fit {
            Some(fit) => (Some(fit.params_t), Some(fit.params_t1)),
            None => (None, None),
        };
        pairs.push(MatchedPair {
            m: i,
            n: j,
            cost,
            params_t,
            params_t1,
        });
    }
    let unmatched_t = (0..m).filter(|i| !assignment.iter().any(|p| p.0 == *i)).collect();
    let unmatched_t1 = (0..n).filter(|j| !assignment.iter().any(|p| p.1 == *j)).collect();
    MatchResult {
        pairs,
        unmatched_t,
        unmatched_t1,
        cost_matrix: raw,
    }
}

/// Fits every candidate pair and matches identities across the boundary.
pub fn associate(model: &BodyModel, config: &Config, pair: &ShotBoundaryPair, mode: CalibrationMode) -> MatchResult {
    let m = pair.detections_t.len();
    let n = pair.detections_t1.len();
    let cam_t = mode.camera(&pair.camera_t);
    let cam_t1 = mode.camera(&pair.camera_t1);
    let usable = |d: &Detection2D| d.visible_count() >= config.min_visible_keypoints;
    let prefilter = config.prefilter_factor * config.triangulation_threshold_px;

    let entries: Vec<Option<PairFit>> = (0..m * n)
        .into_par_iter()
        .map(|e| {
            let (dt, dt1) = (&pair.detections_t[e / n], &pair.detections_t1[e % n]);
            if !usable(dt) || !usable(dt1) {
                return None;
            }
            if mode == CalibrationMode::Calibrated {
                if let Ok(c) = triangulation_cost(&cam_t, &cam_t1, dt, dt1) {
                    if c > prefilter {
                        return None;
                    }
                }
            }
            pairwise_fit(model, config, &cam_t, &cam_t1, dt, dt1).ok()
        })
        .collect();

    let mut raw = vec![vec![None; n]; m];
    let mut fits: Vec<Vec<Option<PairFit>>> = (0..m).map(|_| (0..n).map(|_| None).collect()).collect();
    for (e, fit) in entries.into_iter().enumerate() {
        if let Some(fit) = fit {
            raw[e / n][e % n] = Some(fit.cost);
            fits[e / n][e % n] = Some(fit);
        }
    }
    finish(m, n, raw, config.unmatched_cost_threshold, fits)
}

/// Association baseline using only per-joint triangulation error. Matched
/// pairs carry no fitted bodies.
pub fn associate_by_triangulation(config: &Config, pair: &ShotBoundaryPair) -> MatchResult {
    let m = pair.detections_t.len();
    let n = pair.detections_t1.len();
    let usable = |d: &Detection2D| d.visible_count() >= config.min_visible_keypoints;
    let raw: Vec<Vec<Option<f64>>> = pair
        .detections_t
        .iter()
        .map(|dt| {
            pair.detections_t1
                .iter()
                .map(|dt1| {
                    if !usable(dt) || !usable(dt1) {
                        return None;
                    }
                    triangulation_cost(&pair.camera_t, &pair.camera_t1, dt, dt1).ok()
                })
                .collect()
        })
        .collect();
    let fits = (0..m).map(|_| (0..n).map(|_| None).collect()).collect();
    finish(m, n, raw, config.triangulation_threshold_px, fits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fitting::world_joints;
    use crate::synth::{generate, SynthSceneSpec};
    use proptest::prelude::*;

    fn scene(spec: SynthSceneSpec) -> (crate::synth::SynthOutput, ShotBoundaryPair) {
        let out = generate(&spec).unwrap();
        let pair = out.scene.boundary_pair(0).unwrap();
        (out, pair)
    }

    fn cost_matrix(max: usize) -> impl Strategy<Value = Vec<Vec<Option<f64>>>> {
        (1..=max, 1..=max).prop_flat_map(|(m, n)| {
            proptest::collection::vec(
                proptest::collection::vec(proptest::option::weighted(0.8, 0.0..100.0f64), n),
                m,
            )
        })
    }

    proptest! {
        #[test]
        fn hungarian_matches_exhaustive_search(cost in cost_matrix(6)) {
            let fast = hungarian(&cost);
            let slow = brute_force_assignment(&cost);
            prop_assert_eq!(fast.len(), slow.len());
            let (a, b) = (assignment_cost(&cost, &fast), assignment_cost(&cost, &slow));
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{} vs {}", a, b);
            let mut rows: Vec<usize> = fast.iter().map(|p| p.0).collect();
            let mut cols: Vec<usize> = fast.iter().map(|p| p.1).collect();
            rows.dedup();
            cols.sort_unstable();
            cols.dedup();
            prop_assert_eq!(rows.len(), fast.len());
            prop_assert_eq!(cols.len(), fast.len());
        }
    }

    #[test]
    fn single_entry_is_matched() {
        assert_eq!(hungarian(&[vec![Some(3.0)]]), vec![(0, 0)]);
        assert!(hungarian(&[vec![None]]).is_empty());
        assert!(hungarian(&[]).is_empty());
    }

    #[test]
    fn forbidden_entries_are_never_used() {
        let cost = vec![vec![None, Some(1.0)], vec![None, Some(0.5)]];
        let pairs = hungarian(&cost);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].1, 1);
    }

    #[test]
    fn noiseless_true_pair_triangulates_exactly() {
        let (out, pair) = scene(SynthSceneSpec::default());
        for &(i, j) in &out.truth.boundaries[0].pairs {
            let c = triangulation_cost(
                &pair.camera_t,
                &pair.camera_t1,
                &pair.detections_t[i],
                &pair.detections_t1[j],
            )
            .unwrap();
            assert!(c < 1e-6, "{c}");
        }
    }

    #[test]
    fn duplicated_view_gives_coincident_bodies() {
        let model = BodyModel::default();
        let config = Config::default();
        let (_, pair) = scene(SynthSceneSpec::default());
        let d = &pair.detections_t[0];
        let fit = pairwise_fit(&model, &config, &pair.camera_t, &pair.camera_t, d, d).unwrap();
        let a = world_joints(&model, &fit.params_t, &pair.camera_t);
        let b = world_joints(&model, &fit.params_t1, &pair.camera_t);
        let glob: f64 = a.iter().zip(&b).map(|(p, q)| (p - q).norm_squared()).sum::<f64>() * config.weight_glob;
        assert!(glob < 1e-6, "{glob}");
        assert!(fit.cost.is_finite());
    }

    #[test]
    fn identical_uncalibrated_views_converge() {
        let model = BodyModel::default();
        let config = Config::default();
        let (_, pair) = scene(SynthSceneSpec::default());
        let d = &pair.detections_t[1];
        let fit = uncalibrated_fit(&model, &config, &pair.camera_t, &pair.camera_t, d, d).unwrap();
        assert!(fit.cost.is_finite());
    }

    #[test]
    fn cost_is_symmetric_under_swapping_frames() {
        let model = BodyModel::default();
        let config = Config::default();
        let (out, pair) = scene(SynthSceneSpec {
            noise_sigma_px: 2.0,
            ..Default::default()
        });
        let (i, j) = out.truth.boundaries[0].pairs[0];
        let (dt, dt1) = (&pair.detections_t[i], &pair.detections_t1[j]);
        let ab = pairwise_fit(&model, &config, &pair.camera_t, &pair.camera_t1, dt, dt1).unwrap();
        let ba = pairwise_fit(&model, &config, &pair.camera_t1, &pair.camera_t, dt1, dt).unwrap();
        assert!(
            (ab.cost - ba.cost).abs() <= 1e-6 * ab.cost.max(1.0),
            "{} vs {}",
            ab.cost,
            ba.cost
        );
    }

    #[test]
    fn wrong_pairs_cost_far_more_than_right_ones() {
        let model = BodyModel::default();
        let config = Config::default();
        let (out, pair) = scene(SynthSceneSpec {
            persons: 2,
            noise_sigma_px: 2.0,
            ..Default::default()
        });
        let truth = &out.truth.boundaries[0].pairs;
        let cost = |i: usize, j: usize| {
            pairwise_fit(
                &model,
                &config,
                &pair.camera_t,
                &pair.camera_t1,
                &pair.detections_t[i],
                &pair.detections_t1[j],
            )
            .unwrap()
            .cost
        };
        let right = truth.iter().map(|&(i, j)| cost(i, j)).fold(0.0, f64::max);
        let (i0, j0) = truth[0];
        let (i1, j1) = truth[1];
        let wrong = cost(i0, j1).min(cost(i1, j0));
        assert!(wrong > 5.0 * right, "wrong {wrong} right {right}");
    }

    #[test]
    fn exiting_person_is_left_unmatched() {
        let model = BodyModel::default();
        let config = Config::default();
        let (out, pair) = scene(SynthSceneSpec {
            persons: 3,
            exits: 1,
            ..Default::default()
        });
        assert_eq!((pair.detections_t.len(), pair.detections_t1.len()), (3, 2));
        let result = associate(&model, &config, &pair, CalibrationMode::Calibrated);
        let mut found = result.matched_pairs();
        found.sort_unstable();
        let mut expected = out.truth.boundaries[0].pairs.clone();
        expected.sort_unstable();
        assert_eq!(found, expected);
        assert_eq!(found.len(), 2);
        assert_eq!(result.unmatched_t.len(), 1);
        for p in &result.pairs {
            assert!(p.cost < config.unmatched_cost_threshold);
        }
    }

    #[test]
    fn undersized_detections_are_not_fitted() {
        let model = BodyModel::default();
        let config = Config::default();
        let (_, mut pair) = scene(SynthSceneSpec {
            persons: 2,
            ..Default::default()
        });
        for c in pair.detections_t[0].confidences.iter_mut().skip(3) {
            *c = 0.0;
        }
        let result = associate(&model, &config, &pair, CalibrationMode::Calibrated);
        assert!(result.cost_matrix[0].iter().all(Option::is_none));
        assert!(result.unmatched_t.contains(&0));
    }
}
