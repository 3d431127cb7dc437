//! Command-line surface: scene generation, both solvers, evaluation and
//! the cinematography report.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body::{BodyModel, BodyParams, PELVIS, SHAPE_DIM};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::fitting::world_joints;
use crate::gaze::{gaze_from_body, image_gaze_angle_deg, GazeEstimate};
use crate::geometry::{CameraParams, Point3};
use crate::io::{read_json, write_atomic, write_json, SceneFile};
use crate::metrics::{mpjpe, pa_mpjpe, reid_f1, topdown_distance_error};
use crate::monocular::{cross_shot_pck, fit_monocular, Ablation, MonocularContext};
use crate::multishot::{associate, associate_by_triangulation, CalibrationMode, MatchResult};
use crate::optim::OptimReport;
use crate::scene::DensityGrid;
use crate::synth::{generate, GroundTruth, SynthSceneSpec};

#[derive(Debug, Parser)]
#[command(
    name = "shotfit",
    version,
    about = "Multi-shot and monocular human fitting in registered scenes"
)]
pub struct Cli {
    /// Flat TOML file of weights and tolerances; unset keys keep defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Print the effective configuration and exit.
    #[arg(long)]
    pub dump_config: bool,

    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene with ground truth.
    Synth(SynthArgs),
    /// Associate and fit people across shot boundaries.
    SolveMultishot(MultishotArgs),
    /// Fit single frames using camera, shape and scene context.
    SolveMonocular(MonocularArgs),
    /// Score results against ground truth as CSV.
    Evaluate(EvaluateArgs),
    /// Field-of-view histogram and top-down layout of cameras and people.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML scene spec; flags below override it.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub persons: Option<usize>,
    /// Keypoint noise standard deviation in pixels.
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Per-joint occlusion probability.
    #[arg(long)]
    pub occlusion: Option<f64>,
    #[arg(long)]
    pub cameras: Option<usize>,
    #[arg(long)]
    pub boundaries: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MultishotArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Boundary index; repeat for several. Defaults to all.
    #[arg(long)]
    pub boundary: Vec<usize>,
    /// Ignore the registered cameras entirely.
    #[arg(long, conflicts_with = "partial_calibration")]
    pub uncalibrated: bool,
    /// Keep intrinsics, drop extrinsics.
    #[arg(long)]
    pub partial_calibration: bool,
    /// Match on triangulation error instead of fitted bodies.
    #[arg(long, conflicts_with_all = ["uncalibrated", "partial_calibration"])]
    pub triangulation: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MonocularArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Frame id; repeat for several. Defaults to all.
    #[arg(long)]
    pub frame: Vec<u32>,
    /// Multishot results supplying per-person shape; solved on the fly
    /// when absent.
    #[arg(long)]
    pub multishot: Option<PathBuf>,
    #[arg(long)]
    pub no_camera: bool,
    #[arg(long)]
    pub no_shape: bool,
    #[arg(long)]
    pub no_structure: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub results: Option<PathBuf>,
    /// JSON destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultishotPerson {
    pub m: usize,
    pub n: usize,
    pub person_idx_t: usize,
    pub person_idx_t1: usize,
    pub cost: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params_t: Option<BodyParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params_t1: Option<BodyParams>,
    /// World joints through the registered frame-t camera.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joints_world: Option<Vec<Point3>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultishotOutput {
    pub scene_id: String,
    pub boundary: usize,
    pub frame_t: u32,
    pub frame_t1: u32,
    pub mode: String,
    pub pairs: Vec<MultishotPerson>,
    pub unmatched_t: Vec<usize>,
    pub unmatched_t1: Vec<usize>,
    pub cost_matrix: Vec<Vec<Option<f64>>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MonocularPerson {
    pub person_idx: usize,
    /// `boundary` when the shape came from a multishot fit, else `default`.
    pub shape_source: String,
    pub params: BodyParams,
    pub joints_world: Vec<Point3>,
    pub gaze: GazeEstimate,
    pub report: OptimReport,
    pub penetration_initial: Option<usize>,
    pub penetration_final: Option<usize>,
    pub sample_count: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MonocularOutput {
    pub scene_id: String,
    pub frame_id: u32,
    pub boundary: Option<usize>,
    /// The frame across the boundary, used for cross-shot scoring.
    pub other_frame: Option<u32>,
    pub ablation: Ablation,
    pub persons: Vec<MonocularPerson>,
    /// Detections with too few keypoints to fit.
    pub skipped: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FovBin {
    pub lower_deg: f64,
    pub upper_deg: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraSummary {
    pub frame_id: u32,
    pub fov_deg: f64,
    pub position_topdown: [f64; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PersonSummary {
    pub source: String,
    pub person_idx: usize,
    pub pelvis_topdown: [f64; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Analysis {
    pub scene_id: String,
    /// Top-down coordinates are along these two world axes.
    pub topdown_axes: [[f64; 3]; 2],
    pub cameras: Vec<CameraSummary>,
    pub fov_histogram: Vec<FovBin>,
    pub persons: Vec<PersonSummary>,
}

pub fn boundary_file(boundary: usize) -> String {
    format!("boundary_{boundary}.json")
}

pub fn frame_file(frame_id: u32) -> String {
    format!("frame_{frame_id}.json")
}

/// Horizontal field of view in degrees.
pub fn horizontal_fov_deg(camera: &CameraParams) -> f64 {
    (2.0 * (camera.width as f64 / (2.0 * camera.fx)).atan()).to_degrees()
}

/// Orthonormal pair spanning the plane orthogonal to `up`, preferring the
/// world x axis as the first direction.
pub fn topdown_axes(up: &Vector3<f64>) -> [Vector3<f64>; 2] {
    let up = up.normalize();
    let mut e1 = Vector3::x() - up * up.x;
    if e1.norm() < 1e-6 {
        e1 = Vector3::z() - up * up.z;
    }
    let e1 = e1.normalize();
    [e1, e1.cross(&up)]
}

fn topdown(p: &Point3, axes: &[Vector3<f64>; 2]) -> [f64; 2] {
    [p.coords.dot(&axes[0]), p.coords.dot(&axes[1])]
}

/// Counts per `bin`-degree interval, from 0 up to the widest field of view.
pub fn fov_histogram(fovs: &[f64], bin: f64) -> Vec<FovBin> {
    let max = fovs.iter().cloned().fold(0.0, f64::max);
    let bins = (max / bin).floor() as usize + 1;
    let mut counts = vec![0; if fovs.is_empty() { 0 } else { bins }];
    for f in fovs {
        counts[(f / bin).floor() as usize] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| FovBin {
            lower_deg: i as f64 * bin,
            upper_deg: (i + 1) as f64 * bin,
            count,
        })
        .collect()
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let config = load_config(cli.config.as_deref())?;
    if cli.dump_config {
        print!("{}", config.to_toml());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Error::InvalidInput("no command given; see --help".into()));
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidInput(format!("worker pool: {e}")))?;
    pool.install(|| match command {
        Command::Synth(a) => cmd_synth(&a),
        Command::SolveMultishot(a) => cmd_solve_multishot(&config, &a),
        Command::SolveMonocular(a) => cmd_solve_monocular(&config, &a),
        Command::Evaluate(a) => cmd_evaluate(&config, &a),
        Command::Analyze(a) => cmd_analyze(&config, &a),
    })
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_usage() {
        2
    } else {
        1
    }
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            SynthSceneSpec::from_toml_str(&text)?
        }
        None => SynthSceneSpec::default(),
    };
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.persons {
        spec.persons = v;
    }
    if let Some(v) = args.noise_sigma {
        spec.noise_sigma_px = v;
    }
    if let Some(v) = args.occlusion {
        spec.occlusion_p = v;
    }
    if let Some(v) = args.cameras {
        spec.cameras = v;
    }
    if let Some(v) = args.boundaries {
        spec.boundaries = v;
    }
    spec.validate()?;
    generate(&spec)?.write(&args.out)
}

fn solve_boundary(
    model: &BodyModel,
    config: &Config,
    scene: &SceneFile,
    index: usize,
    mode: CalibrationMode,
    triangulation: bool,
) -> Result<MultishotOutput> {
    let b = scene.boundary(index)?;
    let pair = scene.boundary_pair(index)?;
    let result: MatchResult = if triangulation {
        associate_by_triangulation(config, &pair)
    } else {
        associate(model, config, &pair, mode)
    };
    let pairs = result
        .pairs
        .iter()
        .map(|p| MultishotPerson {
            m: p.m,
            n: p.n,
            person_idx_t: pair.detections_t[p.m].person_idx,
            person_idx_t1: pair.detections_t1[p.n].person_idx,
            cost: p.cost,
            joints_world: p.params_t.as_ref().map(|q| world_joints(model, q, &pair.camera_t)),
            params_t: p.params_t.clone(),
            params_t1: p.params_t1.clone(),
        })
        .collect();
    let mode = match (triangulation, mode) {
        (true, _) => "triangulation",
        (false, CalibrationMode::Calibrated) => "calibrated",
        (false, CalibrationMode::Partial) => "partial",
        (false, CalibrationMode::Uncalibrated) => "uncalibrated",
    };
    Ok(MultishotOutput {
        scene_id: scene.scene_id.clone(),
        boundary: index,
        frame_t: b.frame_t,
        frame_t1: b.frame_t1,
        mode: mode.into(),
        pairs,
        unmatched_t: result.unmatched_t,
        unmatched_t1: result.unmatched_t1,
        cost_matrix: result.cost_matrix,
    })
}

fn selected_boundaries(scene: &SceneFile, requested: &[usize]) -> Result<Vec<usize>> {
    if requested.is_empty() {
        return Ok((0..scene.boundaries.len()).collect());
    }
    for &b in requested {
        scene.boundary(b)?;
    }
    Ok(requested.to_vec())
}

pub fn cmd_solve_multishot(config: &Config, args: &MultishotArgs) -> Result<()> {
    let scene = SceneFile::load(&args.scene)?;
    let boundaries = selected_boundaries(&scene, &args.boundary)?;
    let mode = if args.uncalibrated {
        CalibrationMode::Uncalibrated
    } else if args.partial_calibration {
        CalibrationMode::Partial
    } else {
        CalibrationMode::Calibrated
    };
    let model = BodyModel::default();
    for b in boundaries {
        let out = solve_boundary(&model, config, &scene, b, mode, args.triangulation)?;
        write_json(&args.out.join(boundary_file(b)), &out)?;
    }
    Ok(())
}

/// Shapes of the people in `frame_id`, keyed by `person_idx`, from the
/// multishot fit of boundary `b`.
fn boundary_shapes(
    model: &BodyModel,
    config: &Config,
    scene: &SceneFile,
    multishot: Option<&Path>,
    b: usize,
    frame_id: u32,
) -> Result<Vec<(usize, [f64; SHAPE_DIM])>> {
    let record = scene.boundary(b)?;
    let solved = match multishot.map(|d| d.join(boundary_file(b))) {
        Some(path) if path.exists() => read_json::<MultishotOutput>(&path)?,
        _ => solve_boundary(model, config, scene, b, CalibrationMode::Calibrated, false)?,
    };
    let before = scene.frame_index(frame_id) <= scene.frame_index(record.frame_t);
    Ok(solved
        .pairs
        .iter()
        .filter_map(|p| {
            let shape = p.params_t.as_ref()?.shape;
            Some((if before { p.person_idx_t } else { p.person_idx_t1 }, shape))
        })
        .collect())
}

fn solve_frame(
    model: &BodyModel,
    config: &Config,
    scene: &SceneFile,
    grid: Option<&DensityGrid>,
    args: &MonocularArgs,
    frame_id: u32,
) -> Result<MonocularOutput> {
    let camera = scene.camera(frame_id)?;
    let detections = scene.detections(frame_id)?;
    let ablation = Ablation {
        use_camera: !args.no_camera,
        use_shape: !args.no_shape,
        use_structure: !args.no_structure,
    };
    let boundary = scene.nearest_boundary(frame_id);
    let (shapes, other_frame) = match boundary {
        Some(b) => {
            let record = scene.boundary(b)?;
            let shapes = if ablation.use_shape {
                boundary_shapes(model, config, scene, args.multishot.as_deref(), b, frame_id)?
            } else {
                Vec::new()
            };
            let before = scene.frame_index(frame_id) <= scene.frame_index(record.frame_t);
            (shapes, Some(if before { record.frame_t1 } else { record.frame_t }))
        }
        None => (Vec::new(), None),
    };

    let usable: Vec<_> = detections
        .iter()
        .filter(|d| d.visible_count() >= config.min_visible_keypoints)
        .collect();
    let skipped = detections
        .iter()
        .filter(|d| d.visible_count() < config.min_visible_keypoints)
        .map(|d| d.person_idx)
        .collect();
    let persons = usable
        .par_iter()
        .map(|det| {
            let found = shapes.iter().find(|(idx, _)| *idx == det.person_idx);
            let context = MonocularContext {
                camera: &camera,
                shape_hat: found.map_or(BodyParams::rest(model).shape, |s| s.1),
                grid,
                ablation,
            };
            let fit = fit_monocular(model, config, det, &context, None)?;
            Ok(MonocularPerson {
                person_idx: det.person_idx,
                shape_source: if found.is_some() { "boundary" } else { "default" }.into(),
                gaze: gaze_from_body(model, &fit.params, &context.fitting_camera(), frame_id),
                params: fit.params,
                joints_world: fit.joints_world,
                report: fit.report,
                penetration_initial: fit.penetration_initial,
                penetration_final: fit.penetration_final,
                sample_count: fit.sample_count,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MonocularOutput {
        scene_id: scene.scene_id.clone(),
        frame_id,
        boundary,
        other_frame,
        ablation,
        persons,
        skipped,
    })
}

pub fn cmd_solve_monocular(config: &Config, args: &MonocularArgs) -> Result<()> {
    let scene = SceneFile::load(&args.scene)?;
    let frames: Vec<u32> = if args.frame.is_empty() {
        scene.frames.iter().map(|f| f.frame_id).collect()
    } else {
        for &f in &args.frame {
            scene.frame(f)?;
        }
        args.frame.clone()
    };
    let grid = if args.no_structure {
        None
    } else {
        let path = scene
            .grid_path(&args.scene)
            .ok_or_else(|| Error::InvalidInput("scene has no density grid; pass --no-structure".into()))?;
        Some(DensityGrid::read(&path)?)
    };
    let model = BodyModel::default();
    for f in frames {
        let out = solve_frame(&model, config, &scene, grid.as_ref(), args, f)?;
        write_json(&args.out.join(frame_file(f)), &out)?;
    }
    Ok(())
}

/// Files in `dir` named `{prefix}{number}.json`, ordered by number.
fn numbered_files(dir: &Path, prefix: &str) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let id = name
            .strip_prefix(prefix)
            .and_then(|r| r.strip_suffix(".json"))
            .and_then(|r| r.parse().ok());
        if let Some(id) = id {
            out.push((id, path));
        }
    }
    out.sort();
    Ok(out)
}

pub const CSV_COLUMNS: [&str; 10] = [
    "kind",
    "unit",
    "person",
    "mpjpe",
    "pa_mpjpe",
    "topdown_error",
    "reid_f1",
    "cross_shot_pck",
    "gaze_angle_deg",
    "pcgd",
];
const METRICS: usize = CSV_COLUMNS.len() - 3;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub kind: String,
    pub unit: String,
    pub person: String,
    pub values: [Option<f64>; METRICS],
}

impl EvalRow {
    fn new(kind: &str, unit: String, person: String) -> Self {
        EvalRow {
            kind: kind.into(),
            unit,
            person,
            values: [None; METRICS],
        }
    }
}

fn warn(err: &Error) {
    eprintln!("warning: {err}");
}

/// Pose and placement scores of predicted world joints against a truth
/// identity.
fn pose_scores(row: &mut EvalRow, joints: &[Point3], truth: &GroundTruth, identity: usize) -> Result<()> {
    let person = truth.person(identity)?;
    let gt = person.joints();
    let up = Vector3::from(truth.up_axis);
    row.values[0] = Some(mpjpe(joints, &gt)?);
    row.values[1] = Some(pa_mpjpe(joints, &gt)?);
    row.values[2] = Some(topdown_distance_error(&joints[PELVIS], &person.pelvis(), &up));
    Ok(())
}

fn identity_in(truth: &GroundTruth, frame_id: u32, person_idx: usize) -> Result<usize> {
    truth
        .frame(frame_id)?
        .identity_of(person_idx)
        .ok_or_else(|| Error::MissingGroundTruth(format!("person {person_idx} of frame {frame_id}")))
}

fn evaluate_multishot(out: &MultishotOutput, truth: &GroundTruth, rows: &mut Vec<EvalRow>) {
    let unit = format!("boundary_{}", out.boundary);
    let gt_pairs = truth
        .boundaries
        .iter()
        .find(|b| b.frame_t == out.frame_t && b.frame_t1 == out.frame_t1)
        .map(|b| b.pairs.clone());
    match gt_pairs {
        Some(gt) => {
            let predicted: Vec<_> = out.pairs.iter().map(|p| (p.m, p.n)).collect();
            let mut row = EvalRow::new("boundary", unit.clone(), String::new());
            row.values[3] = Some(reid_f1(&predicted, &gt));
            rows.push(row);
        }
        None => warn(&Error::MissingGroundTruth(unit.clone())),
    }
    for p in &out.pairs {
        let Some(joints) = &p.joints_world else { continue };
        let mut row = EvalRow::new("multishot", unit.clone(), p.person_idx_t.to_string());
        let scored =
            identity_in(truth, out.frame_t, p.person_idx_t).and_then(|id| pose_scores(&mut row, joints, truth, id));
        match scored {
            Ok(()) => rows.push(row),
            Err(e) => warn(&e),
        }
    }
}

fn evaluate_monocular(config: &Config, out: &MonocularOutput, truth: &GroundTruth, rows: &mut Vec<EvalRow>) {
    let unit = format!("frame_{}", out.frame_id);
    for p in &out.persons {
        let mut row = EvalRow::new("monocular", unit.clone(), p.person_idx.to_string());
        let result = (|| -> Result<()> {
            let id = identity_in(truth, out.frame_id, p.person_idx)?;
            pose_scores(&mut row, &p.joints_world, truth, id)?;
            if let Some(other) = out.other_frame {
                let gt = truth.exact_keypoints(other, id)?;
                let view = truth.frame(other)?.camera.to_camera()?;
                match cross_shot_pck(&p.joints_world, &view, &gt, config.pck_alpha) {
                    Ok(v) => row.values[4] = Some(v),
                    Err(Error::NoVisibleJoints) => {}
                    Err(e) => return Err(e),
                }
            }
            let view = truth.frame(out.frame_id)?.camera.to_camera()?;
            let target = Point3::from(truth.person(id)?.gaze_target);
            if let Ok(angle) = image_gaze_angle_deg(&p.gaze, &target, &view) {
                row.values[5] = Some(angle);
                let hit = config.pcgd_alpha_deg >= 180.0 || angle < config.pcgd_alpha_deg;
                row.values[6] = Some(if hit { 1.0 } else { 0.0 });
            }
            Ok(())
        })();
        match result {
            Ok(()) => rows.push(row),
            Err(e) => warn(&e),
        }
    }
}

/// Per-instance rows followed by an aggregate row of column means.
pub fn evaluate_results(config: &Config, results: &Path, truth: &GroundTruth) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for (_, path) in numbered_files(results, "boundary_")? {
        evaluate_multishot(&read_json(&path)?, truth, &mut rows);
    }
    for (_, path) in numbered_files(results, "frame_")? {
        evaluate_monocular(config, &read_json(&path)?, truth, &mut rows);
    }
    let mut aggregate = EvalRow::new("aggregate", "all".into(), String::new());
    for c in 0..METRICS {
        let vals: Vec<f64> = rows.iter().filter_map(|r| r.values[c]).collect();
        if !vals.is_empty() {
            aggregate.values[c] = Some(vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    rows.push(aggregate);
    Ok(rows)
}

pub fn to_csv(rows: &[EvalRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS).expect("in-memory write");
    for r in rows {
        let mut record = vec![r.kind.clone(), r.unit.clone(), r.person.clone()];
        record.extend(r.values.iter().map(|v| v.map_or(String::new(), |v| v.to_string())));
        w.write_record(&record).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn cmd_evaluate(config: &Config, args: &EvaluateArgs) -> Result<()> {
    let truth = GroundTruth::load(&args.truth)?;
    let rows = evaluate_results(config, &args.results, &truth)?;
    emit(args.out.as_deref(), &to_csv(&rows))
}

pub fn analyze(config: &Config, scene: &SceneFile, results: Option<&Path>) -> Result<Analysis> {
    let axes = topdown_axes(&Vector3::from(scene.up_axis));
    let mut cameras = Vec::new();
    for f in &scene.frames {
        let camera = f.camera.to_camera()?;
        cameras.push(CameraSummary {
            frame_id: f.frame_id,
            fov_deg: horizontal_fov_deg(&camera),
            position_topdown: topdown(&Point3::from(camera.translation_cw), &axes),
        });
    }
    let fovs: Vec<f64> = cameras.iter().map(|c| c.fov_deg).collect();
    let mut persons = Vec::new();
    if let Some(dir) = results {
        for (b, path) in numbered_files(dir, "boundary_")? {
            let out: MultishotOutput = read_json(&path)?;
            for p in &out.pairs {
                if let Some(j) = &p.joints_world {
                    persons.push(PersonSummary {
                        source: format!("boundary_{b}"),
                        person_idx: p.person_idx_t,
                        pelvis_topdown: topdown(&j[PELVIS], &axes),
                    });
                }
            }
        }
        for (f, path) in numbered_files(dir, "frame_")? {
            let out: MonocularOutput = read_json(&path)?;
            for p in &out.persons {
                persons.push(PersonSummary {
                    source: format!("frame_{f}"),
                    person_idx: p.person_idx,
                    pelvis_topdown: topdown(&p.joints_world[PELVIS], &axes),
                });
            }
        }
    }
    Ok(Analysis {
        scene_id: scene.scene_id.clone(),
        topdown_axes: [axes[0].into(), axes[1].into()],
        cameras,
        fov_histogram: fov_histogram(&fovs, config.fov_bin_deg),
        persons,
    })
}

pub fn cmd_analyze(config: &Config, args: &AnalyzeArgs) -> Result<()> {
    let scene = SceneFile::load(&args.scene)?;
    let analysis = analyze(config, &scene, args.results.as_deref())?;
    emit(args.out.as_deref(), &crate::io::to_json(&analysis))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fov_is_ninety_degrees_when_focal_is_half_width() {
        let cam = CameraParams::identity(640.0, 640.0, 640.0, 360.0, 1280, 720);
        assert!((horizontal_fov_deg(&cam) - 90.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_counts_every_camera_once() {
        let h = fov_histogram(&[3.0, 4.9, 5.0, 62.0], 5.0);
        assert_eq!(h.len(), 13);
        assert_eq!(h[0].count, 2);
        assert_eq!(h[1].count, 1);
        assert_eq!(h[12].count, 1);
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 4);
        assert!(fov_histogram(&[], 5.0).is_empty());
    }

    #[test]
    fn topdown_axes_are_orthonormal_and_flat() {
        for up in [Vector3::y(), Vector3::new(0.2, -1.0, 0.3), Vector3::x()] {
            let [a, b] = topdown_axes(&up);
            let u = up.normalize();
            assert!((a.norm() - 1.0).abs() < 1e-12 && (b.norm() - 1.0).abs() < 1e-12);
            assert!(a.dot(&b).abs() < 1e-12 && a.dot(&u).abs() < 1e-12 && b.dot(&u).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_leaves_missing_metrics_blank() {
        let mut row = EvalRow::new("boundary", "boundary_0".into(), String::new());
        row.values[3] = Some(1.0);
        let csv = to_csv(&[row]);
        assert_eq!(csv.lines().nth(1).unwrap(), "boundary,boundary_0,,,,,1,,,");
    }
}
