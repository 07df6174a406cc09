//! Acquire → estimate → plan → execute, and closed-loop trials against the
//! phantom.

use std::fmt;
use std::fs::OpenOptions;
use std::path::Path;
use std::time::Instant;

use octnav_core::phantom::reacquire;
use octnav_core::pose::{estimate_axial, estimate_inplane, pose_from_estimates, AxialEstimate, EntryBorder, InplaneEstimate};
use octnav_core::projection::axial_projection;
use octnav_core::segmentation::baseline::BaselineParams;
use octnav_core::segmentation::{extract_layer_boundaries, BScanMasks, BaselineSegmenter, OracleSegmenter};
use octnav_core::slicing::{tool_aligned_plane, virtual_bscan_skipping};
use octnav_core::trajectory::{plan_trajectory, second_virtual_bscan, RefractiveIndices};
use octnav_core::{
    AxialProjectionImage, InsertionPlan, IoctVolume, MediaStack, MetricPoint, NeedlePose, PhantomScene, PoseParams,
    ProjectionOp, Segmenter, SimulatedRobot, SoftMask, VirtualBScan,
};
use serde::{Deserialize, Serialize};

use crate::dto::{PlanJson, PoseJson};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmenterKind {
    Oracle,
    #[default]
    Baseline,
}

impl SegmenterKind {
    pub fn name(self) -> &'static str {
        match self {
            SegmenterKind::Oracle => "oracle",
            SegmenterKind::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub segmenter: SegmenterKind,
    pub confidence_fraction: f64,
    pub bscan_confidence_fraction: f64,
    pub huber_delta: f64,
    pub indices: RefractiveIndices,
    /// Depth of the fluid surface in the volume, µm.
    pub fluid_surface_um: f64,
    pub robot_sigma_um: f64,
    pub entry_border: EntryBorder,
    /// Re-acquire and re-plan after the lateral alignment.
    pub reacquire_between: bool,
    pub seed: u64,
    pub baseline: BaselineParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let pose = PoseParams::default();
        Self {
            segmenter: SegmenterKind::default(),
            confidence_fraction: pose.confidence_fraction,
            bscan_confidence_fraction: pose.bscan_confidence_fraction,
            huber_delta: pose.huber_delta,
            indices: RefractiveIndices::default(),
            fluid_surface_um: 0.0,
            robot_sigma_um: 5.0,
            entry_border: EntryBorder::default(),
            reacquire_between: false,
            seed: 0,
            baseline: BaselineParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |name: &'static str, reason: String| {
            PipelineError::new(Stage::Config, octnav_core::Error::InvalidParameter { name, reason })
        };
        for (name, f) in [
            ("confidence_fraction", self.confidence_fraction),
            ("bscan_confidence_fraction", self.bscan_confidence_fraction),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(bad(name, format!("{f} outside (0, 1]")));
            }
        }
        if !(self.huber_delta.is_finite() && self.huber_delta > 0.0) {
            return Err(bad("huber_delta", format!("{} must be > 0", self.huber_delta)));
        }
        if !(self.robot_sigma_um.is_finite() && self.robot_sigma_um >= 0.0) {
            return Err(bad("robot_sigma_um", format!("{} must be >= 0", self.robot_sigma_um)));
        }
        if !(self.fluid_surface_um.is_finite() && self.fluid_surface_um >= 0.0) {
            return Err(bad("fluid_surface_um", format!("{} must be >= 0", self.fluid_surface_um)));
        }
        self.indices.validate().map_err(|e| PipelineError::new(Stage::Config, e))
    }

    pub fn pose_params(&self) -> PoseParams {
        PoseParams {
            confidence_fraction: self.confidence_fraction,
            bscan_confidence_fraction: self.bscan_confidence_fraction,
            huber_delta: self.huber_delta,
            entry_border: self.entry_border,
            ..PoseParams::default()
        }
    }
}

/// Pipeline step a failure is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Acquire,
    SegmentProjection,
    EstimateInplane,
    ToolPlane,
    EstimateAxial,
    SecondSlice,
    LayerBoundaries,
    MediaStack,
    Trajectory,
    Refraction,
    Execute,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("unknown"))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{stage} failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: octnav_core::Error,
}

impl PipelineError {
    pub fn new(stage: Stage, source: octnav_core::Error) -> Self {
        Self { stage, source }
    }
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T> AtStage<T> for octnav_core::Result<T> {
    fn at(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError::new(stage, e))
    }
}

pub type DynSegmenter = Box<dyn Segmenter + Send + Sync>;

/// The oracle needs the ground-truth scene; the baseline ignores it.
pub fn make_segmenter(config: &PipelineConfig, scene: Option<&PhantomScene>) -> Result<DynSegmenter, PipelineError> {
    match config.segmenter {
        SegmenterKind::Baseline => Ok(Box::new(BaselineSegmenter::new(config.baseline))),
        SegmenterKind::Oracle => match scene {
            Some(s) => Ok(Box::new(OracleSegmenter::new(s.clone()))),
            None => Err(PipelineError::new(
                Stage::Config,
                octnav_core::Error::InvalidParameter {
                    name: "segmenter",
                    reason: "the oracle segmenter needs a phantom scene".into(),
                },
            )),
        },
    }
}

/// Pose plus the intermediate images, for display.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub pose: NeedlePose,
    pub inplane: InplaneEstimate,
    pub axial: AxialEstimate,
    pub projection: AxialProjectionImage,
    pub projection_mask: SoftMask,
    pub slice: VirtualBScan,
    pub slice_masks: BScanMasks,
    /// B-scans detected as lost (zero rows of the projection).
    pub dropped: Vec<bool>,
}

/// Projection → segmentation → in-plane fit → tool-aligned slice →
/// slice segmentation → axial fit → pose.
pub fn estimate(volume: &IoctVolume, segmenter: &dyn Segmenter, config: &PipelineConfig) -> Result<Estimate, PipelineError> {
    let params = config.pose_params();
    let projection = axial_projection(volume, ProjectionOp::Mean);
    let dropped = projection.zero_rows();
    let projection_mask = segmenter.segment_projection(&projection);
    projection_mask.validate().at(Stage::SegmentProjection)?;
    let inplane = estimate_inplane(&projection_mask, &params).at(Stage::EstimateInplane)?;
    let plane = tool_aligned_plane(inplane.theta_z, inplane.tip[0], inplane.tip[1], volume.geometry()).at(Stage::ToolPlane)?;
    let slice = virtual_bscan_skipping(volume, &plane, None, None, &dropped).at(Stage::ToolPlane)?;
    let slice_masks = segmenter.segment_bscan(&slice);
    let axial = estimate_axial(&slice_masks.needle, &params).at(Stage::EstimateAxial)?;
    let pose = pose_from_estimates(&inplane, &axial, &slice.geometry);
    Ok(Estimate {
        pose,
        inplane,
        axial,
        projection,
        projection_mask,
        slice,
        slice_masks,
        dropped,
    })
}

#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub plan: InsertionPlan,
    pub media: MediaStack,
    /// (ILM, RPE) depth used for the media stack, µm.
    pub boundaries_um: (f64, f64),
    pub slice: VirtualBScan,
}

/// Second slice through the target → layer boundaries → media stack →
/// trajectory → refraction correction → robot commands.
pub fn plan(
    volume: &IoctVolume,
    pose: &NeedlePose,
    dropped: &[bool],
    target: &MetricPoint,
    segmenter: &dyn Segmenter,
    config: &PipelineConfig,
) -> Result<PlanOutcome, PipelineError> {
    let plane = second_virtual_bscan(target, pose.theta_z, volume.geometry()).at(Stage::SecondSlice)?;
    let slice = virtual_bscan_skipping(volume, &plane, None, None, dropped).at(Stage::SecondSlice)?;
    let masks = segmenter.segment_bscan(&slice);
    let bounds = extract_layer_boundaries(&masks.ilm, &masks.rpe, 1.0).at(Stage::LayerBoundaries)?;
    let (col, _) = slice.geometry.metric_to_pixel(target);
    let col = col.round().clamp(0.0, (bounds.len() - 1) as f64) as usize;
    let boundaries_um = bounds
        .nearest_valid(col)
        .and_then(|c| bounds.depths_um(c))
        .ok_or(octnav_core::Error::NoLayerBoundaries)
        .at(Stage::LayerBoundaries)?;
    let media = MediaStack::open_sky(config.fluid_surface_um, boundaries_um.0, boundaries_um.1, &config.indices)
        .at(Stage::MediaStack)?;
    let plan = plan_trajectory(pose, target).at(Stage::Trajectory)?;
    let plan = plan.with_refraction(&media).at(Stage::Refraction)?;
    Ok(PlanOutcome {
        plan,
        media,
        boundaries_um,
        slice,
    })
}

/// Sends the plan to the robot. With `reacquire_between`, the scene is
/// re-rendered after the lateral step and the advance re-planned from the
/// new estimate.
pub fn execute(
    robot: &mut SimulatedRobot,
    plan: &InsertionPlan,
    scene: &PhantomScene,
    config: &PipelineConfig,
) -> Result<Option<InsertionPlan>, PipelineError> {
    robot.apply_translation(&plan.robot_commands[0]).at(Stage::Execute)?;
    if !config.reacquire_between {
        robot.apply_translation(&plan.robot_commands[1]).at(Stage::Execute)?;
        return Ok(None);
    }
    let moved = scene.with_needle_tip(robot.tip_volume());
    let volume = reacquire(scene, robot).at(Stage::Acquire)?;
    let segmenter = make_segmenter(config, Some(&moved))?;
    let est = estimate(&volume, segmenter.as_ref(), config)?;
    let again = plan_fn(&volume, &est, &plan.target, segmenter.as_ref(), config)?.plan;
    for cmd in &again.robot_commands {
        robot.apply_translation(cmd).at(Stage::Execute)?;
    }
    Ok(Some(again))
}

fn plan_fn(
    volume: &IoctVolume,
    est: &Estimate,
    target: &MetricPoint,
    segmenter: &dyn Segmenter,
    config: &PipelineConfig,
) -> Result<PlanOutcome, PipelineError> {
    plan(volume, &est.pose, &est.dropped, target, segmenter, config)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Durations {
    pub acquire_ms: f64,
    pub estimate_ms: f64,
    pub plan_ms: f64,
    pub execute_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: u64,
    pub scene: String,
    /// Target as picked in the volume (optical depth).
    pub target_um: [f64; 3],
    /// Target in physical space, where the error is measured.
    pub target_physical_um: [f64; 3],
    pub pose: PoseJson,
    pub plan: PlanJson,
    pub durations: Durations,
    /// Ground-truth physical tip after execution.
    pub final_tip_um: [f64; 3],
    pub error_um: f64,
    /// Error within one voxel diagonal.
    pub success: bool,
    pub segmenter: String,
    pub sigma_move: f64,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Robot noise stream for a trial: distinct per trial, fixed per
/// (config seed, trial id).
pub fn robot_seed(seed: u64, trial_id: u64) -> u64 {
    seed ^ trial_id.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Physical error of a final tip against a volume-frame target.
pub fn target_error(scene: &PhantomScene, target: &MetricPoint, final_tip: &MetricPoint) -> (MetricPoint, f64) {
    let physical = scene.to_physical(target);
    (physical, physical.distance(final_tip))
}

/// Builds the record once a trial has been executed.
#[allow(clippy::too_many_arguments)]
pub fn record_trial(
    trial_id: u64,
    scene_name: &str,
    scene: &PhantomScene,
    target: &MetricPoint,
    pose: &NeedlePose,
    plan: &InsertionPlan,
    robot: &SimulatedRobot,
    durations: Durations,
    config: &PipelineConfig,
) -> TrialRecord {
    let final_tip = robot.tip_volume();
    let (physical, error) = target_error(scene, target, &final_tip);
    TrialRecord {
        trial_id,
        scene: scene_name.to_string(),
        target_um: target.to_array(),
        target_physical_um: physical.to_array(),
        pose: pose.into(),
        plan: plan.into(),
        durations,
        final_tip_um: final_tip.to_array(),
        error_um: error,
        success: error <= scene.geometry.voxel_diagonal(),
        segmenter: config.segmenter.name().to_string(),
        sigma_move: robot.sigma_move(),
    }
}

/// One closed-loop trial: render, estimate, plan, execute, measure.
pub fn run_trial(
    scene: &PhantomScene,
    scene_name: &str,
    target: &MetricPoint,
    config: &PipelineConfig,
    trial_id: u64,
) -> Result<TrialRecord, PipelineError> {
    config.validate()?;
    let mut durations = Durations::default();
    let t = Instant::now();
    let volume = scene.render().at(Stage::Acquire)?;
    durations.acquire_ms = ms(t);

    let segmenter = make_segmenter(config, Some(scene))?;
    let t = Instant::now();
    let est = estimate(&volume, segmenter.as_ref(), config)?;
    durations.estimate_ms = ms(t);

    let t = Instant::now();
    let outcome = plan_fn(&volume, &est, target, segmenter.as_ref(), config)?;
    durations.plan_ms = ms(t);

    let mut robot = SimulatedRobot::for_scene(scene, config.robot_sigma_um, robot_seed(config.seed, trial_id))
        .at(Stage::Execute)?;
    let t = Instant::now();
    execute(&mut robot, &outcome.plan, scene, config)?;
    durations.execute_ms = ms(t);

    Ok(record_trial(trial_id, scene_name, scene, target, &est.pose, &outcome.plan, &robot, durations, config))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean_ms: f64,
    pub sd_ms: f64,
    pub n: usize,
}

impl Timing {
    /// Mean and sample standard deviation (0 for a single sample).
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n.max(1) as f64;
        let sd = if n > 1 {
            (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean_ms: mean, sd_ms: sd, n }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub estimate: Timing,
    pub plan: Timing,
}

/// Times `repetitions` runs of the estimate and plan stages.
pub fn benchmark(
    volume: &IoctVolume,
    segmenter: &dyn Segmenter,
    target: &MetricPoint,
    config: &PipelineConfig,
    repetitions: usize,
) -> Result<BenchReport, PipelineError> {
    if repetitions == 0 {
        return Err(PipelineError::new(
            Stage::Config,
            octnav_core::Error::InvalidParameter {
                name: "repetitions",
                reason: "must be >= 1".into(),
            },
        ));
    }
    let mut est_ms = Vec::with_capacity(repetitions);
    let mut plan_ms = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t = Instant::now();
        let est = estimate(volume, segmenter, config)?;
        est_ms.push(ms(t));
        let t = Instant::now();
        plan_fn(volume, &est, target, segmenter, config)?;
        plan_ms.push(ms(t));
    }
    Ok(BenchReport {
        estimate: Timing::from_samples(&est_ms),
        plan: Timing::from_samples(&plan_ms),
    })
}

/// One line of the trial log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial_id: u64,
    pub scene: String,
    pub target_x_um: f64,
    pub target_y_um: f64,
    pub target_z_um: f64,
    pub error_um: f64,
    pub t_estimate_ms: f64,
    pub t_plan_ms: f64,
    pub t_execute_ms: f64,
    pub segmenter: String,
    pub sigma_move: f64,
}

impl From<&TrialRecord> for TrialRow {
    fn from(r: &TrialRecord) -> Self {
        Self {
            trial_id: r.trial_id,
            scene: r.scene.clone(),
            target_x_um: r.target_um[0],
            target_y_um: r.target_um[1],
            target_z_um: r.target_um[2],
            error_um: r.error_um,
            t_estimate_ms: r.durations.estimate_ms,
            t_plan_ms: r.durations.plan_ms,
            t_execute_ms: r.durations.execute_ms,
            segmenter: r.segmenter.clone(),
            sigma_move: r.sigma_move,
        }
    }
}

impl TrialRow {
    pub fn target(&self) -> MetricPoint {
        MetricPoint::new(self.target_x_um, self.target_y_um, self.target_z_um)
    }
}

/// Appends a row, writing the header first if the file is new or empty.
pub fn append_trial_log(path: impl AsRef<Path>, record: &TrialRecord) -> Result<(), csv::Error> {
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let empty = file.metadata()?.len() == 0;
    let mut w = csv::WriterBuilder::new().has_headers(empty).from_writer(file);
    w.serialize(TrialRow::from(record))?;
    w.flush()?;
    Ok(())
}

pub fn read_trial_log(path: impl AsRef<Path>) -> Result<Vec<TrialRow>, csv::Error> {
    csv::Reader::from_path(path)?.deserialize().collect()
}

/// Re-runs a logged trial with the logged segmenter and robot noise.
pub fn replay(row: &TrialRow, scene: &PhantomScene, config: &PipelineConfig) -> Result<TrialRecord, PipelineError> {
    let mut config = config.clone();
    config.segmenter = match row.segmenter.as_str() {
        "oracle" => SegmenterKind::Oracle,
        _ => SegmenterKind::Baseline,
    };
    config.robot_sigma_um = row.sigma_move;
    run_trial(scene, &row.scene, &row.target(), &config, row.trial_id)
}
