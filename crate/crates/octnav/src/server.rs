//! HTTP API for the operator console.
//!
//! One navigation session backed by a phantom scene and a simulated robot.
//! Reads run concurrently; commands take the session write lock, so they
//! are applied one at a time.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use octnav_core::phantom::reacquire;
use octnav_core::projection::axial_projection;
use octnav_core::slicing::{tool_aligned_plane, virtual_bscan_skipping};
use octnav_core::{IoctVolume, MetricPoint, PhantomScene, ProjectionOp, SimulatedRobot};
use serde::{Deserialize, Serialize};
use tokio::sync::RwLock;

use crate::dto::{ErrorJson, PlanJson, PoseJson, TargetJson, VolumeMeta};
use crate::io::{encode_png16, rescale_u16};
use crate::pipeline::{
    append_trial_log, estimate, make_segmenter, plan, record_trial, robot_seed, DynSegmenter, Durations, Estimate,
    PipelineConfig, PipelineError, PlanOutcome, Stage, TrialRecord,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Idle,
    Planned,
    Executing,
    Done,
    Failed,
}

struct Pending {
    target: MetricPoint,
    outcome: PlanOutcome,
    plan_ms: f64,
}

pub struct Session {
    scene: PhantomScene,
    scene_name: String,
    config: PipelineConfig,
    segmenter: DynSegmenter,
    volume: IoctVolume,
    estimate: Result<Estimate, PipelineError>,
    estimate_ms: f64,
    robot: SimulatedRobot,
    pending: Option<Pending>,
    trials: BTreeMap<u64, TrialRecord>,
    next_trial: u64,
    status: Status,
    log: Option<PathBuf>,
}

impl Session {
    /// Acquires the scene and runs the first estimate.
    pub fn new(
        scene: PhantomScene,
        scene_name: impl Into<String>,
        config: PipelineConfig,
        log: Option<PathBuf>,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let segmenter = make_segmenter(&config, Some(&scene))?;
        let volume = scene.render().map_err(|e| PipelineError::new(Stage::Acquire, e))?;
        let robot = SimulatedRobot::for_scene(&scene, config.robot_sigma_um, robot_seed(config.seed, 0))
            .map_err(|e| PipelineError::new(Stage::Acquire, e))?;
        let mut session = Self {
            scene,
            scene_name: scene_name.into(),
            config,
            segmenter,
            volume,
            estimate: Err(PipelineError::new(Stage::Acquire, octnav_core::Error::EmptyMask)),
            estimate_ms: 0.0,
            robot,
            pending: None,
            trials: BTreeMap::new(),
            next_trial: 0,
            status: Status::Idle,
            log,
        };
        session.refresh_estimate();
        Ok(session)
    }

    fn refresh_estimate(&mut self) {
        let t = Instant::now();
        self.estimate = estimate(&self.volume, self.segmenter.as_ref(), &self.config);
        self.estimate_ms = t.elapsed().as_secs_f64() * 1e3;
    }

    pub fn status(&self) -> Status {
        self.status
    }

    fn dropped(&self) -> Vec<bool> {
        match &self.estimate {
            Ok(e) => e.dropped.clone(),
            Err(_) => axial_projection(&self.volume, ProjectionOp::Mean).zero_rows(),
        }
    }

    /// Plan preview; replaces any earlier preview.
    pub fn set_target(&mut self, target: MetricPoint) -> Result<PlanJson, PipelineError> {
        let est = self.estimate.as_ref().map_err(Clone::clone)?;
        if !self.volume.geometry().contains(&target) {
            return Err(PipelineError::new(
                Stage::Trajectory,
                octnav_core::Error::OutOfBounds {
                    what: "target",
                    detail: format!("{:?} µm outside the volume", target.to_array()),
                },
            ));
        }
        let t = Instant::now();
        let outcome = plan(&self.volume, &est.pose, &est.dropped, &target, self.segmenter.as_ref(), &self.config)?;
        let plan_ms = t.elapsed().as_secs_f64() * 1e3;
        let json = PlanJson::from(&outcome.plan);
        self.pending = Some(Pending { target, outcome, plan_ms });
        self.status = Status::Planned;
        Ok(json)
    }

    /// Executes the pending plan, then re-acquires and re-estimates.
    pub fn approve(&mut self) -> Result<TrialRecord, ApiError> {
        let Some(pending) = self.pending.take() else {
            return Err(ApiError::conflict("no plan awaiting approval"));
        };
        let pose = self.estimate.as_ref().map_err(Clone::clone)?.pose;
        self.status = Status::Executing;
        let t = Instant::now();
        let result = crate::pipeline::execute(&mut self.robot, &pending.outcome.plan, &self.scene, &self.config);
        let execute_ms = t.elapsed().as_secs_f64() * 1e3;
        if let Err(e) = result {
            self.status = Status::Failed;
            return Err(e.into());
        }
        let durations = Durations {
            acquire_ms: 0.0,
            estimate_ms: self.estimate_ms,
            plan_ms: pending.plan_ms,
            execute_ms,
        };
        let id = self.next_trial;
        self.next_trial += 1;
        let record = record_trial(
            id,
            &self.scene_name,
            &self.scene,
            &pending.target,
            &pose,
            &pending.outcome.plan,
            &self.robot,
            durations,
            &self.config,
        );
        self.trials.insert(id, record.clone());
        if let Some(path) = &self.log {
            append_trial_log(path, &record).map_err(|e| ApiError::internal(e.to_string()))?;
        }
        match reacquire(&self.scene, &self.robot) {
            Ok(v) => {
                self.volume = v;
                self.refresh_estimate();
                self.status = Status::Done;
            }
            Err(e) => {
                self.estimate = Err(PipelineError::new(Stage::Acquire, e));
                self.status = Status::Failed;
            }
        }
        Ok(record)
    }

    pub fn trial(&self, id: u64) -> Option<&TrialRecord> {
        self.trials.get(&id)
    }
}

/// Error body plus HTTP status.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorJson,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>, stage: Option<String>) -> Self {
        Self {
            status,
            body: ErrorJson { error: error.into(), stage },
        }
    }

    fn conflict(msg: &str) -> Self {
        Self::new(StatusCode::CONFLICT, msg, None)
    }

    fn bad_request(msg: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, msg, None)
    }

    fn not_found(msg: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, msg, None)
    }

    fn internal(msg: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, msg, None)
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, e.source.to_string(), Some(e.stage.to_string()))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

pub type SharedSession = Arc<RwLock<Session>>;

pub fn router(session: Session) -> Router {
    let state: SharedSession = Arc::new(RwLock::new(session));
    Router::new()
        .route("/volume/meta", get(volume_meta))
        .route("/projection", get(projection))
        .route("/slice", get(slice))
        .route("/pose", get(pose))
        .route("/status", get(status))
        .route("/target", post(target))
        .route("/approve", post(approve))
        .route("/trial/{id}", get(trial))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(addr: &str, session: Session) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(session)).await
}

/// Runs CPU-bound work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))
}

fn png_response(pixels: &[f32], width: usize, height: usize, spacing: [f64; 2]) -> Result<Response, ApiError> {
    let (data, lo, hi) = rescale_u16(pixels);
    let png = encode_png16(width, height, &data).map_err(|e| ApiError::internal(e.to_string()))?;
    let mut resp = ([(header::CONTENT_TYPE, "image/png")], png).into_response();
    let h = resp.headers_mut();
    for (name, value) in [
        ("x-intensity-min", lo.to_string()),
        ("x-intensity-max", hi.to_string()),
        ("x-spacing-um", format!("{},{}", spacing[0], spacing[1])),
    ] {
        if let Ok(v) = HeaderValue::from_str(&value) {
            h.insert(name, v);
        }
    }
    Ok(resp)
}

async fn volume_meta(State(s): State<SharedSession>) -> Json<VolumeMeta> {
    let s = s.read().await;
    Json(VolumeMeta::new(&s.volume, &s.dropped()))
}

async fn projection(State(s): State<SharedSession>) -> Result<Response, ApiError> {
    let s = s.clone().read_owned().await;
    blocking(move || {
        let owned;
        let p = match &s.estimate {
            Ok(e) => &e.projection,
            Err(_) => {
                owned = axial_projection(&s.volume, ProjectionOp::Mean);
                &owned
            }
        };
        png_response(&p.pixels, p.width, p.height, p.spacing)
    })
    .await?
}

#[derive(Debug, Deserialize)]
pub struct SliceQuery {
    /// Degrees.
    pub theta_z: f64,
    pub tx: f64,
    pub ty: f64,
}

async fn slice(State(s): State<SharedSession>, Query(q): Query<SliceQuery>) -> Result<Response, ApiError> {
    let s = s.clone().read_owned().await;
    blocking(move || {
        let plane = tool_aligned_plane(q.theta_z.to_radians(), q.tx, q.ty, s.volume.geometry())
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        let b = virtual_bscan_skipping(&s.volume, &plane, None, None, &s.dropped())
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        let g = &b.geometry;
        png_response(&b.pixels, g.width, g.height, [g.u_spacing, g.z_spacing])
    })
    .await?
}

async fn pose(State(s): State<SharedSession>) -> Result<Json<PoseJson>, ApiError> {
    let s = s.read().await;
    match &s.estimate {
        Ok(e) => Ok(Json(PoseJson::from(&e.pose))),
        Err(e) => Err(e.clone().into()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusJson {
    pub status: Status,
    pub trials: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorJson>,
}

async fn status(State(s): State<SharedSession>) -> Json<StatusJson> {
    let s = s.read().await;
    let error = s.estimate.as_ref().err().map(|e| ErrorJson {
        error: e.source.to_string(),
        stage: Some(e.stage.to_string()),
    });
    Json(StatusJson {
        status: s.status,
        trials: s.trials.keys().copied().collect(),
        error,
    })
}

async fn target(State(s): State<SharedSession>, Json(t): Json<TargetJson>) -> Result<Json<PlanJson>, ApiError> {
    let target = MetricPoint::new(t.x, t.y, t.z);
    if !target.is_finite() {
        return Err(ApiError::bad_request("target must be finite"));
    }
    let mut s = s.clone().write_owned().await;
    blocking(move || s.set_target(target).map(Json).map_err(ApiError::from)).await?
}

async fn approve(State(s): State<SharedSession>) -> Result<Json<TrialRecord>, ApiError> {
    let mut s = s.clone().write_owned().await;
    blocking(move || s.approve().map(Json)).await?
}

async fn trial(State(s): State<SharedSession>, Path(id): Path<u64>) -> Result<Json<TrialRecord>, ApiError> {
    let s = s.read().await;
    s.trial(id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("no trial {id}")))
}
