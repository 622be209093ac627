//! HTTP + JSON service backing the interactive correction studio.

use std::collections::HashMap;
use std::io::Cursor;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex as StdMutex};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use crate::diffusion::{NoiseSchedule, Sample};
use crate::error::{Error, Result};
use crate::guidance::{
    propose_negatives, run_correction_workflow, sample_trajectory, GuidanceWeights, NetworkModel,
    RuleBasedAdvisor, SamplerConfig, TrajectoryRequest, WorkflowItem,
};
use crate::toytask::{derive_seed, Condition, Example, Mask, ToyObject};

use super::ExperimentConfig;

/// Most scenes a single `/api/scenes` call may return.
const MAX_SCENES: usize = 64;
const MAX_K: usize = 8;
const SESSION_NOISE_STREAM: u64 = 300;

/// A trained model the service can sample from.
pub struct RegisteredCheckpoint {
    pub id: String,
    pub label: String,
    pub config: ExperimentConfig,
    pub model: NetworkModel,
}

struct Session {
    checkpoint: usize,
    scene_seed: u64,
    example: Example,
    condition: Condition,
    truth: Option<Mask>,
}

pub struct AppState {
    checkpoints: Vec<(RegisteredCheckpoint, NoiseSchedule)>,
    sessions: StdMutex<HashMap<String, Arc<Mutex<Session>>>>,
    next_session: AtomicU64,
}

impl AppState {
    pub fn new(checkpoints: Vec<RegisteredCheckpoint>) -> Result<Arc<Self>> {
        if checkpoints.is_empty() {
            return Err(Error::Empty("registered checkpoints"));
        }
        let checkpoints = checkpoints
            .into_iter()
            .map(|c| {
                let schedule = c.config.schedule.build()?;
                Ok((c, schedule))
            })
            .collect::<Result<_>>()?;
        Ok(Arc::new(Self {
            checkpoints,
            sessions: StdMutex::new(HashMap::new()),
            next_session: AtomicU64::new(1),
        }))
    }

    fn checkpoint(&self, id: &str) -> std::result::Result<usize, ApiError> {
        self.checkpoints
            .iter()
            .position(|(c, _)| c.id == id)
            .ok_or_else(|| ApiError::not_found(format!("unknown checkpoint `{id}`")))
    }

    fn session(&self, id: &str) -> std::result::Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .lock()
            .expect("session table lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session `{id}`")))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/checkpoints", get(list_checkpoints))
        .route("/api/scenes", get(list_scenes))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}/run", post(run_session))
        .route("/api/sessions/{id}/advise", post(advise_session))
        .route("/api/sessions/{id}/workflow", post(workflow_session))
        .fallback(|| async { ApiError::not_found("no such endpoint".into()) })
        .with_state(state)
}

/// Binds and serves until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: &str) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(std::path::Path::new(addr), e))?;
    axum::serve(listener, router(state))
        .await
        .map_err(|e| Error::io(std::path::Path::new(addr), e))
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    code: &'static str,
    message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn bad_request(message: String) -> Self {
        Self { status: StatusCode::BAD_REQUEST, code: "bad_request", message }
    }

    fn not_found(message: String) -> Self {
        Self { status: StatusCode::NOT_FOUND, code: "not_found", message }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Generation(_) | Error::Timestep { .. } | Error::Shape { .. } => {
                Self::bad_request(e.to_string())
            }
            _ => Self {
                status: StatusCode::INTERNAL_SERVER_ERROR,
                code: "internal",
                message: e.to_string(),
            },
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { code: self.code, message: self.message })).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

/// Runs blocking model work off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> std::result::Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, code: "internal", message: e.to_string() })?
        .map_err(ApiError::from)
}

/// PNG of an image with values in [-1, 1], base64 encoded.
pub fn encode_png(image: &Sample) -> Result<String> {
    let (c, h, w) = (image.channels(), image.height(), image.width());
    let mut rgb = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = image.get(ch.min(c - 1), y, x);
                rgb.push((((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8);
            }
        }
    }
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(Cursor::new(&mut buf), w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::format("png", e.to_string()))?;
        writer.write_image_data(&rgb).map_err(|e| Error::format("png", e.to_string()))?;
    }
    Ok(base64::engine::general_purpose::STANDARD.encode(buf))
}

#[derive(Serialize)]
struct CheckpointInfo {
    id: String,
    label: String,
    config_hash: String,
    grid: usize,
    total_steps: usize,
    target: crate::diffusion::Parameterization,
    default_steps: usize,
    default_checkpoints: Vec<usize>,
    default_weights: GuidanceWeights,
}

async fn list_checkpoints(State(state): State<Arc<AppState>>) -> Json<Vec<CheckpointInfo>> {
    Json(
        state
            .checkpoints
            .iter()
            .map(|(c, s)| CheckpointInfo {
                id: c.id.clone(),
                label: c.label.clone(),
                config_hash: c.config.config_hash(),
                grid: c.config.task.grid,
                total_steps: s.steps(),
                target: c.model.kind,
                default_steps: c.config.eval.steps,
                default_checkpoints: c.config.eval.checkpoint_steps.clone(),
                default_weights: c.config.guidance,
            })
            .collect(),
    )
}

#[derive(Deserialize)]
struct ScenesQuery {
    #[serde(default)]
    seed: u64,
    #[serde(default = "one")]
    count: usize,
    checkpoint: Option<String>,
}

fn one() -> usize {
    1
}

#[derive(Serialize)]
struct SceneView {
    seed: u64,
    image_b64: String,
    objects: Vec<ToyObject>,
    condition: Condition,
    description: String,
    mask_rle: Mask,
    hard: bool,
}

fn scene_view(ex: &Example) -> Result<SceneView> {
    Ok(SceneView {
        seed: ex.seed,
        image_b64: encode_png(&ex.scene.image)?,
        objects: ex.scene.objects.clone(),
        condition: ex.condition,
        description: ex.condition.to_string(),
        mask_rle: ex.mask.clone(),
        hard: ex.is_hard(),
    })
}

async fn list_scenes(
    State(state): State<Arc<AppState>>,
    query: std::result::Result<Query<ScenesQuery>, QueryRejection>,
) -> ApiResult<Vec<SceneView>> {
    let Query(q) = query?;
    if q.count == 0 || q.count > MAX_SCENES {
        return Err(ApiError::bad_request(format!("count must lie in 1..={MAX_SCENES}")));
    }
    let idx = match &q.checkpoint {
        Some(id) => state.checkpoint(id)?,
        None => 0,
    };
    let task = state.checkpoints[idx].0.config.task.clone();
    let views = blocking(move || {
        (0..q.count as u64)
            .map(|i| scene_view(&Example::generate(&task, q.seed.wrapping_add(i))?))
            .collect::<Result<Vec<_>>>()
    })
    .await?;
    Ok(Json(views))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    checkpoint_id: String,
    scene_seed: u64,
    condition: Option<Condition>,
}

#[derive(Serialize)]
struct SessionCreated {
    session_id: String,
    checkpoint_id: String,
    scene: SceneView,
    condition: Condition,
    description: String,
    /// False when the condition does not single out one object; IoU values
    /// are then omitted.
    has_truth: bool,
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: std::result::Result<Json<CreateSession>, JsonRejection>,
) -> ApiResult<SessionCreated> {
    let Json(req) = body?;
    let idx = state.checkpoint(&req.checkpoint_id)?;
    let task = state.checkpoints[idx].0.config.task.clone();
    let seed = req.scene_seed;
    let example = blocking(move || Example::generate(&task, seed)).await?;
    let condition = req.condition.map(|c| Condition { negated: false, ..c }).unwrap_or(example.condition);
    let truth = match condition.referents(&example.scene).as_slice() {
        [one] => Some(example.scene.masks[*one].clone()),
        _ => None,
    };
    let scene = scene_view(&example)?;
    let id = format!("s{}", state.next_session.fetch_add(1, Ordering::Relaxed));
    let created = SessionCreated {
        session_id: id.clone(),
        checkpoint_id: req.checkpoint_id,
        scene,
        condition,
        description: condition.to_string(),
        has_truth: truth.is_some(),
    };
    let session = Session {
        checkpoint: idx,
        scene_seed: seed,
        example,
        condition,
        truth,
    };
    state.sessions.lock().expect("session table lock").insert(id, Arc::new(Mutex::new(session)));
    Ok(Json(created))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RunRequest {
    steps: Option<usize>,
    weights: Option<GuidanceWeights>,
    negative: Option<Condition>,
    /// 1-based positions along the step grid.
    checkpoints: Option<Vec<usize>>,
}

#[derive(Serialize)]
struct Frame {
    t: usize,
    step: usize,
    image_b64: String,
    mask_rle: Mask,
    iou: Option<f64>,
}

#[derive(Serialize)]
struct RunProvenance {
    checkpoint_id: String,
    scene_seed: u64,
    noise_seed: u64,
    condition: Condition,
    negative: Option<Condition>,
    weights: GuidanceWeights,
    steps: usize,
    passes_per_step: usize,
}

#[derive(Serialize)]
struct RunResponse {
    frames: Vec<Frame>,
    final_image_b64: String,
    final_mask_rle: Mask,
    final_iou: Option<f64>,
    provenance: RunProvenance,
}

async fn run_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: std::result::Result<Json<RunRequest>, JsonRejection>,
) -> ApiResult<RunResponse> {
    let Json(req) = body?;
    let session = state.session(&id)?;
    // held for the whole run: one mutation of a session at a time
    let guard = session.clone().lock_owned().await;
    let state2 = state.clone();
    let resp = blocking(move || {
        let s = &*guard;
        let (ck, schedule) = &state2.checkpoints[s.checkpoint];
        let steps = req.steps.unwrap_or(ck.config.eval.steps);
        if steps == 0 || steps > schedule.steps() {
            return Err(Error::Config(format!("steps must lie in 1..={}", schedule.steps())));
        }
        let weights = req.weights.unwrap_or(ck.config.guidance);
        let indices = req.checkpoints.unwrap_or_else(|| {
            ck.config.eval.checkpoint_steps.iter().copied().filter(|i| *i <= steps).collect()
        });
        let mut cfg = SamplerConfig::new(steps, weights).at_step_indices(schedule.steps(), &indices)?;
        cfg.extraction = ck.config.extraction()?;
        cfg.keep_images = true;
        let negative = req.negative.map(Condition::negate);
        let noise_seed = derive_seed(s.scene_seed, SESSION_NOISE_STREAM, 0);
        let traj = sample_trajectory(
            &ck.model,
            schedule,
            &TrajectoryRequest {
                image: &s.example.scene.image,
                condition: s.condition,
                negative,
                truth: s.truth.as_ref(),
                seed: noise_seed,
            },
            &cfg,
        )?;
        let frames = traj
            .checkpoints
            .iter()
            .map(|c| {
                Ok(Frame {
                    t: c.t,
                    step: c.step,
                    image_b64: encode_png(c.x0_hat.as_ref().expect("images kept"))?,
                    mask_rle: c.mask.clone(),
                    iou: c.iou,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RunResponse {
            frames,
            final_image_b64: encode_png(&traj.final_image)?,
            final_mask_rle: traj.final_mask,
            final_iou: traj.final_iou,
            provenance: RunProvenance {
                checkpoint_id: ck.id.clone(),
                scene_seed: s.scene_seed,
                noise_seed,
                condition: s.condition,
                negative,
                weights,
                steps,
                passes_per_step: if negative.is_some() { 4 } else { 3 },
            },
        })
    })
    .await?;
    Ok(Json(resp))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AdviseRequest {
    k: usize,
}

#[derive(Serialize)]
struct NegativeView {
    condition: Condition,
    description: String,
}

#[derive(Serialize)]
struct AdviseResponse {
    negatives: Vec<NegativeView>,
}

fn check_k(k: usize) -> std::result::Result<(), ApiError> {
    if k == 0 || k > MAX_K {
        return Err(ApiError::bad_request(format!("k must lie in 1..={MAX_K}")));
    }
    Ok(())
}

async fn advise_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: std::result::Result<Json<AdviseRequest>, JsonRejection>,
) -> ApiResult<AdviseResponse> {
    let Json(req) = body?;
    check_k(req.k)?;
    let session = state.session(&id)?;
    let s = session.lock().await;
    let negatives = propose_negatives(&s.example.scene, &s.condition, req.k)
        .into_iter()
        .map(|c| NegativeView { condition: c, description: c.to_string() })
        .collect();
    Ok(Json(AdviseResponse { negatives }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WorkflowRequest {
    k: usize,
    steps: Option<usize>,
    weights: Option<GuidanceWeights>,
}

#[derive(Serialize)]
struct WorkflowResponse {
    mask_rle: Mask,
    iou: Option<f64>,
    branch_masks: Vec<Mask>,
    provenance: crate::guidance::Provenance,
}

async fn workflow_session(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: std::result::Result<Json<WorkflowRequest>, JsonRejection>,
) -> ApiResult<WorkflowResponse> {
    let Json(req) = body?;
    check_k(req.k)?;
    let session = state.session(&id)?;
    let guard = session.clone().lock_owned().await;
    let state2 = state.clone();
    let resp = blocking(move || {
        let s = &*guard;
        let (ck, schedule) = &state2.checkpoints[s.checkpoint];
        let steps = req.steps.unwrap_or(ck.config.eval.steps);
        let mut cfg = SamplerConfig::new(steps, req.weights.unwrap_or(ck.config.guidance));
        cfg.extraction = ck.config.extraction()?;
        let item = WorkflowItem {
            scene: &s.example.scene,
            condition: s.condition,
            truth: s.truth.as_ref(),
            seed: derive_seed(s.scene_seed, SESSION_NOISE_STREAM, 0),
        };
        let r = run_correction_workflow(&ck.model, schedule, &item, req.k, &cfg, &RuleBasedAdvisor)?;
        Ok(WorkflowResponse {
            mask_rle: r.mask,
            iou: r.iou,
            branch_masks: r.branch_masks,
            provenance: r.provenance,
        })
    })
    .await?;
    Ok(Json(resp))
}

#[cfg(test)]
#[path = "server_tests.rs"]
mod tests;
