//! HTTP service: a content-addressed volume store, PNG slice rendering and
//! segmentation jobs whose masks are served as run-length JSON.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use pam_core::checkpoint::sha256_hex;
use pam_core::engine::{segment_volume, EngineConfig, OracleSegmenter, PamSegmenter, Prompt, RunReport, Segmenter};
use pam_core::metrics::dsc;
use pam_core::rle::{rle_encode, RleMask};
use pam_core::{Axis, Mask3D, Volume};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::render::{slice_png, Window};

/// Carried by every JSON response.
pub const SCHEMA_VERSION: u32 = 1;

const MAX_UPLOAD_BYTES: usize = 1 << 30;

/// Where segmentations come from.
pub enum Backend {
    Pam(Box<PamSegmenter>),
    /// Replays the ground truth registered for each volume.
    Oracle,
}

impl Backend {
    fn name(&self) -> &'static str {
        match self {
            Backend::Pam(_) => "pam",
            Backend::Oracle => "oracle",
        }
    }
}

struct StoredVolume {
    volume: Volume,
    truth: RwLock<Option<Arc<Mask3D>>>,
    /// Held for the whole of a segmentation run on this volume.
    busy: Mutex<()>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JobView {
    pub schema_version: u32,
    pub job_id: String,
    pub volume_id: String,
    pub status: JobStatus,
    pub prompt: Prompt,
    pub config: EngineConfig,
    pub report: Option<RunReport>,
    /// Against the volume's registered ground truth, if any.
    pub dsc: Option<f64>,
    pub error: Option<String>,
}

struct Job {
    view: JobView,
    mask: Option<Arc<Mask3D>>,
}

impl Job {
    fn advance(&mut self, next: JobStatus) {
        assert!(next > self.view.status, "job {} cannot go from {:?} to {next:?}", self.view.job_id, self.view.status);
        self.view.status = next;
    }
}

pub struct AppState {
    backend: Backend,
    volumes: RwLock<HashMap<String, Arc<StoredVolume>>>,
    jobs: RwLock<HashMap<String, Arc<Mutex<Job>>>>,
    next_job: AtomicU64,
    spill_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(backend: Backend) -> Self {
        Self {
            backend,
            volumes: RwLock::new(HashMap::new()),
            jobs: RwLock::new(HashMap::new()),
            next_job: AtomicU64::new(1),
            spill_dir: None,
        }
    }

    /// Also keep a copy of every uploaded volume in `dir`.
    pub fn with_spill_dir(mut self, dir: PathBuf) -> Self {
        self.spill_dir = Some(dir);
        self
    }

    fn volume(&self, id: &str) -> Result<Arc<StoredVolume>, ApiError> {
        self.volumes.read().unwrap().get(id).cloned().ok_or_else(|| ApiError::not_found(format!("no volume {id}")))
    }

    fn job(&self, id: &str) -> Result<Arc<Mutex<Job>>, ApiError> {
        self.jobs.read().unwrap().get(id).cloned().ok_or_else(|| ApiError::not_found(format!("no job {id}")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "schema_version": SCHEMA_VERSION, "code": self.code, "message": self.message });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/info", get(info))
        .route("/api/volumes", post(upload_volume))
        .route("/api/volumes/{id}/meta", get(volume_meta))
        .route("/api/volumes/{id}/truth", put(upload_truth))
        .route("/api/volumes/{id}/slices/{axis}/{file}", get(slice_image))
        .route("/api/volumes/{id}/segmentations", post(create_segmentation))
        .route("/api/jobs/{id}", get(job_status))
        .route("/api/jobs/{id}/mask", get(job_volume_mask))
        .route("/api/jobs/{id}/masks/{axis}/{index}", get(job_slice_mask))
        .fallback(|| async { ApiError::not_found("no such route") })
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state)
}

async fn info(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "schema_version": SCHEMA_VERSION, "backend": state.backend.name() }))
}

fn volume_meta_json(id: &str, stored: &StoredVolume) -> serde_json::Value {
    let v = &stored.volume;
    json!({
        "schema_version": SCHEMA_VERSION,
        "volume_id": id,
        "dims": v.dims(),
        "spacing": v.spacing(),
        "fingerprint": v.fingerprint(),
        "has_truth": stored.truth.read().unwrap().is_some(),
    })
}

async fn upload_volume(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let volume = Volume::<f32>::from_bytes(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_volume", e.to_string()))?;
    let id = sha256_hex(&body)[..16].to_string();
    if let Some(dir) = &state.spill_dir {
        std::fs::write(dir.join(format!("{id}.pvol")), &body)
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storage", e.to_string()))?;
    }
    let stored = {
        let mut volumes = state.volumes.write().unwrap();
        volumes
            .entry(id.clone())
            .or_insert_with(|| Arc::new(StoredVolume { volume, truth: RwLock::new(None), busy: Mutex::new(()) }))
            .clone()
    };
    Ok((StatusCode::CREATED, Json(volume_meta_json(&id, &stored))))
}

async fn volume_meta(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<serde_json::Value>> {
    let stored = state.volume(&id)?;
    Ok(Json(volume_meta_json(&id, &stored)))
}

async fn upload_truth(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let stored = state.volume(&id)?;
    let truth =
        Mask3D::from_bytes(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_volume", e.to_string()))?;
    if truth.dims() != stored.volume.dims() {
        return Err(ApiError::bad_request(format!(
            "truth dims {:?} differ from volume dims {:?}",
            truth.dims(),
            stored.volume.dims()
        )));
    }
    *stored.truth.write().unwrap() = Some(Arc::new(truth));
    Ok(Json(volume_meta_json(&id, &stored)))
}

fn parse_axis(s: &str) -> ApiResult<Axis> {
    Axis::parse(s).ok_or_else(|| ApiError::bad_request(format!("unknown axis {s:?}")))
}

fn check_index(index: usize, len: usize, axis: Axis) -> ApiResult<()> {
    if index >= len {
        return Err(ApiError::not_found(format!("slice {index} outside 0..{len} along {}", axis.as_str())));
    }
    Ok(())
}

#[derive(Deserialize)]
struct SliceQuery {
    window: Option<String>,
}

async fn slice_image(
    State(state): State<Arc<AppState>>,
    Path((id, axis, file)): Path<(String, String, String)>,
    Query(q): Query<SliceQuery>,
) -> ApiResult<Response> {
    let stored = state.volume(&id)?;
    let axis = parse_axis(&axis)?;
    let index: usize = file
        .strip_suffix(".png")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ApiError::not_found(format!("expected <index>.png, got {file:?}")))?;
    check_index(index, stored.volume.axis_len(axis), axis)?;
    let window: Window = q.window.as_deref().unwrap_or("auto").parse().map_err(ApiError::bad_request)?;
    let bytes = slice_png(&stored.volume.slice(axis, index), window)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "render", e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

#[derive(Deserialize)]
struct SegmentRequest {
    prompt: Prompt,
    #[serde(default)]
    config: EngineConfig,
}

fn run_segmentation(backend: &Backend, stored: &StoredVolume, prompt: &Prompt, config: &EngineConfig) -> Result<(Mask3D, RunReport, Option<f64>), String> {
    let truth = stored.truth.read().unwrap().clone();
    let oracle;
    let seg: &dyn Segmenter = match backend {
        Backend::Pam(p) => p.as_ref(),
        Backend::Oracle => {
            let t = truth.as_ref().ok_or("the oracle backend needs ground truth registered for this volume")?;
            oracle = OracleSegmenter { truth: Mask3D::clone(t) };
            &oracle
        }
    };
    let out = segment_volume(seg, &stored.volume, prompt, config).map_err(|e| e.to_string())?;
    let score = match &truth {
        Some(t) => Some(dsc(&out.mask, t.as_ref()).map_err(|e| e.to_string())?),
        None => None,
    };
    Ok((out.mask, out.report, score))
}

/// Runs the job to completion before answering; the job table keeps the result.
async fn create_segmentation(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let stored = state.volume(&id)?;
    let req: SegmentRequest = serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("request body: {e}")))?;
    let job_id = format!("job-{}", state.next_job.fetch_add(1, Ordering::Relaxed));
    let job = Arc::new(Mutex::new(Job {
        view: JobView {
            schema_version: SCHEMA_VERSION,
            job_id: job_id.clone(),
            volume_id: id,
            status: JobStatus::Queued,
            prompt: req.prompt.clone(),
            config: req.config.clone(),
            report: None,
            dsc: None,
            error: None,
        },
        mask: None,
    }));
    state.jobs.write().unwrap().insert(job_id.clone(), job.clone());

    let worker_state = state.clone();
    let worker_job = job.clone();
    tokio::task::spawn_blocking(move || {
        let _busy = stored.busy.lock().unwrap_or_else(|e| e.into_inner());
        worker_job.lock().unwrap().advance(JobStatus::Running);
        let result = run_segmentation(&worker_state.backend, &stored, &req.prompt, &req.config);
        let mut job = worker_job.lock().unwrap();
        match result {
            Ok((mask, report, score)) => {
                job.mask = Some(Arc::new(mask));
                job.view.report = Some(report);
                job.view.dsc = score;
                job.advance(JobStatus::Done);
            }
            Err(message) => {
                job.view.error = Some(message);
                job.advance(JobStatus::Failed);
            }
        }
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "worker", e.to_string()))?;

    let status = job.lock().unwrap().view.status;
    Ok((StatusCode::CREATED, Json(json!({ "schema_version": SCHEMA_VERSION, "job_id": job_id, "status": status }))))
}

async fn job_status(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<JobView>> {
    let job = state.job(&id)?;
    let view = job.lock().unwrap().view.clone();
    Ok(Json(view))
}

fn finished_mask(state: &AppState, id: &str) -> ApiResult<Arc<Mask3D>> {
    let job = state.job(id)?;
    let job = job.lock().unwrap();
    match (&job.mask, job.view.status) {
        (Some(m), JobStatus::Done) => Ok(m.clone()),
        (_, status) => Err(ApiError::new(StatusCode::CONFLICT, "job_not_done", format!("job {id} is {status:?}"))),
    }
}

/// The whole predicted mask as a PVOL1 `u8` volume.
async fn job_volume_mask(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let mask = finished_mask(&state, &id)?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], mask.to_bytes()).into_response())
}

#[derive(Serialize, Deserialize)]
pub struct SliceMask {
    pub schema_version: u32,
    pub axis: Axis,
    pub index: usize,
    #[serde(flatten)]
    pub rle: RleMask,
}

async fn job_slice_mask(
    State(state): State<Arc<AppState>>,
    Path((id, axis, index)): Path<(String, String, String)>,
) -> ApiResult<Json<SliceMask>> {
    let mask = finished_mask(&state, &id)?;
    let axis = parse_axis(&axis)?;
    let index: usize = index.parse().map_err(|_| ApiError::not_found(format!("bad slice index {index:?}")))?;
    check_index(index, mask.axis_len(axis), axis)?;
    Ok(Json(SliceMask { schema_version: SCHEMA_VERSION, axis, index, rle: rle_encode(&mask.slice(axis, index)) }))
}
