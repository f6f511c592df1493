//! Operator HTTP interface: volume slices, seeds, one pipeline job at a
//! time, overlays and the report.

use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use vqct_core::pipeline::{run_pipeline_on, PipelineConfig, PipelineOutput, ProgressEvent};
use vqct_core::presegment::SeedSet;
use vqct_core::volgrid::Volume;

use crate::render::{overlay_png, parse_window, slice_png, value_range, Axis};

/// Overlay color, semi-transparent red.
const OVERLAY: [u8; 4] = [255, 48, 48, 160];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub stage: Option<String>,
    pub percent: f64,
    pub done: bool,
    pub error: Option<String>,
}

#[derive(Default)]
struct Inner {
    seeds: SeedSet,
    jobs: Vec<JobStatus>,
    running: bool,
    last: Option<Arc<PipelineOutput>>,
}

pub struct AppState {
    vol: Arc<Volume>,
    cfg: PipelineConfig,
    inner: Mutex<Inner>,
}

impl AppState {
    pub fn new(vol: Volume, cfg: PipelineConfig) -> Arc<Self> {
        Arc::new(Self {
            vol: Arc::new(vol),
            cfg,
            inner: Mutex::default(),
        })
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        // a panicking job must not take the server down with it
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/meta", get(meta))
        .route("/api/slice", get(slice))
        .route("/api/seeds", get(get_seeds).post(post_seeds))
        .route("/api/run", post(run))
        .route("/api/job/{id}", get(job))
        .route("/api/mask-slice", get(mask_slice))
        .route("/api/report", get(report))
        .with_state(state)
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(e: impl ToString) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, e.to_string())
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

#[derive(Serialize)]
struct Meta {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    value_range: [f64; 2],
}

async fn meta(State(s): State<Arc<AppState>>) -> Json<Meta> {
    let g = s.vol.geometry();
    let (lo, hi) = value_range(&s.vol);
    Json(Meta {
        dims: g.dims,
        spacing: g.spacing,
        origin: g.origin,
        value_range: [lo, hi],
    })
}

#[derive(Deserialize)]
struct SliceQuery {
    axis: Axis,
    index: usize,
    window: Option<String>,
}

async fn slice(State(s): State<Arc<AppState>>, Query(q): Query<SliceQuery>) -> Result<Response, ApiError> {
    let window = match &q.window {
        Some(w) => parse_window(w).map_err(bad_request)?,
        None => value_range(&s.vol),
    };
    let bytes = slice_png(&s.vol, q.axis, q.index, window).map_err(bad_request)?;
    Ok(png(bytes))
}

async fn get_seeds(State(s): State<Arc<AppState>>) -> Json<SeedSet> {
    Json(s.lock().seeds.clone())
}

async fn post_seeds(State(s): State<Arc<AppState>>, Json(seeds): Json<SeedSet>) -> Result<Json<SeedSet>, ApiError> {
    seeds.validate().map_err(bad_request)?;
    s.lock().seeds = seeds.clone();
    Ok(Json(seeds))
}

#[derive(Serialize)]
struct JobId {
    id: usize,
}

async fn run(State(s): State<Arc<AppState>>) -> Result<Json<JobId>, ApiError> {
    let (id, seeds) = {
        let mut inner = s.lock();
        if inner.running {
            return Err(ApiError(StatusCode::CONFLICT, "a job is already running".into()));
        }
        inner.seeds.validate().map_err(bad_request)?;
        inner.running = true;
        inner.jobs.push(JobStatus::default());
        (inner.jobs.len() - 1, inner.seeds.clone())
    };
    let state = s.clone();
    tokio::task::spawn_blocking(move || {
        let sink = |e: ProgressEvent| {
            let mut inner = state.lock();
            let job = &mut inner.jobs[id];
            job.stage = Some(e.stage.as_str().to_string());
            job.percent = e.percent();
        };
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            run_pipeline_on(&state.vol, &seeds, &state.cfg, Some(&sink))
        }));
        let mut inner = state.lock();
        let job = &mut inner.jobs[id];
        job.done = true;
        match result {
            Ok(out) => {
                job.percent = 100.0;
                let failed = out.report.failed_levels();
                if !failed.is_empty() {
                    job.error = Some(format!("levels failed: {}", failed.join(", ")));
                }
                inner.last = Some(Arc::new(out));
            }
            Err(_) => job.error = Some("pipeline panicked".into()),
        }
        inner.running = false;
    });
    Ok(Json(JobId { id }))
}

async fn job(State(s): State<Arc<AppState>>, Path(id): Path<usize>) -> Result<Json<JobStatus>, ApiError> {
    s.lock()
        .jobs
        .get(id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no job {id}")))
}

fn last_output(s: &AppState) -> Result<Arc<PipelineOutput>, ApiError> {
    s.lock()
        .last
        .clone()
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, "no finished run yet".into()))
}

#[derive(Deserialize)]
struct MaskQuery {
    name: String,
    axis: Axis,
    index: usize,
    /// Restrict to one level; all levels by default.
    level: Option<String>,
}

async fn mask_slice(State(s): State<Arc<AppState>>, Query(q): Query<MaskQuery>) -> Result<Response, ApiError> {
    let out = last_output(&s)?;
    let masks: Vec<_> = out
        .artifacts
        .iter()
        .filter(|(l, _)| q.level.as_ref().is_none_or(|want| want == *l))
        .filter_map(|(_, a)| a.masks.get(&q.name))
        .collect();
    if masks.is_empty() {
        return Err(ApiError(StatusCode::NOT_FOUND, format!("no mask named {}", q.name)));
    }
    let geom = *s.vol.geometry();
    let bytes = overlay_png(&geom, q.axis, q.index, OVERLAY, |idx| {
        let ijk = geom.coords(idx);
        masks.iter().any(|m| m.contains(ijk))
    })
    .map_err(bad_request)?;
    Ok(png(bytes))
}

async fn report(State(s): State<Arc<AppState>>) -> Result<Response, ApiError> {
    let out = last_output(&s)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], out.report.to_json()).into_response())
}

