//! HTTP JSON service over a loaded dataset and checkpoint.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, PoisonError};

use anyhow::{bail, Context};
use axum::body::Body;
use axum::extract::rejection::{JsonRejection, PathRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use n3f::apps::{self, AppThresholds, QueryDescriptor, QueryRegion};
use n3f::dataset::{Dataset, Split};
use n3f::renderer::{Camera, RenderOutput};
use n3f::trainer::{self, Checkpoint};

use crate::cli::ServeArgs;
use crate::pipeline;

const MAX_GRID_RES: usize = 256;

/// Everything the service keeps between requests.
pub struct Session {
    dataset: Dataset,
    checkpoint: Mutex<Option<Arc<Checkpoint>>>,
    renders: Mutex<HashMap<usize, Arc<RenderOutput>>>,
    descriptors: Mutex<Registry>,
}

#[derive(Default)]
struct Registry {
    next: u64,
    entries: BTreeMap<u64, Arc<QueryDescriptor>>,
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(PoisonError::into_inner)
}

impl Session {
    pub fn new(dataset: Dataset, checkpoint: Option<Checkpoint>) -> anyhow::Result<Self> {
        let session = Self {
            dataset,
            checkpoint: Mutex::new(None),
            renders: Mutex::new(HashMap::new()),
            descriptors: Mutex::new(Registry::default()),
        };
        if let Some(c) = checkpoint {
            session.set_checkpoint(c)?;
        }
        Ok(session)
    }

    /// Replaces the checkpoint and drops every cached render.
    pub fn set_checkpoint(&self, ckpt: Checkpoint) -> anyhow::Result<()> {
        if ckpt.meta.cameras.len() != self.dataset.cameras.len() {
            bail!(
                "checkpoint has {} cameras but the dataset has {}",
                ckpt.meta.cameras.len(),
                self.dataset.cameras.len()
            );
        }
        let mut slot = lock(&self.checkpoint);
        lock(&self.renders).clear();
        *slot = Some(Arc::new(ckpt));
        Ok(())
    }

    fn checkpoint(&self) -> Result<Arc<Checkpoint>, ApiError> {
        lock(&self.checkpoint)
            .clone()
            .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "no_checkpoint", "no checkpoint is loaded"))
    }

    fn check_view(&self, view: usize) -> Result<&Camera, ApiError> {
        self.dataset
            .cameras
            .get(view)
            .ok_or_else(|| ApiError::not_found(format!("view {view} does not exist ({} views)", self.dataset.cameras.len())))
    }

    /// Unmodified render of `view`, cached per checkpoint.
    fn render(&self, view: usize) -> Result<Arc<RenderOutput>, ApiError> {
        self.check_view(view)?;
        let ckpt = self.checkpoint()?;
        if let Some(hit) = lock(&self.renders).get(&view) {
            return Ok(hit.clone());
        }
        let out = Arc::new(pipeline::render_view(&ckpt, view, None).map_err(ApiError::internal)?);
        let mut cache = lock(&self.renders);
        // a reload while rendering leaves a stale result uncached
        if lock(&self.checkpoint).as_ref().is_some_and(|c| Arc::ptr_eq(c, &ckpt)) {
            cache.insert(view, out.clone());
        }
        Ok(out)
    }

    fn descriptor(&self, id: u64) -> Result<Arc<QueryDescriptor>, ApiError> {
        lock(&self.descriptors)
            .entries
            .get(&id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("descriptor {id} does not exist")))
    }

    fn register(&self, desc: QueryDescriptor) -> u64 {
        let mut reg = lock(&self.descriptors);
        reg.next += 1;
        let id = reg.next;
        reg.entries.insert(id, Arc::new(desc));
        id
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

#[derive(Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn bad_request(message: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message.to_string())
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { code: self.code.to_string(), message: self.message };
        (self.status, Json(body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::bad_request(r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        Self::bad_request(r.body_text())
    }
}

impl From<PathRejection> for ApiError {
    fn from(r: PathRejection) -> Self {
        Self::bad_request(r.body_text())
    }
}

type ApiResult<T> = Result<T, ApiError>;
type Shared = State<Arc<Session>>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

fn bytes_response(content_type: &'static str, bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, content_type)], Body::from(bytes)).into_response()
}

fn png(bytes: anyhow::Result<Vec<u8>>) -> ApiResult<Response> {
    Ok(bytes_response("image/png", bytes.map_err(ApiError::internal)?))
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

#[derive(Serialize, Deserialize)]
pub struct ViewInfo {
    pub index: usize,
    pub split: Split,
    #[serde(flatten)]
    pub camera: Camera,
}

#[derive(Serialize, Deserialize)]
pub struct ViewList {
    pub views: Vec<ViewInfo>,
    pub checkpoint_loaded: bool,
}

async fn views(State(s): Shared) -> Json<ViewList> {
    let split = &s.dataset.split;
    let views = s
        .dataset
        .cameras
        .iter()
        .enumerate()
        .map(|(index, camera)| {
            let split = if split.query.contains(&index) {
                Split::Query
            } else if split.gallery.contains(&index) {
                Split::Gallery
            } else {
                Split::Train
            };
            ViewInfo { index, split, camera: camera.clone() }
        })
        .collect();
    Json(ViewList { views, checkpoint_loaded: lock(&s.checkpoint).is_some() })
}

async fn view_rgb(State(s): Shared, path: Result<Path<usize>, PathRejection>) -> ApiResult<Response> {
    let Path(view) = path?;
    blocking(move || png(pipeline::rgb_png(&*s.render(view)?))).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryBody {
    pub view: usize,
    #[serde(default)]
    pub mask_rle: Option<Vec<[usize; 2]>>,
    #[serde(default)]
    pub rect: Option<[usize; 4]>,
    #[serde(default = "default_true")]
    pub normalize: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Serialize, Deserialize)]
pub struct QueryCreated {
    pub descriptor_id: u64,
    pub view: usize,
    pub pixels: usize,
}

async fn create_query(State(s): Shared, body: Result<Json<QueryBody>, JsonRejection>) -> ApiResult<Json<QueryCreated>> {
    let Json(body) = body?;
    let cam = s.check_view(body.view)?;
    let (w, h) = (cam.width, cam.height);
    let region = match (&body.mask_rle, body.rect) {
        (Some(rle), None) => QueryRegion::from_rle(body.view, w, h, rle),
        (None, Some(rect)) => QueryRegion::from_rect(body.view, w, h, rect),
        _ => return Err(ApiError::bad_request("give exactly one of mask_rle and rect")),
    }
    .map_err(ApiError::bad_request)?;
    s.checkpoint()?;
    let pixels = region.mask.iter().filter(|&&m| m).count();
    let view = body.view;
    let session = s.clone();
    let desc = blocking(move || {
        let out = session.render(view)?;
        pipeline::descriptor(&out.feat, &region, body.normalize).map_err(ApiError::bad_request)
    })
    .await?;
    Ok(Json(QueryCreated { descriptor_id: s.register(desc), view, pixels }))
}

#[derive(Deserialize)]
pub struct ViewParam {
    pub view: usize,
}

async fn distances(s: Arc<Session>, id: u64, view: usize) -> ApiResult<(Vec<f64>, usize, usize)> {
    let desc = s.descriptor(id)?;
    s.check_view(view)?;
    blocking(move || {
        let out = s.render(view)?;
        let d = pipeline::distances(&out.feat, &desc).map_err(ApiError::internal)?;
        Ok((d, out.width, out.height))
    })
    .await
}

async fn distmap(
    State(s): Shared,
    id: Result<Path<u64>, PathRejection>,
    q: Result<Query<ViewParam>, QueryRejection>,
) -> ApiResult<Response> {
    let (Path(id), Query(q)) = (id?, q?);
    let (d, w, h) = distances(s, id, q.view).await?;
    png(pipeline::heatmap_png(&d, w, h))
}

async fn distmap_raw(
    State(s): Shared,
    id: Result<Path<u64>, PathRejection>,
    q: Result<Query<ViewParam>, QueryRejection>,
) -> ApiResult<Response> {
    let (Path(id), Query(q)) = (id?, q?);
    let (d, w, h) = distances(s, id, q.view).await?;
    let mut resp = bytes_response("application/octet-stream", pipeline::raw_grid(&d));
    let headers = resp.headers_mut();
    headers.insert("x-grid-width", w.into());
    headers.insert("x-grid-height", h.into());
    Ok(resp)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverrideBody {
    pub descriptor_id: u64,
    pub tau_phi: f64,
    pub view: usize,
    #[serde(default)]
    pub normalize_3d: bool,
}

fn check_tau(name: &str, v: f64) -> ApiResult<()> {
    if v >= 0.0 {
        Ok(())
    } else {
        Err(ApiError::bad_request(format!("{name} must be ≥ 0, got {v}")))
    }
}

async fn override_render(s: Arc<Session>, body: Result<Json<OverrideBody>, JsonRejection>, amodal: bool) -> ApiResult<Response> {
    let Json(b) = body?;
    check_tau("tau_phi", b.tau_phi)?;
    let desc = s.descriptor(b.descriptor_id)?;
    s.check_view(b.view)?;
    let ckpt = s.checkpoint()?;
    blocking(move || {
        if amodal {
            let gate = apps::build_amodal_override(&desc, b.tau_phi, b.normalize_3d);
            let out = pipeline::render_view(&ckpt, b.view, Some(&gate)).map_err(ApiError::internal)?;
            png(pipeline::mask_png(&pipeline::opacity_mask(&out), out.width, out.height))
        } else {
            let gate = apps::build_edit_override(&desc, b.tau_phi, b.normalize_3d);
            let out = pipeline::render_view(&ckpt, b.view, Some(&gate)).map_err(ApiError::internal)?;
            png(pipeline::rgb_png(&out))
        }
    })
    .await
}

async fn edit(State(s): Shared, body: Result<Json<OverrideBody>, JsonRejection>) -> ApiResult<Response> {
    override_render(s, body, false).await
}

async fn amodal(State(s): Shared, body: Result<Json<OverrideBody>, JsonRejection>) -> ApiResult<Response> {
    override_render(s, body, true).await
}

#[derive(Deserialize)]
pub struct SegmentParams {
    pub descriptor_id: u64,
    pub tau_phi: f64,
    pub tau_sigma: f64,
    #[serde(default = "default_res")]
    pub res: usize,
    #[serde(default)]
    pub normalize_3d: bool,
}

fn default_res() -> usize {
    64
}

async fn segment3d(State(s): Shared, q: Result<Query<SegmentParams>, QueryRejection>) -> ApiResult<Response> {
    let Query(p) = q?;
    check_tau("tau_phi", p.tau_phi)?;
    if p.tau_sigma.is_nan() {
        return Err(ApiError::bad_request("tau_sigma is NaN"));
    }
    if !(2..=MAX_GRID_RES).contains(&p.res) {
        return Err(ApiError::bad_request(format!("res must lie in 2..={MAX_GRID_RES}, got {}", p.res)));
    }
    let desc = s.descriptor(p.descriptor_id)?;
    let ckpt = s.checkpoint()?;
    blocking(move || {
        let thresholds = AppThresholds {
            tau_phi: p.tau_phi,
            tau_sigma: p.tau_sigma,
            normalize_3d: p.normalize_3d,
            ..AppThresholds::default()
        };
        let cloud =
            apps::segment_3d(&ckpt.field, &desc, &thresholds, &ckpt.meta.bounds, p.res).map_err(ApiError::bad_request)?;
        let mut bytes = Vec::new();
        apps::write_ply(&cloud, &mut bytes).map_err(ApiError::internal)?;
        Ok(bytes_response("text/plain; charset=utf-8", bytes))
    })
    .await
}

async fn api_not_found() -> ApiError {
    ApiError::not_found("no such endpoint")
}

pub fn router(session: Arc<Session>, ui: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/views", get(views))
        .route("/view/{view}/rgb", get(view_rgb))
        .route("/query", post(create_query))
        .route("/query/{id}/distmap", get(distmap))
        .route("/query/{id}/distmap/raw", get(distmap_raw))
        .route("/edit", post(edit))
        .route("/amodal", post(amodal))
        .route("/segment3d", get(segment3d))
        .fallback(api_not_found)
        .with_state(session);
    let app = Router::new().nest("/api", api);
    match ui {
        Some(dir) => app.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => app,
    }
}

pub fn serve_blocking(args: ServeArgs) -> anyhow::Result<()> {
    let dataset = Dataset::open(&args.data)?;
    let ckpt = args.ckpt.as_deref().map(trainer::load_checkpoint).transpose()?;
    let session = Arc::new(Session::new(dataset, ckpt)?);
    let app = router(session, args.ui);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let addr = format!("{}:{}", args.host, args.port);
        let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
        log::info!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
