//! HTTP service: model schema, stored shapes, decoding and shared-latent
//! manipulation over JSON.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use partsdf::mesher::{marching_cubes, GridSpec, MeshJson};
use partsdf::model::{ModelBundle, Variant};
use partsdf::nets::{ArchConfig, ShapeParams};
use partsdf::shapegen::Manifest;
use partsdf::trainer::{manipulate_direct, manipulate_shared, ManipulateConfig};
use partsdf::Error;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const MODEL_ID: &str = "default";
pub const MIN_RESOLUTION: usize = 16;
pub const MAX_RESOLUTION: usize = 256;
pub const INTERACTIVE_RESOLUTION: usize = 64;
pub const DEFAULT_RESOLUTION: usize = 48;
pub const MAX_MANIPULATE_STEPS: usize = 20_000;

const SIZE_RANGE: (f64, f64) = (1e-3, 1.0);
const ROTATION_RANGE: (f64, f64) = (-PI, PI);
const TRANSLATION_RANGE: (f64, f64) = (-1.0, 1.0);
const LATENT_RANGE: (f64, f64) = (-10.0, 10.0);

/// Immutable model snapshot plus counters. Reloads replace the snapshot
/// whole; requests in flight keep the one they started with.
pub struct ServiceState {
    model: RwLock<Arc<ModelBundle>>,
    model_path: Option<PathBuf>,
    manifest: Option<Manifest>,
    requests: AtomicU64,
    faults: AtomicU64,
}

impl ServiceState {
    pub fn new(model: ModelBundle, manifest: Option<Manifest>, model_path: Option<PathBuf>) -> Self {
        ServiceState {
            model: RwLock::new(Arc::new(model)),
            model_path,
            manifest,
            requests: AtomicU64::new(0),
            faults: AtomicU64::new(0),
        }
    }

    pub fn snapshot(&self) -> Arc<ModelBundle> {
        self.model.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn swap(&self, model: ModelBundle) {
        *self.model.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(model);
    }

    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    fn hit(&self) {
        self.requests.fetch_add(1, Ordering::Relaxed);
    }
}

pub fn router(state: Arc<ServiceState>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/model", get(get_model))
        .route("/api/shapes", get(shapes))
        .route("/api/shapes/{id}", get(shape))
        .route("/api/decode", post(decode))
        .route("/api/manipulate-shared", post(manip_shared))
        .route("/api/reload", post(reload))
        .with_state(state);
    match static_dir {
        Some(dir) => {
            let root = Arc::new(dir.to_path_buf());
            api.fallback(move |uri: Uri| serve_static(root.clone(), uri))
        }
        None => api,
    }
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).unwrap_or("") {
        "html" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript; charset=utf-8",
        "css" => "text/css; charset=utf-8",
        "json" | "map" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "ico" => "image/x-icon",
        "wasm" => "application/wasm",
        "txt" => "text/plain; charset=utf-8",
        _ => "application/octet-stream",
    }
}

/// Files under `root`; `/` maps to `index.html`. Paths with `..` or other
/// non-plain components are refused.
async fn serve_static(root: Arc<PathBuf>, uri: Uri) -> Response {
    let rel = uri.path().trim_start_matches('/');
    let rel = if rel.is_empty() || rel.ends_with('/') { format!("{rel}index.html") } else { rel.to_string() };
    let rel = Path::new(&rel);
    if !rel.components().all(|c| matches!(c, Component::Normal(_))) {
        return ApiError::not_found("not found").into_response();
    }
    let path = root.join(rel);
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(_) => ApiError::not_found(format!("no such file `{}`", uri.path())).into_response(),
    }
}

// ---------------------------------------------------------------------------
// errors

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub id: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into(), id: None }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn range(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    fn internal(state: &ServiceState, message: impl Into<String>) -> Self {
        let n = state.faults.fetch_add(1, Ordering::Relaxed) + 1;
        let id = format!("fault-{n}");
        let message = message.into();
        eprintln!("[{id}] {message}");
        ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, message, id: Some(id) }
    }

    fn from_core(state: &ServiceState, e: Error) -> Self {
        match e {
            Error::UnknownKey(_) | Error::OutOfRange { .. } | Error::LengthMismatch { .. } | Error::WrongVariant { .. } => {
                Self::bad_request(e.to_string())
            }
            Error::InvalidParams(_) => Self::range(e.to_string()),
            other => Self::internal(state, other.to_string()),
        }
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    status: u16,
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<&'a str>,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { error: &self.message, status: self.status.as_u16(), id: self.id.as_deref() };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Any body that is not valid JSON for `T` is a 400.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("request body: {e}")))
}

async fn blocking<T, F>(state: Arc<ServiceState>, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&ServiceState) -> Result<T, ApiError> + Send + 'static,
{
    let st = state.clone();
    match tokio::task::spawn_blocking(move || f(&st)).await {
        Ok(r) => r.map(Json),
        Err(e) => Err(ApiError::internal(&state, format!("worker failed: {e}"))),
    }
}

// ---------------------------------------------------------------------------
// schema

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSchema {
    pub name: String,
    pub group: String,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveSchema {
    pub id: String,
    pub kind: String,
    pub role: String,
    pub param_names: Vec<String>,
    pub assist_latent_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolutionSchema {
    pub min: usize,
    pub max: usize,
    pub default: usize,
    /// Requests above this are served but slow.
    pub interactive_max: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub model_id: String,
    pub variant: Variant,
    pub latent_dim: usize,
    pub assist_dim: usize,
    pub arch: ArchConfig,
    pub primitives: Vec<PrimitiveSchema>,
    pub parameters: Vec<ParamSchema>,
    pub resolution: ResolutionSchema,
    pub shape_count: usize,
}

/// Ranges of every explicit entry, in explicit-vector order.
pub fn param_schema(model: &ModelBundle) -> Vec<ParamSchema> {
    model
        .layout
        .param_names()
        .into_iter()
        .map(|name| {
            let (group, (min, max)) = if name.contains(".latent.") {
                ("assist_latent", LATENT_RANGE)
            } else if name.contains(".rotation.") {
                ("rotation", ROTATION_RANGE)
            } else if name.contains(".translation.") {
                ("translation", TRANSLATION_RANGE)
            } else {
                ("shape", SIZE_RANGE)
            };
            ParamSchema { name, group: group.into(), min, max }
        })
        .collect()
}

pub fn model_info(model: &ModelBundle) -> ModelInfo {
    let primitives = model
        .layout
        .slots
        .iter()
        .map(|s| PrimitiveSchema {
            id: s.id.clone(),
            kind: s.kind.name().into(),
            role: format!("{:?}", s.role).to_lowercase(),
            param_names: s.kind.param_names().iter().map(|n| n.to_string()).collect(),
            assist_latent_id: s.assist_latent_id.clone(),
        })
        .collect();
    ModelInfo {
        model_id: MODEL_ID.into(),
        variant: model.variant(),
        latent_dim: model.latent_dim(),
        assist_dim: model.layout.assist_dim,
        arch: model.meta.arch.clone(),
        primitives,
        parameters: param_schema(model),
        resolution: ResolutionSchema {
            min: MIN_RESOLUTION,
            max: MAX_RESOLUTION,
            default: DEFAULT_RESOLUTION,
            interactive_max: INTERACTIVE_RESOLUTION,
        },
        shape_count: model.shapes.len(),
    }
}

fn named_values(model: &ModelBundle, params: &ShapeParams) -> BTreeMap<String, f64> {
    model.layout.param_names().into_iter().zip(model.layout.explicit_vector(params)).collect()
}

// ---------------------------------------------------------------------------
// handlers

#[derive(Serialize)]
struct Health {
    status: &'static str,
    requests: u64,
}

async fn health(State(state): State<Arc<ServiceState>>) -> Json<Health> {
    state.hit();
    Json(Health { status: "ok", requests: state.requests() })
}

async fn get_model(State(state): State<Arc<ServiceState>>) -> Json<ModelInfo> {
    state.hit();
    Json(model_info(&state.snapshot()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSummary {
    pub id: String,
    pub split: Option<String>,
    pub has_part_labels: Option<bool>,
}

async fn shapes(State(state): State<Arc<ServiceState>>) -> Json<Vec<ShapeSummary>> {
    state.hit();
    let model = state.snapshot();
    let list = model
        .shapes
        .iter()
        .map(|s| {
            let entry = state.manifest.as_ref().and_then(|m| m.shapes.iter().find(|e| e.id == s.id));
            ShapeSummary {
                id: s.id.clone(),
                split: entry.map(|e| format!("{:?}", e.split).to_lowercase()),
                has_part_labels: entry.map(|e| e.has_part_labels),
            }
        })
        .collect();
    Json(list)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeDetail {
    pub id: String,
    pub latent: Vec<f64>,
    pub parameters: BTreeMap<String, f64>,
    pub params: ShapeParams,
}

async fn shape(State(state): State<Arc<ServiceState>>, UrlPath(id): UrlPath<String>) -> ApiResult<ShapeDetail> {
    state.hit();
    let model = state.snapshot();
    let i = model.shape_index(&id).ok_or_else(|| ApiError::not_found(format!("unknown shape `{id}`")))?;
    let e = &model.shapes[i];
    Ok(Json(ShapeDetail {
        id: e.id.clone(),
        latent: e.latent.clone(),
        parameters: named_values(&model, &e.params),
        params: e.params.clone(),
    }))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeRequest {
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub shape_id: Option<String>,
    /// Replaces the shape's latent; explicit parameters are kept.
    #[serde(default)]
    pub latent: Option<Vec<f64>>,
    /// Explicit entries by name, e.g. `tube.outer_radius`.
    #[serde(default)]
    pub overrides: BTreeMap<String, f64>,
    /// Whole assist latents by assist id.
    #[serde(default)]
    pub assist_latents: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub resolution: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeResponse {
    pub model: String,
    pub shape_id: Option<String>,
    pub latent: Vec<f64>,
    pub parameters: BTreeMap<String, f64>,
    pub resolution: usize,
    pub slow: bool,
    pub vertex_count: usize,
    pub triangle_count: usize,
    pub mesh: MeshJson,
}

fn check_resolution(r: Option<usize>) -> Result<usize, ApiError> {
    let r = r.unwrap_or(DEFAULT_RESOLUTION);
    if !(MIN_RESOLUTION..=MAX_RESOLUTION).contains(&r) {
        return Err(ApiError::range(format!("resolution {r} outside [{MIN_RESOLUTION}, {MAX_RESOLUTION}]")));
    }
    Ok(r)
}

fn check_model(id: &Option<String>) -> Result<(), ApiError> {
    match id {
        Some(m) if m != MODEL_ID => Err(ApiError::not_found(format!("unknown model `{m}`"))),
        _ => Ok(()),
    }
}

fn check_range(schema: &[ParamSchema], name: &str, v: f64) -> Result<(), ApiError> {
    let s = schema.iter().find(|s| s.name == name).ok_or_else(|| ApiError::bad_request(format!("unknown parameter `{name}`")))?;
    if !v.is_finite() || v < s.min || v > s.max {
        return Err(ApiError::range(format!("`{name}` = {v} outside [{}, {}]", s.min, s.max)));
    }
    Ok(())
}

fn check_latent(model: &ModelBundle, lv: &[f64]) -> Result<(), ApiError> {
    if lv.len() != model.latent_dim() {
        return Err(ApiError::bad_request(format!("latent has {} entries, model uses {}", lv.len(), model.latent_dim())));
    }
    if let Some(v) = lv.iter().find(|v| !v.is_finite() || **v < LATENT_RANGE.0 || **v > LATENT_RANGE.1) {
        return Err(ApiError::range(format!("latent entry {v} outside [{}, {}]", LATENT_RANGE.0, LATENT_RANGE.1)));
    }
    Ok(())
}

fn mesh_of(state: &ServiceState, model: &ModelBundle, latent: &[f64], params: &ShapeParams, res: usize) -> Result<MeshJson, ApiError> {
    let f = |pts: &[partsdf::sdf::Vec3]| model.eval_sdf(latent, params, pts);
    let mesh = marching_cubes(&f, &GridSpec::cube(res)).map_err(|e| ApiError::from_core(state, e))?;
    Ok(mesh.weld(0.0).to_json())
}

fn base_shape(model: &ModelBundle, shape_id: Option<&str>, latent: Option<&[f64]>) -> Result<(Vec<f64>, ShapeParams), ApiError> {
    if let Some(lv) = latent {
        check_latent(model, lv)?;
    }
    match (shape_id, latent) {
        (Some(id), lv) => {
            let i = model.shape_index(id).ok_or_else(|| ApiError::not_found(format!("unknown shape `{id}`")))?;
            let e = &model.shapes[i];
            Ok((lv.map_or_else(|| e.latent.clone(), <[f64]>::to_vec), e.params.clone()))
        }
        (None, Some(lv)) => {
            let raw = match model.variant() {
                Variant::Shared => model.decode_shared(lv),
                Variant::Disentangled => Ok(model.layout.template.clone()),
            }
            .and_then(|raw| model.layout.decode_raw(&raw))
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
            Ok((lv.to_vec(), raw))
        }
        (None, None) => Err(ApiError::bad_request("either `shape_id` or `latent` is required")),
    }
}

/// Shared by the HTTP handler and by the CLI's decode path.
pub fn decode_request(state: &ServiceState, req: &DecodeRequest) -> Result<DecodeResponse, ApiError> {
    check_model(&req.model)?;
    let model = state.snapshot();
    let res = check_resolution(req.resolution)?;
    let schema = param_schema(&model);
    let (latent, base) = base_shape(&model, req.shape_id.as_deref(), req.latent.as_deref())?;

    let mut edits: Vec<(String, f64)> = Vec::new();
    for (name, &v) in &req.overrides {
        check_range(&schema, name, v)?;
        edits.push((name.clone(), v));
    }
    for (id, values) in &req.assist_latents {
        if !model.layout.assist_ids.contains(id) {
            return Err(ApiError::bad_request(format!("unknown assist latent `{id}`")));
        }
        if values.len() != model.layout.assist_dim {
            return Err(ApiError::bad_request(format!(
                "assist latent `{id}` has {} entries, model uses {}",
                values.len(),
                model.layout.assist_dim
            )));
        }
        for (k, &v) in values.iter().enumerate() {
            let name = format!("{id}.latent.{k}");
            check_range(&schema, &name, v)?;
            edits.push((name, v));
        }
    }
    let params = manipulate_direct(&model, &base, &edits).map_err(|e| ApiError::from_core(state, e))?;
    let mesh = mesh_of(state, &model, &latent, &params, res)?;
    Ok(DecodeResponse {
        model: MODEL_ID.into(),
        shape_id: req.shape_id.clone(),
        parameters: named_values(&model, &params),
        latent,
        resolution: res,
        slow: res > INTERACTIVE_RESOLUTION,
        vertex_count: mesh.positions.len() / 3,
        triangle_count: mesh.indices.len() / 3,
        mesh,
    })
}

async fn decode(State(state): State<Arc<ServiceState>>, body: Bytes) -> ApiResult<DecodeResponse> {
    state.hit();
    let req: DecodeRequest = parse_body(&body)?;
    blocking(state, move |st| decode_request(st, &req)).await
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManipulateSharedRequest {
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub shape_id: Option<String>,
    #[serde(default)]
    pub latent: Option<Vec<f64>>,
    /// Positions in the explicit vector (see `/api/model` parameters).
    pub indices: Vec<usize>,
    pub targets: Vec<f64>,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub resolution: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManipulateSharedResponse {
    pub latent: Vec<f64>,
    pub parameters: BTreeMap<String, f64>,
    pub final_loss: f64,
    pub steps: usize,
    pub resolution: usize,
    pub mesh: MeshJson,
}

pub fn manipulate_shared_request(state: &ServiceState, req: &ManipulateSharedRequest) -> Result<ManipulateSharedResponse, ApiError> {
    check_model(&req.model)?;
    let model = state.snapshot();
    if model.variant() != Variant::Shared {
        return Err(ApiError::bad_request("the loaded model is not the shared-latent variant"));
    }
    let res = check_resolution(req.resolution)?;
    if req.indices.len() != req.targets.len() || req.indices.is_empty() {
        return Err(ApiError::bad_request("`indices` and `targets` must be non-empty and of equal length"));
    }
    let schema = param_schema(&model);
    let mut targets = Vec::with_capacity(req.indices.len());
    for (&i, &v) in req.indices.iter().zip(&req.targets) {
        let s = schema.get(i).ok_or_else(|| ApiError::bad_request(format!("index {i} out of range (len {})", schema.len())))?;
        check_range(&schema, &s.name, v)?;
        targets.push((i, v));
    }
    let steps = req.steps.unwrap_or(ManipulateConfig::default().steps);
    if steps == 0 || steps > MAX_MANIPULATE_STEPS {
        return Err(ApiError::range(format!("steps {steps} outside [1, {MAX_MANIPULATE_STEPS}]")));
    }
    let (latent, _) = base_shape(&model, req.shape_id.as_deref(), req.latent.as_deref())?;
    let cfg = ManipulateConfig { steps, ..ManipulateConfig::default() };
    let r = manipulate_shared(&model, &latent, &targets, &cfg).map_err(|e| ApiError::from_core(state, e))?;
    let mesh = mesh_of(state, &model, &r.latent, &r.params, res)?;
    Ok(ManipulateSharedResponse {
        parameters: named_values(&model, &r.params),
        final_loss: r.history.last().copied().unwrap_or(0.0),
        latent: r.latent,
        steps,
        resolution: res,
        mesh,
    })
}

async fn manip_shared(State(state): State<Arc<ServiceState>>, body: Bytes) -> ApiResult<ManipulateSharedResponse> {
    state.hit();
    let req: ManipulateSharedRequest = parse_body(&body)?;
    blocking(state, move |st| manipulate_shared_request(st, &req)).await
}

#[derive(Serialize)]
struct Reloaded {
    status: &'static str,
    shapes: usize,
}

async fn reload(State(state): State<Arc<ServiceState>>) -> ApiResult<Reloaded> {
    state.hit();
    blocking(state, |st| {
        let path = st.model_path.as_ref().ok_or_else(|| ApiError::bad_request("service was started without a model path"))?;
        let model = ModelBundle::load(path).map_err(|e| ApiError::internal(st, format!("reload failed: {e}")))?;
        let shapes = model.shapes.len();
        st.swap(model);
        Ok(Reloaded { status: "reloaded", shapes })
    })
    .await
}
