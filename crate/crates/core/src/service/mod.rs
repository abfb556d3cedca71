//! Checkpoint persistence and the JSON-over-HTTP prediction service.
//!
//! Endpoints:
//! - `POST /predict` → predicted seconds, normalized time, class
//!   probabilities and the raw attention map for one target.
//! - `POST /whatif` → predicted seconds for the target placed at every cell
//!   of a grid over the page.
//! - `GET /health` → service status and the loaded model's version.

mod checkpoint;

pub use checkpoint::{
    from_bytes, load_checkpoint, model_version, read_header, save_checkpoint, to_bytes, CheckpointError, Header,
    Metadata, NetMetadata, TensorEntry, FORMAT_VERSION, MAGIC,
};

use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{decode_png, page_tensor, target_crop, target_mask, BBox, PageImage, PAGE_PX};
use crate::features::{extract_fields, raw_numeric, NUM_NUMERIC};
use crate::model::{Batch, ModelBundle, TARGET_RES};
use crate::tensor::Tensor;

/// Default upper bound on `rows × cols` for `/whatif`.
pub const DEFAULT_GRID_CAP: usize = 1024;
const BODY_LIMIT: usize = 64 * 1024 * 1024;

/// A 4xx/5xx answer with an optional offending field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub error: String,
    pub field: Option<String>,
}

impl ApiError {
    fn bad(field: &str, error: impl ToString) -> Self {
        Self {
            status: 400,
            error: error.to_string(),
            field: Some(field.into()),
        }
    }

    fn internal(error: impl ToString) -> Self {
        Self {
            status: 500,
            error: error.to_string(),
            field: None,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    /// Base64-encoded PNG.
    pub screenshot: String,
    pub bbox: [f64; 4],
    pub target_type: String,
    pub n_candidates: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub seconds: f64,
    pub normalized: f64,
    /// Very easy … very hard; `null` when the checkpoint has no classifier.
    pub class_probs: Option<Vec<f32>>,
    /// Raw attention map, row-major.
    pub attention: Vec<f32>,
    /// Side of the attention map.
    pub grid: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    /// Page area `[x, y, w, h]` whose tile centers receive the target
    /// center; the whole page by default.
    #[serde(default)]
    pub region: Option<[f64; 4]>,
    /// Placed target size; the request bbox size by default.
    #[serde(default)]
    pub target_w: Option<f64>,
    #[serde(default)]
    pub target_h: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhatIfRequest {
    pub screenshot: String,
    /// Where the target currently is; its pixels form the target crop
    /// unless `target_crop` is given.
    pub bbox: [f64; 4],
    /// Base64-encoded PNG of the target itself.
    #[serde(default)]
    pub target_crop: Option<String>,
    pub target_type: String,
    pub n_candidates: u32,
    pub grid: GridSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhatIfResponse {
    pub rows: usize,
    pub cols: usize,
    pub target_w: f64,
    pub target_h: f64,
    /// Predicted seconds, `rows` × `cols`.
    pub seconds: Vec<Vec<f64>>,
    /// Placed bbox per cell.
    pub placements: Vec<Vec<[f64; 4]>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub model_version: Option<String>,
}

fn decode_b64_png(field: &str, data: &str) -> Result<PageImage, ApiError> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(data.trim())
        .map_err(|e| ApiError::bad(field, format!("invalid base64: {e}")))?;
    decode_png(&bytes).map_err(|e| ApiError::bad(field, e))
}

fn checked_bbox(field: &str, b: [f64; 4]) -> Result<BBox, ApiError> {
    let bbox = BBox::new(b[0], b[1], b[2], b[3]);
    bbox.validate().map_err(|e| ApiError::bad(field, e))?;
    Ok(bbox)
}

/// Single-trial batch for a page, a target crop and its placement.
fn single_batch(model: &ModelBundle, page: &PageImage, crop: Tensor<f32>, bbox: &BBox, target_type: &str, n: u32) -> Result<Batch<f32>, ApiError> {
    if n == 0 {
        return Err(ApiError::bad("n_candidates", "must be at least 1"));
    }
    let net = &model.regression;
    let f = extract_fields(bbox, target_type, n, &net.norm).map_err(|e| ApiError::bad("target_type", e))?;
    let res = net.config.page_res;
    let pages = page_tensor(page, res as u32).reshape(&[1, res, res, 3]).map_err(ApiError::internal)?;
    let grid = net.config.grid();
    let masks = target_mask(bbox, grid)
        .and_then(|m| Ok(m.reshape(&[1, grid, grid]).expect("mask reshape")))
        .map_err(|e| ApiError::bad("bbox", e))?;
    Ok(Batch {
        pages,
        targets: crop.reshape(&[1, TARGET_RES, TARGET_RES, 3]).map_err(ApiError::internal)?,
        numeric: Tensor::new(vec![1, NUM_NUMERIC], f.numeric.map(|v| v as f32).to_vec()).map_err(ApiError::internal)?,
        type_ids: vec![f.type_id],
        masks,
        times: None,
        labels: None,
    })
}

/// `/predict` without the transport.
pub fn predict(model: &ModelBundle, page: &PageImage, bbox: [f64; 4], target_type: &str, n_candidates: u32) -> Result<PredictResponse, ApiError> {
    let bbox = checked_bbox("bbox", bbox)?;
    let crop = target_crop(page, &bbox, TARGET_RES as u32).map_err(|e| ApiError::bad("bbox", e))?;
    let batch = single_batch(model, page, crop, &bbox, target_type, n_candidates)?;
    let net = &model.regression;
    let out = net.predict(&batch).map_err(ApiError::internal)?;
    let normalized = f64::from(out.outputs[0][0]);
    let class_probs = match &model.classification {
        Some(c) => Some(c.predict(&batch).map_err(ApiError::internal)?.outputs.remove(0)),
        None => None,
    };
    Ok(PredictResponse {
        seconds: net.denormalize_time(normalized),
        normalized,
        class_probs,
        attention: out.attention[0].data().to_vec(),
        grid: net.config.grid(),
    })
}

/// Target bboxes for every grid cell, row-major.
pub fn placements(grid: &GridSpec, w: f64, h: f64) -> Result<Vec<Vec<BBox>>, ApiError> {
    let page = f64::from(PAGE_PX);
    let [rx, ry, rw, rh] = grid.region.unwrap_or([0.0, 0.0, page, page]);
    let region = BBox::new(rx, ry, rw, rh);
    region.check_bounds().map_err(|e| ApiError::bad("grid.region", e))?;
    if !(w > 0.0 && h > 0.0 && w <= page && h <= page) {
        return Err(ApiError::bad("grid", format!("target size {w}x{h} does not fit the page")));
    }
    Ok((0..grid.rows)
        .map(|r| {
            (0..grid.cols)
                .map(|c| {
                    let cx = rx + (c as f64 + 0.5) * rw / grid.cols as f64;
                    let cy = ry + (r as f64 + 0.5) * rh / grid.rows as f64;
                    BBox::new((cx - w / 2.0).clamp(0.0, page - w), (cy - h / 2.0).clamp(0.0, page - h), w, h)
                })
                .collect()
        })
        .collect())
}

/// `/whatif` without the transport. Only the target position changes; the
/// page pixels, target appearance and candidate count stay fixed.
pub fn whatif(
    model: &ModelBundle,
    page: &PageImage,
    req_bbox: [f64; 4],
    crop: Option<&PageImage>,
    target_type: &str,
    n_candidates: u32,
    grid: &GridSpec,
    grid_cap: usize,
) -> Result<WhatIfResponse, ApiError> {
    if grid.rows == 0 || grid.cols == 0 {
        return Err(ApiError::bad("grid", "rows and cols must be positive"));
    }
    if grid.rows.saturating_mul(grid.cols) > grid_cap {
        return Err(ApiError::bad(
            "grid",
            format!("{}x{} grid exceeds the cap of {grid_cap} cells", grid.rows, grid.cols),
        ));
    }
    let bbox = checked_bbox("bbox", req_bbox)?;
    let crop = match crop {
        Some(img) => page_tensor(img, TARGET_RES as u32),
        None => target_crop(page, &bbox, TARGET_RES as u32).map_err(|e| ApiError::bad("bbox", e))?,
    };
    let batch = single_batch(model, page, crop, &bbox, target_type, n_candidates)?;
    let (w, h) = (grid.target_w.unwrap_or(bbox.w), grid.target_h.unwrap_or(bbox.h));
    let cells = placements(grid, w, h)?;
    let net = &model.regression;
    let numeric: Vec<f32> = cells
        .iter()
        .flatten()
        .flat_map(|b| net.norm.standardize(&raw_numeric(b, n_candidates)).map(|v| v as f32))
        .collect();
    let n = grid.rows * grid.cols;
    let numeric = Tensor::new(vec![n, NUM_NUMERIC], numeric).map_err(ApiError::internal)?;
    let (rows, _) = net.predict_structured_variants(&batch, &numeric).map_err(ApiError::internal)?;
    let seconds: Vec<f64> = rows.iter().map(|r| net.denormalize_time(f64::from(r[0]))).collect();
    if seconds.iter().any(|s| !s.is_finite()) {
        return Err(ApiError::internal("non-finite prediction"));
    }
    Ok(WhatIfResponse {
        rows: grid.rows,
        cols: grid.cols,
        target_w: w,
        target_h: h,
        seconds: seconds.chunks(grid.cols).map(<[f64]>::to_vec).collect(),
        placements: cells
            .iter()
            .map(|row| row.iter().map(|b| [b.x, b.y, b.w, b.h]).collect())
            .collect(),
    })
}

/// A loaded bundle and its version string.
pub struct LoadedModel {
    pub bundle: ModelBundle,
    pub version: String,
}

/// Shared server state; the model can be swapped between requests.
pub struct AppState {
    model: RwLock<Option<Arc<LoadedModel>>>,
    pub grid_cap: usize,
}

impl AppState {
    pub fn new(model: Option<LoadedModel>, grid_cap: usize) -> Arc<Self> {
        Arc::new(Self {
            model: RwLock::new(model.map(Arc::new)),
            grid_cap,
        })
    }

    /// Replaces the served model; in-flight requests keep the old one.
    pub fn swap(&self, model: Option<LoadedModel>) {
        *self.model.write().expect("model lock") = model.map(Arc::new);
    }

    fn current(&self) -> Result<Arc<LoadedModel>, ApiError> {
        self.model.read().expect("model lock").clone().ok_or(ApiError {
            status: 503,
            error: "no model loaded".into(),
            field: None,
        })
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

async fn handle_predict(State(state): State<Arc<AppState>>, Json(req): Json<PredictRequest>) -> Result<Json<PredictResponse>, ApiError> {
    let model = state.current()?;
    blocking(move || {
        let page = decode_b64_png("screenshot", &req.screenshot)?;
        predict(&model.bundle, &page, req.bbox, &req.target_type, req.n_candidates)
    })
    .await
    .map(Json)
}

async fn handle_whatif(State(state): State<Arc<AppState>>, Json(req): Json<WhatIfRequest>) -> Result<Json<WhatIfResponse>, ApiError> {
    let model = state.current()?;
    let cap = state.grid_cap;
    blocking(move || {
        let page = decode_b64_png("screenshot", &req.screenshot)?;
        let crop = req.target_crop.as_deref().map(|c| decode_b64_png("target_crop", c)).transpose()?;
        whatif(&model.bundle, &page, req.bbox, crop.as_ref(), &req.target_type, req.n_candidates, &req.grid, cap)
    })
    .await
    .map(Json)
}

async fn handle_health(State(state): State<Arc<AppState>>) -> Json<HealthResponse> {
    let model = state.model.read().expect("model lock").clone();
    Json(HealthResponse {
        status: if model.is_some() { "ok" } else { "no_model" }.into(),
        model_version: model.map(|m| m.version.clone()),
    })
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/predict", post(handle_predict))
        .route("/whatif", post(handle_whatif))
        .route("/health", get(handle_health))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

/// Loads a checkpoint file for serving.
pub fn load_for_serving(path: impl AsRef<std::path::Path>) -> Result<LoadedModel, CheckpointError> {
    let bytes = std::fs::read(path)?;
    let (header, _) = read_header(&bytes)?;
    let (bundle, _) = from_bytes(&bytes)?;
    Ok(LoadedModel {
        bundle,
        version: model_version(&header),
    })
}

/// Serves until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
