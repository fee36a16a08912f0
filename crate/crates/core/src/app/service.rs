//! HTTP service: prediction under a live, editable prior.
//!
//! Model parameters are never touched after startup. The prior lives behind
//! an `RwLock<Arc<_>>`; edits build a new prior from the current snapshot and
//! swap it in under the write lock, and each prediction clones the `Arc` once
//! so it sees exactly one version.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::Router;
use serde::{Deserialize, Serialize};

use crate::error::{MgfError, Result};
use crate::model::{MgfModel, PredictOptions, DEFAULT_J, DEFAULT_M};
use crate::numerics::Rng;
use crate::prior::{MixedGaussianPrior, PriorEdit};
use crate::trajdata::{unflatten, Point, TrajectoryWindow};

/// Upper bound on candidates per request.
pub const MAX_CANDIDATES: usize = 10_000;

pub struct ServiceState {
    model: MgfModel,
    checkpoint_prior: MixedGaussianPrior,
    prior: RwLock<Arc<MixedGaussianPrior>>,
    scenes: Vec<TrajectoryWindow>,
    unseeded: Mutex<Rng>,
}

impl ServiceState {
    pub fn new(model: MgfModel, scenes: Vec<TrajectoryWindow>, seed: u64) -> Self {
        let prior = model.prior().clone();
        Self {
            checkpoint_prior: prior.clone(),
            prior: RwLock::new(Arc::new(prior)),
            model,
            scenes,
            unseeded: Mutex::new(Rng::stream(seed, 0x5e41)),
        }
    }

    pub fn model(&self) -> &MgfModel {
        &self.model
    }

    pub fn prior(&self) -> Arc<MixedGaussianPrior> {
        Arc::clone(&self.prior.read().unwrap_or_else(|e| e.into_inner()))
    }

    /// Applies `edits` as one transaction. The new prior's version is exactly
    /// one above the snapshot it was built from.
    pub fn apply_edits(&self, edits: &[PriorEdit], expected_version: Option<u64>) -> Result<Arc<MixedGaussianPrior>> {
        let mut slot = self.prior.write().unwrap_or_else(|e| e.into_inner());
        let current = slot.version();
        if let Some(expected) = expected_version {
            if expected != current {
                return Err(MgfError::StaleVersion { expected, current });
            }
        }
        let next = Arc::new(slot.edit_all(edits)?.with_version(current + 1));
        *slot = Arc::clone(&next);
        Ok(next)
    }

    /// Restores the checkpoint prior's parameters under a fresh version.
    pub fn reset(&self) -> Arc<MixedGaussianPrior> {
        let mut slot = self.prior.write().unwrap_or_else(|e| e.into_inner());
        let next = Arc::new(self.checkpoint_prior.clone().with_version(slot.version() + 1));
        *slot = Arc::clone(&next);
        next
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/model/info", get(model_info))
        .route("/prior", get(get_prior))
        .route("/prior", patch(patch_prior))
        .route("/prior/reset", post(reset_prior))
        .route("/predict", post(predict))
        .route("/scenes", get(scenes))
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(state: Arc<ServiceState>, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

struct ApiError(StatusCode, String);

impl From<MgfError> for ApiError {
    fn from(e: MgfError) -> Self {
        let status = match e {
            MgfError::StaleVersion { .. } => StatusCode::CONFLICT,
            MgfError::InvalidArgument(_) | MgfError::Shape { .. } | MgfError::Json(_) | MgfError::NonFinite(_) => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        json_response(self.0, &serde_json::json!({ "error": self.1 }))
    }
}

fn json_response<T: Serialize>(status: StatusCode, body: &T) -> Response {
    match serde_json::to_vec(body) {
        Ok(bytes) => (status, [(header::CONTENT_TYPE, "application/json")], bytes).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

fn parse<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("malformed request: {e}")))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelInfo {
    pub t_obs: usize,
    pub t_fut: usize,
    pub dim: usize,
    pub k: usize,
    pub context_dim: usize,
    pub layers: usize,
    pub hidden: usize,
    pub prior_version: u64,
}

async fn model_info(State(s): State<Arc<ServiceState>>) -> Response {
    let cfg = s.model.config();
    let prior = s.prior();
    json_response(
        StatusCode::OK,
        &ModelInfo {
            t_obs: cfg.t_obs,
            t_fut: cfg.t_fut,
            dim: cfg.dim(),
            k: prior.k(),
            context_dim: cfg.context_dim,
            layers: cfg.layers,
            hidden: cfg.hidden,
            prior_version: prior.version(),
        },
    )
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentView {
    pub index: usize,
    pub weight: f64,
    pub sigma: f64,
    pub log_sigma: f64,
    /// Mean as per-step offsets from the pivot.
    pub mean: Vec<Point>,
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorView {
    pub version: u64,
    pub dim: usize,
    pub components: Vec<ComponentView>,
}

impl PriorView {
    pub fn of(prior: &MixedGaussianPrior) -> Self {
        Self {
            version: prior.version(),
            dim: prior.dim(),
            components: prior
                .components()
                .iter()
                .enumerate()
                .map(|(index, c)| ComponentView {
                    index,
                    weight: c.weight,
                    sigma: c.sigma(),
                    log_sigma: c.log_sigma,
                    mean: unflatten(&c.mean),
                })
                .collect(),
        }
    }
}

async fn get_prior(State(s): State<Arc<ServiceState>>) -> Response {
    json_response(StatusCode::OK, &PriorView::of(&s.prior()))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchRequest {
    pub edits: Vec<PriorEdit>,
    #[serde(default)]
    pub expected_version: Option<u64>,
}

async fn patch_prior(State(s): State<Arc<ServiceState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: PatchRequest = parse(&body)?;
    if req.edits.is_empty() {
        return Err(ApiError(StatusCode::BAD_REQUEST, "edit list is empty".into()));
    }
    let next = s.apply_edits(&req.edits, req.expected_version)?;
    Ok(json_response(StatusCode::OK, &PriorView::of(&next)))
}

async fn reset_prior(State(s): State<Arc<ServiceState>>) -> Response {
    json_response(StatusCode::OK, &PriorView::of(&s.reset()))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    pub history: Vec<Point>,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default)]
    pub use_clustering: bool,
    #[serde(default)]
    pub j: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_m() -> usize {
    DEFAULT_M
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub prior_version: u64,
    pub seed: u64,
    pub candidates: Vec<Vec<Point>>,
    pub components: Vec<usize>,
    pub log_probs: Vec<f64>,
}

async fn predict(State(s): State<Arc<ServiceState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: PredictRequest = parse(&body)?;
    let j = req.j.unwrap_or(DEFAULT_J);
    if req.m == 0 || req.m > MAX_CANDIDATES || (req.use_clustering && !(req.m..=MAX_CANDIDATES).contains(&j)) {
        return Err(ApiError(
            StatusCode::BAD_REQUEST,
            format!("need 1 ≤ m ≤ j ≤ {MAX_CANDIDATES}"),
        ));
    }
    if req.history.iter().flatten().any(|v| !v.is_finite()) {
        return Err(ApiError(
            StatusCode::BAD_REQUEST,
            "history contains non-finite values".into(),
        ));
    }
    let t_obs = s.model.config().t_obs;
    if req.history.len() < t_obs {
        return Err(ApiError(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("history has {} points, model needs {t_obs}", req.history.len()),
        ));
    }
    let seed = match req.seed {
        Some(seed) => seed,
        None => s.unseeded.lock().unwrap_or_else(|e| e.into_inner()).next_u64(),
    };
    let prior = s.prior();
    let state = Arc::clone(&s);
    let opts = PredictOptions {
        clustering: req.use_clustering,
        oversample: j,
    };
    let set = tokio::task::spawn_blocking(move || {
        state
            .model
            .predict_with(&prior, &req.history, req.m, &mut Rng::seed(seed), opts)
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(json_response(
        StatusCode::OK,
        &PredictResponse {
            prior_version: set.prior_version,
            seed,
            candidates: set.candidates,
            components: set.components,
            log_probs: set.log_probs,
        },
    ))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SceneView {
    pub index: usize,
    pub scene_id: String,
    pub agent_id: i64,
    pub observed: Vec<Point>,
    pub future: Vec<Point>,
}

async fn scenes(State(s): State<Arc<ServiceState>>) -> Response {
    let views: Vec<SceneView> = s
        .scenes
        .iter()
        .enumerate()
        .map(|(index, w)| SceneView {
            index,
            scene_id: w.scene_id.clone(),
            agent_id: w.agent_id,
            observed: w.observed.clone(),
            future: w.future.clone(),
        })
        .collect();
    json_response(StatusCode::OK, &views)
}
