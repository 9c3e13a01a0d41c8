//! HTTP inference API over one immutable model.
//!
//! Routes: `POST /stylize` (multipart `image` PNG, optional `style` PNG, and
//! `params` JSON) returning a PNG; `GET /directions?top=N`; `GET /config`;
//! `GET /health`. Failures are JSON `{code, field, message}`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::extrinsic::Gates;
use crate::generator::StyleWeightVector;
use crate::image_pipeline::{decode_image, ImageTensor};
use crate::model::{StyleModel, StylizeParams};

const BODY_LIMIT: usize = 16 << 20;
const DEFAULT_TOP: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: String,
    pub field: Option<String>,
    pub message: String,
}

impl ApiError {
    fn invalid(field: Option<&str>, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            code: "invalid_request".into(),
            field: field.map(str::to_string),
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal".into(),
            field: None,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Validation(m) => Self::invalid(None, m),
            Error::Decode { message, .. } => Self::invalid(Some("image"), message),
            other => Self::internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

#[derive(Clone)]
pub struct ServiceState {
    model: Arc<StyleModel>,
    checkpoint_hash: Arc<str>,
}

impl ServiceState {
    pub fn new(model: StyleModel, checkpoint_hash: impl Into<String>) -> Self {
        Self {
            model: Arc::new(model),
            checkpoint_hash: checkpoint_hash.into().into(),
        }
    }

    pub fn model(&self) -> &StyleModel {
        &self.model
    }
}

pub fn router(state: ServiceState) -> Router {
    Router::new()
        .route("/stylize", post(stylize))
        .route("/directions", get(directions))
        .route("/config", get(config))
        .route("/health", get(health))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

/// Binds first so a busy port fails before anything is served.
pub async fn serve(state: ServiceState, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::Service(format!("cannot bind {addr}: {e}")))?;
    log::info!("listening on {}", listener.local_addr().map(|a| a.to_string()).unwrap_or_default());
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::Service(e.to_string()))
}

fn number(v: &Value, field: &str) -> std::result::Result<f64, ApiError> {
    v.as_f64()
        .filter(|x| x.is_finite())
        .ok_or_else(|| ApiError::invalid(Some(field), format!("{field} must be a finite number")))
}

/// Validates the `params` JSON against the model. `weights` is either one
/// number, broadcast to every layer, or one number per layer.
pub fn parse_params(v: &Value, model: &StyleModel, checkpoint_hash: &str) -> std::result::Result<StylizeParams, ApiError> {
    let Some(obj) = v.as_object() else {
        return Err(ApiError::invalid(Some("params"), "params must be a JSON object"));
    };
    let known = ["weights", "sigma", "gamma1", "gamma2", "direction_rank", "checkpoint"];
    if let Some(k) = obj.keys().find(|k| !known.contains(&k.as_str())) {
        return Err(ApiError::invalid(Some(k), format!("unknown parameter {k}")));
    }
    let layers = model.n_layers();
    let raw = match obj.get("weights") {
        None => return Err(ApiError::invalid(Some("weights"), "weights is required")),
        Some(Value::Array(items)) => items.iter().map(|x| number(x, "weights")).collect::<std::result::Result<Vec<_>, _>>()?,
        Some(x) => vec![number(x, "weights")?; layers],
    };
    if raw.len() != layers {
        return Err(ApiError::invalid(
            Some("weights"),
            format!("expected {layers} weights, got {}", raw.len()),
        ));
    }
    let weights = StyleWeightVector::new(raw).map_err(|e| ApiError::invalid(Some("weights"), e.to_string()))?;
    let mut params = StylizeParams::new(weights);
    if let Some(s) = obj.get("sigma") {
        params.sigma = number(s, "sigma")?;
    }
    let gate = |field: &str| -> std::result::Result<Option<f64>, ApiError> {
        match obj.get(field) {
            None | Some(Value::Null) => Ok(None),
            Some(x) => {
                let g = number(x, field)?;
                if !(0.0..=1.0).contains(&g) {
                    return Err(ApiError::invalid(Some(field), format!("{field} = {g} outside [0, 1]")));
                }
                Ok(Some(g))
            }
        }
    };
    params.gates = Gates {
        gamma1: gate("gamma1")?,
        gamma2: gate("gamma2")?,
    };
    match obj.get("direction_rank") {
        None | Some(Value::Null) => {}
        Some(x) => {
            let d = model.generator.d_latent();
            match x.as_u64() {
                Some(r) if (r as usize) < d => params.direction_rank = Some(r as usize),
                _ => {
                    return Err(ApiError::invalid(
                        Some("direction_rank"),
                        format!("direction_rank must be an integer in [0, {d})"),
                    ))
                }
            }
        }
    }
    if let Some(c) = obj.get("checkpoint") {
        if c.as_str() != Some(checkpoint_hash) {
            return Err(ApiError::invalid(Some("checkpoint"), "this service runs a different checkpoint"));
        }
    }
    Ok(params)
}

async fn stylize(State(state): State<ServiceState>, mut form: Multipart) -> std::result::Result<Response, ApiError> {
    let mut parts: HashMap<String, Vec<u8>> = HashMap::new();
    loop {
        let field = form
            .next_field()
            .await
            .map_err(|e| ApiError::invalid(Some("multipart"), e.body_text()))?;
        let Some(field) = field else { break };
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field
            .bytes()
            .await
            .map_err(|e| ApiError::invalid(Some(&name), e.body_text()))?;
        parts.insert(name, bytes.to_vec());
    }
    let res = state.model.config.model.resolution;
    let decode = |name: &str| -> std::result::Result<Option<ImageTensor>, ApiError> {
        parts
            .get(name)
            .map(|b| decode_image(b, res, Path::new(name)).map_err(|e| ApiError::invalid(Some(name), e.to_string())))
            .transpose()
    };
    let content = decode("image")?.ok_or_else(|| ApiError::invalid(Some("image"), "missing image part"))?;
    let style = decode("style")?;
    let params_json: Value = match parts.get("params") {
        None => return Err(ApiError::invalid(Some("params"), "missing params part")),
        Some(b) => serde_json::from_slice(b).map_err(|e| ApiError::invalid(Some("params"), format!("params is not JSON: {e}")))?,
    };
    let params = parse_params(&params_json, &state.model, &state.checkpoint_hash)?;
    let model = state.model.clone();
    let png = tokio::task::spawn_blocking(move || -> Result<Vec<u8>> { model.stylize(&content, style.as_ref(), &params)?.to_png_bytes() })
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn directions(
    State(state): State<ServiceState>,
    Query(q): Query<HashMap<String, String>>,
) -> std::result::Result<Response, ApiError> {
    let d = state.model.generator.d_latent();
    let top = match q.get("top") {
        None => DEFAULT_TOP.min(d),
        Some(s) => s
            .parse::<usize>()
            .ok()
            .filter(|n| (1..=d).contains(n))
            .ok_or_else(|| ApiError::invalid(Some("top"), format!("top must be an integer in [1, {d}]")))?,
    };
    let model = state.model.clone();
    let dirs = tokio::task::spawn_blocking(move || model.directions(top))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(dirs).into_response())
}

async fn config(State(state): State<ServiceState>) -> Response {
    Json(&state.model.config).into_response()
}

async fn health(State(state): State<ServiceState>) -> Response {
    Json(serde_json::json!({"status": "ok", "checkpoint_hash": &*state.checkpoint_hash})).into_response()
}
