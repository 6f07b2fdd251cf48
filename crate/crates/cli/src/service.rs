//! JSON-over-HTTP inference and editing service over a frozen checkpoint.
//!
//! Images travel as base64 PNG, feature vectors as number arrays. Every
//! response body carries the checkpoint hash under `"checkpoint"`.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use d2ae_core::analytics::ProbeModel;
use d2ae_core::autodiff::Tensor;
use d2ae_core::data;
use d2ae_core::editing::{self, AttributeEdit, EditRequest, IdentityTarget};
use d2ae_core::model::{Branch, D2AEModel, FeaturePair};

#[derive(Debug, Clone, Serialize)]
pub struct AttributeInfo {
    pub name: String,
    pub branch: Branch,
    pub alpha_max: f64,
    pub accuracy: f64,
}

/// Immutable state shared by all requests.
pub struct Service {
    model: D2AEModel<f32>,
    probes: ProbeModel,
    hash: String,
    attributes: Vec<AttributeInfo>,
    gallery: Vec<String>,
}

impl Service {
    /// `hash` identifies the checkpoint file; `gallery` holds sample images.
    pub fn new(model: D2AEModel<f32>, probes: ProbeModel, hash: String, gallery: &[Tensor<f32>]) -> d2ae_core::Result<Self> {
        let mut attributes = Vec::new();
        for e in &probes.entries {
            // concatenated-feature probes cannot drive edits
            let Some(branch) = e.branch else { continue };
            attributes.push(AttributeInfo {
                name: e.attribute.clone(),
                branch,
                alpha_max: editing::alpha_max(&model, e)?,
                accuracy: e.accuracy,
            });
        }
        let gallery = gallery
            .iter()
            .map(|t| data::encode_png(t).map(|b| STANDARD.encode(b)))
            .collect::<d2ae_core::Result<Vec<_>>>()?;
        Ok(Self {
            model,
            probes,
            hash,
            attributes,
            gallery,
        })
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    fn image_in(&self, b64: &str, field: &str) -> Result<Tensor<f32>, ApiError> {
        let bytes = STANDARD
            .decode(b64.trim())
            .map_err(|e| ApiError::BadRequest(format!("{field}: invalid base64: {e}")))?;
        data::decode_png_exact(&bytes, self.model.config().input_size).map_err(|e| ApiError::BadRequest(format!("{field}: {e}")))
    }

    fn image_out(&self, t: &Tensor<f32>) -> Result<String, ApiError> {
        Ok(STANDARD.encode(data::encode_png(t)?))
    }

    fn encode(&self, b64: &str, field: &str) -> Result<FeaturePair<f32>, ApiError> {
        Ok(self.model.encode(&self.image_in(b64, field)?)?)
    }

    fn check_beta(beta: f64) -> Result<(), ApiError> {
        if (0.0..=1.0).contains(&beta) {
            Ok(())
        } else {
            Err(ApiError::Unprocessable(format!("beta must lie in [0, 1], got {beta}")))
        }
    }

    fn respond(&self, r: Result<Value, ApiError>) -> Response {
        match r {
            Ok(mut v) => {
                v["checkpoint"] = Value::String(self.hash.clone());
                Json(v).into_response()
            }
            Err(ApiError::BadRequest(msg)) => self.error(StatusCode::BAD_REQUEST, json!({ "error": msg })),
            Err(ApiError::Unprocessable(msg)) => self.error(StatusCode::UNPROCESSABLE_ENTITY, json!({ "error": msg })),
            Err(ApiError::Internal(msg)) => {
                let id = uuid::Uuid::new_v4().to_string();
                log::error!("request {id} failed: {msg}");
                self.error(StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": "internal error", "id": id }))
            }
        }
    }

    fn error(&self, status: StatusCode, mut body: Value) -> Response {
        body["checkpoint"] = Value::String(self.hash.clone());
        (status, Json(body)).into_response()
    }
}

#[derive(Debug)]
enum ApiError {
    BadRequest(String),
    Unprocessable(String),
    Internal(String),
}

impl From<d2ae_core::Error> for ApiError {
    fn from(e: d2ae_core::Error) -> Self {
        ApiError::Internal(e.to_string())
    }
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("malformed payload: {e}")))
}

#[derive(Deserialize)]
struct EncodeBody {
    image: String,
}

#[derive(Deserialize)]
struct DecodeBody {
    f_t: Vec<f32>,
    f_p: Vec<f32>,
}

#[derive(Deserialize)]
struct EditItem {
    attr: String,
    alpha: f64,
}

#[derive(Deserialize)]
struct IdentityBody {
    image_b: String,
    beta: f64,
}

#[derive(Deserialize)]
struct EditBody {
    image: String,
    #[serde(default)]
    edits: Vec<EditItem>,
    identity: Option<IdentityBody>,
}

#[derive(Deserialize)]
struct InterpolateBody {
    image_a: String,
    image_b: String,
    beta: f64,
}

type Shared = Arc<Service>;

/// Runs `f` on the blocking pool and wraps the outcome.
async fn run<F>(svc: Shared, f: F) -> Response
where
    F: FnOnce(&Service) -> Result<Value, ApiError> + Send + 'static,
{
    let s = svc.clone();
    let out = tokio::task::spawn_blocking(move || f(&s))
        .await
        .unwrap_or_else(|e| Err(ApiError::Internal(format!("worker failed: {e}"))));
    svc.respond(out)
}

async fn model_info(State(svc): State<Shared>) -> Response {
    let c = svc.model.config();
    let v = json!({
        "dims": { "f_t": c.feat_dim_t, "f_p": c.feat_dim_p, "image": [3, c.input_size, c.input_size] },
        "n_id": c.n_id,
        "attributes": svc.attributes,
    });
    svc.respond(Ok(v))
}

async fn encode(State(svc): State<Shared>, body: Bytes) -> Response {
    run(svc, move |s| {
        let req: EncodeBody = parse(&body)?;
        let fp = s.encode(&req.image, "image")?;
        Ok(json!({ "f_t": fp.f_t, "f_p": fp.f_p }))
    })
    .await
}

async fn decode(State(svc): State<Shared>, body: Bytes) -> Response {
    run(svc, move |s| {
        let req: DecodeBody = parse(&body)?;
        let c = s.model.config();
        if req.f_t.len() != c.feat_dim_t || req.f_p.len() != c.feat_dim_p {
            return Err(ApiError::BadRequest(format!(
                "expected f_t of length {} and f_p of length {}, got {} and {}",
                c.feat_dim_t,
                c.feat_dim_p,
                req.f_t.len(),
                req.f_p.len()
            )));
        }
        if req.f_t.iter().chain(&req.f_p).any(|v| !v.is_finite()) {
            return Err(ApiError::BadRequest("feature values must be finite".into()));
        }
        let img = s.model.decode(&FeaturePair::new(req.f_t, req.f_p))?;
        Ok(json!({ "image": s.image_out(&img)? }))
    })
    .await
}

async fn edit(State(svc): State<Shared>, body: Bytes) -> Response {
    run(svc, move |s| {
        let req: EditBody = parse(&body)?;
        for e in &req.edits {
            if s.probes.get(&e.attr).is_none() || !s.attributes.iter().any(|a| a.name == e.attr) {
                return Err(ApiError::Unprocessable(format!("unknown attribute '{}'", e.attr)));
            }
            if !e.alpha.is_finite() {
                return Err(ApiError::Unprocessable(format!("alpha for '{}' is not finite", e.attr)));
            }
        }
        if let Some(id) = &req.identity {
            Service::check_beta(id.beta)?;
        }
        let image = s.image_in(&req.image, "image")?;
        let identity = match &req.identity {
            Some(id) => Some(IdentityTarget {
                f_t: s.encode(&id.image_b, "identity.image_b")?.f_t,
                beta: id.beta,
            }),
            None => None,
        };
        let request = EditRequest {
            edits: req
                .edits
                .into_iter()
                .map(|e| AttributeEdit {
                    attribute: e.attr,
                    alpha: e.alpha,
                })
                .collect(),
            identity,
        };
        let (img, provenance) = editing::render_edit(&s.model, &s.probes, &image, &request)?;
        Ok(json!({ "image": s.image_out(&img)?, "provenance": provenance }))
    })
    .await
}

async fn interpolate(State(svc): State<Shared>, body: Bytes) -> Response {
    run(svc, move |s| {
        let req: InterpolateBody = parse(&body)?;
        Service::check_beta(req.beta)?;
        let a = s.encode(&req.image_a, "image_a")?;
        let b = s.encode(&req.image_b, "image_b")?;
        let fp = editing::identity_interpolate(&a, &b.f_t, req.beta)?;
        Ok(json!({ "image": s.image_out(&s.model.decode(&fp)?)? }))
    })
    .await
}

async fn gallery(State(svc): State<Shared>) -> Response {
    let v = json!({ "images": svc.gallery });
    svc.respond(Ok(v))
}

pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/model/info", get(model_info))
        .route("/encode", post(encode))
        .route("/decode", post(decode))
        .route("/edit", post(edit))
        .route("/interpolate", post(interpolate))
        .route("/gallery", get(gallery))
        .with_state(svc)
}

/// Serves until ctrl-c.
pub async fn serve(svc: Arc<Service>, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(svc))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
