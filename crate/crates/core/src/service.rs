//! HTTP inference service: checkpoint loading, top-k classification,
//! latency benchmarking and the species info cards.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path as UrlPath, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::ParamCounts;
use crate::data::{decode_image, resize_bilinear};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::{load_checkpoint, Checkpoint, CheckpointError};

pub const DEFAULT_TOP_K: usize = 3;
pub const DEFAULT_BENCH_RUNS: usize = 100;
pub const DEFAULT_BENCH_WARMUP: usize = 10;
pub const MAX_BENCH_RUNS: usize = 10_000;
pub const MAX_UPLOAD_BYTES: usize = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("cannot load checkpoint: {0}")]
    Load(#[from] CheckpointError),
    #[error("image could not be decoded: {0}")]
    Decode(String),
    #[error("request body is empty")]
    EmptyBody,
    #[error("k must be between 1 and {classes}, got {k}")]
    TopK { k: usize, classes: usize },
    #[error("invalid query parameter {name}: {message}")]
    Query { name: String, message: String },
    #[error("bad request body: {0}")]
    Body(String),
    #[error("inference failed: {0}")]
    Inference(String),
    #[error("no route for {0}")]
    NotFound(String),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Load(_) => "load_failed",
            ServiceError::Decode(_) => "invalid_image",
            ServiceError::EmptyBody => "empty_body",
            ServiceError::TopK { .. } => "invalid_k",
            ServiceError::Query { .. } => "invalid_query",
            ServiceError::Body(_) => "invalid_body",
            ServiceError::Inference(_) => "inference_failed",
            ServiceError::NotFound(_) => "not_found",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::Load(_) | ServiceError::Inference(_) => StatusCode::INTERNAL_SERVER_ERROR,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            _ => StatusCode::BAD_REQUEST,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code().to_string(),
            message: self.to_string(),
        };
        (self.status(), Json(body)).into_response()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassScore {
    pub class: String,
    pub probability: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassifyResponse {
    pub model: String,
    pub top_k: Vec<ClassScore>,
    /// Forward pass only; decoding and resizing are excluded.
    pub latency_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BenchReport {
    pub device: String,
    pub runs: usize,
    pub warmup: usize,
    pub avg_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

impl BenchReport {
    pub fn from_timings(device: String, warmup: usize, timings: &[f64]) -> Self {
        let mut sorted = timings.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let rank = |q: f64| sorted[((q * n as f64).ceil() as usize).clamp(1, n) - 1];
        BenchReport {
            device,
            runs: n,
            warmup,
            avg_ms: sorted.iter().sum::<f64>() / n as f64,
            p50_ms: rank(0.5),
            p95_ms: rank(0.95),
            min_ms: sorted[0],
            max_ms: sorted[n - 1],
        }
    }

    /// Device / average pairing plus the spread.
    pub fn render(&self, model: &str) -> String {
        format!(
            "Model: {model}\nDevice: {}\nAvg. Execute Time (ms): {:.2}\np50 (ms): {:.2}\np95 (ms): {:.2}\nmin/max (ms): {:.2}/{:.2}\nruns: {} (warmup {})\n",
            self.device, self.avg_ms, self.p50_ms, self.p95_ms, self.min_ms, self.max_ms, self.runs, self.warmup
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelInfo {
    pub architecture: String,
    pub head: String,
    pub input_size: [usize; 3],
    pub num_classes: usize,
    pub layers: usize,
    pub frozen_nodes: usize,
    pub parameters: ParamCounts,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SpeciesCard {
    pub name: String,
    pub description: String,
    pub fallback: bool,
}

#[derive(Deserialize)]
struct SpeciesDoc {
    fallback: String,
    species: Vec<SpeciesEntry>,
}

#[derive(Deserialize)]
struct SpeciesEntry {
    name: String,
    description: String,
}

fn species_doc() -> &'static SpeciesDoc {
    static DOC: OnceLock<SpeciesDoc> = OnceLock::new();
    DOC.get_or_init(|| serde_json::from_str(include_str!("../assets/species.json")).expect("bundled species document parses"))
}

fn species_key(name: &str) -> String {
    name.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Info card for a class name; lookup ignores case and separators, and
/// unknown names get a generic card.
pub fn species_card(name: &str) -> SpeciesCard {
    let doc = species_doc();
    let key = species_key(name);
    match doc.species.iter().find(|s| species_key(&s.name) == key) {
        Some(s) => SpeciesCard {
            name: s.name.clone(),
            description: s.description.clone(),
            fallback: false,
        },
        None => SpeciesCard {
            name: name.to_string(),
            description: doc.fallback.clone(),
            fallback: true,
        },
    }
}

pub fn known_species() -> Vec<String> {
    species_doc().species.iter().map(|s| s.name.clone()).collect()
}

fn device_label() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{}-{} ({threads} threads)", std::env::consts::OS, std::env::consts::ARCH)
}

/// A loaded checkpoint. Weights are never mutated after construction.
#[derive(Debug)]
pub struct ModelHandle {
    ckpt: Checkpoint,
    bench_lock: Mutex<()>,
}

/// Loads and re-verifies a checkpoint.
pub fn load_model(path: impl AsRef<Path>) -> Result<ModelHandle, ServiceError> {
    Ok(ModelHandle::new(load_checkpoint(path)?))
}

impl ModelHandle {
    pub fn new(ckpt: Checkpoint) -> Self {
        ModelHandle {
            ckpt,
            bench_lock: Mutex::new(()),
        }
    }

    pub fn name(&self) -> &str {
        &self.ckpt.model.descriptor().name
    }

    pub fn class_names(&self) -> &[String] {
        &self.ckpt.class_names
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.ckpt
    }

    pub fn info(&self) -> ModelInfo {
        let desc = self.ckpt.model.descriptor();
        ModelInfo {
            architecture: desc.name.clone(),
            head: desc.head.as_str().to_string(),
            input_size: desc.input_shape,
            num_classes: desc.num_classes,
            layers: desc.count_layers(),
            frozen_nodes: self.ckpt.model.freeze_plan().frozen_nodes,
            parameters: self.ckpt.model.param_counts(),
        }
    }

    /// Decodes and resizes encoded image bytes to the model input.
    pub fn preprocess(&self, bytes: &[u8]) -> Result<Tensor<f32>, ServiceError> {
        if bytes.is_empty() {
            return Err(ServiceError::EmptyBody);
        }
        let pre = &self.ckpt.preprocessing;
        let img = decode_image(bytes).map_err(|e| ServiceError::Decode(e.to_string()))?;
        let [h, w] = pre.image_size;
        let mut img = resize_bilinear(&img, (h, w)).map_err(|e| ServiceError::Decode(e.to_string()))?;
        // Decoding already maps to [0, 1].
        let rescale = (pre.scale * 255.0) as f32;
        if rescale != 1.0 {
            img.data_mut().iter_mut().for_each(|v| *v *= rescale);
        }
        img.reshape(&[1, h, w, 3]).map_err(|e| ServiceError::Inference(e.to_string()))
    }

    /// Full class distribution for one preprocessed input, with the
    /// forward-pass time in milliseconds.
    pub fn predict(&self, input: &Tensor<f32>) -> Result<(Vec<f64>, f64), ServiceError> {
        let start = Instant::now();
        let probs = self
            .ckpt
            .model
            .infer(input)
            .map_err(|e| ServiceError::Inference(e.to_string()))?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        Ok((probs.data().iter().map(|&p| p as f64).collect(), ms))
    }

    pub fn classify(&self, bytes: &[u8], k: usize) -> Result<ClassifyResponse, ServiceError> {
        let classes = self.ckpt.class_names.len();
        if k == 0 || k > classes {
            return Err(ServiceError::TopK { k, classes });
        }
        let input = self.preprocess(bytes)?;
        let (probs, latency_ms) = self.predict(&input)?;
        Ok(ClassifyResponse {
            model: self.name().to_string(),
            top_k: top_k(&probs, k)
                .into_iter()
                .map(|i| ClassScore {
                    class: self.ckpt.class_names[i].clone(),
                    probability: probs[i],
                })
                .collect(),
            latency_ms,
        })
    }

    /// Times `runs` forward passes on a fixed random input after `warmup`
    /// untimed ones. Concurrent calls run one after another.
    pub fn benchmark(&self, runs: usize, warmup: usize) -> Result<BenchReport, ServiceError> {
        if runs == 0 || runs > MAX_BENCH_RUNS {
            return Err(ServiceError::Query {
                name: "runs".into(),
                message: format!("must be between 1 and {MAX_BENCH_RUNS}"),
            });
        }
        if warmup > MAX_BENCH_RUNS {
            return Err(ServiceError::Query {
                name: "warmup".into(),
                message: format!("must be at most {MAX_BENCH_RUNS}"),
            });
        }
        let _guard = self.bench_lock.lock().unwrap_or_else(|p| p.into_inner());
        let [h, w, c] = self.ckpt.model.descriptor().input_shape;
        let mut rng = Rng::new(0);
        let input = Tensor::from_fn(&[1, h, w, c], |_| rng.uniform() as f32)
            .map_err(|e| ServiceError::Inference(e.to_string()))?;
        for _ in 0..warmup {
            self.predict(&input)?;
        }
        let timings = (0..runs)
            .map(|_| self.predict(&input).map(|(_, ms)| ms))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(BenchReport::from_timings(device_label(), warmup, &timings))
    }
}

/// Indices of the `k` largest values, descending; ties go to the lower index.
pub fn top_k(probs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

type AppState = Arc<ModelHandle>;

pub fn router(handle: Arc<ModelHandle>) -> Router {
    Router::new()
        .route("/classify", post(classify_handler))
        .route("/classes", get(classes_handler))
        .route("/species/{name}", get(species_handler))
        .route("/model/info", get(info_handler))
        .route("/bench", get(bench_handler))
        .route("/healthz", get(health_handler))
        .fallback(|req: Request| async move { ServiceError::NotFound(format!("{} {}", req.method(), req.uri().path())) })
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(handle)
}

fn query_usize(q: &HashMap<String, String>, name: &str, default: usize) -> Result<usize, ServiceError> {
    match q.get(name) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|_| ServiceError::Query {
            name: name.to_string(),
            message: format!("expected a non-negative integer, got {v:?}"),
        }),
    }
}

async fn upload_bytes(state: &AppState, req: Request) -> Result<Bytes, ServiceError> {
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    if !is_multipart {
        return Bytes::from_request(req, state)
            .await
            .map_err(|e| ServiceError::Body(e.body_text()));
    }
    let mut form = Multipart::from_request(req, state)
        .await
        .map_err(|e| ServiceError::Body(e.body_text()))?;
    while let Some(field) = form.next_field().await.map_err(|e| ServiceError::Body(e.body_text()))? {
        let is_file = field.file_name().is_some() || matches!(field.name(), Some("image" | "file"));
        let data = field.bytes().await.map_err(|e| ServiceError::Body(e.body_text()))?;
        if is_file {
            return Ok(data);
        }
    }
    Err(ServiceError::Body("multipart form has no image field".into()))
}

async fn classify_handler(
    State(state): State<AppState>,
    Query(q): Query<HashMap<String, String>>,
    req: Request,
) -> Result<Json<ClassifyResponse>, ServiceError> {
    let k = query_usize(&q, "k", DEFAULT_TOP_K)?;
    let bytes = upload_bytes(&state, req).await?;
    let handle = state.clone();
    let resp = tokio::task::spawn_blocking(move || handle.classify(&bytes, k))
        .await
        .map_err(|e| ServiceError::Inference(e.to_string()))??;
    log::debug!("classified in {:.2} ms", resp.latency_ms);
    Ok(Json(resp))
}

async fn classes_handler(State(state): State<AppState>) -> Json<Vec<String>> {
    Json(state.class_names().to_vec())
}

async fn species_handler(UrlPath(name): UrlPath<String>) -> Json<SpeciesCard> {
    Json(species_card(&name))
}

async fn info_handler(State(state): State<AppState>) -> Json<ModelInfo> {
    Json(state.info())
}

async fn bench_handler(
    State(state): State<AppState>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Json<BenchReport>, ServiceError> {
    let runs = query_usize(&q, "runs", DEFAULT_BENCH_RUNS)?;
    let warmup = query_usize(&q, "warmup", DEFAULT_BENCH_WARMUP)?;
    let handle = state.clone();
    let report = tokio::task::spawn_blocking(move || handle.benchmark(runs, warmup))
        .await
        .map_err(|e| ServiceError::Inference(e.to_string()))??;
    Ok(Json(report))
}

async fn health_handler() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

/// Serves until ctrl-c.
pub async fn serve(handle: ModelHandle, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("serving {} on http://{}", handle.name(), listener.local_addr()?);
    axum::serve(listener, router(Arc::new(handle)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_breaks_ties_by_lowest_index() {
        assert_eq!(top_k(&[0.2, 0.4, 0.4, 0.0], 3), vec![1, 2, 0]);
        assert_eq!(top_k(&[0.25; 4], 4), vec![0, 1, 2, 3]);
    }

    #[test]
    fn percentiles_use_nearest_rank() {
        let timings: Vec<f64> = (1..=100).map(f64::from).collect();
        let r = BenchReport::from_timings("d".into(), 0, &timings);
        assert_eq!((r.p50_ms, r.p95_ms, r.min_ms, r.max_ms), (50.0, 95.0, 1.0, 100.0));
        assert!((r.avg_ms - 50.5).abs() < 1e-12);
        let one = BenchReport::from_timings("d".into(), 0, &[3.0]);
        assert_eq!((one.p50_ms, one.p95_ms), (3.0, 3.0));
    }

    #[test]
    fn species_lookup_ignores_case_and_separators() {
        assert_eq!(known_species().len(), 16);
        let card = species_card("black_eyed_susan");
        assert_eq!(card.name, "Black-eyed Susan");
        assert!(!card.fallback);
        assert!(!species_card("WATER LILY").fallback);
        let unknown = species_card("class_03");
        assert!(unknown.fallback);
        assert_eq!(unknown.name, "class_03");
    }

    #[test]
    fn errors_carry_codes_and_statuses() {
        let e = ServiceError::TopK { k: 9, classes: 4 };
        assert_eq!(e.code(), "invalid_k");
        assert_eq!(e.status(), StatusCode::BAD_REQUEST);
        assert_eq!(ServiceError::NotFound("x".into()).status(), StatusCode::NOT_FOUND);
    }
}
