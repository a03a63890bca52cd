//! Review service: HTTP/JSON access to the review queue of one KB.
//!
//! Every `/api` route needs `Authorization: Bearer <token>`; every JSON
//! response carries `format_version`.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Body;
use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::services::ServeDir;

use visknow_core::persistence::{load_kb, read_meta, save_kb_with};
use visknow_core::pipeline::{KbLock, KbPaths};
use visknow_core::review::{apply_decisions, Decision, ItemKind, ReviewQueue};
use visknow_core::{Error, ImageId, KnowledgeGraph, MediaManifest, FORMAT_VERSION};

pub const DEFAULT_PAGE_SIZE: usize = 50;
pub const MAX_HOPS: usize = 4;

pub struct AppState {
    kb_dir: PathBuf,
    token: String,
    queue: Mutex<ReviewQueue>,
    kb: RwLock<(KnowledgeGraph, MediaManifest)>,
}

impl AppState {
    pub fn open(kb_dir: &Path, token: impl Into<String>) -> visknow_core::Result<Arc<Self>> {
        let token = token.into();
        if token.is_empty() {
            return Err(Error::InvalidConfig("the review token must not be empty".into()));
        }
        let kb = load_kb(kb_dir)?;
        let queue = ReviewQueue::open(&KbPaths::new(kb_dir.to_path_buf()).review())?;
        Ok(Arc::new(Self {
            kb_dir: kb_dir.to_path_buf(),
            token,
            queue: Mutex::new(queue),
            kb: RwLock::new(kb),
        }))
    }
}

/// Error body: `{format_version, error, kind}`.
pub struct ApiError(StatusCode, String, &'static str);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "format_version": FORMAT_VERSION, "error": self.1, "kind": self.2 });
        (self.0, Json(body)).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, kind) = match &e {
            Error::UnknownItem(_) => (StatusCode::NOT_FOUND, "unknown_item"),
            Error::UnknownCategory(_) | Error::UnknownRoot(_) => (StatusCode::NOT_FOUND, "unknown_category"),
            Error::AlreadyDecided(_) => (StatusCode::CONFLICT, "already_decided"),
            Error::InvalidEdit(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_edit"),
            Error::InvalidConfig(_) => (StatusCode::BAD_REQUEST, "invalid_request"),
            Error::ConstraintViolation(_) => (StatusCode::CONFLICT, "conflict"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError(status, e.to_string(), kind)
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

fn with_version(mut v: Value) -> Json<Value> {
    if let Some(map) = v.as_object_mut() {
        map.insert("format_version".into(), json!(FORMAT_VERSION));
    }
    Json(v)
}

async fn auth(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let ok = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|h| h.to_str().ok())
        .and_then(|h| h.strip_prefix("Bearer "))
        .is_some_and(|t| t == state.token);
    if ok {
        next.run(req).await
    } else {
        ApiError(StatusCode::UNAUTHORIZED, "missing or wrong bearer token".into(), "unauthorized").into_response()
    }
}

#[derive(Deserialize)]
struct ListParams {
    kind: Option<String>,
    #[serde(default)]
    page: usize,
    page_size: Option<usize>,
}

async fn list_review(State(state): State<Arc<AppState>>, Query(p): Query<ListParams>) -> ApiResult {
    let kind = p.kind.as_deref().filter(|k| !k.is_empty()).map(ItemKind::parse).transpose()?;
    let queue = state.queue.lock().expect("queue lock");
    let page = queue.list_pending(kind, p.page, p.page_size.unwrap_or(DEFAULT_PAGE_SIZE))?;
    Ok(with_version(json!({
        "items": page.items,
        "total": page.total,
        "page": page.page,
        "page_size": page.page_size,
        "pending": queue.pending_count(None),
    })))
}

#[derive(Deserialize)]
struct DecisionBody {
    #[serde(flatten)]
    decision: Decision,
    reviewer: String,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

async fn decide(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<u64>, body: Result<Json<DecisionBody>, axum::extract::rejection::JsonRejection>) -> ApiResult {
    let Json(body) = body.map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.body_text(), "invalid_request"))?;
    if body.reviewer.trim().is_empty() {
        return Err(ApiError(StatusCode::BAD_REQUEST, "reviewer must not be empty".into(), "invalid_request"));
    }
    let mut queue = state.queue.lock().expect("queue lock");
    let item = queue.record_decision(id, body.decision, body.reviewer.trim(), now())?.clone();
    Ok(with_version(json!({ "item": item, "pending": queue.pending_count(None) })))
}

async fn apply(State(state): State<Arc<AppState>>) -> ApiResult {
    let worker = state.clone();
    tokio::task::spawn_blocking(move || -> Result<Value, Error> {
        let _lock = KbLock::acquire(&worker.kb_dir)?;
        let queue = worker.queue.lock().expect("queue lock");
        let mut kb = worker.kb.write().expect("kb lock");
        let report = apply_decisions(&mut kb.0, &queue)?;
        let producer = read_meta(&worker.kb_dir)?.producer;
        let checksum = save_kb_with(&kb.0, &kb.1, &worker.kb_dir, producer)?;
        Ok(json!({ "report": report, "changes": report.changes(), "checksum": checksum }))
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), "internal"))?
    .map(with_version)
    .map_err(ApiError::from)
}

#[derive(Deserialize)]
struct HopParams {
    hops: Option<usize>,
}

#[derive(Serialize)]
struct EntityView<'a> {
    id: &'a str,
    label: &'a str,
    kind: visknow_core::Kind,
    groundings: usize,
}

async fn subgraph(State(state): State<Arc<AppState>>, UrlPath(label): UrlPath<String>, Query(p): Query<HopParams>) -> ApiResult {
    let hops = p.hops.unwrap_or(1);
    if hops > MAX_HOPS {
        return Err(ApiError(StatusCode::BAD_REQUEST, format!("hops must be at most {MAX_HOPS}"), "invalid_request"));
    }
    let kb = state.kb.read().expect("kb lock");
    let graph = &kb.0;
    let root = graph
        .root_for(&label)
        .ok_or_else(|| Error::UnknownCategory(label.clone()))?;
    let sub = graph.category_subgraph(root, hops)?;
    let entities: Vec<EntityView> = sub
        .entities
        .iter()
        .filter_map(|id| graph.entity(id))
        .map(|e| EntityView {
            id: e.id.as_str(),
            label: &e.label,
            kind: e.kind,
            groundings: e.groundings.len(),
        })
        .collect();
    let triplets: Vec<Value> = sub
        .triplets
        .iter()
        .filter_map(|id| graph.triplet(id))
        .map(|t| {
            let name = |id: &visknow_core::EntityId| graph.entity(id).map(|e| e.label.clone()).unwrap_or_default();
            json!({
                "id": t.id,
                "head": name(&t.head),
                "relation": graph.relation(&t.relation).map(|r| r.label.clone()).unwrap_or_default(),
                "tail": name(&t.tail),
                "provenance": t.provenance,
                "groundings": t.groundings.len(),
            })
        })
        .collect();
    Ok(with_version(json!({ "category": label, "hops": hops, "entities": entities, "triplets": triplets })))
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "application/octet-stream",
    }
}

/// Streams the local file behind a manifest entry. Relative URIs resolve
/// against the KB directory; remote URIs are not proxied.
async fn image(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let uri = {
        let kb = state.kb.read().expect("kb lock");
        kb.1.get(&ImageId::new(id.clone()))
            .map(|e| e.uri.clone())
            .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown image `{id}`"), "unknown_image"))?
    };
    if uri.contains("://") {
        return Err(ApiError(StatusCode::NOT_FOUND, format!("image `{id}` is remote ({uri})"), "remote_image"));
    }
    let path = state.kb_dir.join(&uri);
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError(StatusCode::NOT_FOUND, format!("{}: {e}", path.display()), "missing_file"))?;
    Ok(([(header::CONTENT_TYPE, content_type(&path))], Body::from(bytes)).into_response())
}

async fn not_found() -> ApiError {
    ApiError(StatusCode::NOT_FOUND, "no such route".into(), "not_found")
}

/// The service router. `static_dir`, when given, is served at `/`.
pub fn router(state: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/review", get(list_review))
        .route("/review/{id}/decision", post(decide))
        .route("/apply", post(apply))
        .route("/categories/{label}/subgraph", get(subgraph))
        .route("/images/{id}", get(image))
        .fallback(not_found)
        .route_layer(middleware::from_fn_with_state(state.clone(), auth))
        .with_state(state);
    let app = Router::new().nest("/api", api);
    match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app.fallback(|| async {
            (StatusCode::NOT_FOUND, "review UI bundle not configured (pass --static-dir)")
        }),
    }
}

pub async fn serve(state: Arc<AppState>, addr: &str, static_dir: Option<&Path>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("review service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state, static_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
