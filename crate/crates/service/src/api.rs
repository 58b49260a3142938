//! HTTP routes. Bodies are parsed by hand so that malformed input maps to
//! 400 with a message rather than axum's default rejections.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::broadcast::error::RecvError;

use blend_core::blender::BlendRequest;
use blend_core::model::{BlendDecision, Plan, TimeWindow};

use crate::live::set_mode;
use crate::state::{Mode, PlanOverride, ServiceError, ServiceState};

pub const OPENAPI: &str = include_str!("../openapi.yaml");

type AppState = State<Arc<ServiceState>>;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict { .. } => StatusCode::CONFLICT,
            ServiceError::TooEarly(_) => StatusCode::TOO_EARLY,
            ServiceError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut body = json!({ "error": self.to_string() });
        if let ServiceError::Conflict { current, .. } = &self {
            body["current_version"] = json!(current);
        }
        (status, Json(body)).into_response()
    }
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ServiceError> {
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(format!("invalid body: {e}")))
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/blend", post(blend))
        .route("/plans", get(get_plans).put(put_plans))
        .route("/plans/versions/{version}", get(get_version))
        .route("/plans/{id}", get(get_plan).put(put_plan).delete(delete_plan))
        .route("/alignment", get(get_alignment))
        .route("/reports/plans", get(reports))
        .route("/metrics/latest", get(latest))
        .route("/metrics/stream", get(stream))
        .route("/whatif", post(whatif))
        .route("/mode", get(get_mode).put(put_mode))
        .route("/openapi.yaml", get(openapi))
        .with_state(state)
}

async fn healthz(State(s): AppState) -> Json<Value> {
    let snap = s.snapshot();
    Json(json!({
        "status": "ok",
        "mode": s.mode(),
        "registry_version": snap.registry.version(),
        "requests": s.requests(),
        "closed_until": s.closed_until(),
    }))
}

async fn blend(State(s): AppState, body: Bytes) -> Result<Json<BlendDecision>, ServiceError> {
    let req: BlendRequest = parse(&body)?;
    Ok(Json(s.blend(req)?))
}

async fn get_plans(State(s): AppState) -> Response {
    Json(s.snapshot().registry.as_ref().clone()).into_response()
}

#[derive(Debug, Default, Deserialize)]
struct VersionQuery {
    expected_version: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlansBody {
    plans: Vec<Plan>,
    #[serde(default)]
    expected_version: Option<u64>,
}

async fn put_plans(
    State(s): AppState,
    Query(q): Query<VersionQuery>,
    body: Bytes,
) -> Result<Response, ServiceError> {
    let b: PlansBody = parse(&body)?;
    let next = s.replace_plans(b.plans, b.expected_version.or(q.expected_version))?;
    Ok(Json(next.as_ref().clone()).into_response())
}

async fn get_version(State(s): AppState, Path(version): Path<u64>) -> Result<Response, ServiceError> {
    let r = s
        .registry_at(version)
        .ok_or_else(|| ServiceError::NotFound(format!("no registry version {version}")))?;
    Ok(Json(r.as_ref().clone()).into_response())
}

async fn get_plan(State(s): AppState, Path(id): Path<String>) -> Result<Json<Plan>, ServiceError> {
    s.snapshot()
        .registry
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ServiceError::NotFound(format!("unknown plan {id:?}")))
}

#[derive(Debug, Serialize)]
struct PlanWrite {
    version: u64,
    plan: Option<Plan>,
}

async fn put_plan(
    State(s): AppState,
    Path(id): Path<String>,
    Query(q): Query<VersionQuery>,
    body: Bytes,
) -> Result<Json<PlanWrite>, ServiceError> {
    let mut doc: Value = parse(&body)?;
    let obj = doc
        .as_object_mut()
        .ok_or_else(|| ServiceError::BadRequest("plan body must be an object".into()))?;
    let expected = match obj.remove("expected_version") {
        None | Some(Value::Null) => q.expected_version,
        Some(v) => Some(
            v.as_u64()
                .ok_or_else(|| ServiceError::BadRequest("expected_version must be an integer".into()))?,
        ),
    };
    match obj.get("plan_id") {
        None => {
            obj.insert("plan_id".into(), Value::String(id.clone()));
        }
        Some(Value::String(p)) if *p == id => {}
        Some(_) => return Err(ServiceError::BadRequest("plan_id does not match the path".into())),
    }
    let plan: Plan = serde_json::from_value(doc).map_err(|e| ServiceError::BadRequest(format!("invalid plan: {e}")))?;
    let next = s.upsert_plan(plan, expected)?;
    Ok(Json(PlanWrite {
        version: next.version(),
        plan: next.get(&id).cloned(),
    }))
}

async fn delete_plan(
    State(s): AppState,
    Path(id): Path<String>,
    Query(q): Query<VersionQuery>,
) -> Result<Json<PlanWrite>, ServiceError> {
    let next = s.delete_plan(&id, q.expected_version)?;
    Ok(Json(PlanWrite {
        version: next.version(),
        plan: None,
    }))
}

async fn get_alignment(State(s): AppState) -> Response {
    Json(s.snapshot().alignment.as_ref().clone()).into_response()
}

#[derive(Debug, Deserialize)]
struct WindowQuery {
    window: String,
}

/// `window=<id>` selects a tracking window; `window=<start>-<end>` a
/// timestamp range.
pub fn parse_window(spec: &str, window_len: u64) -> Result<TimeWindow, ServiceError> {
    let bad = || ServiceError::BadRequest(format!("invalid window {spec:?}"));
    match spec.split_once('-') {
        Some((a, b)) => {
            let start: u64 = a.trim().parse().map_err(|_| bad())?;
            let end: u64 = b.trim().parse().map_err(|_| bad())?;
            if end <= start {
                return Err(bad());
            }
            Ok(TimeWindow::new(start, end))
        }
        None => {
            let id: u64 = spec.trim().parse().map_err(|_| bad())?;
            id.checked_mul(window_len).ok_or_else(bad)?;
            Ok(TimeWindow::nth(id, window_len))
        }
    }
}

async fn reports(State(s): AppState, Query(q): Query<WindowQuery>) -> Result<Response, ServiceError> {
    let window = parse_window(&q.window, s.tracker().config().window_len)?;
    let state = s.clone();
    let reports = tokio::task::spawn_blocking(move || state.reports(window))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))??;
    Ok(Json(json!({
        "schema_version": blend_core::sim::SCHEMA_VERSION,
        "window": window,
        "reports": reports,
    }))
    .into_response())
}

async fn latest(State(s): AppState) -> Result<Response, ServiceError> {
    s.latest_tick()
        .map(|m| Json(m.as_ref().clone()).into_response())
        .ok_or_else(|| ServiceError::NotFound("no window has closed yet".into()))
}

async fn stream(State(s): AppState) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let snap = s.snapshot();
    let hello = Event::default()
        .event("snapshot")
        .json_data(json!({
            "registry": snap.registry.as_ref(),
            "alignment": snap.alignment.as_ref(),
            "mode": s.mode(),
            "latest": s.latest_tick().as_deref(),
        }))
        .expect("serializable snapshot");
    let rx = s.subscribe();
    let ticks = stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(msg) => {
                    let ev = Event::default()
                        .event("tick")
                        .id(msg.window_id.to_string())
                        .json_data(msg.as_ref())
                        .expect("serializable tick");
                    return Some((Ok(ev), rx));
                }
                Err(RecvError::Lagged(n)) => {
                    let ev = Event::default().event("lagged").data(n.to_string());
                    return Some((Ok(ev), rx));
                }
                Err(RecvError::Closed) => return None,
            }
        }
    });
    Sse::new(stream::once(async move { Ok(hello) }).chain(ticks)).keep_alive(KeepAlive::default())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WhatIfBody {
    request: BlendRequest,
    #[serde(default)]
    overrides: BTreeMap<String, PlanOverride>,
}

#[derive(Debug, Serialize)]
struct WhatIfResponse {
    current: BlendDecision,
    hypothetical: BlendDecision,
    /// Candidates exposed in exactly one of the two decisions.
    changed: Vec<String>,
}

async fn whatif(State(s): AppState, body: Bytes) -> Result<Json<WhatIfResponse>, ServiceError> {
    let b: WhatIfBody = parse(&body)?;
    let (current, hypothetical) = s.whatif(&b.request, &b.overrides)?;
    let exposed = |d: &BlendDecision| {
        d.ranked[..d.exposed_k]
            .iter()
            .map(|x| x.candidate_id.clone())
            .collect::<std::collections::BTreeSet<_>>()
    };
    let (a, h) = (exposed(&current), exposed(&hypothetical));
    let changed = a.symmetric_difference(&h).cloned().collect();
    Ok(Json(WhatIfResponse {
        current,
        hypothetical,
        changed,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
struct ModeBody {
    mode: Mode,
}

async fn get_mode(State(s): AppState) -> Json<ModeBody> {
    Json(ModeBody { mode: s.mode() })
}

async fn put_mode(State(s): AppState, body: Bytes) -> Result<Json<ModeBody>, ServiceError> {
    let b: ModeBody = parse(&body)?;
    set_mode(&s, b.mode);
    Ok(Json(ModeBody { mode: s.mode() }))
}

async fn openapi() -> Response {
    ([(header::CONTENT_TYPE, "application/yaml")], OPENAPI).into_response()
}
