use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::ws::{Message, Utf8Bytes, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures_util::{SinkExt, StreamExt};
use groupfield_core::model::{validate_frame, AgentId, MicroStateFrame};
use groupfield_core::scenario::{
    select_intervention_with_progress, ScenarioError, ScenarioInput, SpecIssue, SurrogateParams,
};
use serde::Deserialize;
use serde_json::Value;
use tokio::sync::broadcast::error::{RecvError, TryRecvError};
use tokio::sync::broadcast::Receiver;

use crate::messages::*;
use crate::{lock, ApiError, Shared};

pub(crate) fn router(shared: Arc<Shared>) -> Router {
    Router::new()
        .route("/state", get(state))
        .route("/history", get(history))
        .route("/scenario", post(scenario))
        .route("/simulator/control", post(control))
        .route("/config", get(config))
        .route("/stream", get(stream))
        .with_state(shared)
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload.map(|Json(v)| v).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))
}

async fn state(State(s): State<Arc<Shared>>) -> Response {
    let latest = s.latest();
    let bundle = latest.as_ref().map(|snap| &snap.bundle);
    #[derive(serde::Serialize)]
    struct View<'a> {
        schema_version: u32,
        cold_start: bool,
        bundle: Option<&'a groupfield_core::pipeline::FrameBundle<f64>>,
    }
    Json(View { schema_version: SCHEMA_VERSION, cold_start: bundle.is_none(), bundle }).into_response()
}

#[derive(Deserialize)]
struct HistoryQuery {
    window: Option<f64>,
}

async fn history(State(s): State<Arc<Shared>>, Query(q): Query<HistoryQuery>) -> Result<Json<HistoryResponse>, ApiError> {
    if let Some(w) = q.window {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(ApiError::new(StatusCode::BAD_REQUEST, "window must be a nonnegative number of seconds"));
        }
    }
    let h = lock(&s.history);
    let since = match (q.window, h.back()) {
        (Some(w), Some(last)) => last.timestamp - w,
        _ => f64::NEG_INFINITY,
    };
    let entries = h.iter().filter(|e| e.timestamp >= since).cloned().collect();
    Ok(Json(HistoryResponse { schema_version: SCHEMA_VERSION, window: q.window, entries }))
}

async fn config(State(s): State<Arc<Shared>>) -> Json<ConfigResponse> {
    Json(ConfigResponse {
        schema_version: SCHEMA_VERSION,
        config: s.config.clone(),
        calibration: s.cal.clone(),
        surrogate: s.surrogate,
        status: s.status(),
    })
}

async fn control(
    State(s): State<Arc<Shared>>,
    payload: Result<Json<ControlCommand>, JsonRejection>,
) -> Result<Json<ControlAck>, ApiError> {
    let command = body(payload)?;
    let name = command.name().to_string();
    let status = s.control(command).await?;
    Ok(Json(ControlAck { schema_version: SCHEMA_VERSION, command: name, status }))
}

fn merge(into: &mut Value, from: Value) {
    match (into, from) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

fn params(s: &Shared, overrides: Option<Value>) -> Result<SurrogateParams, ApiError> {
    let Some(overrides) = overrides else { return Ok(s.surrogate) };
    if !overrides.is_object() {
        return Err(ApiError::invalid("overrides must be an object", Vec::new()));
    }
    let mut merged = serde_json::to_value(s.surrogate).expect("parameters serialize");
    merge(&mut merged, overrides);
    let sp: SurrogateParams =
        serde_json::from_value(merged).map_err(|e| ApiError::invalid(format!("overrides: {e}"), Vec::new()))?;
    sp.validate().map_err(|issues| ApiError::invalid("invalid surrogate parameters", issues))?;
    Ok(sp)
}

fn scenario_input(s: &Shared, frozen: Option<MicroStateFrame<f64>>) -> Result<ScenarioInput, ApiError> {
    let latest = s.latest();
    let scene = latest.as_ref().map_or_else(|| s.config.scene(), |snap| (*snap.scene).clone());
    if let Some(frame) = frozen {
        let validated = validate_frame(&frame, &scene, None).map_err(|r| {
            let issues = r
                .violations
                .iter()
                .map(|v| SpecIssue { field: "frame".into(), message: format!("{v:?}") })
                .collect();
            ApiError::invalid("frame rejected", issues)
        })?;
        return Ok(ScenarioInput::new(validated, scene));
    }
    let snap = latest.ok_or_else(|| ApiError::conflict("no live frame yet"))?;
    let t = snap.bundle.timestamp;
    let window = s.cal.ews_window;
    let history = lock(&s.history)
        .iter()
        .filter(|e| e.timestamp < t && t - e.timestamp <= window)
        .map(|e| e.state)
        .collect();
    Ok(ScenarioInput { frame: snap.bundle.frame.clone(), scene, history })
}

fn request_key(req: &ScenarioRequest, sp: &SurrogateParams, input: &ScenarioInput) -> u64 {
    let text = serde_json::to_string(&(&req.candidates, sp, input.frame.frame(), &input.scene, &input.history))
        .expect("request serializes");
    let mut h = DefaultHasher::new();
    text.hash(&mut h);
    h.finish()
}

fn scenario_error(e: ScenarioError) -> ApiError {
    match e {
        ScenarioError::InvalidIntervention { id, issues } => ApiError::invalid(format!("invalid intervention {id}"), issues),
        ScenarioError::InvalidParams(issues) => ApiError::invalid("invalid surrogate parameters", issues),
        other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
    }
}

async fn scenario(
    State(s): State<Arc<Shared>>,
    payload: Result<Json<ScenarioRequest>, JsonRejection>,
) -> Result<Json<ScenarioResponse>, ApiError> {
    let mut req = body(payload)?;
    let sp = params(&s, req.overrides.take())?;
    let input = scenario_input(&s, req.frame.take())?;
    let ids: Vec<AgentId> = input.frame.agents().iter().map(|a| a.agent_id.clone()).collect();
    let mut issues = Vec::new();
    for (k, c) in req.candidates.iter().enumerate() {
        if let Err(found) = c.validate(&ids) {
            issues.extend(found.into_iter().map(|i| SpecIssue { field: format!("candidates[{k}].{}", i.field), ..i }));
        }
    }
    if !issues.is_empty() {
        return Err(ApiError::invalid("invalid intervention spec", issues));
    }

    let key = request_key(&req, &sp, &input);
    let request_id = format!("{key:016x}");
    if let Some(hit) = lock(&s.cache).get(key) {
        return Ok(Json(ScenarioResponse {
            schema_version: SCHEMA_VERSION,
            request_id,
            cached: true,
            result: (*hit).clone(),
        }));
    }

    let job = s.clone();
    let id = request_id.clone();
    let result = tokio::task::spawn_blocking(move || {
        job.pool.install(|| {
            select_intervention_with_progress(&req.candidates, &input, &job.cal, &sp, |p| {
                job.push(&StreamMessage::ScenarioProgress { schema_version: SCHEMA_VERSION, request_id: &id, progress: &p });
            })
        })
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
    .map_err(scenario_error)?;
    let result = Arc::new(result);
    lock(&s.cache).insert(key, result.clone());
    s.push(&StreamMessage::ScenarioDone {
        schema_version: SCHEMA_VERSION,
        request_id: &request_id,
        recommended: &result.recommended,
    });
    Ok(Json(ScenarioResponse { schema_version: SCHEMA_VERSION, request_id, cached: false, result: (*result).clone() }))
}

async fn stream(ws: WebSocketUpgrade, State(s): State<Arc<Shared>>) -> Response {
    let rx = s.stream.subscribe();
    ws.on_upgrade(move |socket| pump(socket, rx))
}

/// Newest message still buffered, skipping everything older.
fn newest(rx: &mut Receiver<Utf8Bytes>) -> Option<Utf8Bytes> {
    let mut last = None;
    loop {
        match rx.try_recv() {
            Ok(m) => last = Some(m),
            Err(TryRecvError::Lagged(_)) => continue,
            Err(_) => return last,
        }
    }
}

async fn pump(socket: WebSocket, mut rx: Receiver<Utf8Bytes>) {
    let (mut tx, mut incoming) = socket.split();
    loop {
        tokio::select! {
            msg = rx.recv() => {
                let text = match msg {
                    Ok(m) => m,
                    Err(RecvError::Lagged(_)) => match newest(&mut rx) {
                        Some(m) => m,
                        None => continue,
                    },
                    Err(RecvError::Closed) => break,
                };
                if tx.send(Message::Text(text)).await.is_err() {
                    break;
                }
            }
            m = incoming.next() => match m {
                None | Some(Err(_)) | Some(Ok(Message::Close(_))) => break,
                Some(Ok(_)) => {}
            },
        }
    }
}
