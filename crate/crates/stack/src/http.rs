//! HTTP and WebSocket API of the gateway.

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use base64::Engine as _;
use futures::{SinkExt, StreamExt};
use remcap_core::container::{replay, verify_container, ContainerError};
use remcap_core::session::DeviceSpec;
use remcap_core::srt::Cue;
use remcap_core::{AppliedCommand, CommandKind, SceneConfig, SceneLease, SessionStatus};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::mpsc;
use uuid::Uuid;

use crate::clock::wall_micros;
use crate::gateway::{Gateway, GatewayError};
use crate::inference::BUILTIN_PROCESSORS;
use crate::protocol::{FromAgent, ToAgent};

/// Most frames one `/frames` request returns.
pub const MAX_FRAMES_PER_REQUEST: usize = 64;

pub struct ApiError(pub GatewayError);

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        ApiError(e)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError(GatewayError::BadRequest(e.body_text()))
    }
}

pub fn status_for(e: &GatewayError) -> StatusCode {
    match e {
        GatewayError::UnknownScene(_)
        | GatewayError::UnknownDevice { .. }
        | GatewayError::UnknownSession(_)
        | GatewayError::UnknownProcessor(_) => StatusCode::NOT_FOUND,
        GatewayError::SceneBusy { .. }
        | GatewayError::DeviceBusy { .. }
        | GatewayError::SessionNotLive { .. }
        | GatewayError::NotPacked { .. } => StatusCode::CONFLICT,
        GatewayError::LeaseInvalid { .. } => StatusCode::FORBIDDEN,
        GatewayError::AgentUnavailable { .. } => StatusCode::SERVICE_UNAVAILABLE,
        GatewayError::AgentTimeout(_) => StatusCode::GATEWAY_TIMEOUT,
        GatewayError::AgentError(_) => StatusCode::BAD_GATEWAY,
        GatewayError::MalformedPayload(_) | GatewayError::BadRequest(_) => StatusCode::BAD_REQUEST,
        GatewayError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

/// JSON body for an error: `{error, message}` plus details for some kinds.
pub fn error_body(e: &GatewayError) -> Value {
    let mut body = json!({ "error": e.code(), "message": e.to_string() });
    match e {
        GatewayError::SceneBusy {
            holder,
            expires_at_micros,
            ..
        } => {
            body["holder"] = json!(holder);
            body["expires_at_micros"] = json!(expires_at_micros);
        }
        GatewayError::SessionNotLive { status, .. } => body["status"] = json!(status),
        _ => {}
    }
    body
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (status_for(&self.0), Json(error_body(&self.0))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(gw: Arc<Gateway>) -> Router {
    Router::new()
        .route("/ping", get(ping))
        .route("/scenes", get(list_scenes))
        .route("/scenes/{scene}/devices", post(register_device))
        .route("/leases", post(acquire_lease))
        .route("/leases/{scene}", delete(release_lease))
        .route("/processors", get(list_processors))
        .route("/sessions", post(start_sessions).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/commands", post(submit_command))
        .route("/sessions/{id}/markers", post(add_marker))
        .route("/sessions/{id}/events", get(read_events))
        .route("/sessions/{id}/stop", post(stop_session))
        .route("/sessions/{id}/stats", get(stats))
        .route("/sessions/{id}/container", get(container))
        .route("/sessions/{id}/verify", get(verify))
        .route("/sessions/{id}/frames", get(frames))
        .route("/sessions/{id}/processors", post(attach_processor))
        .route("/sessions/{id}/live", get(live))
        .route("/ws", get(ui_socket))
        .route("/agents/ws", get(agent_socket))
        .with_state(gw)
}

async fn ping() -> Json<Value> {
    Json(json!({ "ok": true, "ts_micros": wall_micros() }))
}

#[derive(Serialize)]
struct SceneView {
    #[serde(flatten)]
    scene: SceneConfig,
    lease: Option<SceneLease>,
    connected_devices: Vec<u16>,
}

async fn list_scenes(State(gw): State<Arc<Gateway>>) -> Json<Vec<SceneView>> {
    let views = gw
        .scenes()
        .into_iter()
        .map(|scene| {
            let connected_devices = scene
                .devices
                .iter()
                .map(|d| d.device_id)
                .filter(|&d| gw.agent_connected(&scene.scene_id, d))
                .collect();
            SceneView {
                lease: gw.leases.current(&scene.scene_id),
                connected_devices,
                scene,
            }
        })
        .collect();
    Json(views)
}

async fn register_device(
    State(gw): State<Arc<Gateway>>,
    Path(scene): Path<String>,
    body: Result<Json<DeviceSpec>, JsonRejection>,
) -> ApiResult<Json<SceneConfig>> {
    let Json(device) = body?;
    Ok(Json(gw.register_device(&scene, device)))
}

#[derive(Deserialize)]
struct LeaseRequest {
    researcher: String,
    scene_id: String,
    ttl_seconds: Option<u32>,
}

async fn acquire_lease(
    State(gw): State<Arc<Gateway>>,
    body: Result<Json<LeaseRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<SceneLease>)> {
    let Json(req) = body?;
    let lease = gw.acquire_lease(&req.researcher, &req.scene_id, req.ttl_seconds)?;
    Ok((StatusCode::CREATED, Json(lease)))
}

#[derive(Deserialize)]
struct ResearcherQuery {
    researcher: Option<String>,
}

fn researcher(query: Option<String>, headers: &HeaderMap) -> Result<String, ApiError> {
    query
        .or_else(|| {
            headers
                .get("x-researcher")
                .and_then(|v| v.to_str().ok())
                .map(str::to_string)
        })
        .ok_or_else(|| ApiError(GatewayError::BadRequest("researcher id required".into())))
}

async fn release_lease(
    State(gw): State<Arc<Gateway>>,
    Path(scene): Path<String>,
    Query(q): Query<ResearcherQuery>,
    headers: HeaderMap,
) -> ApiResult<StatusCode> {
    let who = researcher(q.researcher, &headers)?;
    gw.release_lease(&who, &scene)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn list_processors() -> Json<Value> {
    Json(json!({ "processors": BUILTIN_PROCESSORS }))
}

#[derive(Deserialize)]
struct StartRequest {
    researcher: String,
    scene_id: String,
    device_ids: Vec<u16>,
    #[serde(default)]
    processors: Vec<String>,
}

async fn start_sessions(
    State(gw): State<Arc<Gateway>>,
    body: Result<Json<StartRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let Json(req) = body?;
    let sessions = gw
        .start_parallel_capture(
            &req.researcher,
            &req.scene_id,
            &req.device_ids,
            &req.processors,
        )
        .await?;
    Ok((StatusCode::CREATED, Json(json!({ "sessions": sessions }))))
}

async fn list_sessions(State(gw): State<Arc<Gateway>>) -> Json<Value> {
    Json(json!({ "sessions": gw.sessions() }))
}

async fn get_session(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<Uuid>,
) -> ApiResult<Json<Value>> {
    let state = gw.session_state(id)?;
    let config = gw.session_config(id)?;
    Ok(Json(json!({
        "session": state,
        "fps": config.fps,
        "resolution": config.resolution,
        "deterministic_clock": config.deterministic_clock,
        "processors": gw.processors(id)?,
        "summary": gw.summary(id)?,
    })))
}

#[derive(Debug, Clone, Deserialize)]
pub struct CommandRequest {
    pub researcher: String,
    pub kind: String,
    pub value: Option<i32>,
    pub client_seq: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommandResponse {
    pub applied: AppliedCommand,
    pub rtt_micros: u64,
}

async fn run_command(
    gw: &Gateway,
    id: Uuid,
    req: CommandRequest,
) -> Result<CommandResponse, GatewayError> {
    let kind = CommandKind::from_parts(&req.kind, req.value)
        .map_err(|e| GatewayError::BadRequest(e.to_string()))?;
    let (applied, rtt) = gw
        .submit_command(&req.researcher, id, kind, req.client_seq)
        .await?;
    Ok(CommandResponse {
        applied,
        rtt_micros: rtt.as_micros() as u64,
    })
}

async fn submit_command(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<Uuid>,
    body: Result<Json<CommandRequest>, JsonRejection>,
) -> ApiResult<Json<CommandResponse>> {
    let Json(req) = body?;
    Ok(Json(run_command(&gw, id, req).await?))
}

#[derive(Deserialize)]
struct MarkerRequest {
    frame_index: u64,
    #[serde(default)]
    text: String,
}

async fn add_marker(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<Uuid>,
    body: Result<Json<MarkerRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let Json(req) = body?;
    let ev = gw.add_marker(id, req.frame_index, &req.text)?;
    Ok((
        StatusCode::CREATED,
        Json(json!({ "seq": ev.seq, "event": ev })),
    ))
}

#[derive(Deserialize)]
struct FromQuery {
    from: Option<u64>,
    limit: Option<usize>,
}

async fn read_events(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<Uuid>,
    Query(q): Query<FromQuery>,
) -> ApiResult<Json<Value>> {
    let events = gw.read_events(id, q.from.unwrap_or(1))?;
    Ok(Json(json!({ "events": events })))
}

async fn stop_session(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<Uuid>,
) -> ApiResult<Json<Value>> {
    let state = gw.stop_session(id)?;
    Ok(Json(json!({ "session": state })))
}

async fn stats(State(gw): State<Arc<Gateway>>, Path(id): Path<Uuid>) -> ApiResult<Json<Value>> {
    Ok(Json(
        serde_json::to_value(gw.stats(id)?).expect("stats serialize"),
    ))
}

fn packed_path(gw: &Gateway, id: Uuid) -> Result<std::path::PathBuf, GatewayError> {
    let state = gw.session_state(id)?;
    if state.status != SessionStatus::Packed {
        return Err(GatewayError::NotPacked { session_id: id });
    }
    Ok(gw.container_layout(id).root().to_path_buf())
}

async fn container(State(gw): State<Arc<Gateway>>, Path(id): Path<Uuid>) -> ApiResult<Json<Value>> {
    packed_path(&gw, id)?;
    let manifest = gw.session_state(id)?.manifest;
    Ok(Json(json!({ "manifest": manifest })))
}

fn container_error(e: ContainerError) -> GatewayError {
    match e {
        ContainerError::FrameOutOfRange { .. } => GatewayError::BadRequest(e.to_string()),
        other => GatewayError::Internal(other.to_string()),
    }
}

async fn verify(State(gw): State<Arc<Gateway>>, Path(id): Path<Uuid>) -> ApiResult<Json<Value>> {
    let path = packed_path(&gw, id)?;
    let report = tokio::task::spawn_blocking(move || verify_container(&path))
        .await
        .map_err(|e| GatewayError::Internal(e.to_string()))?
        .map_err(container_error)?;
    Ok(Json(json!({ "passed": report.passed(), "report": report })))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayFrame {
    pub frame_index: u64,
    pub capture_ts_micros: u64,
    /// The EXFR record, base64.
    pub record: String,
    pub cues: Vec<Cue>,
}

async fn frames(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<Uuid>,
    Query(q): Query<FromQuery>,
) -> ApiResult<Json<Value>> {
    let path = packed_path(&gw, id)?;
    let from = q.from.unwrap_or(0);
    let limit = q.limit.unwrap_or(16).clamp(1, MAX_FRAMES_PER_REQUEST);
    let items = tokio::task::spawn_blocking(move || -> Result<Vec<ReplayFrame>, ContainerError> {
        replay(&path, from)?
            .take(limit)
            .map(|item| {
                item.map(|it| ReplayFrame {
                    frame_index: it.frame.frame_index,
                    capture_ts_micros: it.frame.capture_ts_micros,
                    record: base64::engine::general_purpose::STANDARD.encode(it.frame.encode()),
                    cues: it.cues,
                })
            })
            .collect()
    })
    .await
    .map_err(|e| GatewayError::Internal(e.to_string()))?
    .map_err(container_error)?;
    Ok(Json(json!({ "frames": items })))
}

#[derive(Deserialize)]
struct ProcessorRequest {
    name: String,
}

async fn attach_processor(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<Uuid>,
    body: Result<Json<ProcessorRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let Json(req) = body?;
    gw.attach_processor(id, &req.name)?;
    Ok((
        StatusCode::CREATED,
        Json(json!({ "processors": gw.processors(id)? })),
    ))
}

#[derive(Deserialize)]
struct LiveQuery {
    #[serde(default)]
    raw: bool,
}

/// Binary EXFR frames, one per message. Viewers get the processed feed
/// unless they ask for `raw`.
async fn live(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<Uuid>,
    Query(q): Query<LiveQuery>,
    ws: WebSocketUpgrade,
) -> ApiResult<Response> {
    let state = gw.session_state(id)?;
    if state.status >= SessionStatus::Stopping {
        return Err(GatewayError::SessionNotLive {
            session_id: id,
            status: state.status,
        }
        .into());
    }
    let has_processor = !gw.processors(id)?.is_empty();
    let feed = if q.raw || !has_processor {
        gw.relay.subscribe_live(id)
    } else {
        gw.relay.subscribe_processed(id)
    }
    .map_err(|_| GatewayError::SessionNotLive {
        session_id: id,
        status: state.status,
    })?;
    Ok(ws.on_upgrade(move |mut socket| async move {
        let mut feed = feed;
        while let Some(frame) = feed.recv().await {
            if socket
                .send(Message::Binary(frame.encode().into()))
                .await
                .is_err()
            {
                return;
            }
        }
        let _ = socket.send(Message::Close(None)).await;
    }))
}

async fn agent_socket(State(gw): State<Arc<Gateway>>, ws: WebSocketUpgrade) -> Response {
    ws.max_message_size(1 << 20)
        .on_upgrade(move |socket| serve_agent(gw, socket))
}

async fn serve_agent(gw: Arc<Gateway>, socket: WebSocket) {
    let (mut sink, mut stream) = socket.split();
    let hello = loop {
        match stream.next().await {
            Some(Ok(Message::Text(t))) => match serde_json::from_str::<FromAgent>(t.as_str()) {
                Ok(FromAgent::Hello(h)) => break h,
                _ => {
                    let reject = ToAgent::Rejected {
                        reason: "expected hello".into(),
                    };
                    let _ = sink
                        .send(Message::Text(
                            serde_json::to_string(&reject).unwrap().into(),
                        ))
                        .await;
                    return;
                }
            },
            Some(Ok(_)) => continue,
            _ => return,
        }
    };
    let (link, mut rx) = match gw.connect_agent(hello) {
        Ok(pair) => pair,
        Err(e) => {
            let reject = ToAgent::Rejected {
                reason: e.to_string(),
            };
            let _ = sink
                .send(Message::Text(
                    serde_json::to_string(&reject).unwrap().into(),
                ))
                .await;
            return;
        }
    };
    let writer = tokio::spawn(async move {
        while let Some(msg) = rx.recv().await {
            let text = serde_json::to_string(&msg).expect("control message serializes");
            if sink.send(Message::Text(text.into())).await.is_err() {
                break;
            }
        }
    });
    while let Some(msg) = stream.next().await {
        match msg {
            Ok(Message::Text(t)) => match serde_json::from_str::<FromAgent>(t.as_str()) {
                Ok(m) => gw.agent_message(&link, m),
                Err(e) => tracing::warn!("malformed agent message: {e}"),
            },
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(_) => {}
        }
    }
    gw.agent_disconnected(&link);
    writer.abort();
}

#[derive(Debug, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
enum UiRequest {
    Ping,
    Subscribe {
        channel: String,
    },
    Command {
        session_id: Uuid,
        #[serde(flatten)]
        request: CommandRequest,
    },
    Marker {
        session_id: Uuid,
        frame_index: u64,
        #[serde(default)]
        text: String,
    },
}

fn ui_msg(kind: &str, payload: Value) -> Message {
    Message::Text(
        json!({ "type": kind, "payload": payload })
            .to_string()
            .into(),
    )
}

async fn ui_socket(State(gw): State<Arc<Gateway>>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| serve_ui(gw, socket))
}

/// The console's full-duplex channel: event subscriptions, commands and
/// markers as `{type, payload}` messages.
async fn serve_ui(gw: Arc<Gateway>, socket: WebSocket) {
    let (mut sink, mut stream) = socket.split();
    let (tx, mut rx) = mpsc::unbounded_channel::<Message>();
    let writer = tokio::spawn(async move {
        while let Some(m) = rx.recv().await {
            if sink.send(m).await.is_err() {
                break;
            }
        }
    });
    let mut forwarders = Vec::new();
    while let Some(Ok(msg)) = stream.next().await {
        let Message::Text(text) = msg else {
            if matches!(msg, Message::Close(_)) {
                break;
            }
            continue;
        };
        let req = match serde_json::from_str::<UiRequest>(text.as_str()) {
            Ok(r) => r,
            Err(e) => {
                let _ = tx.send(ui_msg(
                    "error",
                    error_body(&GatewayError::BadRequest(e.to_string())),
                ));
                continue;
            }
        };
        match req {
            UiRequest::Ping => {
                let _ = tx.send(ui_msg("pong", json!({ "ts_micros": wall_micros() })));
            }
            UiRequest::Subscribe { channel } => match gw.pubsub.subscribe(&channel) {
                Ok(mut sub) => {
                    let tx = tx.clone();
                    let _ = tx.send(ui_msg("subscribed", json!({ "channel": channel })));
                    forwarders.push(tokio::spawn(async move {
                        while let Some(m) = sub.recv().await {
                            if tx
                                .send(ui_msg("message", serde_json::to_value(&m).unwrap()))
                                .is_err()
                            {
                                break;
                            }
                        }
                    }));
                }
                Err(e) => {
                    let _ = tx.send(ui_msg(
                        "error",
                        error_body(&GatewayError::BadRequest(e.to_string())),
                    ));
                }
            },
            UiRequest::Command {
                session_id,
                request,
            } => {
                let gw = gw.clone();
                let tx = tx.clone();
                tokio::spawn(async move {
                    let reply = match run_command(&gw, session_id, request).await {
                        Ok(r) => ui_msg("ack", serde_json::to_value(r).unwrap()),
                        Err(e) => ui_msg("error", error_body(&e)),
                    };
                    let _ = tx.send(reply);
                });
            }
            UiRequest::Marker {
                session_id,
                frame_index,
                text,
            } => {
                let reply = match gw.add_marker(session_id, frame_index, &text) {
                    Ok(ev) => ui_msg("event", serde_json::to_value(ev).unwrap()),
                    Err(e) => ui_msg("error", error_body(&e)),
                };
                let _ = tx.send(reply);
            }
        }
    }
    for f in forwarders {
        f.abort();
    }
    drop(tx);
    let _ = writer.await;
}
