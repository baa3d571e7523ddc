//! HTTP routes: device ingest, administration, export and the live stream.

use std::future::Future;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use shm_core::model::{StructuralModel, ThresholdConfig};

use crate::engine::{Engine, EngineError};
use crate::hub::{HubError, Subscription};
use crate::registry::{BindingRequest, RegistryError};
use crate::wire::{
    BindingBody, ClientMessage, ErrorBody, ErrorMessage, IngestRequest, IngestResponse, MutationResponse,
    ServerMessage, ThresholdsBody,
};

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/api/v1/ingest", post(ingest))
        .route("/api/v1/structures/{id}", put(put_structure).get(get_structure))
        .route("/api/v1/structures/{id}/bindings/{device_id}", put(put_binding))
        .route("/api/v1/structures/{id}/thresholds", put(put_thresholds))
        .route("/api/v1/structures/{id}/config", get(get_config))
        .route("/api/v1/structures/{id}/export", get(export))
        .route("/api/v1/stream", get(stream))
        .with_state(engine)
}

/// Serves the API on `listener` and runs the publish loop until `shutdown`
/// resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    engine: Arc<Engine>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let (stop_tx, stop_rx) = tokio::sync::watch::channel(false);
    let publisher = tokio::spawn(engine.clone().run_loop(None, {
        let mut rx = stop_rx.clone();
        async move {
            let _ = rx.wait_for(|stop| *stop).await;
        }
    }));
    let result = axum::serve(listener, router(engine))
        .with_graceful_shutdown(async move {
            shutdown.await;
            let _ = stop_tx.send(true);
        })
        .await;
    let _ = publisher.await;
    result
}

/// An error response with a JSON [`ErrorBody`].
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>) -> Self {
        ApiError { status, body: ErrorBody { error: error.into(), details: Vec::new() } }
    }

    fn bad_request(error: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, error)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<RegistryError> for ApiError {
    fn from(e: RegistryError) -> Self {
        match e {
            RegistryError::Validation(v) => ApiError {
                status: StatusCode::BAD_REQUEST,
                body: ErrorBody {
                    error: "invalid structural model".into(),
                    details: v.0.iter().map(ToString::to_string).collect(),
                },
            },
            RegistryError::Invalid(m) => Self::bad_request(m),
            RegistryError::NotFound(_) => Self::new(StatusCode::NOT_FOUND, e.to_string()),
            RegistryError::Conflict(m) => Self::new(StatusCode::CONFLICT, m),
            RegistryError::Store(s) => {
                tracing::error!("{s}");
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, s.to_string())
            }
        }
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::UnknownDevice(_) => Self::new(StatusCode::NOT_FOUND, e.to_string()),
            EngineError::Registry(r) => r.into(),
            EngineError::Rejected { .. } => Self::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
            EngineError::NonMonotonicFrame { .. } | EngineError::Store(_) => {
                tracing::error!("{e}");
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
            }
        }
    }
}

fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

fn check_id(kind: &str, id: &str) -> Result<(), ApiError> {
    if crate::store::is_valid_id(id) {
        Ok(())
    } else {
        Err(ApiError::bad_request(format!("invalid {kind} id {id:?}")))
    }
}

async fn ingest(State(engine): State<Arc<Engine>>, body: Bytes) -> Result<Response, ApiError> {
    let request: IngestRequest = parse_body(&body)?;
    let outcome = engine.accept_batch(&request.device_id, &request.samples)?;
    let status = if outcome.accepted == 0 && !request.samples.is_empty() {
        StatusCode::UNPROCESSABLE_ENTITY
    } else {
        StatusCode::ACCEPTED
    };
    let response = IngestResponse { accepted: outcome.accepted, rejected: outcome.rejected };
    Ok((status, Json(response)).into_response())
}

async fn put_structure(
    State(engine): State<Arc<Engine>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<MutationResponse>, ApiError> {
    check_id("structure", &id)?;
    let model: StructuralModel = parse_body(&body)?;
    if model.structure_id != id {
        return Err(ApiError::bad_request(format!(
            "body structure_id {:?} does not match path {id:?}",
            model.structure_id
        )));
    }
    let config_version = engine.registry().upsert_structure(model)?;
    Ok(Json(MutationResponse { config_version }))
}

async fn get_structure(
    State(engine): State<Arc<Engine>>,
    Path(id): Path<String>,
) -> Result<Json<StructuralModel>, ApiError> {
    engine
        .registry()
        .model(&id)
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("structure {id:?} not found")))
}

async fn put_binding(
    State(engine): State<Arc<Engine>>,
    Path((id, device_id)): Path<(String, String)>,
    body: Bytes,
) -> Result<Json<MutationResponse>, ApiError> {
    let b: BindingBody = parse_body(&body)?;
    let request = BindingRequest { device_id, structure_id: id, node_id: b.node_id, active: b.active, replace: b.replace };
    let config_version = engine.registry().upsert_binding(request, engine.clock().now_ms())?;
    Ok(Json(MutationResponse { config_version }))
}

async fn put_thresholds(
    State(engine): State<Arc<Engine>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<MutationResponse>, ApiError> {
    let b: ThresholdsBody = parse_body(&body)?;
    let config = ThresholdConfig { structure_id: id, max_dx: b.max_dx_m, max_dy: b.max_dy_m, max_dz: b.max_dz_m };
    let config_version = engine.registry().set_thresholds(config)?;
    Ok(Json(MutationResponse { config_version }))
}

async fn get_config(State(engine): State<Arc<Engine>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let config = engine.registry().resolve_runtime_config(&id)?;
    Ok(Json(&*config).into_response())
}

#[derive(Debug, Deserialize)]
struct ExportRange {
    from_ms: Option<i64>,
    to_ms: Option<i64>,
}

async fn export(
    State(engine): State<Arc<Engine>>,
    Path(id): Path<String>,
    Query(range): Query<ExportRange>,
) -> Result<Response, ApiError> {
    let from = range.from_ms.unwrap_or(i64::MIN);
    let to = range.to_ms.unwrap_or(i64::MAX);
    if from > to {
        return Err(ApiError::bad_request(format!("from_ms {from} is after to_ms {to}")));
    }
    let lines = engine.export(&id, from, to)?;
    let mut body = String::with_capacity(lines.iter().map(|l| l.len() + 1).sum());
    for line in lines {
        body.push_str(&line);
        body.push('\n');
    }
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

async fn stream(State(engine): State<Arc<Engine>>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| stream_session(engine, socket))
}

async fn send(socket: &mut WebSocket, message: &ServerMessage) -> bool {
    let text = serde_json::to_string(message).expect("server messages serialize");
    socket.send(Message::Text(text.into())).await.is_ok()
}

async fn send_error(socket: &mut WebSocket, message: String) -> bool {
    send(socket, &ServerMessage::Error(ErrorMessage { message })).await
}

/// One stream connection. A new `subscribe` replaces the current
/// subscription; errors are reported as `error` events and keep the
/// connection open. A subscriber dropped by the hub is closed.
async fn stream_session(engine: Arc<Engine>, mut socket: WebSocket) {
    let mut subscription: Option<Subscription> = None;
    loop {
        let next = async {
            match subscription.as_mut() {
                Some(s) => s.recv().await,
                None => std::future::pending().await,
            }
        };
        tokio::select! {
            incoming = socket.recv() => {
                let text = match incoming {
                    Some(Ok(Message::Text(text))) => text,
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                    Some(Ok(_)) => continue,
                };
                match serde_json::from_str::<ClientMessage>(&text) {
                    Ok(ClientMessage::Subscribe { structure_id }) => {
                        subscription = None;
                        match engine.hub().subscribe(&structure_id) {
                            Ok(s) => subscription = Some(s),
                            Err(HubError::NotFound(_)) => {
                                if !send_error(&mut socket, format!("structure {structure_id:?} not found")).await {
                                    return;
                                }
                            }
                        }
                    }
                    Err(e) => {
                        if !send_error(&mut socket, format!("malformed message: {e}")).await {
                            return;
                        }
                    }
                }
            }
            frame = next => {
                match frame {
                    Some(frame) => {
                        if !send(&mut socket, &frame.to_message()).await {
                            return;
                        }
                    }
                    None => {
                        let _ = send_error(&mut socket, "subscriber queue overflowed".into()).await;
                        let _ = socket.send(Message::Close(None)).await;
                        return;
                    }
                }
            }
        }
    }
}
