//! HTTP routes and the WebSocket event stream.
//!
//! | method | path | body / query | response |
//! |---|---|---|---|
//! | POST | `/corpus` | multipart MIDI files | per-file reports |
//! | POST | `/train` | training config (JSON, all fields optional) | 202 or 409 |
//! | DELETE | `/train` | | `{"stopping": bool}` |
//! | GET | `/status` | | session report with loss history |
//! | POST | `/latent` | `{"x", "y"}` | pattern |
//! | GET | `/pattern` | | pattern |
//! | POST | `/transport` | `{"playing"?, "tempo_bpm"?}` | transport state |
//! | POST | `/automation/{record,stop,play}` | | automation state |
//! | GET | `/export.mid` | `?tempo=` | `audio/midi` |
//! | GET, PUT | `/model.rvae` | weight file | weight file |
//! | GET, PUT | `/threshold` | `{"value"}` | `{"value"}` |
//! | GET | `/stream` | WebSocket upgrade | JSON events |
//!
//! Errors are JSON objects `{"error": message, "code": code}`.

use std::net::SocketAddr;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use rhythmvae::sequencer::SequencerError;
use rhythmvae::vae::{LatentVector, TrainConfig};
use serde::Deserialize;
use serde_json::json;
use tokio::sync::broadcast::error::RecvError;

use crate::session::{InboundMessage, Session, SessionError, StreamEvent};

const LATENT_TIMEOUT: Duration = Duration::from_secs(10);
const MAX_BODY: usize = 256 * 1024 * 1024;

pub struct ApiError(SessionError);

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            SessionError::TrainingActive
            | SessionError::CorpusTooSmall(_)
            | SessionError::NoModel
            | SessionError::NothingToExport => StatusCode::CONFLICT,
            SessionError::Timeout => StatusCode::SERVICE_UNAVAILABLE,
            SessionError::Sequencer(SequencerError::NoModel | SequencerError::NotPlaying | SequencerError::EmptyClip) => {
                StatusCode::CONFLICT
            }
            _ => StatusCode::BAD_REQUEST,
        };
        (status, Json(json!({ "error": self.0.to_string(), "code": self.0.code() }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs blocking session work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> T {
    tokio::task::spawn_blocking(f).await.expect("blocking task panicked")
}

pub fn router(session: Session) -> Router {
    Router::new()
        .route("/corpus", post(upload_corpus))
        .route("/train", post(start_training).delete(stop_training))
        .route("/status", get(status))
        .route("/latent", post(set_latent))
        .route("/pattern", get(pattern))
        .route("/transport", post(transport))
        .route("/automation/{action}", post(automation))
        .route("/export.mid", get(export))
        .route("/model.rvae", get(get_model).put(put_model))
        .route("/threshold", get(get_threshold).put(put_threshold))
        .route("/stream", get(stream))
        .layer(DefaultBodyLimit::max(MAX_BODY))
        .with_state(session)
}

/// Serves the API until the process receives Ctrl-C.
pub async fn serve(addr: SocketAddr, session: Session) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(session))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// True for a multipart body holding only the closing delimiter, which some
/// clients send for an empty file list.
fn is_empty_form(body: &[u8]) -> bool {
    let trimmed = body.trim_ascii();
    trimmed.is_empty() || (trimmed.starts_with(b"--") && trimmed.ends_with(b"--") && !trimmed.contains(&b'\n'))
}

async fn upload_corpus(State(s): State<Session>, req: Request) -> ApiResult<Response> {
    let (parts, body) = req.into_parts();
    let bytes = axum::body::to_bytes(body, MAX_BODY).await.map_err(|e| SessionError::InvalidRequest(e.to_string()))?;
    if is_empty_form(&bytes) {
        return Ok(Json(Vec::<crate::session::CorpusReport>::new()).into_response());
    }
    let req = Request::from_parts(parts, Body::from(bytes));
    let mut form = Multipart::from_request(req, &()).await.map_err(|e| SessionError::InvalidRequest(e.body_text()))?;
    let mut files = Vec::new();
    while let Some(field) = form.next_field().await.map_err(|e| SessionError::InvalidRequest(e.to_string()))? {
        let name = field.file_name().or(field.name()).unwrap_or("unnamed").to_string();
        let bytes = field.bytes().await.map_err(|e| SessionError::InvalidRequest(e.to_string()))?;
        files.push((name, bytes.to_vec()));
    }
    let reports = blocking(move || s.upload_corpus(files)).await;
    Ok(Json(reports).into_response())
}

async fn start_training(State(s): State<Session>, body: Option<Json<TrainConfig>>) -> ApiResult<Response> {
    let cfg = body.map(|Json(c)| c).unwrap_or_default();
    s.start_training(cfg)?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "accepted": true, "epochs": cfg.epochs }))).into_response())
}

async fn stop_training(State(s): State<Session>) -> Json<serde_json::Value> {
    Json(json!({ "stopping": s.stop_training() }))
}

async fn status(State(s): State<Session>) -> Response {
    Json(s.report()).into_response()
}

async fn set_latent(State(s): State<Session>, Json(z): Json<LatentVector>) -> ApiResult<Response> {
    let p = blocking(move || s.set_latent(z, LATENT_TIMEOUT)).await?;
    Ok(Json(p).into_response())
}

async fn pattern(State(s): State<Session>) -> ApiResult<Response> {
    Ok(Json(blocking(move || s.pattern()).await?).into_response())
}

#[derive(Deserialize)]
struct TransportRequest {
    playing: Option<bool>,
    tempo_bpm: Option<f64>,
}

async fn transport(State(s): State<Session>, Json(req): Json<TransportRequest>) -> ApiResult<Response> {
    Ok(Json(s.transport(req.playing, req.tempo_bpm)?).into_response())
}

async fn automation(State(s): State<Session>, Path(action): Path<String>) -> ApiResult<Response> {
    match action.as_str() {
        "record" => s.automation_record()?,
        "stop" => {
            s.automation_stop();
        }
        "play" => s.automation_play()?,
        other => return Err(SessionError::InvalidRequest(format!("unknown automation action {other:?}")).into()),
    }
    Ok(Json(s.snapshot().automation).into_response())
}

#[derive(Deserialize)]
struct ExportQuery {
    tempo: Option<f64>,
}

async fn export(State(s): State<Session>, Query(q): Query<ExportQuery>) -> ApiResult<Response> {
    let bytes = s.export_midi(q.tempo.unwrap_or(120.0))?;
    Ok(([(header::CONTENT_TYPE, "audio/midi")], bytes).into_response())
}

async fn get_model(State(s): State<Session>) -> ApiResult<Response> {
    let bytes = blocking(move || s.save_model()).await?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

async fn put_model(State(s): State<Session>, body: Bytes) -> ApiResult<Response> {
    blocking(move || s.load_model(&body)).await?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

#[derive(Deserialize)]
struct ThresholdBody {
    value: f64,
}

async fn get_threshold(State(s): State<Session>) -> Json<serde_json::Value> {
    Json(json!({ "value": s.threshold() }))
}

async fn put_threshold(State(s): State<Session>, Json(b): Json<ThresholdBody>) -> ApiResult<Json<serde_json::Value>> {
    s.set_threshold(b.value)?;
    Ok(Json(json!({ "value": s.threshold() })))
}

async fn stream(ws: WebSocketUpgrade, State(s): State<Session>) -> Response {
    ws.on_upgrade(move |socket| run_stream(socket, s))
}

fn encode(event: &StreamEvent) -> Message {
    Message::Text(serde_json::to_string(event).expect("events serialize").into())
}

async fn run_stream(socket: WebSocket, s: Session) {
    let (mut tx, mut rx) = socket.split();
    let mut events = s.subscribe();
    let mut greeting = vec![StreamEvent::Status(s.snapshot())];
    if let Ok(p) = s.pattern() {
        greeting.push(StreamEvent::Pattern(Box::new(p)));
    }
    for e in &greeting {
        if tx.send(encode(e)).await.is_err() {
            return;
        }
    }
    loop {
        tokio::select! {
            ev = events.recv() => match ev {
                Ok(e) => {
                    if tx.send(encode(&e)).await.is_err() {
                        break;
                    }
                }
                Err(RecvError::Lagged(_)) => continue,
                Err(RecvError::Closed) => break,
            },
            msg = rx.next() => match msg {
                Some(Ok(Message::Text(text))) => {
                    let reply = match serde_json::from_str::<InboundMessage>(&text) {
                        Ok(InboundMessage::Latent { x, y }) => s.submit_latent(LatentVector::new(x, y)).err(),
                        Err(e) => Some(SessionError::InvalidRequest(format!("bad message: {e}"))),
                    };
                    if let Some(err) = reply {
                        let e = StreamEvent::Error { code: err.code().to_string(), message: err.to_string() };
                        if tx.send(encode(&e)).await.is_err() {
                            break;
                        }
                    }
                }
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            },
        }
    }
}
