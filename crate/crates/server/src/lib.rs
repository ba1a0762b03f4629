//! Network front end of the hub: the HTTP command API, the envelope stream
//! over WebSocket and raw TCP (newline-delimited JSON), and the console's
//! static files.

use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{Html, IntoResponse, Redirect, Response};
use axum::routing::get;
use axum::{Json, Router};
use fedlab_core::command::Command;
use fedlab_core::experiment::parse_experiment;
use fedlab_core::hub::protocol::{Envelope, ProtocolHandler};
use fedlab_core::hub::{CommandOutput, Hub, HubError, TraceFilter};
use fedlab_core::trace::{write_csv, TraceRow};
use serde::Deserialize;
use serde_json::json;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tower_http::services::ServeDir;

const PLACEHOLDER: &str = include_str!("../assets/console.html");

/// How long shutdown waits for active runs to wind down.
const DRAIN: Duration = Duration::from_secs(10);

#[derive(Clone)]
struct AppState {
    hub: Arc<Hub>,
}

// ---- errors ------------------------------------------------------------------

struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn bad_request(code: &str, message: String) -> Self {
        ApiError { status: StatusCode::BAD_REQUEST, body: json!({ "error": code, "message": message }) }
    }
}

pub fn status_of(e: &HubError) -> StatusCode {
    match e {
        HubError::Unauthorized | HubError::UnknownSession(_) => StatusCode::UNAUTHORIZED,
        HubError::PermissionDenied(_) => StatusCode::FORBIDDEN,
        HubError::UnknownRun(_) | HubError::UnknownParticipant(_) => StatusCode::NOT_FOUND,
        HubError::NoActiveRun | HubError::DuplicateParticipant(_) => StatusCode::CONFLICT,
        HubError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        HubError::LinkDead(_) => StatusCode::BAD_GATEWAY,
        _ => StatusCode::BAD_REQUEST,
    }
}

impl From<HubError> for ApiError {
    fn from(e: HubError) -> Self {
        let mut body = serde_json::to_value(&e).expect("serializable");
        body["message"] = json!(e.to_string());
        ApiError { status: status_of(&e), body }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

// ---- operator sessions --------------------------------------------------------

/// An operator session that lives for one request.
struct Operator<'a> {
    hub: &'a Arc<Hub>,
    session: String,
}

impl<'a> Operator<'a> {
    fn from_headers(hub: &'a Arc<Hub>, headers: &HeaderMap) -> Result<Self, ApiError> {
        let token = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or(HubError::Unauthorized)?;
        let s = hub.login(token.trim())?;
        Ok(Operator { hub, session: s.id })
    }

    fn execute(&self, cmd: Command) -> Result<CommandOutput, ApiError> {
        Ok(self.hub.execute(&self.session, cmd)?)
    }
}

impl Drop for Operator<'_> {
    fn drop(&mut self) {
        self.hub.logout(&self.session);
    }
}

// ---- handlers -------------------------------------------------------------------

async fn start_run(State(st): State<AppState>, headers: HeaderMap, body: String) -> Result<Response, ApiError> {
    let op = Operator::from_headers(&st.hub, &headers)?;
    let exp = parse_experiment(&body).map_err(|e| ApiError::bad_request(e.code(), e.to_string()))?;
    let out = op.execute(Command::StartExperiment { experiment: Box::new(exp) })?;
    Ok((StatusCode::CREATED, Json(out)).into_response())
}

async fn run_command(
    State(st): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(cmd): Json<Command>,
) -> Result<Json<CommandOutput>, ApiError> {
    let op = Operator::from_headers(&st.hub, &headers)?;
    let cmd = match cmd {
        Command::StopExperiment { run } => Command::StopExperiment { run: run.or(Some(id)) },
        Command::SetValue { run, topic, value, unit } => {
            Command::SetValue { run: run.or(Some(id)), topic, value, unit }
        }
        Command::GetStatus { run } => Command::GetStatus { run: run.or(Some(id)) },
        Command::QueryTrace { mut filter } => {
            if filter.run.is_empty() {
                filter.run = id;
            }
            Command::QueryTrace { filter }
        }
        other => other,
    };
    Ok(Json(op.execute(cmd)?))
}

async fn run_status(
    State(st): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> Result<Json<serde_json::Value>, ApiError> {
    let op = Operator::from_headers(&st.hub, &headers)?;
    match op.execute(Command::GetStatus { run: Some(id) })? {
        CommandOutput::Status { runs } if runs.len() == 1 => Ok(Json(serde_json::to_value(&runs[0]).expect("json"))),
        other => Ok(Json(serde_json::to_value(other).expect("json"))),
    }
}

#[derive(Debug, Deserialize)]
struct TraceQuery {
    run: String,
    topic: Option<String>,
    source: Option<String>,
    from_ns: Option<u64>,
    to_ns: Option<u64>,
    /// `json` (default) or `csv`.
    format: Option<String>,
}

async fn trace(
    State(st): State<AppState>,
    Query(q): Query<TraceQuery>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let op = Operator::from_headers(&st.hub, &headers)?;
    let filter = TraceFilter { run: q.run, topic: q.topic, source: q.source, from_ns: q.from_ns, to_ns: q.to_ns };
    let CommandOutput::Trace { records } = op.execute(Command::QueryTrace { filter })? else {
        unreachable!("query_trace answers with a trace");
    };
    match q.format.as_deref() {
        None | Some("json") => Ok(Json(records).into_response()),
        Some("csv") => {
            let rows: Vec<TraceRow> =
                records.into_iter().map(|r| TraceRow { sample: r.sample, wall_time_ns: r.wall_time_ns }).collect();
            Ok(([(header::CONTENT_TYPE, "text/csv")], write_csv(&rows)).into_response())
        }
        Some(other) => Err(ApiError::bad_request("invalid-format", format!("unknown format `{other}` (json, csv)"))),
    }
}

async fn resources(State(st): State<AppState>, headers: HeaderMap) -> Result<Json<CommandOutput>, ApiError> {
    let op = Operator::from_headers(&st.hub, &headers)?;
    Ok(Json(op.execute(Command::ListResources)?))
}

async fn stream(State(st): State<AppState>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| websocket_session(socket, st.hub))
}

// ---- envelope transports --------------------------------------------------------

/// Moves asynchronously pushed envelopes (grants, stream events) of one
/// connection onto a tokio channel.
fn bridge_outbox(handler: &ProtocolHandler) -> mpsc::Receiver<Envelope> {
    let outbox = handler.outbox();
    let (tx, rx) = mpsc::channel(1024);
    std::thread::spawn(move || loop {
        match outbox.recv_timeout(Duration::from_millis(200)) {
            Ok(env) => {
                if tx.blocking_send(env).is_err() {
                    break;
                }
            }
            Err(crossbeam_channel::RecvTimeoutError::Timeout) => {
                if tx.is_closed() {
                    break;
                }
            }
            Err(crossbeam_channel::RecvTimeoutError::Disconnected) => break,
        }
    });
    rx
}

async fn websocket_session(mut socket: WebSocket, hub: Arc<Hub>) {
    let mut handler = ProtocolHandler::new(hub);
    let mut pushed = bridge_outbox(&handler);
    loop {
        tokio::select! {
            msg = socket.recv() => {
                let text = match msg {
                    Some(Ok(Message::Text(t))) => t.to_string(),
                    Some(Ok(Message::Binary(b))) => String::from_utf8_lossy(&b).into_owned(),
                    Some(Ok(Message::Ping(_) | Message::Pong(_))) => continue,
                    _ => break,
                };
                for line in text.lines() {
                    for reply in handler.handle_line(line) {
                        if socket.send(Message::Text(reply.to_line().into())).await.is_err() {
                            return;
                        }
                    }
                }
            }
            Some(env) = pushed.recv() => {
                if socket.send(Message::Text(env.to_line().into())).await.is_err() {
                    break;
                }
            }
        }
    }
    handler.close();
}

async fn ndjson_session(stream: TcpStream, hub: Arc<Hub>) {
    let (read, mut write) = stream.into_split();
    let mut lines = BufReader::new(read).lines();
    let mut handler = ProtocolHandler::new(hub);
    let mut pushed = bridge_outbox(&handler);
    loop {
        let out: Vec<Envelope> = tokio::select! {
            line = lines.next_line() => match line {
                Ok(Some(line)) => handler.handle_line(&line),
                _ => break,
            },
            Some(env) = pushed.recv() => vec![env],
        };
        for env in out {
            let mut text = env.to_line();
            text.push('\n');
            if write.write_all(text.as_bytes()).await.is_err() {
                handler.close();
                return;
            }
        }
    }
    handler.close();
}

/// Accepts NDJSON envelope connections until the listener fails.
pub async fn serve_ndjson(listener: TcpListener, hub: Arc<Hub>) {
    loop {
        match listener.accept().await {
            Ok((stream, peer)) => {
                log::debug!("ndjson connection from {peer}");
                tokio::spawn(ndjson_session(stream, hub.clone()));
            }
            Err(e) => {
                log::error!("ndjson accept: {e}");
                break;
            }
        }
    }
}

// ---- assembly -----------------------------------------------------------------

/// The HTTP application. Console assets are served from `console_dir` under
/// `/console/`; without one a placeholder page points at the API.
pub fn app(hub: Arc<Hub>, console_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/v1/runs", axum::routing::post(start_run))
        .route("/api/v1/runs/{id}/commands", axum::routing::post(run_command))
        .route("/api/v1/runs/{id}/status", get(run_status))
        .route("/api/v1/trace", get(trace))
        .route("/api/v1/resources", get(resources))
        .route("/api/v1/stream", get(stream))
        .route("/console", get(|| async { Redirect::permanent("/console/") }))
        .with_state(AppState { hub });
    match console_dir {
        Some(dir) => api.nest_service("/console/", ServeDir::new(dir)),
        None => api.route("/console/", get(|| async { Html(PLACEHOLDER) })),
    }
}

pub struct ServeOptions {
    pub console_dir: Option<PathBuf>,
    /// Extra listener for NDJSON envelopes over plain TCP.
    pub ndjson: Option<TcpListener>,
}

/// Runs the daemon until `shutdown` resolves, then stops active runs and
/// seals the trace store so that persisted rows equal acknowledged rows.
pub async fn serve(
    hub: Arc<Hub>,
    http: TcpListener,
    opts: ServeOptions,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    if let Some(l) = opts.ndjson {
        tokio::spawn(serve_ndjson(l, hub.clone()));
    }
    let app = app(hub.clone(), opts.console_dir);
    axum::serve(http, app).with_graceful_shutdown(shutdown).await?;
    drain(hub).await
}

/// Stops every active run, waits for it to wind down, and seals the store.
pub async fn drain(hub: Arc<Hub>) -> std::io::Result<()> {
    let active: Vec<_> = hub.runs().into_iter().filter(|r| r.state().is_active()).collect();
    for run in &active {
        log::info!("stopping {}", run.id);
        run.request_stop();
    }
    let waiting = tokio::task::spawn_blocking(move || {
        for run in active {
            run.wait();
        }
    });
    if tokio::time::timeout(DRAIN, waiting).await.is_err() {
        log::warn!("runs did not stop within {DRAIN:?}; sealing the store anyway");
    }
    hub.store().seal()?;
    log::info!("trace store sealed with {} rows", hub.store().len());
    Ok(())
}

/// Binds a listener; the error names the address.
pub async fn bind(addr: SocketAddr) -> Result<TcpListener, String> {
    TcpListener::bind(addr).await.map_err(|e| format!("BindError: {addr}: {e}"))
}
