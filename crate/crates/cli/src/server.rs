//! Coordinator service: agent TCP listener, timer loop and the operator HTTP
//! API, all feeding one [`Coordinator`] behind a mutex.

use std::collections::{BTreeSet, HashMap};
use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use axum::body::Body;
use axum::extract::rejection::JsonRejection;
use axum::extract::{MatchedPath, Path, Request, State};
use axum::http::{header, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use digitizer_core::coordinator::store::CaptureStore;
use digitizer_core::coordinator::{
    ApiError, ApiErrorKind, ConnId, CoordOutput, Coordinator, CoordinatorConfig, LightsRequest, LightsResponse,
    NodesResponse, PatternRequest, PatternResponse, SessionView, StartSession,
};
use digitizer_core::fleet::{FleetJob, FleetReport};
use digitizer_core::protocol::{encode_message, FrameReader, Message};
use digitizer_core::{SessionId, Timestamp};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{broadcast, mpsc, Notify};
use tokio::task::JoinHandle;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub agent_addr: SocketAddr,
    pub api_addr: SocketAddr,
    pub captures: PathBuf,
    pub coordinator: CoordinatorConfig,
}

enum Outbound {
    Msg(Message),
    Close,
}

struct Core {
    coord: Coordinator,
    conns: HashMap<ConnId, mpsc::UnboundedSender<Outbound>>,
    next_conn: ConnId,
}

#[derive(Clone)]
struct Shared {
    core: Arc<Mutex<Core>>,
    events: broadcast::Sender<String>,
    timer: Arc<Notify>,
    hits: Arc<Mutex<BTreeSet<(String, String)>>>,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, Core> {
        self.core.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Runs `f` at the current time and routes everything it produced.
    fn with<R>(&self, f: impl FnOnce(&mut Core, Timestamp) -> R) -> R {
        let mut core = self.lock();
        let r = f(&mut core, Timestamp::now_wall());
        self.drain(&mut core);
        r
    }

    fn drain(&self, core: &mut Core) {
        while let Some(out) = core.coord.poll_output() {
            match out {
                CoordOutput::Send { conn, msg } => {
                    if let Some(tx) = core.conns.get(&conn) {
                        let _ = tx.send(Outbound::Msg(msg));
                    }
                }
                CoordOutput::Close { conn } => {
                    if let Some(tx) = core.conns.remove(&conn) {
                        let _ = tx.send(Outbound::Close);
                    }
                }
                CoordOutput::Event(e) => {
                    let line = serde_json::to_string(&e).expect("events serialize");
                    tracing::debug!(target: "coordinator::events", "{line}");
                    // no subscribers is fine
                    let _ = self.events.send(line);
                }
            }
        }
        self.timer.notify_one();
    }
}

/// A running coordinator. Dropping the handle leaves the tasks running;
/// call [`ServerHandle::shutdown`] to stop them.
pub struct ServerHandle {
    pub agent_addr: SocketAddr,
    pub api_addr: SocketAddr,
    shared: Shared,
    tasks: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    /// Operator endpoints served so far, as `(method, route)`.
    pub fn endpoint_hits(&self) -> BTreeSet<(String, String)> {
        self.shared.hits.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn nodes(&self) -> NodesResponse {
        self.shared.lock().coord.nodes()
    }

    pub fn shutdown(self) {
        for t in self.tasks {
            t.abort();
        }
    }
}

/// Binds both listeners and starts serving.
pub async fn start(cfg: ServerConfig) -> std::io::Result<ServerHandle> {
    let store = CaptureStore::open(&cfg.captures).map_err(std::io::Error::other)?;
    let shared = Shared {
        core: Arc::new(Mutex::new(Core {
            coord: Coordinator::new(cfg.coordinator.clone(), store),
            conns: HashMap::new(),
            next_conn: 1,
        })),
        events: broadcast::channel(1024).0,
        timer: Arc::new(Notify::new()),
        hits: Arc::default(),
    };
    let agents = TcpListener::bind(cfg.agent_addr).await?;
    let api = TcpListener::bind(cfg.api_addr).await?;
    let agent_addr = agents.local_addr()?;
    let api_addr = api.local_addr()?;

    let mut tasks = Vec::new();
    tasks.push(tokio::spawn(timer_loop(shared.clone())));
    let s = shared.clone();
    tasks.push(tokio::spawn(async move {
        loop {
            match agents.accept().await {
                Ok((stream, peer)) => {
                    tracing::info!(%peer, "agent connection");
                    tokio::spawn(serve_agent(s.clone(), stream));
                }
                Err(e) => tracing::warn!("accept failed: {e}"),
            }
        }
    }));
    let app = router(shared.clone());
    tasks.push(tokio::spawn(async move {
        if let Err(e) = axum::serve(api, app).await {
            tracing::error!("api server stopped: {e}");
        }
    }));
    tracing::info!(%agent_addr, %api_addr, "coordinator listening");
    Ok(ServerHandle { agent_addr, api_addr, shared, tasks })
}

async fn timer_loop(shared: Shared) {
    loop {
        let deadline = shared.lock().coord.poll_timeout();
        let wait = deadline.map_or(Duration::from_secs(3600), |t| t.saturating_since(Timestamp::now_wall()));
        tokio::select! {
            _ = tokio::time::sleep(wait) => shared.with(|c, now| c.coord.handle_timeout(now)),
            _ = shared.timer.notified() => {}
        }
    }
}

async fn serve_agent(shared: Shared, stream: TcpStream) {
    let _ = stream.set_nodelay(true);
    let (mut rd, mut wr) = stream.into_split();
    let (tx, mut rx) = mpsc::unbounded_channel();
    let conn = shared.with(|core, now| {
        let id = core.next_conn;
        core.next_conn += 1;
        core.conns.insert(id, tx);
        core.coord.on_connection_opened(now, id);
        id
    });
    let writer = tokio::spawn(async move {
        while let Some(out) = rx.recv().await {
            let Outbound::Msg(msg) = out else { break };
            let Ok(bytes) = encode_message(&msg) else { continue };
            if wr.write_all(&bytes).await.is_err() {
                break;
            }
        }
        let _ = wr.shutdown().await;
    });
    let mut reader = FrameReader::new();
    let mut buf = vec![0u8; 64 * 1024];
    'read: loop {
        let n = match rd.read(&mut buf).await {
            Ok(0) | Err(_) => break,
            Ok(n) => n,
        };
        reader.push(&buf[..n]);
        loop {
            match reader.next_message() {
                Ok(Some(msg)) => shared.with(|c, now| c.coord.on_message(now, conn, msg)),
                Ok(None) => break,
                Err(e) => {
                    tracing::warn!(conn, "dropping connection: {e}");
                    break 'read;
                }
            }
        }
    }
    shared.with(|c, now| {
        c.conns.remove(&conn);
        c.coord.on_connection_closed(now, conn);
    });
    let _ = writer.await;
}

/// Error body plus status code.
struct ApiFailure(ApiError);

impl IntoResponse for ApiFailure {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.0)).into_response()
    }
}

impl From<JsonRejection> for ApiFailure {
    fn from(r: JsonRejection) -> Self {
        ApiFailure(ApiError::new(ApiErrorKind::BadRequest, r.body_text()))
    }
}

type ApiResult<T> = Result<Json<T>, ApiFailure>;

fn not_found(what: String) -> ApiFailure {
    ApiFailure(ApiError::new(ApiErrorKind::NotFound, format!("{what} not found")))
}

fn router(shared: Shared) -> Router {
    Router::new()
        .route("/nodes", get(nodes))
        .route("/sessions", post(start_session))
        .route("/sessions/{id}", get(session))
        .route("/lights", post(lights))
        .route("/pattern", post(pattern))
        .route("/fleet", post(start_fleet))
        .route("/fleet/{id}", get(fleet_job))
        .route("/events", get(events))
        .layer(middleware::from_fn_with_state(shared.clone(), record_hit))
        .with_state(shared)
}

async fn record_hit(
    State(s): State<Shared>,
    method: Method,
    matched: Option<MatchedPath>,
    req: Request,
    next: Next,
) -> Response {
    if let Some(p) = matched {
        s.hits.lock().unwrap_or_else(|p| p.into_inner()).insert((method.to_string(), p.as_str().to_string()));
    }
    next.run(req).await
}

async fn nodes(State(s): State<Shared>) -> Json<NodesResponse> {
    Json(s.lock().coord.nodes())
}

async fn start_session(
    State(s): State<Shared>,
    body: Result<Json<StartSession>, JsonRejection>,
) -> ApiResult<SessionView> {
    let Json(req) = body?;
    s.with(|c, now| c.coord.start_session(now, req)).map(Json).map_err(ApiFailure)
}

async fn session(State(s): State<Shared>, Path(id): Path<String>) -> ApiResult<SessionView> {
    let v = s.lock().coord.session(&SessionId::new(id.clone()));
    v.map(Json).ok_or_else(|| not_found(format!("session {id}")))
}

async fn lights(
    State(s): State<Shared>,
    body: Result<Json<LightsRequest>, JsonRejection>,
) -> ApiResult<LightsResponse> {
    let Json(req) = body?;
    Ok(Json(s.with(|c, now| c.coord.set_lights(now, req.level))))
}

async fn pattern(
    State(s): State<Shared>,
    body: Result<Json<PatternRequest>, JsonRejection>,
) -> ApiResult<PatternResponse> {
    let Json(req) = body?;
    s.with(|c, now| c.coord.set_pattern(now, req.pattern)).map(Json).map_err(ApiFailure)
}

async fn start_fleet(State(s): State<Shared>, body: Result<Json<FleetJob>, JsonRejection>) -> ApiResult<FleetReport> {
    let Json(job) = body?;
    s.with(|c, now| c.coord.start_fleet(now, job)).map(Json).map_err(ApiFailure)
}

async fn fleet_job(State(s): State<Shared>, Path(id): Path<u64>) -> ApiResult<FleetReport> {
    let r = s.lock().coord.fleet_job(id);
    r.map(Json).ok_or_else(|| not_found(format!("fleet job {id}")))
}

/// Newline-delimited JSON, one coordinator event per line, from subscription
/// onwards. Clients refresh full state with `GET /nodes` after connecting.
async fn events(State(s): State<Shared>) -> impl IntoResponse {
    let rx = s.events.subscribe();
    let stream = futures::stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(line) => return Some((Ok::<_, Infallible>(format!("{line}\n")), rx)),
                Err(broadcast::error::RecvError::Lagged(n)) => tracing::warn!("event subscriber lagged by {n}"),
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    ([(header::CONTENT_TYPE, "application/x-ndjson")], Body::from_stream(stream))
}
