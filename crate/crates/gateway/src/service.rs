//! HTTP service: the request pipeline, token relay and status endpoints.
//!
//! Every chat request passes authenticate → rate limit → parse → input
//! filter before any replica is selected. The streamed response pulls
//! engine frames only as fast as the client reads, so a slow client slows
//! its engine connection instead of growing a buffer here.

use std::convert::Infallible;
use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::sse::{Event, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gatewise_core::clock::Timestamp;
use gatewise_core::protocol::{DoneFrame, SubmitFrame};
use gatewise_core::router::{
    spawn_prober, ConnectionPool, Connector, DispatchError, Dispatcher, EngineChunk, EngineStream, FailoverConfig,
    Registry, RouterError, RoutingPolicy, TcpConnector, TcpProber, DEFAULT_FAILURE_LIMIT, DEFAULT_PROBE_INTERVAL,
};
use gatewise_core::topology::{Topology, TopologyError};
use gatewise_core::trailer::ServerTiming;
use serde_json::json;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;
use tracing::info;

use crate::api::{ChatChunk, ChatCompletion, ChatRequest, Choice, Delta, ErrorEnvelope, Message, Usage};
use crate::auth::KeyStore;
use crate::filter::{ContentFilter, StreamFilter};
use crate::limiter::{Decision, RateLimiter};
use crate::observe::{ObservationRecord, ObservationSink, ObservationStatus};

type Conn = <TcpConnector as Connector>::Conn;

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub listen: SocketAddr,
    pub model: String,
    pub max_attempts: usize,
    /// Channels per replica; `None` uses max(8, max_batch).
    pub pool_cap: Option<usize>,
    pub acquire_timeout: Duration,
    pub probe_interval: Duration,
    pub failure_limit: u32,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            model: "simulated".into(),
            max_attempts: 3,
            pool_cap: None,
            acquire_timeout: Duration::from_secs(5),
            probe_interval: DEFAULT_PROBE_INTERVAL,
            failure_limit: DEFAULT_FAILURE_LIMIT,
        }
    }
}

#[derive(Debug, Default)]
pub struct Counters {
    by_status: [AtomicU64; 8],
}

fn status_index(s: ObservationStatus) -> usize {
    match s {
        ObservationStatus::Completed => 0,
        ObservationStatus::Failed => 1,
        ObservationStatus::Unavailable => 2,
        ObservationStatus::Cancelled => 3,
        ObservationStatus::Unauthorized => 4,
        ObservationStatus::RateLimited => 5,
        ObservationStatus::BadRequest => 6,
        ObservationStatus::Filtered => 7,
    }
}

impl Counters {
    pub fn get(&self, s: ObservationStatus) -> u64 {
        self.by_status[status_index(s)].load(Ordering::Relaxed)
    }

    fn bump(&self, s: ObservationStatus) {
        self.by_status[status_index(s)].fetch_add(1, Ordering::Relaxed);
    }
}

pub struct AppState {
    keys: KeyStore,
    limiter: RateLimiter,
    filter: ContentFilter,
    dispatcher: Dispatcher<TcpConnector>,
    policy: RoutingPolicy,
    sink: ObservationSink,
    model: String,
    inflight: AtomicUsize,
    next_id: AtomicU64,
    counters: Counters,
}

impl AppState {
    pub fn registry(&self) -> &Arc<Registry> {
        self.dispatcher.registry()
    }

    pub fn pool(&self) -> &Arc<ConnectionPool<TcpConnector>> {
        self.dispatcher.pool()
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn inflight(&self) -> usize {
        self.inflight.load(Ordering::SeqCst)
    }

    pub fn sink(&self) -> &ObservationSink {
        &self.sink
    }

    fn finish(&self, mut rec: ObservationRecord) {
        rec.finished.get_or_insert_with(Timestamp::now);
        self.counters.bump(rec.status);
        self.sink.record(rec);
    }

    fn reject(
        &self,
        mut rec: ObservationRecord,
        status: ObservationStatus,
        code: StatusCode,
        kind: &str,
        msg: String,
    ) -> Response {
        rec.status = status;
        rec.http_status = code.as_u16();
        rec.error = Some(msg.clone());
        self.finish(rec);
        (code, Json(ErrorEnvelope::new(kind, msg))).into_response()
    }
}

/// Builds the shared state from a topology.
pub fn build_state(
    config: &GatewayConfig,
    keys: KeyStore,
    filter: ContentFilter,
    topology: &Topology,
    sink: ObservationSink,
) -> Result<Arc<AppState>, TopologyError> {
    let handles = topology.handles()?;
    let mut pool = ConnectionPool::new(TcpConnector::default(), config.pool_cap.unwrap_or(8))
        .with_acquire_timeout(config.acquire_timeout);
    for (entry, h) in topology.replicas.iter().zip(&handles) {
        let cap = entry
            .pool_cap
            .or(config.pool_cap)
            .unwrap_or_else(|| gatewise_core::router::default_pool_cap(h.config.max_batch));
        pool = pool.with_cap(h.replica_id.clone(), cap);
    }
    let registry = Arc::new(Registry::new(handles).with_failure_limit(config.failure_limit));
    let failover = FailoverConfig { max_attempts: config.max_attempts, ..Default::default() };
    Ok(Arc::new(AppState {
        limiter: RateLimiter::new(&keys),
        keys,
        filter,
        dispatcher: Dispatcher::new(registry, Arc::new(pool), failover),
        policy: topology.policy.clone(),
        sink,
        model: config.model.clone(),
        inflight: AtomicUsize::new(0),
        next_id: AtomicU64::new(1),
        counters: Counters::default(),
    }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/chat/completions", post(chat))
        .route("/healthz", get(healthz))
        .route("/metrics", get(metrics))
        .with_state(state)
}

/// A running gateway.
pub struct Gateway {
    addr: SocketAddr,
    state: Arc<AppState>,
    server: JoinHandle<()>,
    prober: JoinHandle<()>,
    shutdown: Option<oneshot::Sender<()>>,
}

impl Gateway {
    pub async fn start(
        config: GatewayConfig,
        keys: KeyStore,
        filter: ContentFilter,
        topology: &Topology,
        sink: ObservationSink,
    ) -> io::Result<Self> {
        let state = build_state(&config, keys, filter, topology, sink)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        let listener = tokio::net::TcpListener::bind(config.listen).await?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let app = router(state.clone());
        let server = tokio::spawn(async move {
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
        let prober = spawn_prober(state.registry().clone(), TcpProber::default(), config.probe_interval);
        info!(%addr, replicas = state.registry().ids().len(), policy = state.policy.name(), "gateway listening");
        Ok(Self { addr, state, server, prober, shutdown: Some(tx) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn state(&self) -> &Arc<AppState> {
        &self.state
    }

    /// Stops accepting requests and waits for open ones to finish.
    pub async fn shutdown(mut self) {
        self.prober.abort();
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = (&mut self.server).await;
        self.state.sink.flush().await;
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        self.prober.abort();
        self.server.abort();
    }
}

struct InflightGuard {
    state: Arc<AppState>,
}

impl InflightGuard {
    fn enter(state: &Arc<AppState>) -> (Self, usize) {
        let now = state.inflight.fetch_add(1, Ordering::SeqCst) + 1;
        (Self { state: state.clone() }, now)
    }
}

impl Drop for InflightGuard {
    fn drop(&mut self) {
        self.state.inflight.fetch_sub(1, Ordering::SeqCst);
    }
}

fn since(t: Timestamp, origin: Timestamp) -> u64 {
    t.0.saturating_sub(origin.0)
}

fn server_timing(rec: &ObservationRecord, done: &DoneFrame, streamed: bool) -> ServerTiming {
    let at = |t: Option<Timestamp>| t.map_or(0, |t| since(t, rec.received));
    ServerTiming {
        replica_id: rec.replica_id.clone().unwrap_or_default(),
        gateway_dispatch_ns: at(rec.dispatched),
        gateway_first_engine_ns: at(rec.first_engine),
        gateway_first_byte_ns: at(rec.first_byte),
        engine_queue_ns: done.queue_ns,
        engine_inference_ns: if streamed { done.first_token_ns } else { done.inference_ns },
        engine_total_tokens: u64::from(done.total_tokens),
    }
}

fn finish_reason(total: u32, max_tokens: u32) -> String {
    if total >= max_tokens { "length" } else { "stop" }.to_string()
}

async fn chat(State(st): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Response {
    let received = Timestamp::now();
    let n = st.next_id.fetch_add(1, Ordering::Relaxed);
    let id = format!("chatcmpl-{n}");
    let mut rec = ObservationRecord::new(&id, received, false);

    let auth = headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok());
    let key = match st.keys.authenticate(auth) {
        Ok(k) => k,
        Err(e) => {
            return st.reject(
                rec,
                ObservationStatus::Unauthorized,
                StatusCode::UNAUTHORIZED,
                "authentication_error",
                e.to_string(),
            )
        }
    };
    rec.api_key_id = Some(key.id.clone());

    if let Decision::Deny { retry_after } = st.limiter.check(key) {
        let secs = retry_after.as_secs_f64().ceil().max(1.0) as u64;
        let mut resp = st.reject(
            rec,
            ObservationStatus::RateLimited,
            StatusCode::TOO_MANY_REQUESTS,
            "rate_limit_exceeded",
            format!("rate limit exceeded; retry in {secs}s"),
        );
        resp.headers_mut().insert(header::RETRY_AFTER, HeaderValue::from(secs));
        return resp;
    }

    let req: ChatRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => {
            return st.reject(
                rec,
                ObservationStatus::BadRequest,
                StatusCode::BAD_REQUEST,
                "invalid_request_error",
                e.to_string(),
            )
        }
    };
    rec.stream = req.stream;
    if let Err(msg) = req.validate() {
        return st.reject(rec, ObservationStatus::BadRequest, StatusCode::BAD_REQUEST, "invalid_request_error", msg);
    }
    let prompt = req.prompt();
    if let Some(term) = st.filter.check(&prompt) {
        let msg = format!("prompt contains blocked term {term:?}");
        return st.reject(rec, ObservationStatus::Filtered, StatusCode::UNPROCESSABLE_ENTITY, "content_filtered", msg);
    }
    rec.admitted = Some(Timestamp::now());

    let (guard, concurrency) = InflightGuard::enter(&st);
    let submit = SubmitFrame {
        request_id: n,
        prompt_tokens: 0,
        max_tokens: req.max_tokens,
        temperature: req.temperature,
        top_p: req.top_p,
        seed: n,
        prompt,
    };
    let engine = match st.dispatcher.route_with_failover(&submit, &st.policy, concurrency).await {
        Ok(s) => s,
        Err(e) => {
            rec.attempts = match &e {
                DispatchError::Exhausted { attempts, .. } => *attempts as u32,
                _ => 0,
            };
            let code = match e {
                DispatchError::Routing(RouterError::NoHealthyReplica) | DispatchError::Exhausted { .. } => {
                    StatusCode::SERVICE_UNAVAILABLE
                }
                _ => StatusCode::BAD_GATEWAY,
            };
            return st.reject(rec, ObservationStatus::Unavailable, code, "service_unavailable", e.to_string());
        }
    };
    rec.attempts = engine.attempts() as u32;
    rec.replica_id = Some(engine.replica_id().to_string());
    rec.dispatched = Some(engine.dispatched_at());
    rec.first_engine = Some(engine.first_frame_at());

    let model = if req.model.is_empty() { st.model.clone() } else { req.model.clone() };
    let created = chrono::Utc::now().timestamp();
    if req.stream {
        let relay = Relay {
            state: st.clone(),
            engine,
            rec: Some(rec),
            _guard: guard,
            filter: st.filter.stream(),
            id,
            model,
            created,
            max_tokens: req.max_tokens,
            phase: Phase::Streaming,
        };
        let events = futures::stream::unfold(relay, |mut relay| async move {
            relay.next_event().await.map(|ev| (Ok::<Event, Infallible>(ev), relay))
        });
        Sse::new(events).into_response()
    } else {
        buffered(st, engine, rec, guard, id, model, created, req.max_tokens).await
    }
}

#[allow(clippy::too_many_arguments)]
async fn buffered(
    st: Arc<AppState>,
    mut engine: EngineStream<Conn>,
    mut rec: ObservationRecord,
    _guard: InflightGuard,
    id: String,
    model: String,
    created: i64,
    max_tokens: u32,
) -> Response {
    let mut text = String::new();
    let mut filter = st.filter.stream();
    let done = loop {
        match engine.next().await {
            Some(Ok(EngineChunk::Token { text: t, .. })) => {
                rec.n_tokens += 1;
                if let Some(term) = filter.push(&t) {
                    drop(engine);
                    let msg = format!("completion contains blocked term {term:?}");
                    return st.reject(
                        rec,
                        ObservationStatus::Filtered,
                        StatusCode::UNPROCESSABLE_ENTITY,
                        "content_filtered",
                        msg,
                    );
                }
                text.push_str(&t);
            }
            Some(Ok(EngineChunk::Done(d))) => break d,
            Some(Err(e)) => {
                return st.reject(
                    rec,
                    ObservationStatus::Failed,
                    StatusCode::BAD_GATEWAY,
                    "upstream_failure",
                    e.to_string(),
                )
            }
            None => {
                return st.reject(
                    rec,
                    ObservationStatus::Failed,
                    StatusCode::BAD_GATEWAY,
                    "upstream_failure",
                    "stream ended early".into(),
                )
            }
        }
    };
    rec.first_byte = Some(Timestamp::now());
    let timing = server_timing(&rec, &done, false);
    let body = ChatCompletion {
        id,
        object: "chat.completion".into(),
        created,
        model,
        choices: vec![Choice {
            index: 0,
            message: Message { role: "assistant".into(), content: text },
            finish_reason: finish_reason(done.total_tokens, max_tokens),
        }],
        usage: Usage { prompt_tokens: 0, completion_tokens: done.total_tokens, total_tokens: done.total_tokens },
        x_timeline: Some(timing),
    };
    st.finish(rec);
    Json(body).into_response()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Streaming,
    SendDone,
    Ended,
}

/// Relays one engine stream to the client as SSE events. Dropped early
/// (client gone), it records the request as cancelled and its engine
/// stream closes the channel.
struct Relay {
    state: Arc<AppState>,
    engine: EngineStream<Conn>,
    rec: Option<ObservationRecord>,
    _guard: InflightGuard,
    filter: StreamFilter,
    id: String,
    model: String,
    created: i64,
    max_tokens: u32,
    phase: Phase,
}

impl Relay {
    fn rec(&mut self) -> &mut ObservationRecord {
        self.rec.as_mut().expect("record present while streaming")
    }

    fn end(&mut self, status: ObservationStatus, error: Option<String>) {
        self.phase = Phase::Ended;
        if let Some(mut rec) = self.rec.take() {
            rec.status = status;
            rec.error = error;
            self.state.finish(rec);
        }
    }

    fn chunk_event(chunk: &ChatChunk) -> Event {
        Event::default().data(serde_json::to_string(chunk).expect("chunk serializes"))
    }

    fn error_event(kind: &str, message: String) -> Event {
        Event::default().data(serde_json::to_string(&ErrorEnvelope::new(kind, message)).expect("error serializes"))
    }

    async fn next_event(&mut self) -> Option<Event> {
        match self.phase {
            Phase::Ended => return None,
            Phase::SendDone => {
                self.phase = Phase::Ended;
                return Some(Event::default().data("[DONE]"));
            }
            Phase::Streaming => {}
        }
        match self.engine.next().await {
            Some(Ok(EngineChunk::Token { seq, text })) => {
                if let Some(term) = self.filter.push(&text) {
                    let msg = format!("completion contains blocked term {term:?}");
                    self.end(ObservationStatus::Filtered, Some(msg.clone()));
                    return Some(Self::error_event("content_filtered", msg));
                }
                let first = self.rec().first_byte.is_none();
                let delta = Delta { role: first.then(|| "assistant".to_string()), content: Some(text) };
                let mut chunk = ChatChunk::new(&self.id, self.created, &self.model, delta, None);
                chunk.x_seq = Some(seq);
                let rec = self.rec();
                rec.n_tokens += 1;
                if first {
                    rec.first_byte = Some(Timestamp::now());
                }
                Some(Self::chunk_event(&chunk))
            }
            Some(Ok(EngineChunk::Done(done))) => {
                let rec = self.rec();
                rec.engine_queue_ns = Some(done.queue_ns);
                rec.engine_inference_ns = Some(done.first_token_ns);
                let timing = server_timing(rec, &done, true);
                let reason = finish_reason(done.total_tokens, self.max_tokens);
                let mut chunk = ChatChunk::new(&self.id, self.created, &self.model, Delta::default(), Some(reason));
                chunk.x_timeline = Some(timing);
                self.end(ObservationStatus::Completed, None);
                self.phase = Phase::SendDone;
                Some(Self::chunk_event(&chunk))
            }
            Some(Err(e)) => {
                let msg = e.to_string();
                self.end(ObservationStatus::Failed, Some(msg.clone()));
                Some(Self::error_event("upstream_failure", msg))
            }
            None => {
                self.end(ObservationStatus::Failed, Some("engine stream ended without DONE".into()));
                None
            }
        }
    }
}

impl Drop for Relay {
    fn drop(&mut self) {
        if self.rec.is_some() {
            self.end(ObservationStatus::Cancelled, Some("client disconnected".into()));
        }
    }
}

async fn healthz(State(st): State<Arc<AppState>>) -> Response {
    let snap = st.registry().snapshot();
    let healthy = snap.iter().filter(|r| r.healthy).count();
    let code = if healthy > 0 { StatusCode::OK } else { StatusCode::SERVICE_UNAVAILABLE };
    (code, Json(json!({ "status": if healthy > 0 { "ok" } else { "degraded" }, "healthy_replicas": healthy, "replicas": snap.len() })))
        .into_response()
}

async fn metrics(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    use ObservationStatus::*;
    let c = &st.counters;
    let replicas: Vec<serde_json::Value> = st
        .registry()
        .snapshot()
        .into_iter()
        .map(|r| {
            json!({
                "replica_id": r.replica_id,
                "address": r.address,
                "healthy": r.healthy,
                "inflight": r.inflight,
                "consecutive_failures": r.consecutive_failures,
                "open_connections": st.pool().open_connections(&r.replica_id),
                "connections_opened": st.pool().connections_opened(&r.replica_id),
            })
        })
        .collect();
    Json(json!({
        "inflight": st.inflight(),
        "policy": st.policy.name(),
        "requests": {
            "completed": c.get(Completed),
            "failed": c.get(Failed),
            "unavailable": c.get(Unavailable),
            "cancelled": c.get(Cancelled),
            "unauthorized": c.get(Unauthorized),
            "rate_limited": c.get(RateLimited),
            "bad_request": c.get(BadRequest),
            "filtered": c.get(Filtered),
        },
        "replicas": replicas,
        "observations": { "written": st.sink.written(), "failed": st.sink.failed() },
    }))
}
