//! Live service: the simulation engine paced to the wall clock, an HTTP and
//! server-sent-events API, and an optional newline-JSON wire listener for
//! controllers running outside the process.

use std::collections::HashMap;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use nin_dsm_core::engine::Engine;
use nin_dsm_core::protocol::{Envelope, LedgerEvent};
use nin_dsm_core::scenario::{ActionKind, Scenario};
use nin_dsm_core::snc::Archetype;
use nin_dsm_core::InvariantBreach;
use serde::Deserialize;
use serde_json::json;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{broadcast, mpsc};
use tokio::task::JoinHandle;

pub const TICK: Duration = Duration::from_millis(10);
const EVENT_BUFFER: usize = 1024;

/// Drops the scripted actions that become endpoints and keeps the engine
/// running past the scripted END.
pub fn live_scenario(mut scenario: Scenario) -> Scenario {
    scenario.events.retain(|e| !matches!(e.action, ActionKind::CallAgv | ActionKind::ToggleSn2));
    for e in &mut scenario.events {
        if e.action == ActionKind::End {
            e.at_ms = u64::MAX;
        }
    }
    scenario
}

struct Live {
    engine: Engine,
    published: usize,
    clients: HashMap<String, mpsc::UnboundedSender<String>>,
    breach: Option<InvariantBreach>,
}

impl Live {
    /// Pushes new ledger events to subscribers and external replies to
    /// their connections.
    fn flush(&mut self, events: &broadcast::Sender<LedgerEvent>) {
        for e in &self.engine.ledger()[self.published..] {
            let _ = events.send(e.clone());
        }
        self.published = self.engine.ledger().len();
        for (sn_id, envelope) in self.engine.take_external_outbox() {
            if let Some(tx) = self.clients.get(&sn_id) {
                if tx.send(envelope.to_line()).is_err() {
                    self.clients.remove(&sn_id);
                }
            }
        }
    }

    fn record(&mut self, result: Result<(), InvariantBreach>) -> Result<(), InvariantBreach> {
        if let Err(b) = &result {
            self.breach = Some(b.clone());
        }
        result
    }
}

#[derive(Clone)]
struct App {
    live: Arc<Mutex<Live>>,
    events: broadcast::Sender<LedgerEvent>,
}

impl App {
    fn lock(&self) -> MutexGuard<'_, Live> {
        self.live.lock().unwrap_or_else(|p| p.into_inner())
    }
}

/// A running service.
pub struct Service {
    pub http_addr: SocketAddr,
    pub wire_addr: Option<SocketAddr>,
    ticker: JoinHandle<InvariantBreach>,
    tasks: Vec<JoinHandle<()>>,
}

impl Service {
    /// Waits until the engine stops on an invariant breach.
    pub async fn breach(&mut self) -> InvariantBreach {
        match (&mut self.ticker).await {
            Ok(b) => b,
            Err(e) => InvariantBreach { time_ms: 0, message: format!("engine task failed: {e}") },
        }
    }

    pub fn shutdown(self) {
        self.ticker.abort();
        for t in self.tasks {
            t.abort();
        }
    }
}

/// Binds the listeners and starts the engine clock.
pub async fn start(scenario: Scenario, listen: &str, wire: Option<&str>) -> anyhow::Result<Service> {
    let engine = Engine::new(live_scenario(scenario), None)?;
    let http = TcpListener::bind(listen).await.with_context(|| format!("binding {listen}"))?;
    let wire = match wire {
        Some(addr) => Some(TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?),
        None => None,
    };
    let (events, _) = broadcast::channel(EVENT_BUFFER);
    let app = App {
        live: Arc::new(Mutex::new(Live { engine, published: 0, clients: HashMap::new(), breach: None })),
        events,
    };

    let http_addr = http.local_addr()?;
    let wire_addr = wire.as_ref().map(TcpListener::local_addr).transpose()?;
    let router = router(app.clone());
    let mut tasks = vec![tokio::spawn(async move {
        if let Err(e) = axum::serve(http, router).await {
            eprintln!("http server stopped: {e}");
        }
    })];
    if let Some(listener) = wire {
        tasks.push(tokio::spawn(accept_wire(listener, app.clone())));
    }
    let ticker = tokio::spawn(tick(app));
    Ok(Service { http_addr, wire_addr, ticker, tasks })
}

/// Entry point for the `serve` subcommand.
pub fn run_blocking(scenario: &Path, listen: &str, wire: Option<&str>) -> anyhow::Result<()> {
    let scenario = crate::load_scenario(scenario)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let mut service = start(scenario, listen, wire).await?;
        eprintln!("serving on http://{}", service.http_addr);
        if let Some(w) = service.wire_addr {
            eprintln!("wire listener on {w}");
        }
        tokio::select! {
            breach = service.breach() => Err(anyhow::Error::new(breach)),
            _ = tokio::signal::ctrl_c() => {
                service.shutdown();
                Ok(())
            }
        }
    })
}

async fn tick(app: App) -> InvariantBreach {
    let started = Instant::now();
    let mut interval = tokio::time::interval(TICK);
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
    loop {
        interval.tick().await;
        let target = started.elapsed().as_millis() as u64;
        let mut live = app.lock();
        if let Some(b) = live.breach.clone() {
            return b;
        }
        let result = live.engine.run_until(Some(target));
        if let Err(b) = live.record(result) {
            live.flush(&app.events);
            return b;
        }
        live.flush(&app.events);
    }
}

fn router(app: App) -> Router {
    Router::new()
        .route("/state", get(state))
        .route("/ledger", get(ledger))
        .route("/routing", get(routing))
        .route("/events", get(events))
        .route("/intent", post(intent))
        .route("/release", post(release))
        .route("/call-agv", post(call_agv))
        .route("/toggle-sn2", post(toggle_sn2))
        .with_state(app)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn breach_response(b: InvariantBreach) -> Response {
    error(StatusCode::INTERNAL_SERVER_ERROR, b.to_string())
}

async fn state(State(app): State<App>) -> Json<serde_json::Value> {
    Json(app.lock().engine.state_json())
}

#[derive(Debug, Deserialize)]
struct FromQuery {
    from: Option<u64>,
}

async fn ledger(State(app): State<App>, Query(q): Query<FromQuery>) -> Json<Vec<LedgerEvent>> {
    let live = app.lock();
    let from = q.from.unwrap_or(1).max(1);
    let events = live.engine.ledger()[..live.published].iter().filter(|e| e.seq >= from).cloned().collect();
    Json(events)
}

async fn routing(State(app): State<App>) -> Json<serde_json::Value> {
    Json(app.lock().engine.routing_dump())
}

fn sse_event(e: &LedgerEvent) -> Result<Event, Infallible> {
    Ok(Event::default().event("ledger").id(e.seq.to_string()).data(e.to_line()))
}

/// Ledger events as they are appended. With `?from=seq` earlier events are
/// sent first. A subscriber that falls behind is disconnected and should
/// reconnect with `from`.
async fn events(
    State(app): State<App>,
    Query(q): Query<FromQuery>,
) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let (backlog, rx) = {
        let live = app.lock();
        let rx = app.events.subscribe();
        let backlog: Vec<LedgerEvent> = match q.from {
            Some(from) => {
                live.engine.ledger()[..live.published].iter().filter(|e| e.seq >= from).cloned().collect()
            }
            None => Vec::new(),
        };
        (backlog, rx)
    };
    let live_events = stream::unfold(rx, |mut rx| async move {
        match rx.recv().await {
            Ok(e) => Some((e, rx)),
            Err(_) => None,
        }
    });
    let stream = stream::iter(backlog).chain(live_events).map(|e| sse_event(&e));
    Sse::new(stream).keep_alive(KeepAlive::default())
}

#[derive(Debug, Deserialize)]
struct IntentBody {
    sn_id: String,
    eta_ms: u64,
}

async fn intent(State(app): State<App>, Json(body): Json<IntentBody>) -> Response {
    let mut guard = app.lock();
    let live = &mut *guard;
    let result = live.engine.operator_intent(&body.sn_id, body.eta_ms);
    let result = live.record(result);
    live.flush(&app.events);
    match result {
        Ok(()) => (StatusCode::ACCEPTED, Json(json!({ "sn_id": body.sn_id, "time_ms": live.engine.now() }))).into_response(),
        Err(b) => breach_response(b),
    }
}

#[derive(Debug, Deserialize)]
struct SnBody {
    sn_id: String,
}

async fn release(State(app): State<App>, Json(body): Json<SnBody>) -> Response {
    let mut guard = app.lock();
    let live = &mut *guard;
    let result = live.engine.operator_release(&body.sn_id);
    let result = live.record(result);
    live.flush(&app.events);
    match result {
        Ok(()) => (StatusCode::ACCEPTED, Json(json!({ "sn_id": body.sn_id, "time_ms": live.engine.now() }))).into_response(),
        Err(b) => breach_response(b),
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptionalSn {
    sn_id: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ToggleBody {
    on: bool,
    sn_id: Option<String>,
}

fn parse_body<T: for<'de> Deserialize<'de> + Default>(body: &Bytes) -> Result<T, Response> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| error(StatusCode::BAD_REQUEST, e.to_string()))
}

/// Picks the named agent, or the only agent matching `pred`.
fn pick_agent(engine: &Engine, sn_id: Option<String>, pred: impl Fn(&Engine, &str) -> bool, what: &str) -> Result<String, Response> {
    match sn_id {
        Some(sn) if pred(engine, &sn) => Ok(sn),
        Some(sn) => Err(error(StatusCode::NOT_FOUND, format!("{sn} is not a {what} agent"))),
        None => {
            let mut matching = engine.agents().keys().filter(|sn| pred(engine, sn));
            match (matching.next(), matching.next()) {
                (Some(sn), None) => Ok(sn.clone()),
                (None, _) => Err(error(StatusCode::NOT_FOUND, format!("no {what} agent"))),
                _ => Err(error(StatusCode::BAD_REQUEST, format!("several {what} agents; give sn_id"))),
            }
        }
    }
}

async fn call_agv(State(app): State<App>, body: Bytes) -> Response {
    let req: OptionalSn = match parse_body(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let mut guard = app.lock();
    let live = &mut *guard;
    let is_agv = |e: &Engine, sn: &str| e.agent(sn).is_some_and(|a| a.agv_phase().is_some());
    let sn_id = match pick_agent(&live.engine, req.sn_id, is_agv, "AGV") {
        Ok(sn) => sn,
        Err(resp) => return resp,
    };
    let outcome = live.engine.call_agv(&sn_id);
    let outcome = match outcome {
        Ok(o) => o,
        Err(b) => {
            let _ = live.record(Err(b.clone()));
            return breach_response(b);
        }
    };
    live.flush(&app.events);
    match outcome {
        Ok(()) => {
            let phase = live.engine.agent(&sn_id).and_then(|a| a.agv_phase());
            (StatusCode::ACCEPTED, Json(json!({ "sn_id": sn_id, "phase": phase, "time_ms": live.engine.now() })))
                .into_response()
        }
        Err(busy) => (
            StatusCode::CONFLICT,
            Json(json!({ "error": busy.to_string(), "sn_id": sn_id, "phase": busy.0 })),
        )
            .into_response(),
    }
}

impl Default for ToggleBody {
    fn default() -> Self {
        Self { on: true, sn_id: None }
    }
}

async fn toggle_sn2(State(app): State<App>, body: Bytes) -> Response {
    let req: ToggleBody = match parse_body(&body) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let mut guard = app.lock();
    let live = &mut *guard;
    let is_sensing =
        |e: &Engine, sn: &str| e.agent(sn).is_some_and(|a| a.config().archetype == Archetype::Sensing);
    let sn_id = match pick_agent(&live.engine, req.sn_id, is_sensing, "SENSING") {
        Ok(sn) => sn,
        Err(resp) => return resp,
    };
    let result = live.engine.toggle(&sn_id, req.on);
    let result = live.record(result);
    live.flush(&app.events);
    match result {
        Ok(()) => (StatusCode::ACCEPTED, Json(json!({ "sn_id": sn_id, "on": req.on, "time_ms": live.engine.now() })))
            .into_response(),
        Err(b) => breach_response(b),
    }
}

async fn accept_wire(listener: TcpListener, app: App) {
    loop {
        match listener.accept().await {
            Ok((stream, _)) => {
                tokio::spawn(wire_connection(stream, app.clone()));
            }
            Err(e) => eprintln!("wire accept failed: {e}"),
        }
    }
}

/// One external controller. Every line is an envelope for the manager;
/// replies for the SNs seen on this connection are written back to it.
async fn wire_connection(stream: TcpStream, app: App) {
    let (read, mut write) = stream.into_split();
    let (tx, mut rx) = mpsc::unbounded_channel::<String>();
    let writer = tokio::spawn(async move {
        while let Some(mut line) = rx.recv().await {
            line.push('\n');
            if write.write_all(line.as_bytes()).await.is_err() {
                break;
            }
        }
    });
    let mut lines = BufReader::new(read).lines();
    while let Ok(Some(line)) = lines.next_line().await {
        if line.trim().is_empty() {
            continue;
        }
        match Envelope::from_line(&line) {
            Ok(envelope) => {
                let mut live = app.lock();
                let sn_id = envelope.message.sn_id().to_string();
                if live.engine.agent(&sn_id).is_some() {
                    let _ = tx.send(json!({ "error": format!("{sn_id} is simulated in-process") }).to_string());
                    continue;
                }
                live.clients.insert(sn_id, tx.clone());
                live.engine.inject(envelope);
            }
            Err(e) => {
                let _ = tx.send(json!({ "error": e.to_string() }).to_string());
            }
        }
    }
    drop(tx);
    let _ = writer.await;
}
