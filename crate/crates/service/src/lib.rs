//! Network service: a command channel and a telemetry stream over WebSocket, with a
//! newline-delimited TCP mode carrying the same JSON messages.

pub mod controller;
pub mod protocol;
pub mod session;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::serve::ListenerExt;
use axum::{Json, Router};
use futures::stream::SplitSink;
use futures::{SinkExt, StreamExt};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use mtctl_core::config::{ConfigDocument, MachineConfig, StationMachineConfig};

pub use controller::{Controller, Pacing};
use session::{FrameSink, Session};

/// Environment variable holding the static bearer token.
pub const TOKEN_ENV: &str = "MTCTL_TOKEN";

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub addr: SocketAddr,
    /// Optional plain-TCP listener using one JSON message per line.
    pub tcp_addr: Option<SocketAddr>,
    pub token: Option<String>,
    pub pacing: Pacing,
}

impl ServeOptions {
    pub fn local(port: u16) -> Self {
        Self {
            addr: SocketAddr::from(([127, 0, 0, 1], port)),
            tcp_addr: None,
            token: None,
            pacing: Pacing::Realtime,
        }
    }
}

#[derive(Clone)]
struct AppState {
    controller: Arc<Controller>,
    token: Option<String>,
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    pub tcp_addr: Option<SocketAddr>,
    pub controller: Arc<Controller>,
    shutdown: Option<oneshot::Sender<()>>,
    tasks: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        for t in self.tasks.drain(..) {
            t.abort();
            let _ = t.await;
        }
        self.controller.shutdown();
    }

    /// Blocks until the HTTP server exits.
    pub async fn wait(mut self) {
        if let Some(t) = self.tasks.first_mut() {
            let _ = t.await;
        }
    }
}

/// Binds the listeners and starts serving. Stations with a test in `doc` start Configured.
pub async fn serve(doc: ConfigDocument, opts: ServeOptions) -> std::io::Result<ServerHandle> {
    let controller = Controller::spawn(doc.machine, &doc.tests, opts.pacing)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string()))?;
    let state = AppState {
        controller: controller.clone(),
        token: opts.token.clone(),
    };
    let app = Router::new()
        .route("/health", get(health))
        .route("/ws", get(ws_upgrade))
        .with_state(state.clone());

    let listener = TcpListener::bind(opts.addr).await?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let mut tasks = vec![tokio::spawn(async move {
        // Small command replies must not wait on Nagle coalescing.
        let listener = listener.tap_io(|tcp| {
            let _ = tcp.set_nodelay(true);
        });
        let _ = axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await;
    })];

    let mut tcp_addr = None;
    if let Some(a) = opts.tcp_addr {
        let tcp = TcpListener::bind(a).await?;
        tcp_addr = Some(tcp.local_addr()?);
        tasks.push(tokio::spawn(tcp_accept(tcp, state)));
    }
    tracing::info!(%addr, ?tcp_addr, stations = controller.station_count(), "serving");
    Ok(ServerHandle {
        addr,
        tcp_addr,
        controller,
        shutdown: Some(tx),
        tasks,
    })
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "status": "ok",
        "stations": state.controller.station_count(),
    }))
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(axum::http::header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
}

async fn ws_upgrade(
    State(state): State<AppState>,
    Query(query): Query<HashMap<String, String>>,
    headers: HeaderMap,
    ws: WebSocketUpgrade,
) -> Response {
    let offered = bearer(&headers).or(query.get("token").map(String::as_str));
    let preauthorized = match (&state.token, offered) {
        (None, _) => true,
        (Some(t), Some(o)) if t == o => true,
        (Some(_), Some(_)) => return StatusCode::UNAUTHORIZED.into_response(),
        (Some(_), None) => false,
    };
    ws.on_upgrade(move |socket| ws_session(socket, state, preauthorized))
}

struct WsSink(SplitSink<WebSocket, Message>);

impl FrameSink for WsSink {
    async fn send_text(&mut self, text: String) -> std::io::Result<()> {
        self.0
            .send(Message::Text(text.into()))
            .await
            .map_err(std::io::Error::other)
    }
}

async fn ws_session(socket: WebSocket, state: AppState, preauthorized: bool) {
    let (tx, rx) = socket.split();
    let inbound = rx
        .take_while(|m| {
            futures::future::ready(matches!(m, Ok(m) if !matches!(m, Message::Close(_))))
        })
        .filter_map(|m| async move {
            match m {
                Ok(Message::Text(t)) => Some(t.to_string()),
                _ => None,
            }
        })
        .boxed();
    Session::new(state.controller, state.token, preauthorized)
        .run(inbound, WsSink(tx))
        .await;
}

struct LineSink(tokio::net::tcp::OwnedWriteHalf);

impl FrameSink for LineSink {
    async fn send_text(&mut self, mut text: String) -> std::io::Result<()> {
        text.push('\n');
        self.0.write_all(text.as_bytes()).await
    }
}

async fn tcp_accept(listener: TcpListener, state: AppState) {
    while let Ok((stream, _)) = listener.accept().await {
        let _ = stream.set_nodelay(true);
        tokio::spawn(tcp_session(stream, state.clone()));
    }
}

async fn tcp_session(stream: TcpStream, state: AppState) {
    let _ = stream.set_nodelay(true);
    let (r, w) = stream.into_split();
    let lines = tokio_stream_lines(BufReader::new(r));
    Session::new(state.controller, state.token, false)
        .run(lines, LineSink(w))
        .await;
}

fn tokio_stream_lines(
    reader: BufReader<tokio::net::tcp::OwnedReadHalf>,
) -> futures::stream::BoxStream<'static, String> {
    futures::stream::unfold(reader.lines(), |mut lines| async move {
        loop {
            match lines.next_line().await {
                Ok(Some(l)) if l.trim().is_empty() => continue,
                Ok(Some(l)) => return Some((l, lines)),
                _ => return None,
            }
        }
    })
    .boxed()
}

/// Demonstration machine: `n` identical servo stations with three sensor
/// channels and one e-stop input each.
pub fn demo_machine(n: usize) -> MachineConfig {
    let station = serde_json::json!({
        "actuator_kind": "dac_servo",
        "sensor_channels": [
            {"channel_id": 0, "quantity": "force", "fsr": 50.0, "noise_sigma": 5e-4},
            {"channel_id": 1, "quantity": "displacement", "fsr": 10.0, "noise_sigma": 1e-4},
            {"channel_id": 2, "quantity": "strain", "fsr": 20.0}
        ],
        "digital_inputs": [{"input_id": 0, "role": "estop"}],
        "actuator": {"gain": 10.0, "time_constant_tau": 0.01, "velocity_limit": 50.0},
        "specimen": {"stiffness_k": 100.0, "yield_force": 30.0, "plastic_slope": 5.0}
    });
    let station: StationMachineConfig =
        serde_json::from_value(station).expect("demo station is well formed");
    MachineConfig {
        station_count: n,
        tick_rate_hz: mtctl_core::config::DEFAULT_TICK_RATE_HZ,
        stations: vec![station; n],
    }
}

pub fn demo_document(n: usize) -> ConfigDocument {
    ConfigDocument {
        machine: demo_machine(n),
        tests: Vec::new(),
    }
}
