//! HTTP and websocket server for live sessions.

use std::io::Cursor;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::{Json, Router};
use dntx_core::ciec::{ExpressionType, NUM_TYPES};
use futures::{SinkExt, StreamExt};
use serde::Serialize;
use tokio::net::TcpListener;
use tokio::time::MissedTickBehavior;

use crate::dataset::to_png;
use crate::engine::{AudioCursor, Drive, Engine};
use crate::error::{Error, Result};
use crate::session::{FrameMeta, ServerMsg, SessionState, PROTOCOL_VERSION};

pub struct Shared {
    pub engine: Engine,
    pub drive: Drive,
    pub clip_id: String,
    pub fps: f64,
    pub slew: f64,
    sessions: AtomicU64,
}

impl Shared {
    pub fn new(engine: Engine, drive: Drive, clip_id: String, fps: f64, slew: f64) -> Result<Arc<Self>> {
        if !(fps > 0.0) || !(slew > 0.0) {
            return Err(Error::Config("fps and slew must be positive".into()));
        }
        engine.check_drive(&drive)?;
        Ok(Arc::new(Self { engine, drive, clip_id, fps, slew, sessions: AtomicU64::new(0) }))
    }
}

#[derive(Debug, Serialize)]
pub struct Health {
    pub v: u32,
    pub status: &'static str,
    pub model_id: String,
}

#[derive(Debug, Serialize)]
pub struct ModelInfo {
    pub v: u32,
    pub model_id: String,
    pub expressions: Vec<ExpressionType>,
    pub ciec_dim: usize,
    pub bases: usize,
    pub texture_size: usize,
    pub texture_channels: usize,
    pub height: usize,
    pub width: usize,
    pub teeth: bool,
    pub fps: f64,
    pub slew: f64,
    pub clip: String,
    pub clip_frames: usize,
}

pub fn router(shared: Arc<Shared>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/model/info", get(info))
        .route("/session", get(session))
        .with_state(shared)
}

async fn health(State(s): State<Arc<Shared>>) -> Json<Health> {
    Json(Health { v: PROTOCOL_VERSION, status: "ok", model_id: s.engine.loaded.model_id.clone() })
}

async fn info(State(s): State<Arc<Shared>>) -> Json<ModelInfo> {
    let m = &s.engine.loaded.model.cfg;
    Json(ModelInfo {
        v: PROTOCOL_VERSION,
        model_id: s.engine.loaded.model_id.clone(),
        expressions: ExpressionType::EXPRESSIVE.to_vec(),
        ciec_dim: NUM_TYPES,
        bases: m.bases,
        texture_size: m.texture_size,
        texture_channels: m.texture_channels,
        height: m.height,
        width: m.width,
        teeth: m.teeth,
        fps: s.fps,
        slew: s.slew,
        clip: s.clip_id.clone(),
        clip_frames: s.drive.len(),
    })
}

async fn session(ws: WebSocketUpgrade, State(s): State<Arc<Shared>>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| run_session(socket, s))
}

fn text(msg: &ServerMsg) -> Message {
    Message::Text(serde_json::to_string(msg).expect("serializable").into())
}

/// One session: a single task owns the state, reading control messages and
/// rendering on a fixed-rate tick. Rendering runs on the blocking pool.
async fn run_session(socket: WebSocket, shared: Arc<Shared>) {
    let id = shared.sessions.fetch_add(1, Ordering::Relaxed);
    let start = Instant::now();
    let now = move || start.elapsed().as_secs_f64();
    let mut state = SessionState::new(shared.slew, shared.drive.len(), 0.0).expect("validated on startup");
    let (mut tx, mut rx) = socket.split();
    let hello = ServerMsg::Hello {
        v: PROTOCOL_VERSION,
        session: id,
        model_id: shared.engine.loaded.model_id.clone(),
        fps: shared.fps,
        slew: shared.slew,
        frames: shared.drive.len(),
    };
    if tx.send(text(&hello)).await.is_err() {
        return;
    }
    let period = Duration::from_secs_f64(1.0 / shared.fps);
    let mut ticker = tokio::time::interval(period);
    ticker.set_missed_tick_behavior(MissedTickBehavior::Skip);
    let mut cursor = Some(AudioCursor::default());
    let mut last_start: Option<f64> = None;

    loop {
        tokio::select! {
            incoming = rx.next() => {
                let reply = match incoming {
                    Some(Ok(Message::Text(t))) => state.handle_text(t.as_str(), now()),
                    Some(Ok(Message::Binary(_))) => crate::session::error("malformed", "control messages are JSON text"),
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => continue,
                };
                if tx.send(text(&reply)).await.is_err() {
                    break;
                }
            }
            _ = ticker.tick() => {
                let t = now();
                // late when the gap since the previous frame exceeds 1.5 periods
                let lagging = last_start.is_some_and(|l| t - l > 1.5 * period.as_secs_f64());
                last_start = Some(t);
                let plan = state.plan_frame(t);
                let sh = shared.clone();
                let mut cur = cursor.take().expect("cursor returned after each frame");
                let job = tokio::task::spawn_blocking(move || {
                    let clock = Instant::now();
                    let out = sh.engine.render(&sh.drive, &mut cur, plan.cursor, plan.ciec);
                    let png = out.and_then(|o| {
                        let mut buf = Vec::new();
                        to_png(&o.image)?
                            .write_to(&mut Cursor::new(&mut buf), image::ImageFormat::Png)
                            .map_err(|e| Error::Numerical(e.to_string()))?;
                        Ok((o.weights, buf))
                    });
                    (png, clock.elapsed().as_secs_f64() * 1e3, cur)
                });
                let Ok((result, render_ms, cur)) = job.await else { break };
                cursor = Some(cur);
                let (weights, png) = match result {
                    Ok(r) => r,
                    Err(e) => {
                        let _ = tx.send(text(&crate::session::error("render_failed", e.to_string()))).await;
                        break;
                    }
                };
                let meta = ServerMsg::Frame(FrameMeta {
                    v: PROTOCOL_VERSION,
                    frame: plan.frame,
                    cursor: plan.cursor,
                    ciec: plan.ciec.into(),
                    target: plan.target.into(),
                    weights,
                    render_ms,
                    lagging,
                });
                if tx.send(text(&meta)).await.is_err() || tx.send(Message::Binary(png.into())).await.is_err() {
                    break;
                }
            }
        }
    }
}

/// Binds and serves until the process ends.
pub async fn serve(shared: Arc<Shared>, bind: &str) -> Result<()> {
    let listener = TcpListener::bind(bind).await.map_err(Error::io(bind))?;
    log::info!("listening on http://{}", listener.local_addr().map_err(Error::io(bind))?);
    axum::serve(listener, router(shared)).await.map_err(Error::io(bind))
}

/// Binds an ephemeral port and serves in the background.
pub async fn spawn(shared: Arc<Shared>) -> Result<SocketAddr> {
    let listener = TcpListener::bind("127.0.0.1:0").await.map_err(Error::io("127.0.0.1:0"))?;
    let addr = listener.local_addr().map_err(Error::io("127.0.0.1:0"))?;
    tokio::spawn(async move {
        let _ = axum::serve(listener, router(shared)).await;
    });
    Ok(addr)
}
