//! Live server: TCP for detector and robot clients, HTTP/websocket for viewers.
//!
//! Tasks and their channels:
//! - a router owns the session table and hands out per-session queues;
//! - each session runs in its own task, owning its [`SessionPipeline`] and
//!   ticking its controller at the configured rate;
//! - a scene task is the only writer of the scene and publishes it to viewers;
//! - each TCP connection has a reader and a writer task.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::{Path as AxumPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use bytes::Bytes;
use futures::{SinkExt, StreamExt};
use teleop_core::HandFrame;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{broadcast, mpsc, oneshot, watch};
use tokio::task::JoinHandle;
use tokio_util::codec::Framed;
use tower_http::services::ServeDir;
use tracing::{debug, info, warn};

use crate::config::{ServerConfig, SessionSpec};
use crate::engine::{load_robots, EngineError};
use crate::protocol::{codec, ControlAction, Envelope, ErrorCode, ErrorMessage, Message};
use crate::robot::{RobotAssets, RobotError};
use crate::scene::{SceneHub, SceneState};
use crate::session::{FrameAck, FrameOutcome, SessionError, SessionPipeline, SessionStatus};
use crate::sim::KinematicScene;

const COMMAND_FANOUT: usize = 256;
const OUTBOUND_QUEUE: usize = 512;

enum SessionInput {
    Frame {
        frame: HandFrame,
        reply: oneshot::Sender<Result<FrameAck, SessionError>>,
    },
    Control {
        action: ControlAction,
        reply: oneshot::Sender<Result<SessionStatus, SessionError>>,
    },
    Stop,
}

#[derive(Clone)]
struct SessionHandle {
    input: mpsc::Sender<SessionInput>,
    commands: broadcast::Sender<Envelope>,
}

enum RouterRequest {
    Start {
        session_id: String,
        spec: Option<Box<SessionSpec>>,
        start_us: u64,
        reply: oneshot::Sender<Result<SessionStatus, EngineError>>,
    },
    Lookup {
        session_id: String,
        reply: oneshot::Sender<Option<SessionHandle>>,
    },
    Ended {
        session_id: String,
    },
}

enum SceneInput {
    AddRobot(Arc<RobotAssets>),
    RemoveRobot(String),
    Command(crate::protocol::JointCommandMessage),
}

struct RouterEntry {
    handle: SessionHandle,
    robot_id: String,
}

struct RouterTask {
    robots: Arc<BTreeMap<String, Arc<RobotAssets>>>,
    templates: BTreeMap<String, SessionSpec>,
    sessions: HashMap<String, RouterEntry>,
    scene: mpsc::Sender<SceneInput>,
    me: mpsc::Sender<RouterRequest>,
}

impl RouterTask {
    async fn run(mut self, mut rx: mpsc::Receiver<RouterRequest>) {
        while let Some(req) = rx.recv().await {
            match req {
                RouterRequest::Start {
                    session_id,
                    spec,
                    start_us,
                    reply,
                } => {
                    let result = self.start(&session_id, spec.map(|s| *s), start_us).await;
                    let _ = reply.send(result);
                }
                RouterRequest::Lookup { session_id, reply } => {
                    let _ = reply.send(self.sessions.get(&session_id).map(|e| e.handle.clone()));
                }
                RouterRequest::Ended { session_id } => {
                    if let Some(e) = self.sessions.remove(&session_id) {
                        let _ = self.scene.send(SceneInput::RemoveRobot(e.robot_id)).await;
                        info!(session = %session_id, "session ended");
                    }
                }
            }
        }
    }

    async fn start(&mut self, session_id: &str, spec: Option<SessionSpec>, start_us: u64) -> Result<SessionStatus, EngineError> {
        let spec = match spec {
            Some(s) => s,
            None => self
                .templates
                .get(session_id)
                .cloned()
                .ok_or_else(|| EngineError::MissingSpec(session_id.to_string()))?,
        };
        if self.sessions.contains_key(&spec.session_id) {
            return Err(EngineError::DuplicateSession(spec.session_id));
        }
        if self.sessions.values().any(|e| e.robot_id == spec.robot_id) {
            return Err(EngineError::DuplicateRobot(spec.robot_id));
        }
        let robot = self
            .robots
            .get(&spec.robot_id)
            .ok_or_else(|| EngineError::BadRobotDescription(format!("no description for robot {}", spec.robot_id)))?
            .clone();
        let pipeline = SessionPipeline::new(&spec, &robot, start_us)?;
        let status = pipeline.status();
        let (input, inbox) = mpsc::channel(spec.queue_capacity);
        let (commands, _) = broadcast::channel(COMMAND_FANOUT);
        let handle = SessionHandle { input, commands };
        let _ = self.scene.send(SceneInput::AddRobot(robot)).await;
        tokio::spawn(run_session(pipeline, inbox, handle.commands.clone(), self.scene.clone(), self.me.clone()));
        info!(session = %spec.session_id, robot = %spec.robot_id, "session started");
        self.sessions.insert(
            spec.session_id.clone(),
            RouterEntry {
                handle,
                robot_id: spec.robot_id,
            },
        );
        Ok(status)
    }
}

async fn run_session(
    mut pipeline: SessionPipeline,
    mut inbox: mpsc::Receiver<SessionInput>,
    commands: broadcast::Sender<Envelope>,
    scene: mpsc::Sender<SceneInput>,
    router: mpsc::Sender<RouterRequest>,
) {
    let period = Duration::from_secs_f64(pipeline.spec().controller.control_dt());
    let mut interval = tokio::time::interval(period);
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Burst);
    let session_id = pipeline.session_id().to_string();
    loop {
        tokio::select! {
            biased;
            _ = interval.tick() => {
                match pipeline.tick() {
                    Ok(out) => {
                        let env = Envelope::new(Some(&session_id), out.command.timestamp_us, &Message::JointCommand(out.command.clone()));
                        let _ = scene.send(SceneInput::Command(out.command)).await;
                        let _ = commands.send(env);
                    }
                    Err(e) => warn!(session = %session_id, error = %e, "controller step failed"),
                }
            }
            input = inbox.recv() => match input {
                Some(SessionInput::Frame { frame, reply }) => {
                    let _ = reply.send(pipeline.ingest(&frame));
                }
                Some(SessionInput::Control { action, reply }) => {
                    let result = match action {
                        ControlAction::Pause => pipeline.pause(),
                        ControlAction::Resume => pipeline.resume(),
                        _ => Ok(pipeline.status()),
                    };
                    let _ = reply.send(result);
                }
                Some(SessionInput::Stop) | None => break,
            },
        }
    }
    let _ = router.send(RouterRequest::Ended { session_id }).await;
}

async fn run_scene(mut rx: mpsc::Receiver<SceneInput>, hub: SceneHub) {
    let mut scene = KinematicScene::new();
    let apply = |scene: &mut KinematicScene, input: SceneInput| {
        let result = match input {
            SceneInput::AddRobot(r) => scene.add_robot(&r).map(|_| ()),
            SceneInput::RemoveRobot(id) => scene.remove_robot(&id).map(|_| ()),
            SceneInput::Command(c) => scene.apply_command(&c).map(|_| ()),
        };
        if let Err(e) = result {
            warn!(error = %e, "scene update rejected");
        }
    };
    while let Some(first) = rx.recv().await {
        apply(&mut scene, first);
        while let Ok(more) = rx.try_recv() {
            apply(&mut scene, more);
        }
        hub.publish(scene.state());
    }
}

/// Addresses of a running server.
pub struct ServerHandle {
    pub addr: SocketAddr,
    pub viewer_addr: SocketAddr,
    pub scene: SceneHub,
    shutdown: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub async fn shutdown(self) {
        let _ = self.shutdown.send(true);
        for t in self.tasks {
            t.abort();
            let _ = t.await;
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Robot(#[from] RobotError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone)]
struct ViewerState {
    hub: SceneHub,
    robots: Arc<BTreeMap<String, Arc<RobotAssets>>>,
}

/// Binds both listeners and starts every task.
pub async fn spawn(config: &ServerConfig) -> Result<ServerHandle, ServeError> {
    let robots = Arc::new(load_robots(&config.robots)?);
    let hub = SceneHub::new(&SceneState::default());
    let (scene_tx, scene_rx) = mpsc::channel(1024);
    let (router_tx, router_rx) = mpsc::channel(256);
    let router = RouterTask {
        robots: robots.clone(),
        templates: config.sessions.iter().map(|s| (s.session_id.clone(), s.clone())).collect(),
        sessions: HashMap::new(),
        scene: scene_tx,
        me: router_tx.clone(),
    };
    let (shutdown, shutdown_rx) = watch::channel(false);

    let listener = TcpListener::bind(("0.0.0.0", config.port)).await?;
    let viewer_listener = TcpListener::bind(("0.0.0.0", config.viewer_port)).await?;
    let addr = listener.local_addr()?;
    let viewer_addr = viewer_listener.local_addr()?;

    let mut tasks = vec![
        tokio::spawn(router.run(router_rx)),
        tokio::spawn(run_scene(scene_rx, hub.clone())),
        tokio::spawn(accept_loop(listener, router_tx, shutdown_rx.clone())),
    ];
    let app = viewer_router(
        ViewerState {
            hub: hub.clone(),
            robots,
        },
        config.assets_dir.clone(),
    );
    let mut viewer_shutdown = shutdown_rx;
    tasks.push(tokio::spawn(async move {
        let served = axum::serve(viewer_listener, app).with_graceful_shutdown(async move {
            let _ = viewer_shutdown.wait_for(|v| *v).await;
        });
        if let Err(e) = served.await {
            warn!(error = %e, "viewer server stopped");
        }
    }));
    info!(%addr, %viewer_addr, "listening");
    Ok(ServerHandle {
        addr,
        viewer_addr,
        scene: hub,
        shutdown,
        tasks,
    })
}

/// Runs until interrupted.
pub async fn serve(config: &ServerConfig) -> Result<(), ServeError> {
    let handle = spawn(config).await?;
    tokio::signal::ctrl_c().await?;
    info!("shutting down");
    handle.shutdown().await;
    Ok(())
}

async fn accept_loop(listener: TcpListener, router: mpsc::Sender<RouterRequest>, mut shutdown: watch::Receiver<bool>) {
    loop {
        tokio::select! {
            accepted = listener.accept() => match accepted {
                Ok((stream, peer)) => {
                    debug!(%peer, "client connected");
                    let _ = stream.set_nodelay(true);
                    tokio::spawn(handle_connection(stream, router.clone()));
                }
                Err(e) => warn!(error = %e, "accept failed"),
            },
            _ = shutdown.wait_for(|v| *v) => break,
        }
    }
}

struct Connection {
    router: mpsc::Sender<RouterRequest>,
    out: mpsc::Sender<Envelope>,
    handles: HashMap<String, SessionHandle>,
    forwarders: Vec<JoinHandle<()>>,
}

impl Connection {
    async fn lookup(&mut self, session_id: &str) -> Option<SessionHandle> {
        if let Some(h) = self.handles.get(session_id) {
            if !h.input.is_closed() {
                return Some(h.clone());
            }
            self.handles.remove(session_id);
        }
        let (reply, rx) = oneshot::channel();
        self.router
            .send(RouterRequest::Lookup {
                session_id: session_id.to_string(),
                reply,
            })
            .await
            .ok()?;
        let handle = rx.await.ok()??;
        // Every session a connection mentions streams its commands back to it.
        let mut commands = handle.commands.subscribe();
        let out = self.out.clone();
        self.forwarders.push(tokio::spawn(async move {
            loop {
                match commands.recv().await {
                    Ok(env) => {
                        if out.send(env).await.is_err() {
                            break;
                        }
                    }
                    Err(broadcast::error::RecvError::Lagged(n)) => debug!(skipped = n, "command subscriber lagging"),
                    Err(broadcast::error::RecvError::Closed) => break,
                }
            }
        }));
        self.handles.insert(session_id.to_string(), handle.clone());
        Some(handle)
    }

    async fn reply(&self, env: Envelope) {
        let _ = self.out.send(env).await;
    }

    async fn on_envelope(&mut self, env: Envelope) {
        let ts = env.timestamp_us;
        let sid = env.session_id.clone();
        let message = match env.message() {
            Ok(m) => m,
            Err(e) => return self.reply(Envelope::error(sid.as_deref(), ts, ErrorCode::Protocol, e.to_string())).await,
        };
        match message {
            Message::HandFrame(m) => {
                let Some(handle) = self.lookup(&m.session_id).await else {
                    return self
                        .reply(Envelope::error(Some(&m.session_id), ts, ErrorCode::UnknownSession, format!("unknown session {}", m.session_id)))
                        .await;
                };
                let (reply, rx) = oneshot::channel();
                if handle.input.send(SessionInput::Frame { frame: m.frame, reply }).await.is_err() {
                    return;
                }
                match rx.await {
                    Ok(Ok(ack)) => {
                        if let FrameOutcome::Dropped { reason } = ack.outcome {
                            let msg = Message::Error(ErrorMessage {
                                code: ErrorCode::FrameDropped,
                                message: format!("frame from {} at {} dropped", ack.camera_id, ack.timestamp_us),
                                reason: Some(reason),
                                status: Some(ack.status),
                            });
                            self.reply(Envelope::new(Some(&m.session_id), ts, &msg)).await;
                        }
                    }
                    Ok(Err(e)) => {
                        let e = EngineError::Session(e);
                        self.reply(Envelope::error(Some(&m.session_id), ts, e.code(), e.to_string())).await;
                    }
                    Err(_) => {}
                }
            }
            Message::SessionControl(c) => {
                let Some(id) = c.session.as_ref().map(|s| s.session_id.clone()).or(sid) else {
                    return self.reply(Envelope::error(None, ts, ErrorCode::UnknownSession, "session control without a session id")).await;
                };
                let result = self.control(&id, c.action, c.session, ts).await;
                if let Err(e) = result {
                    self.reply(Envelope::error(Some(&id), ts, e.code(), e.to_string())).await;
                }
            }
            Message::Heartbeat(_) => {
                if let Some(id) = sid {
                    self.lookup(&id).await;
                }
                self.reply(env).await;
            }
            other => {
                self.reply(Envelope::error(sid.as_deref(), ts, ErrorCode::Protocol, format!("{:?} is not accepted from clients", other.kind())))
                    .await
            }
        }
    }

    async fn control(&mut self, id: &str, action: ControlAction, spec: Option<SessionSpec>, ts: u64) -> Result<(), EngineError> {
        match action {
            ControlAction::Start => {
                let (reply, rx) = oneshot::channel();
                let _ = self
                    .router
                    .send(RouterRequest::Start {
                        session_id: id.to_string(),
                        spec: spec.map(Box::new),
                        start_us: ts,
                        reply,
                    })
                    .await;
                rx.await.map_err(|_| EngineError::UnknownSession(id.to_string()))??;
                self.lookup(id).await;
                Ok(())
            }
            ControlAction::Stop => {
                let handle = self.lookup(id).await.ok_or_else(|| EngineError::UnknownSession(id.to_string()))?;
                let _ = handle.input.send(SessionInput::Stop).await;
                self.handles.remove(id);
                Ok(())
            }
            ControlAction::Pause | ControlAction::Resume => {
                let handle = self.lookup(id).await.ok_or_else(|| EngineError::UnknownSession(id.to_string()))?;
                let (reply, rx) = oneshot::channel();
                let _ = handle.input.send(SessionInput::Control { action, reply }).await;
                rx.await.map_err(|_| EngineError::UnknownSession(id.to_string()))??;
                Ok(())
            }
        }
    }
}

async fn handle_connection(stream: TcpStream, router: mpsc::Sender<RouterRequest>) {
    let (mut sink, mut source) = Framed::new(stream, codec()).split();
    let (out, mut out_rx) = mpsc::channel::<Envelope>(OUTBOUND_QUEUE);
    let writer = tokio::spawn(async move {
        while let Some(env) = out_rx.recv().await {
            if sink.send(Bytes::from(env.to_bytes())).await.is_err() {
                break;
            }
        }
    });
    let mut conn = Connection {
        router,
        out,
        handles: HashMap::new(),
        forwarders: Vec::new(),
    };
    while let Some(frame) = source.next().await {
        let bytes = match frame {
            Ok(b) => b,
            Err(e) => {
                debug!(error = %e, "connection read failed");
                break;
            }
        };
        match Envelope::from_bytes(&bytes) {
            Ok(env) => conn.on_envelope(env).await,
            Err(e) => conn.reply(Envelope::error(None, 0, ErrorCode::Protocol, e.to_string())).await,
        }
    }
    for f in conn.forwarders.drain(..) {
        f.abort();
    }
    drop(conn);
    let _ = writer.await;
}

fn viewer_router(state: ViewerState, assets_dir: Option<PathBuf>) -> Router {
    let mut app = Router::new()
        .route("/scene", get(scene_ws))
        .route("/robots/{id}/description", get(robot_description))
        .with_state(state);
    if let Some(dir) = assets_dir {
        app = app.nest_service("/assets", ServeDir::new(dir));
    }
    app
}

async fn scene_ws(ws: WebSocketUpgrade, State(state): State<ViewerState>) -> Response {
    ws.on_upgrade(move |socket| stream_scene(socket, state.hub))
}

async fn stream_scene(mut socket: WebSocket, hub: SceneHub) {
    let mut sub = hub.subscribe();
    while let Some(frame) = sub.next().await {
        if socket.send(WsMessage::Text(frame.json.as_ref().into())).await.is_err() {
            break;
        }
    }
}

async fn robot_description(AxumPath(id): AxumPath<String>, State(state): State<ViewerState>) -> Response {
    match state.robots.get(&id) {
        Some(r) => Json(r.description()).into_response(),
        None => (StatusCode::NOT_FOUND, format!("unknown robot {id}")).into_response(),
    }
}
