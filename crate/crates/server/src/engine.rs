//! Deterministic multi-session core driven by an explicit clock.
//!
//! The replay harness and the tests drive an [`Engine`] directly: inbound
//! envelopes go through [`Engine::handle`], and [`Engine::advance_to`] runs
//! every controller tick due up to a given time. Sessions never share state;
//! the only thing they have in common is the scene their commands are applied to.

use std::collections::BTreeMap;
use std::sync::Arc;

use teleop_core::HandFrame;
use thiserror::Error;

use crate::config::{RobotSpec, SessionSpec};
use crate::protocol::{ControlAction, Envelope, ErrorCode, ErrorMessage, Message};
use crate::robot::{RobotAssets, RobotError};
use crate::scene::SceneState;
use crate::session::{FrameAck, FrameOutcome, SessionError, SessionPipeline, SessionStatus, TickOutput};
use crate::sim::{KinematicScene, SimError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session {0} already exists")]
    DuplicateSession(String),
    #[error("robot {0} is already driven by another session")]
    DuplicateRobot(String),
    #[error("bad robot description: {0}")]
    BadRobotDescription(String),
    #[error("no session spec given for {0}")]
    MissingSpec(String),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Scene(#[from] SimError),
}

impl EngineError {
    pub fn code(&self) -> ErrorCode {
        match self {
            EngineError::UnknownSession(_) => ErrorCode::UnknownSession,
            EngineError::DuplicateSession(_) => ErrorCode::DuplicateSession,
            EngineError::DuplicateRobot(_) => ErrorCode::DuplicateRobot,
            EngineError::BadRobotDescription(_) => ErrorCode::BadRobotDescription,
            EngineError::MissingSpec(_) => ErrorCode::BadSessionSpec,
            EngineError::Session(SessionError::UnknownCamera(_)) => ErrorCode::UnknownCamera,
            EngineError::Session(SessionError::MalformedFrame(_)) => ErrorCode::MalformedFrame,
            EngineError::Session(SessionError::InvalidTransition { .. }) => ErrorCode::InvalidTransition,
            EngineError::Session(_) => ErrorCode::BadSessionSpec,
            EngineError::Scene(_) => ErrorCode::Protocol,
        }
    }
}

/// Loads every robot spec, failing on the first bad description.
pub fn load_robots(specs: &[RobotSpec]) -> Result<BTreeMap<String, Arc<RobotAssets>>, RobotError> {
    specs
        .iter()
        .map(|s| Ok((s.robot_id.clone(), Arc::new(RobotAssets::load(s)?))))
        .collect()
}

pub struct Engine {
    robots: BTreeMap<String, Arc<RobotAssets>>,
    templates: BTreeMap<String, SessionSpec>,
    sessions: BTreeMap<String, SessionPipeline>,
    scene: KinematicScene,
}

impl Engine {
    pub fn new(robots: BTreeMap<String, Arc<RobotAssets>>, templates: &[SessionSpec]) -> Self {
        Self {
            robots,
            templates: templates.iter().map(|s| (s.session_id.clone(), s.clone())).collect(),
            sessions: BTreeMap::new(),
            scene: KinematicScene::new(),
        }
    }

    pub fn scene(&self) -> &SceneState {
        self.scene.state()
    }

    pub fn session(&self, id: &str) -> Option<&SessionPipeline> {
        self.sessions.get(id)
    }

    pub fn session_ids(&self) -> impl Iterator<Item = &str> {
        self.sessions.keys().map(String::as_str)
    }

    pub fn robot(&self, id: &str) -> Option<&Arc<RobotAssets>> {
        self.robots.get(id)
    }

    pub fn start_session(&mut self, spec: &SessionSpec, start_us: u64) -> Result<SessionStatus, EngineError> {
        if self.sessions.contains_key(&spec.session_id) {
            return Err(EngineError::DuplicateSession(spec.session_id.clone()));
        }
        if self.sessions.values().any(|s| s.robot_id() == spec.robot_id) {
            return Err(EngineError::DuplicateRobot(spec.robot_id.clone()));
        }
        let robot = self
            .robots
            .get(&spec.robot_id)
            .ok_or_else(|| EngineError::BadRobotDescription(format!("no description for robot {}", spec.robot_id)))?
            .clone();
        let pipeline = SessionPipeline::new(spec, &robot, start_us)?;
        self.scene.add_robot(&robot)?;
        let status = pipeline.status();
        self.sessions.insert(spec.session_id.clone(), pipeline);
        Ok(status)
    }

    pub fn stop_session(&mut self, id: &str) -> Result<(), EngineError> {
        let session = self
            .sessions
            .remove(id)
            .ok_or_else(|| EngineError::UnknownSession(id.to_string()))?;
        self.scene.remove_robot(session.robot_id())?;
        Ok(())
    }

    fn session_mut(&mut self, id: &str) -> Result<&mut SessionPipeline, EngineError> {
        self.sessions
            .get_mut(id)
            .ok_or_else(|| EngineError::UnknownSession(id.to_string()))
    }

    pub fn ingest_hand_frame(&mut self, session_id: &str, frame: &HandFrame) -> Result<FrameAck, EngineError> {
        Ok(self.session_mut(session_id)?.ingest(frame)?)
    }

    pub fn control(
        &mut self,
        session_id: &str,
        action: ControlAction,
        spec: Option<&SessionSpec>,
        timestamp_us: u64,
    ) -> Result<Option<SessionStatus>, EngineError> {
        match action {
            ControlAction::Start => {
                let spec = match spec {
                    Some(s) => s.clone(),
                    None => self
                        .templates
                        .get(session_id)
                        .cloned()
                        .ok_or_else(|| EngineError::MissingSpec(session_id.to_string()))?,
                };
                self.start_session(&spec, timestamp_us).map(Some)
            }
            ControlAction::Pause => Ok(Some(self.session_mut(session_id)?.pause()?)),
            ControlAction::Resume => Ok(Some(self.session_mut(session_id)?.resume()?)),
            ControlAction::Stop => self.stop_session(session_id).map(|_| None),
        }
    }

    /// Handles one inbound envelope and returns the replies (errors and drop notices).
    pub fn handle(&mut self, env: &Envelope) -> Vec<Envelope> {
        let sid = env.session_id.as_deref();
        let message = match env.message() {
            Ok(m) => m,
            Err(e) => return vec![Envelope::error(sid, env.timestamp_us, ErrorCode::Protocol, e.to_string())],
        };
        match message {
            Message::HandFrame(m) => match self.ingest_hand_frame(&m.session_id, &m.frame) {
                Ok(ack) => match ack.outcome {
                    FrameOutcome::Dropped { reason } => vec![Envelope::new(
                        Some(&m.session_id),
                        env.timestamp_us,
                        &Message::Error(ErrorMessage {
                            code: ErrorCode::FrameDropped,
                            message: format!("frame from {} at {} dropped", ack.camera_id, ack.timestamp_us),
                            reason: Some(reason),
                            status: Some(ack.status),
                        }),
                    )],
                    _ => Vec::new(),
                },
                Err(e) => vec![Envelope::error(Some(&m.session_id), env.timestamp_us, e.code(), e.to_string())],
            },
            Message::SessionControl(c) => {
                let id = c
                    .session
                    .as_ref()
                    .map(|s| s.session_id.clone())
                    .or_else(|| sid.map(str::to_string));
                let Some(id) = id else {
                    return vec![Envelope::error(None, env.timestamp_us, ErrorCode::UnknownSession, "session control without a session id")];
                };
                match self.control(&id, c.action, c.session.as_ref(), env.timestamp_us) {
                    Ok(_) => Vec::new(),
                    Err(e) => vec![Envelope::error(Some(&id), env.timestamp_us, e.code(), e.to_string())],
                }
            }
            Message::Heartbeat(_) => Vec::new(),
            other => vec![Envelope::error(
                sid,
                env.timestamp_us,
                ErrorCode::Protocol,
                format!("{:?} is not accepted from clients", other.kind()),
            )],
        }
    }

    /// Time of the earliest pending controller tick, if any session is running.
    pub fn next_tick_us(&self) -> Option<u64> {
        self.sessions.values().map(|s| s.next_tick_us()).min()
    }

    /// Runs every tick due at or before `t_us`, in time order (ties by session id).
    ///
    /// Each tick's command is applied to the scene and returned.
    pub fn advance_to(&mut self, t_us: u64) -> Result<Vec<(String, TickOutput)>, EngineError> {
        let mut out = Vec::new();
        loop {
            let due = self
                .sessions
                .iter()
                .map(|(id, s)| (s.next_tick_us(), id))
                .min();
            let Some((when, id)) = due else { break };
            if when > t_us {
                break;
            }
            let id = id.clone();
            let tick = self.sessions.get_mut(&id).expect("listed").tick()?;
            self.scene.apply_command(&tick.command)?;
            out.push((id, tick));
        }
        Ok(out)
    }
}
