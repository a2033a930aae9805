//! Wire messages.
//!
//! Every message is an [`Envelope`] carrying a type tag, an optional session id,
//! a sender timestamp and a type-specific payload. Detector and robot clients
//! exchange envelopes as length-prefixed JSON (4-byte big-endian length); viewers
//! receive the same JSON over a websocket.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use teleop_core::HandFrame;
use thiserror::Error;
use tokio_util::codec::LengthDelimitedCodec;

use crate::config::SessionSpec;
use crate::scene::SceneState;
use crate::session::{DropReason, SessionStatus};

/// Upper bound on a single encoded message.
pub const MAX_FRAME_BYTES: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Malformed(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageType {
    HandFrame,
    JointCommand,
    SceneState,
    SessionControl,
    Heartbeat,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    #[serde(rename = "type")]
    pub kind: MessageType,
    #[serde(default)]
    pub session_id: Option<String>,
    pub timestamp_us: u64,
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandFrameMessage {
    pub session_id: String,
    #[serde(flatten)]
    pub frame: HandFrame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointCommandMessage {
    pub robot_id: String,
    pub timestamp_us: u64,
    pub arm_q: Vec<f64>,
    pub hand_q: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlAction {
    Start,
    Pause,
    Resume,
    Stop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionControl {
    pub action: ControlAction,
    /// Required for `start` unless the server config holds a session of that id.
    #[serde(default)]
    pub session: Option<SessionSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Heartbeat {
    pub timestamp_us: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    UnknownSession,
    UnknownCamera,
    MalformedFrame,
    FrameDropped,
    DuplicateRobot,
    DuplicateSession,
    BadRobotDescription,
    BadSessionSpec,
    InvalidTransition,
    Protocol,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMessage {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<DropReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<SessionStatus>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    HandFrame(HandFrameMessage),
    JointCommand(JointCommandMessage),
    SceneState(SceneState),
    SessionControl(SessionControl),
    Heartbeat(Heartbeat),
    Error(ErrorMessage),
}

impl Message {
    pub fn kind(&self) -> MessageType {
        match self {
            Message::HandFrame(_) => MessageType::HandFrame,
            Message::JointCommand(_) => MessageType::JointCommand,
            Message::SceneState(_) => MessageType::SceneState,
            Message::SessionControl(_) => MessageType::SessionControl,
            Message::Heartbeat(_) => MessageType::Heartbeat,
            Message::Error(_) => MessageType::Error,
        }
    }

    fn payload(&self) -> Value {
        let v = match self {
            Message::HandFrame(m) => serde_json::to_value(m),
            Message::JointCommand(m) => serde_json::to_value(m),
            Message::SceneState(m) => serde_json::to_value(m),
            Message::SessionControl(m) => serde_json::to_value(m),
            Message::Heartbeat(m) => serde_json::to_value(m),
            Message::Error(m) => serde_json::to_value(m),
        };
        v.expect("message payloads always serialize")
    }
}

impl Envelope {
    pub fn new(session_id: Option<&str>, timestamp_us: u64, message: &Message) -> Self {
        Self {
            kind: message.kind(),
            session_id: session_id.map(str::to_string),
            timestamp_us,
            payload: message.payload(),
        }
    }

    pub fn error(session_id: Option<&str>, timestamp_us: u64, code: ErrorCode, message: impl Into<String>) -> Self {
        Self::new(
            session_id,
            timestamp_us,
            &Message::Error(ErrorMessage {
                code,
                message: message.into(),
                reason: None,
                status: None,
            }),
        )
    }

    pub fn message(&self) -> Result<Message, ProtocolError> {
        let p = self.payload.clone();
        Ok(match self.kind {
            MessageType::HandFrame => Message::HandFrame(serde_json::from_value(p)?),
            MessageType::JointCommand => Message::JointCommand(serde_json::from_value(p)?),
            MessageType::SceneState => Message::SceneState(serde_json::from_value(p)?),
            MessageType::SessionControl => Message::SessionControl(serde_json::from_value(p)?),
            MessageType::Heartbeat => Message::Heartbeat(serde_json::from_value(p)?),
            MessageType::Error => Message::Error(serde_json::from_value(p)?),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("envelopes always serialize")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ProtocolError> {
        Ok(serde_json::from_slice(bytes)?)
    }
}

/// Length-prefixed framing used on the detector and robot connections.
pub fn codec() -> LengthDelimitedCodec {
    LengthDelimitedCodec::builder()
        .length_field_length(4)
        .big_endian()
        .max_frame_length(MAX_FRAME_BYTES)
        .new_codec()
}
