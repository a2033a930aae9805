//! Teleoperation server: sessions, scene, wire protocol, simulation and replay.
//!
//! [`session::SessionPipeline`] turns one operator's hand frames into joint
//! commands for one robot. [`engine::Engine`] runs several sessions against a
//! shared kinematic scene on an explicit clock, which is what
//! [`recording`] replays. [`net`] runs the same pipelines live over TCP and
//! serves the scene to browser viewers.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod engine;
pub mod net;
pub mod protocol;
pub mod recording;
pub mod robot;
pub mod scene;
pub mod session;
pub mod sim;
#[cfg(test)]
mod testutil;

pub use config::{RobotSpec, ServerConfig, SessionSpec};
pub use engine::Engine;
pub use protocol::{Envelope, Message, MessageType};
pub use scene::SceneState;
pub use session::{SessionPipeline, SessionStatus};
