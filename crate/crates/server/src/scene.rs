//! The shared multi-robot scene and its fan-out to viewers.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use teleop_core::RigidTransform;
use tokio::sync::watch;

use crate::protocol::{Envelope, Message};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub robot_id: String,
    pub model: String,
    pub arm_q: Vec<f64>,
    pub hand_q: Vec<f64>,
    pub base_pose: RigidTransform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub object_id: String,
    pub pose: RigidTransform,
    #[serde(default)]
    pub mesh: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SceneState {
    pub tick: u64,
    pub timestamp_us: u64,
    pub robots: Vec<RobotState>,
    pub objects: Vec<SceneObject>,
}

impl SceneState {
    pub fn robot(&self, id: &str) -> Option<&RobotState> {
        self.robots.iter().find(|r| r.robot_id == id)
    }

    pub fn robot_mut(&mut self, id: &str) -> Option<&mut RobotState> {
        self.robots.iter_mut().find(|r| r.robot_id == id)
    }

    pub fn envelope(&self) -> Envelope {
        Envelope::new(None, self.timestamp_us, &Message::SceneState(self.clone()))
    }
}

/// One published scene, serialized once and shared by every subscriber.
#[derive(Debug, Clone)]
pub struct SceneFrame {
    pub tick: u64,
    pub json: Arc<str>,
}

/// Latest-state broadcast: a subscriber always sees the newest frame, may skip
/// intermediate ticks, and never sees them out of order.
#[derive(Debug, Clone)]
pub struct SceneHub {
    tx: watch::Sender<SceneFrame>,
}

impl SceneHub {
    pub fn new(initial: &SceneState) -> Self {
        let (tx, _) = watch::channel(Self::frame(initial));
        Self { tx }
    }

    fn frame(scene: &SceneState) -> SceneFrame {
        let json: String = serde_json::to_string(&scene.envelope()).expect("scene serializes");
        SceneFrame {
            tick: scene.tick,
            json: json.into(),
        }
    }

    /// Publishes `scene` unless its tick is not newer than the current one.
    pub fn publish(&self, scene: &SceneState) -> bool {
        let frame = Self::frame(scene);
        self.tx.send_if_modified(|current| {
            if frame.tick > current.tick {
                *current = frame;
                true
            } else {
                false
            }
        })
    }

    /// The receiver's first read is the current full state.
    pub fn subscribe(&self) -> SceneSubscriber {
        let mut rx = self.tx.subscribe();
        rx.mark_changed();
        SceneSubscriber { rx }
    }

    pub fn current(&self) -> SceneFrame {
        self.tx.borrow().clone()
    }

    pub fn subscriber_count(&self) -> usize {
        self.tx.receiver_count()
    }
}

pub struct SceneSubscriber {
    rx: watch::Receiver<SceneFrame>,
}

impl SceneSubscriber {
    /// Waits for a frame newer than the last one returned; `None` once the hub is gone.
    pub async fn next(&mut self) -> Option<SceneFrame> {
        self.rx.changed().await.ok()?;
        Some(self.rx.borrow_and_update().clone())
    }
}
