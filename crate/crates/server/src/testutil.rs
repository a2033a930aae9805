use std::path::PathBuf;

use teleop_core::HandFrame;

use crate::config::ServerConfig;
use crate::robot::RobotAssets;
use crate::sim::{generate_stream, operator_script};

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets/config").join(name)
}

pub fn single_operator() -> ServerConfig {
    ServerConfig::load(&config_path("single_operator.json")).unwrap()
}

pub fn handover() -> ServerConfig {
    ServerConfig::load(&config_path("handover.toml")).unwrap()
}

pub fn arm_robot() -> RobotAssets {
    RobotAssets::load(&single_operator().robots[0]).unwrap()
}

/// Two-camera operator frames in arrival order.
pub fn operator_frames(duration: f64, phase: f64, seed: u64) -> Vec<HandFrame> {
    let stream = generate_stream(&operator_script(duration, phase, &[0.0, 0.6], true), 25.0, seed).unwrap();
    let mut all: Vec<HandFrame> = stream.frames.into_values().flatten().collect();
    all.sort_by(|a, b| (a.timestamp_us, &a.camera_id).cmp(&(b.timestamp_us, &b.camera_id)));
    all
}
