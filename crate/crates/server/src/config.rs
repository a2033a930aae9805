//! Server, robot and session configuration.
//!
//! Config files are TOML or JSON, chosen by extension. File references are
//! resolved relative to the config file and inlined at load time, so a loaded
//! config (and any recording header built from it) is self-contained.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use teleop_core::fusion::DEFAULT_CALIBRATION_FRAMES;
use teleop_core::motion_gen::ControllerConfig;
use teleop_core::{CameraIntrinsics, RigidTransform};
use thiserror::Error;

pub const DEFAULT_TRACKING_TIMEOUT_MS: u64 = 300;
pub const DEFAULT_QUEUE_CAPACITY: usize = 64;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Text held inline or read from a file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Path(PathBuf),
    Inline(String),
}

impl Source {
    pub fn text(&self) -> Result<String, ConfigError> {
        match self {
            Source::Inline(s) => Ok(s.clone()),
            Source::Path(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.clone(), source }),
        }
    }

    fn inlined(&self, base: &Path) -> Result<Source, ConfigError> {
        match self {
            Source::Inline(_) => Ok(self.clone()),
            Source::Path(p) => Source::Path(base.join(p)).text().map(Source::Inline),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct PoseSpec {
    #[serde(default)]
    pub xyz: [f64; 3],
    #[serde(default)]
    pub rpy: [f64; 3],
}

impl PoseSpec {
    pub fn transform(&self) -> RigidTransform {
        RigidTransform::from_xyz_rpy(self.xyz, self.rpy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotSpec {
    pub robot_id: String,
    /// Display name; defaults to the URDF robot name.
    #[serde(default)]
    pub model: Option<String>,
    pub urdf: Source,
    #[serde(default)]
    pub spheres: Option<Source>,
    /// Retargeting config JSON for the hand subtree.
    pub retarget: Source,
    /// Arm link the hand is mounted on; the motion controller drives its pose.
    pub ee_link: String,
    /// Root of the hand subtree used for retargeting.
    pub hand_base_link: String,
    #[serde(default)]
    pub initial_arm_q: Option<Vec<f64>>,
    #[serde(default)]
    pub initial_hand_q: Option<Vec<f64>>,
    #[serde(default)]
    pub base_pose: PoseSpec,
}

impl RobotSpec {
    pub fn inlined(&self, base: &Path) -> Result<Self, ConfigError> {
        Ok(Self {
            urdf: self.urdf.inlined(base)?,
            spheres: self.spheres.as_ref().map(|s| s.inlined(base)).transpose()?,
            retarget: self.retarget.inlined(base)?,
            ..self.clone()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRegistration {
    pub camera_id: String,
    pub intrinsics: CameraIntrinsics,
}

fn default_calibration_frames() -> usize {
    DEFAULT_CALIBRATION_FRAMES
}

fn default_tracking_timeout() -> u64 {
    DEFAULT_TRACKING_TIMEOUT_MS
}

fn default_scale() -> f64 {
    1.0
}

fn default_queue() -> usize {
    DEFAULT_QUEUE_CAPACITY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub session_id: String,
    pub operator_id: String,
    pub robot_id: String,
    pub cameras: Vec<CameraRegistration>,
    /// Camera whose frame fused motion is expressed in; defaults to the smallest id.
    #[serde(default)]
    pub reference_camera: Option<String>,
    #[serde(default = "default_calibration_frames")]
    pub calibration_frames: usize,
    #[serde(default = "default_tracking_timeout")]
    pub tracking_timeout_ms: u64,
    #[serde(default)]
    pub controller: ControllerConfig,
    /// Orientation of the reference camera frame in the robot base frame.
    #[serde(default)]
    pub camera_to_base_rpy: [f64; 3],
    /// Operator wrist displacement to end-effector displacement.
    #[serde(default = "default_scale")]
    pub translation_scale: f64,
    /// Bounded input queue length for the live server.
    #[serde(default = "default_queue")]
    pub queue_capacity: usize,
}

impl SessionSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.cameras.is_empty() {
            return bad(format!("session {} registers no camera", self.session_id));
        }
        for (i, c) in self.cameras.iter().enumerate() {
            if self.cameras[..i].iter().any(|o| o.camera_id == c.camera_id) {
                return bad(format!("camera {} registered twice", c.camera_id));
            }
            c.intrinsics
                .validate()
                .map_err(|e| ConfigError::Invalid(format!("camera {}: {e}", c.camera_id)))?;
        }
        if self.calibration_frames == 0 {
            return bad("calibration_frames must be at least 1".into());
        }
        if !(self.translation_scale > 0.0) || !self.translation_scale.is_finite() {
            return bad(format!("translation_scale must be positive, got {}", self.translation_scale));
        }
        if self.queue_capacity == 0 {
            return bad("queue_capacity must be at least 1".into());
        }
        self.controller
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn camera(&self, id: &str) -> Option<&CameraIntrinsics> {
        self.cameras.iter().find(|c| c.camera_id == id).map(|c| &c.intrinsics)
    }
}

fn default_port() -> u16 {
    7400
}

fn default_viewer_port() -> u16 {
    7401
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    #[serde(default = "default_port")]
    pub port: u16,
    #[serde(default = "default_viewer_port")]
    pub viewer_port: u16,
    /// Directory served under `/assets/`.
    #[serde(default)]
    pub assets_dir: Option<PathBuf>,
    #[serde(default)]
    pub robots: Vec<RobotSpec>,
    /// Sessions that `start` may refer to by id alone.
    #[serde(default)]
    pub sessions: Vec<SessionSpec>,
}

impl ServerConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let parse_err = |message: String| ConfigError::Parse {
            path: path.to_path_buf(),
            message,
        };
        let mut config: ServerConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?,
            _ => toml::from_str(&text).map_err(|e| parse_err(e.to_string()))?,
        };
        let base = path.parent().unwrap_or(Path::new("."));
        config.robots = config
            .robots
            .iter()
            .map(|r| r.inlined(base))
            .collect::<Result<_, _>>()?;
        if let Some(dir) = &config.assets_dir {
            config.assets_dir = Some(base.join(dir));
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (i, r) in self.robots.iter().enumerate() {
            if self.robots[..i].iter().any(|o| o.robot_id == r.robot_id) {
                return Err(ConfigError::Invalid(format!("robot {} declared twice", r.robot_id)));
            }
        }
        for s in &self.sessions {
            s.validate()?;
            if !self.robots.iter().any(|r| r.robot_id == s.robot_id) {
                return Err(ConfigError::Invalid(format!(
                    "session {} refers to unknown robot {}",
                    s.session_id, s.robot_id
                )));
            }
        }
        Ok(())
    }

    pub fn session(&self, id: &str) -> Option<&SessionSpec> {
        self.sessions.iter().find(|s| s.session_id == id)
    }
}
