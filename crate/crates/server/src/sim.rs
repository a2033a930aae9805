//! Kinematic "reality": applies joint commands to a scene and synthesizes operator streams.

use std::collections::BTreeMap;

use nalgebra::{Rotation3, Unit, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use teleop_core::geometry::{interpolate, so3_exp};
use teleop_core::hand::{template_hand_keypoints, MIDDLE_MCP, NUM_KEYPOINTS, SHAPE_DIM};
use teleop_core::{CameraIntrinsics, HandFrame, RigidTransform};
use thiserror::Error;

use crate::protocol::{Envelope, HandFrameMessage, JointCommandMessage, Message};
use crate::robot::RobotAssets;
use crate::scene::{RobotState, SceneObject, SceneState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("robot {0} is not in the scene")]
    UnknownRobot(String),
    #[error("robot {0} is already in the scene")]
    DuplicateRobot(String),
    #[error("{robot_id} {part} joint {index} = {value} is outside [{lower}, {upper}]")]
    LimitViolation {
        robot_id: String,
        part: &'static str,
        index: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("{robot_id} {part} command has {got} values, expected {expected}")]
    Dimension {
        robot_id: String,
        part: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("synthetic script has no waypoints")]
    EmptyScript,
    #[error("invalid synthetic script: {0}")]
    InvalidScript(String),
}

#[derive(Debug, Clone)]
struct Limits {
    arm: (Vec<f64>, Vec<f64>),
    hand: (Vec<f64>, Vec<f64>),
}

/// A scene whose robots are moved by teleporting to commanded configurations.
#[derive(Debug, Clone, Default)]
pub struct KinematicScene {
    state: SceneState,
    limits: BTreeMap<String, Limits>,
}

impl KinematicScene {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn state(&self) -> &SceneState {
        &self.state
    }

    pub fn add_robot(&mut self, robot: &RobotAssets) -> Result<&SceneState, SimError> {
        let id = robot.robot_id().to_string();
        if self.limits.contains_key(&id) {
            return Err(SimError::DuplicateRobot(id));
        }
        self.limits.insert(
            id.clone(),
            Limits {
                arm: (robot.arm.lower_limits(), robot.arm.upper_limits()),
                hand: (robot.hand().lower_limits(), robot.hand().upper_limits()),
            },
        );
        self.state.robots.push(RobotState {
            robot_id: id,
            model: robot.model_name.clone(),
            arm_q: robot.initial_arm_q.clone(),
            hand_q: robot.initial_hand_q.clone(),
            base_pose: robot.base_pose,
        });
        self.state.robots.sort_by(|a, b| a.robot_id.cmp(&b.robot_id));
        self.state.tick += 1;
        Ok(&self.state)
    }

    pub fn remove_robot(&mut self, robot_id: &str) -> Result<&SceneState, SimError> {
        if self.limits.remove(robot_id).is_none() {
            return Err(SimError::UnknownRobot(robot_id.to_string()));
        }
        self.state.robots.retain(|r| r.robot_id != robot_id);
        self.state.tick += 1;
        Ok(&self.state)
    }

    pub fn upsert_object(&mut self, object: SceneObject) -> &SceneState {
        match self.state.objects.iter_mut().find(|o| o.object_id == object.object_id) {
            Some(o) => *o = object,
            None => {
                self.state.objects.push(object);
                self.state.objects.sort_by(|a, b| a.object_id.cmp(&b.object_id));
            }
        }
        self.state.tick += 1;
        &self.state
    }

    /// Replaces the robot's configuration with the commanded one.
    pub fn apply_command(&mut self, cmd: &JointCommandMessage) -> Result<&SceneState, SimError> {
        let limits = self
            .limits
            .get(&cmd.robot_id)
            .ok_or_else(|| SimError::UnknownRobot(cmd.robot_id.clone()))?;
        check(&cmd.robot_id, "arm", &cmd.arm_q, &limits.arm)?;
        check(&cmd.robot_id, "hand", &cmd.hand_q, &limits.hand)?;
        let robot = self.state.robot_mut(&cmd.robot_id).expect("limits and robots agree");
        robot.arm_q.clone_from(&cmd.arm_q);
        robot.hand_q.clone_from(&cmd.hand_q);
        self.state.tick += 1;
        self.state.timestamp_us = self.state.timestamp_us.max(cmd.timestamp_us);
        Ok(&self.state)
    }
}

fn check(robot_id: &str, part: &'static str, q: &[f64], (lower, upper): &(Vec<f64>, Vec<f64>)) -> Result<(), SimError> {
    if q.len() != lower.len() {
        return Err(SimError::Dimension {
            robot_id: robot_id.to_string(),
            part,
            expected: lower.len(),
            got: q.len(),
        });
    }
    for (index, ((&value, &lo), &hi)) in q.iter().zip(lower).zip(upper).enumerate() {
        if !(value >= lo && value <= hi) {
            return Err(SimError::LimitViolation {
                robot_id: robot_id.to_string(),
                part,
                index,
                value,
                lower: lo,
                upper: hi,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub time_s: f64,
    /// Wrist frame in the world frame.
    pub wrist_pose: RigidTransform,
    pub keypoints_local: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct NoiseSpec {
    /// Camera-frame keypoint noise before projection, in metres.
    pub keypoint_sigma: f64,
    pub depth_sigma: f64,
    pub shape_sigma: f64,
    /// Per-frame, per-camera wrist orientation jitter in radians.
    pub orientation_sigma: f64,
}

/// A time window in which one camera's detections are degraded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    pub start_s: f64,
    pub end_s: f64,
    #[serde(default)]
    pub keypoint_sigma: f64,
    #[serde(default)]
    pub depth_sigma: f64,
    /// Added to the shape estimate while corrupted.
    #[serde(default)]
    pub shape_offset: Vec<f64>,
    /// Drop the frames entirely.
    #[serde(default)]
    pub drop_frames: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCamera {
    pub camera_id: String,
    pub intrinsics: CameraIntrinsics,
    /// World frame expressed in the camera frame.
    pub camera_from_world: RigidTransform,
    #[serde(default)]
    pub with_depth: bool,
    #[serde(default)]
    pub shape_offset: Vec<f64>,
    #[serde(default)]
    pub corruptions: Vec<Corruption>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticHandScript {
    pub waypoints: Vec<Waypoint>,
    #[serde(default)]
    pub noise: NoiseSpec,
    pub cameras: Vec<SyntheticCamera>,
    /// The operator's true shape parameters.
    #[serde(default)]
    pub shape: Vec<f64>,
    /// Timestamp of the first waypoint.
    #[serde(default)]
    pub start_us: u64,
}

impl SyntheticHandScript {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidScript(m.to_string()));
        if self.waypoints.is_empty() {
            return Err(SimError::EmptyScript);
        }
        if self.waypoints.windows(2).any(|w| !(w[1].time_s > w[0].time_s)) {
            return bad("waypoint times must be strictly increasing");
        }
        if self.waypoints.iter().any(|w| w.keypoints_local.len() != NUM_KEYPOINTS) {
            return bad("every waypoint needs 21 keypoints");
        }
        let n = &self.noise;
        if [n.keypoint_sigma, n.depth_sigma, n.shape_sigma, n.orientation_sigma]
            .iter()
            .any(|s| !(*s >= 0.0))
        {
            return bad("noise sigmas must be non-negative");
        }
        if self.cameras.is_empty() {
            return bad("at least one camera is required");
        }
        if !self.shape.is_empty() && self.shape.len() != SHAPE_DIM {
            return bad("shape must have 10 parameters");
        }
        Ok(())
    }

    pub fn duration_s(&self) -> f64 {
        match (self.waypoints.first(), self.waypoints.last()) {
            (Some(a), Some(b)) => b.time_s - a.time_s,
            _ => 0.0,
        }
    }

    /// Wrist pose and local keypoints at `t` seconds, clamped to the script.
    pub fn sample(&self, t: f64) -> (RigidTransform, Vec<[f64; 3]>) {
        let w = &self.waypoints;
        if t <= w[0].time_s {
            return (w[0].wrist_pose, w[0].keypoints_local.clone());
        }
        let last = w.len() - 1;
        if t >= w[last].time_s {
            return (w[last].wrist_pose, w[last].keypoints_local.clone());
        }
        let i = w.partition_point(|p| p.time_s <= t) - 1;
        let (a, b) = (&w[i], &w[i + 1]);
        let s = (t - a.time_s) / (b.time_s - a.time_s);
        let pose = interpolate(&a.wrist_pose, &b.wrist_pose, s);
        let kp = a
            .keypoints_local
            .iter()
            .zip(&b.keypoints_local)
            .map(|(p, q)| [p[0] + (q[0] - p[0]) * s, p[1] + (q[1] - p[1]) * s, p[2] + (q[2] - p[2]) * s])
            .collect();
        (pose, kp)
    }
}

/// Frames per camera, in timestamp order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticStream {
    pub frames: BTreeMap<String, Vec<HandFrame>>,
    /// Ground-truth wrist pose in the world frame at each frame time.
    pub truth: Vec<(u64, RigidTransform)>,
}

impl SyntheticStream {
    /// All frames as HAND_FRAME envelopes, ordered by timestamp then camera.
    pub fn envelopes(&self, session_id: &str) -> Vec<Envelope> {
        let mut all: Vec<&HandFrame> = self.frames.values().flatten().collect();
        all.sort_by(|a, b| (a.timestamp_us, &a.camera_id).cmp(&(b.timestamp_us, &b.camera_id)));
        all.into_iter()
            .map(|f| {
                Envelope::new(
                    Some(session_id),
                    f.timestamp_us,
                    &Message::HandFrame(HandFrameMessage {
                        session_id: session_id.to_string(),
                        frame: f.clone(),
                    }),
                )
            })
            .collect()
    }
}

/// Samples the script at `rate_hz`, renders every camera and adds seeded noise.
pub fn generate_stream(script: &SyntheticHandScript, rate_hz: f64, seed: u64) -> Result<SyntheticStream, SimError> {
    script.validate()?;
    if !(rate_hz > 0.0) || !rate_hz.is_finite() {
        return Err(SimError::InvalidScript(format!("rate must be positive, got {rate_hz}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t0 = script.waypoints[0].time_s;
    let count = (script.duration_s() * rate_hz + 1e-9).floor() as u64 + 1;
    let mut frames: BTreeMap<String, Vec<HandFrame>> =
        script.cameras.iter().map(|c| (c.camera_id.clone(), Vec::new())).collect();
    let mut truth = Vec::with_capacity(count as usize);

    for k in 0..count {
        let dt = k as f64 / rate_hz;
        let ts = script.start_us + (dt * 1e6).round() as u64;
        let (wrist, local) = script.sample(t0 + dt);
        truth.push((ts, wrist));
        for cam in &script.cameras {
            let corruption = cam.corruptions.iter().find(|c| dt >= c.start_s && dt < c.end_s);
            let frame = render(script, cam, corruption, &wrist, &local, ts, &mut rng);
            if !corruption.is_some_and(|c| c.drop_frames) {
                frames.get_mut(&cam.camera_id).expect("camera listed").push(frame);
            }
        }
    }
    Ok(SyntheticStream { frames, truth })
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("positive sigma").sample(rng)
    } else {
        0.0
    }
}

fn render(
    script: &SyntheticHandScript,
    cam: &SyntheticCamera,
    corruption: Option<&Corruption>,
    wrist: &RigidTransform,
    local: &[[f64; 3]],
    timestamp_us: u64,
    rng: &mut ChaCha8Rng,
) -> HandFrame {
    let noise = &script.noise;
    let mut pose = cam.camera_from_world * *wrist;
    if noise.orientation_sigma > 0.0 {
        let axis: Vector3<f64> = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        let jitter = so3_exp(&(axis * noise.orientation_sigma));
        pose.rotation = jitter * pose.rotation;
    }
    let kp_sigma = noise.keypoint_sigma.hypot(corruption.map_or(0.0, |c| c.keypoint_sigma));
    let depth_sigma = noise.depth_sigma.hypot(corruption.map_or(0.0, |c| c.depth_sigma));

    let k = &cam.intrinsics;
    let mut pixels = Vec::with_capacity(NUM_KEYPOINTS);
    let mut depths = Vec::with_capacity(NUM_KEYPOINTS);
    for p in local {
        let mut c = pose.transform_point(&Vector3::from(*p));
        let true_z = c.z;
        for i in 0..3 {
            c[i] += gaussian(rng, kp_sigma);
        }
        let z = c.z.max(1e-3);
        pixels.push([k.fx * c.x / z + k.cx, k.fy * c.y / z + k.cy]);
        depths.push((true_z + gaussian(rng, depth_sigma)).max(0.0));
    }

    let mut shape: Vec<f64> = if script.shape.is_empty() { vec![0.0; SHAPE_DIM] } else { script.shape.clone() };
    for (i, s) in shape.iter_mut().enumerate() {
        *s += cam.shape_offset.get(i).copied().unwrap_or(0.0);
        *s += corruption.and_then(|c| c.shape_offset.get(i)).copied().unwrap_or(0.0);
        *s += gaussian(rng, noise.shape_sigma);
    }

    HandFrame {
        camera_id: cam.camera_id.clone(),
        timestamp_us,
        keypoints_local: local.to_vec(),
        keypoints_pixel: pixels,
        depth: cam.with_depth.then_some(depths),
        shape_params: Some(shape),
        weak_persp_scale: Some(k.fx / pose.translation.z),
        hand_reference_size: Vector3::from(local[MIDDLE_MCP]).norm(),
    }
}

/// The template hand with every finger flexed by `curl` (0 open, 1 closed).
pub fn curled_hand(curl: f64) -> Vec<[f64; 3]> {
    let template = template_hand_keypoints();
    let mut out = template.to_vec();
    // Joint chains: thumb 1-4, then index, middle, ring and pinky from their MCPs.
    let chains: [(usize, f64); 5] = [(1, 0.6), (5, 1.0), (9, 1.0), (13, 1.0), (17, 1.0)];
    let lateral = Unit::new_normalize(Vector3::y());
    for (start, gain) in chains {
        let mut pivot = Vector3::from(template[start]);
        let mut rotation = Rotation3::identity();
        for j in start..start + 4 {
            if j > start {
                let step = Rotation3::from_axis_angle(&lateral, 0.5 * curl * gain);
                rotation = step * rotation;
                let seg = Vector3::from(template[j]) - Vector3::from(template[j - 1]);
                pivot += rotation * seg;
                out[j] = pivot.into();
            }
        }
    }
    out
}

fn rig_camera(id: &str, yaw: f64, distance: f64, with_depth: bool) -> SyntheticCamera {
    // Looks at the world origin from `distance` away, swung about the vertical by `yaw`.
    let swing = RigidTransform::from_rotation(Rotation3::from_axis_angle(&Vector3::y_axis(), yaw));
    let back = RigidTransform::from_translation(Vector3::new(0.0, 0.0, distance));
    SyntheticCamera {
        camera_id: id.to_string(),
        intrinsics: CameraIntrinsics {
            fx: 600.0,
            fy: 600.0,
            cx: 320.0,
            cy: 240.0,
            width: 640.0,
            height: 480.0,
        },
        camera_from_world: back * swing,
        with_depth,
        shape_offset: Vec::new(),
        corruptions: Vec::new(),
    }
}

/// A smooth operator motion with rich wrist rotation and cycling finger curl.
///
/// `phase` shifts the trajectory so different operators move differently.
pub fn operator_script(duration_s: f64, phase: f64, camera_yaws: &[f64], with_depth: bool) -> SyntheticHandScript {
    let step = 0.1;
    let n = (duration_s / step).round() as usize;
    let waypoints = (0..=n)
        .map(|i| {
            let t = i as f64 * step;
            let w = 2.0 * std::f64::consts::PI / 4.0;
            let position = Vector3::new(
                0.06 * (w * t + phase).sin(),
                0.04 * (1.3 * w * t + 2.0 * phase).sin(),
                0.05 * (0.7 * w * t + 0.5 * phase).sin(),
            );
            let rotation = Rotation3::from_euler_angles(
                0.35 * (0.9 * w * t + phase).sin(),
                0.30 * (1.1 * w * t + 0.3 + phase).sin(),
                0.40 * (0.8 * w * t + 1.1 + phase).sin(),
            );
            let curl = 0.5 - 0.45 * (1.7 * w * t + phase).cos();
            Waypoint {
                time_s: t,
                wrist_pose: RigidTransform::new(rotation, position),
                keypoints_local: curled_hand(curl),
            }
        })
        .collect();
    SyntheticHandScript {
        waypoints,
        noise: NoiseSpec::default(),
        cameras: camera_yaws
            .iter()
            .enumerate()
            .map(|(i, yaw)| rig_camera(&format!("cam{i}"), *yaw, 0.55, with_depth))
            .collect(),
        shape: vec![0.0; SHAPE_DIM],
        start_us: 1_000_000,
    }
}
