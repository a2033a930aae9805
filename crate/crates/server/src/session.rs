//! One operator driving one robot.
//!
//! A [`SessionPipeline`] is strictly serial: frames go in through
//! [`SessionPipeline::ingest`], commands come out of [`SessionPipeline::tick`].
//! Nothing in it depends on wall-clock time, so the live server and the replay
//! harness run exactly the same code.

use std::collections::BTreeMap;

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use teleop_core::fusion::{
    CalibrationPhase, CalibrationState, CameraObservation, FusedMotion, FusionError, IntegratedWristState,
};
use teleop_core::motion_gen::{MotionController, MotionError, MotionTarget, StepReport};
use teleop_core::retargeting::RetargetState;
use teleop_core::wrist_pose::{estimate_wrist_pose, WristPose};
use teleop_core::{CameraIntrinsics, HandFrame, JointConfig, RigidTransform};
use thiserror::Error;

use crate::config::SessionSpec;
use crate::protocol::JointCommandMessage;
use crate::robot::RobotAssets;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    AwaitingCalibration,
    Active,
    Paused,
    LostTracking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DropReason {
    /// Not newer than the last frame processed for this camera.
    StaleFrame { last_timestamp_us: u64 },
    Paused,
    PoseEstimation { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrameOutcome {
    Accepted,
    /// Calibration failed its rank check and restarted with this frame discarded.
    CalibrationRestarted { message: String },
    Dropped { reason: DropReason },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameAck {
    pub camera_id: String,
    pub timestamp_us: u64,
    pub status: SessionStatus,
    pub outcome: FrameOutcome,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error("camera {0} is not registered with this session")]
    UnknownCamera(String),
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("invalid session spec: {0}")]
    BadSpec(String),
    #[error("cannot {action} a session in state {from:?}")]
    InvalidTransition { from: SessionStatus, action: &'static str },
    #[error(transparent)]
    Motion(#[from] MotionError),
}

#[derive(Debug, Clone)]
pub struct TickOutput {
    pub command: JointCommandMessage,
    pub report: StepReport,
    pub status: SessionStatus,
}

#[derive(Debug, Clone)]
struct GroupEntry {
    pose: WristPose,
    shape: Option<Vec<f64>>,
    keypoints: Vec<Vector3<f64>>,
}

/// Frames sharing one timestamp, one per camera at most.
#[derive(Debug, Clone)]
struct FrameGroup {
    timestamp_us: u64,
    entries: BTreeMap<String, GroupEntry>,
}

/// Summary of the most recent fused frame group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub timestamp_us: u64,
    pub chosen_camera: Option<String>,
    pub confidence: Option<f64>,
    pub fused: bool,
}

pub struct SessionPipeline {
    spec: SessionSpec,
    robot_id: String,
    intrinsics: BTreeMap<String, CameraIntrinsics>,
    calibration: CalibrationState,
    retargeter: teleop_core::retargeting::Retargeter,
    retarget_state: RetargetState,
    controller: MotionController,
    status: SessionStatus,
    camera_to_base: Rotation3<f64>,
    ee_target: IntegratedWristState,
    hand_q: Vec<f64>,
    last_frame_us: BTreeMap<String, u64>,
    last_pose: BTreeMap<String, WristPose>,
    last_shape: BTreeMap<String, Option<Vec<f64>>>,
    pending: Option<FrameGroup>,
    last_seen_us: Option<u64>,
    clock_origin_us: u64,
    ticks: u64,
    last_group: Option<GroupSummary>,
}

impl SessionPipeline {
    /// Creates the session in `awaiting_calibration`, holding the robot's initial pose from `start_us`.
    pub fn new(spec: &SessionSpec, robot: &RobotAssets, start_us: u64) -> Result<Self, SessionError> {
        spec.validate().map_err(|e| SessionError::BadSpec(e.to_string()))?;
        if spec.robot_id != robot.robot_id() {
            return Err(SessionError::BadSpec(format!(
                "session names robot {} but was given {}",
                spec.robot_id,
                robot.robot_id()
            )));
        }
        let calibration = CalibrationState::new(
            spec.cameras.iter().map(|c| c.camera_id.as_str()),
            spec.calibration_frames,
            spec.reference_camera.as_deref(),
        )
        .map_err(|e| SessionError::BadSpec(e.to_string()))?;
        let mut controller = MotionController::new(&robot.full, &robot.spec.ee_link, robot.initial_arm_q.clone(), spec.controller)?;
        let home = controller.ee_pose();
        controller.submit_target(MotionTarget {
            ee_pose: home,
            hand_q: JointConfig::at(robot.initial_hand_q.clone(), start_us),
            timestamp_us: start_us,
        })?;
        let [r, p, y] = spec.camera_to_base_rpy;
        Ok(Self {
            spec: spec.clone(),
            robot_id: robot.robot_id().to_string(),
            intrinsics: spec.cameras.iter().map(|c| (c.camera_id.clone(), c.intrinsics)).collect(),
            calibration,
            retargeter: robot.retargeter.clone(),
            retarget_state: RetargetState::default(),
            controller,
            status: SessionStatus::AwaitingCalibration,
            camera_to_base: Rotation3::from_euler_angles(r, p, y),
            ee_target: IntegratedWristState::new(home, start_us),
            hand_q: robot.initial_hand_q.clone(),
            last_frame_us: BTreeMap::new(),
            last_pose: BTreeMap::new(),
            last_shape: BTreeMap::new(),
            pending: None,
            last_seen_us: None,
            clock_origin_us: start_us,
            ticks: 0,
            last_group: None,
        })
    }

    pub fn session_id(&self) -> &str {
        &self.spec.session_id
    }

    pub fn robot_id(&self) -> &str {
        &self.robot_id
    }

    pub fn spec(&self) -> &SessionSpec {
        &self.spec
    }

    pub fn status(&self) -> SessionStatus {
        self.status
    }

    pub fn controller(&self) -> &MotionController {
        &self.controller
    }

    pub fn calibration(&self) -> &CalibrationState {
        &self.calibration
    }

    /// End-effector target in the robot base frame.
    pub fn ee_target(&self) -> &RigidTransform {
        &self.ee_target.pose
    }

    pub fn hand_q(&self) -> &[f64] {
        &self.hand_q
    }

    pub fn last_group(&self) -> Option<&GroupSummary> {
        self.last_group.as_ref()
    }

    /// Timestamp the next [`tick`](Self::tick) will stamp on its command.
    pub fn next_tick_us(&self) -> u64 {
        self.clock_origin_us + ((self.ticks + 1) as f64 * 1e6 / self.spec.controller.control_rate_hz).round() as u64
    }

    pub fn ingest(&mut self, frame: &HandFrame) -> Result<FrameAck, SessionError> {
        let intr = *self
            .intrinsics
            .get(&frame.camera_id)
            .ok_or_else(|| SessionError::UnknownCamera(frame.camera_id.clone()))?;
        frame.validate().map_err(|e| SessionError::MalformedFrame(e.to_string()))?;
        let outcome = self.process(frame, &intr);
        Ok(FrameAck {
            camera_id: frame.camera_id.clone(),
            timestamp_us: frame.timestamp_us,
            status: self.status,
            outcome,
        })
    }

    fn process(&mut self, frame: &HandFrame, intr: &CameraIntrinsics) -> FrameOutcome {
        let dropped = |reason| FrameOutcome::Dropped { reason };
        if let Some(&last) = self.last_frame_us.get(&frame.camera_id) {
            if frame.timestamp_us <= last {
                return dropped(DropReason::StaleFrame { last_timestamp_us: last });
            }
        }
        if self.status == SessionStatus::Paused {
            return dropped(DropReason::Paused);
        }
        self.last_frame_us.insert(frame.camera_id.clone(), frame.timestamp_us);
        let pose = match estimate_wrist_pose(frame, intr) {
            Ok(p) => p,
            Err(e) => return dropped(DropReason::PoseEstimation { message: e.to_string() }),
        };
        self.last_seen_us = Some(self.last_seen_us.map_or(frame.timestamp_us, |t| t.max(frame.timestamp_us)));

        match self.status {
            SessionStatus::AwaitingCalibration => {
                let result = self
                    .calibration
                    .accumulate_calibration(&frame.camera_id, &pose, frame.shape_params.as_deref());
                self.last_pose.insert(frame.camera_id.clone(), pose);
                self.last_shape.insert(frame.camera_id.clone(), frame.shape_params.clone());
                match result {
                    Ok(CalibrationPhase::Ready) => {
                        self.status = SessionStatus::Active;
                        self.ee_target = IntegratedWristState::new(self.held_pose(), frame.timestamp_us);
                        FrameOutcome::Accepted
                    }
                    Ok(_) => FrameOutcome::Accepted,
                    Err(e) => FrameOutcome::CalibrationRestarted { message: e.to_string() },
                }
            }
            SessionStatus::LostTracking => {
                self.reanchor();
                self.status = SessionStatus::Active;
                self.add_to_group(frame, pose);
                FrameOutcome::Accepted
            }
            SessionStatus::Active => {
                self.add_to_group(frame, pose);
                FrameOutcome::Accepted
            }
            SessionStatus::Paused => unreachable!("paused frames are dropped above"),
        }
    }

    /// The end-effector pose the controller is currently steering to.
    fn held_pose(&self) -> RigidTransform {
        self.controller
            .state()
            .active_target
            .as_ref()
            .map(|t| t.ee_pose)
            .unwrap_or_else(|| self.controller.ee_pose())
    }

    /// Restarts relative tracking from the held pose, so the next motion is identity.
    fn reanchor(&mut self) {
        let held = self.held_pose();
        let ts = self.ee_target.last_timestamp_us;
        self.ee_target = IntegratedWristState::new(held, ts);
        self.last_pose.clear();
        self.last_shape.clear();
        self.pending = None;
    }

    fn add_to_group(&mut self, frame: &HandFrame, pose: WristPose) {
        if self.pending.as_ref().is_some_and(|g| g.timestamp_us != frame.timestamp_us) {
            self.flush();
        }
        let group = self.pending.get_or_insert_with(|| FrameGroup {
            timestamp_us: frame.timestamp_us,
            entries: BTreeMap::new(),
        });
        group.entries.insert(
            frame.camera_id.clone(),
            GroupEntry {
                pose,
                shape: frame.shape_params.clone(),
                keypoints: frame.metric_keypoints(),
            },
        );
        if group.entries.len() == self.intrinsics.len() {
            self.flush();
        }
    }

    /// Fuses the pending group, updates the hand, and submits a new target.
    fn flush(&mut self) {
        let Some(group) = self.pending.take() else {
            return;
        };
        let observations: Vec<CameraObservation> = group
            .entries
            .iter()
            .map(|(id, e)| CameraObservation {
                camera_id: id.clone(),
                current: Some(e.pose.clone()),
                previous: self.last_pose.get(id).cloned(),
                shape: e.shape.clone(),
                previous_shape: self.last_shape.get(id).cloned().flatten(),
            })
            .collect();

        let mut summary = GroupSummary {
            timestamp_us: group.timestamp_us,
            chosen_camera: None,
            confidence: None,
            fused: false,
        };
        match self.calibration.fuse(&observations) {
            Ok(motion) => {
                summary.chosen_camera = Some(motion.chosen_camera.clone());
                summary.confidence = Some(motion.confidence);
                summary.fused = self.apply_motion(&group, &motion);
            }
            Err(FusionError::NoValidCamera) => {
                let mut best: Option<(f64, &String)> = None;
                for (id, e) in &group.entries {
                    let c = self.calibration.confidence(e.shape.as_deref()).unwrap_or(0.0);
                    if best.is_none_or(|(bc, _)| c > bc) {
                        best = Some((c, id));
                    }
                }
                if let Some((c, id)) = best {
                    summary.chosen_camera = Some(id.clone());
                    summary.confidence = Some(c);
                }
            }
            Err(_) => {}
        }

        if let Some(chosen) = &summary.chosen_camera {
            let keypoints = &group.entries[chosen].keypoints;
            if let Ok(v) = self.retargeter.compute_human_vectors(keypoints) {
                if let Ok(q) = self.retargeter.retarget(&mut self.retarget_state, &v) {
                    self.hand_q = q.values;
                }
            }
        }

        for (id, e) in group.entries {
            self.last_pose.insert(id.clone(), e.pose);
            self.last_shape.insert(id, e.shape);
        }
        let target = MotionTarget {
            ee_pose: self.ee_target.pose,
            hand_q: JointConfig::at(self.hand_q.clone(), group.timestamp_us),
            timestamp_us: group.timestamp_us,
        };
        // Groups that are not newer than the active target are discarded.
        let _ = self.controller.submit_target(target);
        self.last_group = Some(summary);
    }

    /// Integrates the chosen camera's motion into the end-effector target.
    ///
    /// Rotation is taken from the fused delta; translation is the chosen camera's
    /// wrist displacement, so the result does not depend on where that camera sits.
    fn apply_motion(&mut self, group: &FrameGroup, motion: &FusedMotion) -> bool {
        let chosen = &motion.chosen_camera;
        let (Some(previous), Some(r_rel)) = (self.last_pose.get(chosen), self.calibration.relative_rotation(chosen)) else {
            return false;
        };
        let current = &group.entries[chosen].pose;
        let displacement = r_rel * (current.pose.translation - previous.pose.translation);
        let c = self.camera_to_base;
        let rotation = c * motion.delta_pose.rotation * c.inverse();
        let shift = c * displacement * self.spec.translation_scale;
        let e = self.ee_target.pose;
        let delta = RigidTransform::new(rotation, e.translation + shift - rotation * e.translation);
        let in_base = FusedMotion {
            delta_pose: delta,
            ..motion.clone()
        };
        self.ee_target.integrate(&in_base).is_ok()
    }

    /// Moves to `lost_tracking` and freezes the arm once no frame has arrived for the timeout.
    pub fn detect_tracking_loss(&mut self, now_us: u64) -> SessionStatus {
        if self.status != SessionStatus::Active {
            return self.status;
        }
        let Some(last) = self.last_seen_us else {
            return self.status;
        };
        if now_us.saturating_sub(last) > self.spec.tracking_timeout_ms * 1000 {
            self.status = SessionStatus::LostTracking;
            self.pending = None;
            self.hold();
        }
        self.status
    }

    fn hold(&mut self) {
        let ts = self
            .controller
            .state()
            .active_target
            .as_ref()
            .map_or(self.clock_origin_us, |t| t.timestamp_us)
            + 1;
        self.controller.hold_current_pose(ts);
    }

    pub fn pause(&mut self) -> Result<SessionStatus, SessionError> {
        match self.status {
            SessionStatus::Active | SessionStatus::LostTracking => {
                self.status = SessionStatus::Paused;
                self.pending = None;
                self.hold();
                Ok(self.status)
            }
            from => Err(SessionError::InvalidTransition { from, action: "pause" }),
        }
    }

    pub fn resume(&mut self) -> Result<SessionStatus, SessionError> {
        match self.status {
            SessionStatus::Paused => {
                self.reanchor();
                self.status = SessionStatus::Active;
                self.last_seen_us = Some(self.next_tick_us().saturating_sub(self.tick_period_us()));
                Ok(self.status)
            }
            from => Err(SessionError::InvalidTransition { from, action: "resume" }),
        }
    }

    fn tick_period_us(&self) -> u64 {
        (1e6 / self.spec.controller.control_rate_hz).round() as u64
    }

    /// One control period: tracking check, then one controller step.
    pub fn tick(&mut self) -> Result<TickOutput, SessionError> {
        let now = self.next_tick_us();
        self.detect_tracking_loss(now);
        let (cmd, report) = self.controller.control_step()?;
        self.ticks += 1;
        debug_assert_eq!(cmd.timestamp_us, now);
        Ok(TickOutput {
            command: JointCommandMessage {
                robot_id: self.robot_id.clone(),
                timestamp_us: cmd.timestamp_us,
                arm_q: cmd.arm_q.values,
                hand_q: cmd.hand_q.values,
            },
            report,
            status: self.status,
        })
    }
}

#[cfg(test)]
mod tests;
