//! Low-rate end-effector targets to high-rate arm joint commands.
//!
//! Targets arrive at roughly 25 Hz; [`MotionController::control_step`] runs at
//! the control rate (120 Hz by default). Each tick interpolates between the two
//! most recent targets, computes a damped-least-squares joint velocity toward
//! the interpolated pose, adds a repulsive term for sphere pairs inside the
//! collision margin, clamps to velocity and position limits, and rejects steps
//! that would eat into the safety margin.

mod collision;

use nalgebra::{DMatrix, DVector, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{interpolate, so3_log, RigidTransform};
use crate::kinematics::{JointConfig, KinematicsError, RobotModel};

pub use collision::{self_collision_distance, CollisionModel, CollisionReport, PairGeometry, SpherePair};

const MAX_STEP_HALVINGS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MotionError {
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("no link pair is eligible for collision checking")]
    NoCollisionModel,
    #[error("target at {got} µs is not newer than {active} µs")]
    StaleTarget { active: u64, got: u64 },
    #[error("no target has been submitted")]
    NoTarget,
    #[error("invalid controller configuration: {0}")]
    InvalidConfig(String),
    #[error("initial configuration violates joint limits")]
    InitialOutOfLimits,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerGains {
    /// 1/s
    pub kp_linear: f64,
    /// 1/s
    pub kp_angular: f64,
    pub damping: f64,
    /// m
    pub collision_margin: f64,
    /// m/s
    pub collision_gain: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self {
            kp_linear: 10.0,
            kp_angular: 10.0,
            damping: 0.05,
            collision_margin: 0.01,
            collision_gain: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub control_rate_hz: f64,
    pub target_rate_hz: f64,
    pub gains: ControllerGains,
    /// Position error (m) above which a motionless arm counts as stalled.
    pub stall_position_error: f64,
    /// Orientation error (rad) above which a motionless arm counts as stalled.
    pub stall_angle_error: f64,
    /// Seconds of motionless error before a stall is reported.
    pub stall_duration_s: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            control_rate_hz: 120.0,
            target_rate_hz: 25.0,
            gains: ControllerGains::default(),
            stall_position_error: 1e-3,
            stall_angle_error: 0.5f64.to_radians(),
            stall_duration_s: 0.5,
        }
    }
}

impl ControllerConfig {
    pub fn control_dt(&self) -> f64 {
        1.0 / self.control_rate_hz
    }

    pub fn validate(&self) -> Result<(), MotionError> {
        let g = &self.gains;
        let positive = [self.control_rate_hz, self.target_rate_hz, g.kp_linear, g.kp_angular];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(MotionError::InvalidConfig("rates and gains must be positive".into()));
        }
        let non_negative = [g.damping, g.collision_margin, g.collision_gain, self.stall_duration_s];
        if non_negative.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(MotionError::InvalidConfig("damping, margin and collision gain must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionTarget {
    pub ee_pose: RigidTransform,
    pub hand_q: JointConfig,
    pub timestamp_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointCommand {
    pub arm_q: JointConfig,
    pub hand_q: JointConfig,
    pub timestamp_us: u64,
}

/// Diagnostics for one control tick.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub position_error: f64,
    pub angle_error: f64,
    pub min_distance: Option<f64>,
    /// Number of times the step was halved to respect the collision margin.
    pub halvings: usize,
    /// The candidate step was rejected and the arm held its configuration.
    pub held: bool,
    pub stalled: bool,
}

#[derive(Debug, Clone)]
pub struct ControllerState {
    pub q: JointConfig,
    pub q_dot: Vec<f64>,
    pub active_target: Option<MotionTarget>,
    pub previous_target: Option<MotionTarget>,
    ticks: u64,
    ticks_since_submit: u64,
    clock_origin_us: Option<u64>,
    still_since_tick: Option<u64>,
}

/// `prev` at `t = 0`, `next` at `t = 1`; translation linear, rotation geodesic.
pub fn interpolate_target(prev: &MotionTarget, next: &MotionTarget, t: f64) -> RigidTransform {
    interpolate(&prev.ee_pose, &next.ee_pose, t.clamp(0.0, 1.0))
}

/// 6-vector pose error: linear part, then the rotation log of `R_d·Rᵀ`.
pub fn pose_error(current: &RigidTransform, desired: &RigidTransform) -> Vector6<f64> {
    let lin = desired.translation - current.translation;
    let ang = so3_log(&(desired.rotation * current.rotation.inverse()));
    Vector6::new(lin.x, lin.y, lin.z, ang.x, ang.y, ang.z)
}

/// Moves `candidate` toward `from` until `|candidate − from| ≤ bound` holds in floating point.
fn respect_bound(from: f64, candidate: f64, bound: f64) -> f64 {
    let mut c = candidate;
    while (c - from).abs() > bound {
        c = if c > from { c.next_down() } else { c.next_up() };
    }
    c
}

#[derive(Debug, Clone)]
pub struct MotionController {
    arm: RobotModel,
    ee_link: usize,
    collision: Option<CollisionModel>,
    config: ControllerConfig,
    state: ControllerState,
    lower: Vec<f64>,
    upper: Vec<f64>,
    vmax: Vec<f64>,
}

impl MotionController {
    /// `model` may include the hand; everything below `ee_link` is dropped.
    pub fn new(model: &RobotModel, ee_link: &str, q0: Vec<f64>, config: ControllerConfig) -> Result<Self, MotionError> {
        config.validate()?;
        let arm = model.without_subtree(ee_link)?;
        let ee = arm.link_index(ee_link)?;
        arm.check_dimension(&q0)?;
        if !arm.within_limits(&q0) {
            return Err(MotionError::InitialOutOfLimits);
        }
        let collision = match CollisionModel::new(&arm) {
            Ok(c) => Some(c),
            Err(MotionError::NoCollisionModel) => None,
            Err(e) => return Err(e),
        };
        let n = arm.dof();
        Ok(Self {
            lower: arm.lower_limits(),
            upper: arm.upper_limits(),
            vmax: arm.velocity_limits(),
            arm,
            ee_link: ee,
            collision,
            config,
            state: ControllerState {
                q: JointConfig::new(q0),
                q_dot: vec![0.0; n],
                active_target: None,
                previous_target: None,
                ticks: 0,
                ticks_since_submit: 0,
                clock_origin_us: None,
                still_since_tick: None,
            },
        })
    }

    pub fn arm(&self) -> &RobotModel {
        &self.arm
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn state(&self) -> &ControllerState {
        &self.state
    }

    pub fn q(&self) -> &[f64] {
        &self.state.q.values
    }

    pub fn collision_model(&self) -> Option<&CollisionModel> {
        self.collision.as_ref()
    }

    pub fn ee_pose(&self) -> RigidTransform {
        self.ee_pose_at(&self.state.q.values)
    }

    fn ee_pose_at(&self, q: &[f64]) -> RigidTransform {
        self.arm.link_poses(q).expect("dimension checked")[self.ee_link]
    }

    /// Controller clock for the next emitted command.
    pub fn now_us(&self) -> u64 {
        let origin = self.state.clock_origin_us.unwrap_or(0);
        origin + (self.state.ticks as f64 * 1e6 / self.config.control_rate_hz).round() as u64
    }

    pub fn submit_target(&mut self, target: MotionTarget) -> Result<(), MotionError> {
        match &self.state.active_target {
            Some(active) if target.timestamp_us <= active.timestamp_us => {
                return Err(MotionError::StaleTarget {
                    active: active.timestamp_us,
                    got: target.timestamp_us,
                })
            }
            Some(_) => {
                // Start the new segment from where the arm was being steered.
                let current = self.pose_at_fraction(self.interpolation_fraction(self.state.ticks_since_submit));
                let mut from = self.state.active_target.take().expect("checked");
                if let Some(pose) = current {
                    from.ee_pose = pose;
                }
                self.state.previous_target = Some(from);
            }
            None => {
                self.state.previous_target = Some(target.clone());
                self.state.clock_origin_us.get_or_insert(target.timestamp_us);
            }
        }
        self.state.active_target = Some(target);
        self.state.ticks_since_submit = 0;
        Ok(())
    }

    /// Replaces both targets with the current end-effector pose.
    pub fn hold_current_pose(&mut self, timestamp_us: u64) {
        let hand_q = self
            .state
            .active_target
            .as_ref()
            .map(|t| t.hand_q.clone())
            .unwrap_or_default();
        let target = MotionTarget {
            ee_pose: self.ee_pose(),
            hand_q,
            timestamp_us,
        };
        self.state.clock_origin_us.get_or_insert(timestamp_us);
        self.state.previous_target = Some(target.clone());
        self.state.active_target = Some(target);
        self.state.ticks_since_submit = 0;
    }

    fn interpolation_fraction(&self, ticks: u64) -> f64 {
        let (Some(prev), Some(active)) = (&self.state.previous_target, &self.state.active_target) else {
            return 1.0;
        };
        let gap = active.timestamp_us.saturating_sub(prev.timestamp_us) as f64 * 1e-6;
        let span = if gap > 0.0 { gap } else { 1.0 / self.config.target_rate_hz };
        (ticks as f64 * self.config.control_dt() / span).min(1.0)
    }

    fn pose_at_fraction(&self, t: f64) -> Option<RigidTransform> {
        let (prev, active) = (self.state.previous_target.as_ref()?, self.state.active_target.as_ref()?);
        if prev.timestamp_us == active.timestamp_us {
            return Some(active.ee_pose);
        }
        Some(interpolate_target(prev, active, t))
    }

    /// The pose the next tick steers toward.
    pub fn interpolated_pose(&self) -> Option<RigidTransform> {
        self.pose_at_fraction(self.interpolation_fraction(self.state.ticks_since_submit + 1))
    }

    fn min_distance(&self, q: &[f64]) -> Option<f64> {
        let collision = self.collision.as_ref()?;
        let poses = self.arm.link_poses(q).expect("dimension checked");
        Some(collision.min_distance(&self.arm, &poses).0)
    }

    /// Advances the controller by one tick.
    pub fn control_step(&mut self) -> Result<(JointCommand, StepReport), MotionError> {
        let desired = self.interpolated_pose().ok_or(MotionError::NoTarget)?;
        let gains = self.config.gains;
        let dt = self.config.control_dt();
        let q = self.state.q.values.clone();
        let n = q.len();
        let poses = self.arm.link_poses(&q)?;
        let ee = poses[self.ee_link];
        let error = pose_error(&ee, &desired);
        let position_error = error.fixed_rows::<3>(0).norm();
        let angle_error = error.fixed_rows::<3>(3).norm();

        let mut q_dot = DVector::zeros(n);
        if n > 0 {
            let jac = self.arm.jacobian(&q, &self.arm.links()[self.ee_link].name)?;
            let mut scaled = error;
            for i in 0..3 {
                scaled[i] *= gains.kp_linear;
                scaled[i + 3] *= gains.kp_angular;
            }
            let jjt = &jac * jac.transpose() + DMatrix::identity(6, 6) * (gains.damping * gains.damping);
            let rhs = DVector::from_column_slice(scaled.as_slice());
            let solved = jjt
                .clone()
                .cholesky()
                .map(|c| c.solve(&rhs))
                .or_else(|| jjt.lu().solve(&rhs))
                .unwrap_or_else(|| DVector::zeros(6));
            q_dot = jac.transpose() * solved;
        }

        let current_distance = match &self.collision {
            Some(collision) => {
                let (d, _) = collision.min_distance(&self.arm, &poses);
                for g in collision.within(&self.arm, &poses, gains.collision_margin) {
                    let diff = g.center_a - g.center_b;
                    let norm = diff.norm();
                    let normal = if norm > 1e-12 { diff / norm } else { Vector3::z() };
                    let ja = self.arm.point_jacobian(&poses, g.pair.link_a, &g.center_a);
                    let jb = self.arm.point_jacobian(&poses, g.pair.link_b, &g.center_b);
                    let push = (ja - jb).transpose() * normal;
                    let weight = gains.collision_gain * (gains.collision_margin - g.distance) / gains.collision_margin;
                    q_dot += push * weight;
                }
                Some(d)
            }
            None => None,
        };

        let mut candidate = vec![0.0; n];
        for i in 0..n {
            let v = q_dot[i].clamp(-self.vmax[i], self.vmax[i]);
            let raw = (q[i] + v * dt).clamp(self.lower[i], self.upper[i]);
            candidate[i] = respect_bound(q[i], raw, self.vmax[i] * dt);
        }

        let mut halvings = 0;
        let mut held = false;
        let mut min_distance = current_distance;
        if let Some(current) = current_distance {
            let floor = current.min(gains.collision_margin * 0.5);
            loop {
                let d = self.min_distance(&candidate).expect("collision model present");
                if d >= floor {
                    min_distance = Some(d);
                    break;
                }
                if halvings == MAX_STEP_HALVINGS {
                    candidate.clone_from(&q);
                    held = true;
                    min_distance = Some(current);
                    break;
                }
                halvings += 1;
                for i in 0..n {
                    let mid = q[i] + (candidate[i] - q[i]) * 0.5;
                    candidate[i] = mid.clamp(self.lower[i], self.upper[i]);
                }
            }
        }

        let applied: Vec<f64> = candidate.iter().zip(&q).map(|(c, p)| (c - p) / dt).collect();
        let speed = applied.iter().map(|v| v * v).sum::<f64>().sqrt();
        let erroneous = position_error > self.config.stall_position_error || angle_error > self.config.stall_angle_error;
        if erroneous && speed < 1e-9 {
            self.state.still_since_tick.get_or_insert(self.state.ticks);
        } else {
            self.state.still_since_tick = None;
        }
        let stalled = self
            .state
            .still_since_tick
            .is_some_and(|t| (self.state.ticks - t + 1) as f64 * dt > self.config.stall_duration_s);

        self.state.ticks += 1;
        self.state.ticks_since_submit += 1;
        let timestamp_us = self.now_us();
        self.state.q = JointConfig::at(candidate, timestamp_us);
        self.state.q_dot = applied;
        let hand_q = self
            .state
            .active_target
            .as_ref()
            .map(|t| t.hand_q.clone())
            .unwrap_or_default();
        let command = JointCommand {
            arm_q: self.state.q.clone(),
            hand_q: JointConfig::at(hand_q.values, timestamp_us),
            timestamp_us,
        };
        Ok((
            command,
            StepReport {
                position_error,
                angle_error,
                min_distance,
                halvings,
                held,
                stalled,
            },
        ))
    }
}
