//! Core pipeline for vision-based arm-hand teleoperation.
//!
//! Hand detections flow through [`wrist_pose`] (per-camera 6D wrist pose),
//! [`fusion`] (auto-calibration and confidence-based camera selection),
//! [`retargeting`] (finger keypoints to robot hand joints) and [`motion_gen`]
//! (low-rate wrist targets to high-rate, limit-respecting arm commands).
//! Everything is built on the robot descriptions in [`kinematics`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod fusion;
pub mod geometry;
pub mod hand;
pub mod kinematics;
pub mod motion_gen;
pub mod optim;
pub mod retargeting;
pub mod wrist_pose;

pub use geometry::RigidTransform;
pub use hand::{CameraIntrinsics, HandFrame};
pub use kinematics::{load_robot_description, JointConfig, RobotModel};
