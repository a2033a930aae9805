//! Loaded robot descriptions.

use serde::Serialize;
use teleop_core::kinematics::KinematicsError;
use teleop_core::retargeting::{RetargetConfig, RetargetError, Retargeter};
use teleop_core::{load_robot_description, RigidTransform, RobotModel};
use thiserror::Error;

use crate::config::{ConfigError, RobotSpec};

#[derive(Debug, Error)]
pub enum RobotError {
    #[error(transparent)]
    Source(#[from] ConfigError),
    #[error("robot description: {0}")]
    Description(#[from] KinematicsError),
    #[error("retargeting config: {0}")]
    Retarget(#[from] RetargetError),
    #[error("{0}")]
    Invalid(String),
}

/// A robot description parsed and split into arm and hand.
#[derive(Debug, Clone)]
pub struct RobotAssets {
    pub spec: RobotSpec,
    pub model_name: String,
    pub urdf: String,
    pub spheres: Option<String>,
    /// Full arm-hand tree.
    pub full: RobotModel,
    /// Everything above and including the end-effector link.
    pub arm: RobotModel,
    pub retargeter: Retargeter,
    pub base_pose: RigidTransform,
    pub initial_arm_q: Vec<f64>,
    pub initial_hand_q: Vec<f64>,
}

/// What the viewer fetches once per robot.
#[derive(Debug, Clone, Serialize)]
pub struct RobotDescription {
    pub robot_id: String,
    pub model: String,
    pub urdf: String,
    pub spheres: Option<serde_json::Value>,
    pub arm_joints: Vec<String>,
    pub hand_joints: Vec<String>,
    pub ee_link: String,
    pub hand_base_link: String,
    pub base_pose: RigidTransform,
}

impl RobotAssets {
    pub fn load(spec: &RobotSpec) -> Result<Self, RobotError> {
        let urdf = spec.urdf.text()?;
        let spheres = spec.spheres.as_ref().map(|s| s.text()).transpose()?;
        let full = load_robot_description(&urdf, spheres.as_deref())?;
        let arm = full.without_subtree(&spec.ee_link)?;
        let hand = full.subtree(&spec.hand_base_link)?;
        if arm.dof() + hand.dof() != full.dof() {
            return Err(RobotError::Invalid(format!(
                "arm ({} joints) and hand ({} joints) do not partition the robot ({} joints); \
                 the hand base must sit at or below the end-effector link",
                arm.dof(),
                hand.dof(),
                full.dof()
            )));
        }
        let config = RetargetConfig::from_json(&spec.retarget.text()?)?;
        let retargeter = Retargeter::new(hand.clone(), config)?;

        let initial_arm_q = spec.initial_arm_q.clone().unwrap_or_else(|| arm.mid_configuration());
        arm.check_dimension(&initial_arm_q)?;
        if !arm.within_limits(&initial_arm_q) {
            return Err(RobotError::Invalid("initial arm configuration violates joint limits".into()));
        }
        let initial_hand_q = spec.initial_hand_q.clone().unwrap_or_else(|| hand.mid_configuration());
        hand.check_dimension(&initial_hand_q)?;
        if !hand.within_limits(&initial_hand_q) {
            return Err(RobotError::Invalid("initial hand configuration violates joint limits".into()));
        }

        Ok(Self {
            model_name: spec.model.clone().unwrap_or_else(|| full.name().to_string()),
            spec: spec.clone(),
            urdf,
            spheres,
            base_pose: spec.base_pose.transform(),
            full,
            arm,
            retargeter,
            initial_arm_q,
            initial_hand_q,
        })
    }

    pub fn robot_id(&self) -> &str {
        &self.spec.robot_id
    }

    pub fn hand(&self) -> &RobotModel {
        self.retargeter.model()
    }

    pub fn description(&self) -> RobotDescription {
        RobotDescription {
            robot_id: self.spec.robot_id.clone(),
            model: self.model_name.clone(),
            urdf: self.urdf.clone(),
            spheres: self.spheres.as_deref().and_then(|s| serde_json::from_str(s).ok()),
            arm_joints: self.arm.actuated_joint_names(),
            hand_joints: self.hand().actuated_joint_names(),
            ee_link: self.spec.ee_link.clone(),
            hand_base_link: self.spec.hand_base_link.clone(),
            base_pose: self.base_pose,
        }
    }
}
