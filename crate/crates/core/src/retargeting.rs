//! Human finger keypoints to robot hand joint positions.
//!
//! Each configured vector pair maps a human keypoint difference `vᵢ` to the
//! difference `fᵢ(q)` between two robot link origins, expressed in the hand's
//! base frame. The solver minimizes
//!
//! ```text
//! Σᵢ ‖α·vᵢ − fᵢ(q)‖² + β‖q − q_prev‖²    subject to  q_l ≤ q ≤ q_u
//! ```
//!
//! warm-started at the previous solution.

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hand::{keypoint_index, NUM_KEYPOINTS};
use crate::kinematics::{JointConfig, KinematicsError, RobotModel};
use crate::optim::{minimize_box, Minimum, OptimError, SolverOptions};

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetargetError {
    #[error("invalid retargeting config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error("expected {expected} human vectors, got {got}")]
    VectorCount { expected: usize, got: usize },
    #[error("human vectors contain non-finite values")]
    NonFiniteInput,
    #[error("solver diverged")]
    SolverDiverged,
}

/// A human landmark, by index into the 21-point layout or by name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KeypointRef {
    Index(usize),
    Name(String),
}

impl KeypointRef {
    pub fn resolve(&self) -> Result<usize, RetargetError> {
        let idx = match self {
            KeypointRef::Index(i) => Some(*i).filter(|i| *i < NUM_KEYPOINTS),
            KeypointRef::Name(n) => keypoint_index(n),
        };
        idx.ok_or_else(|| RetargetError::InvalidConfig(format!("unknown keypoint {self:?}")))
    }
}

impl From<&str> for KeypointRef {
    fn from(s: &str) -> Self {
        KeypointRef::Name(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorPair {
    pub human: [KeypointRef; 2],
    pub robot: [String; 2],
}

impl VectorPair {
    pub fn new(human: (&str, &str), robot: (&str, &str)) -> Self {
        Self {
            human: [human.0.into(), human.1.into()],
            robot: [robot.0.to_string(), robot.1.to_string()],
        }
    }
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetargetConfig {
    pub vector_pairs: Vec<VectorPair>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub solver: SolverOptions,
}

impl RetargetConfig {
    pub fn from_json(text: &str) -> Result<Self, RetargetError> {
        serde_json::from_str(text).map_err(|e| RetargetError::InvalidConfig(e.to_string()))
    }

    /// Wrist to every fingertip plus thumb tip to index and middle tips.
    ///
    /// `tips` lists robot tip links for thumb, index, middle, ring and pinky;
    /// fingers the robot lacks are `None`.
    pub fn anthropomorphic(base_link: &str, tips: [Option<&str>; 5]) -> Self {
        const HUMAN_TIPS: [&str; 5] = ["thumb_tip", "index_tip", "middle_tip", "ring_tip", "pinky_tip"];
        let mut vector_pairs = Vec::new();
        for (human, robot) in HUMAN_TIPS.iter().zip(tips) {
            if let Some(robot) = robot {
                vector_pairs.push(VectorPair::new(("wrist", human), (base_link, robot)));
            }
        }
        if let Some(thumb) = tips[0] {
            for (human, robot) in HUMAN_TIPS[1..3].iter().zip(&tips[1..3]) {
                if let Some(robot) = robot {
                    vector_pairs.push(VectorPair::new(("thumb_tip", human), (thumb, robot)));
                }
            }
        }
        Self {
            vector_pairs,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            solver: SolverOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<(), RetargetError> {
        if self.vector_pairs.is_empty() {
            return Err(RetargetError::InvalidConfig("at least one vector pair is required".into()));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(RetargetError::InvalidConfig(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(RetargetError::InvalidConfig(format!("beta must be non-negative, got {}", self.beta)));
        }
        if self.solver.max_iterations == 0 {
            return Err(RetargetError::InvalidConfig("solver needs at least one iteration".into()));
        }
        for pair in &self.vector_pairs {
            pair.human[0].resolve()?;
            pair.human[1].resolve()?;
        }
        Ok(())
    }

    fn human_indices(&self) -> Result<Vec<(usize, usize)>, RetargetError> {
        self.vector_pairs
            .iter()
            .map(|p| Ok((p.human[0].resolve()?, p.human[1].resolve()?)))
            .collect()
    }
}

/// Human keypoint vectors `vᵢ`, ordered as the config's vector pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct HumanVectors {
    pub vectors: Vec<Vector3<f64>>,
}

pub fn compute_human_vectors(
    keypoints_local: &[Vector3<f64>],
    config: &RetargetConfig,
) -> Result<HumanVectors, RetargetError> {
    if keypoints_local.len() != NUM_KEYPOINTS {
        return Err(RetargetError::InvalidConfig(format!(
            "expected {NUM_KEYPOINTS} keypoints, got {}",
            keypoints_local.len()
        )));
    }
    let vectors = config
        .human_indices()?
        .into_iter()
        .map(|(from, to)| keypoints_local[to] - keypoints_local[from])
        .collect();
    Ok(HumanVectors { vectors })
}

#[derive(Debug, Clone, Default)]
pub struct RetargetState {
    pub q_prev: Option<JointConfig>,
}

impl RetargetState {
    pub fn initialized(&self) -> bool {
        self.q_prev.is_some()
    }
}

/// A retargeting problem bound to one robot hand model.
#[derive(Debug, Clone)]
pub struct Retargeter {
    model: RobotModel,
    config: RetargetConfig,
    human: Vec<(usize, usize)>,
    robot: Vec<(usize, usize)>,
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl Retargeter {
    /// `model` is the hand alone, with the hand mount as its base link.
    pub fn new(model: RobotModel, config: RetargetConfig) -> Result<Self, RetargetError> {
        config.validate()?;
        let human = config.human_indices()?;
        let robot = config
            .vector_pairs
            .iter()
            .map(|p| Ok((model.link_index(&p.robot[0])?, model.link_index(&p.robot[1])?)))
            .collect::<Result<Vec<_>, KinematicsError>>()?;
        let lower = DVector::from_vec(model.lower_limits());
        let upper = DVector::from_vec(model.upper_limits());
        Ok(Self {
            model,
            config,
            human,
            robot,
            lower,
            upper,
        })
    }

    pub fn model(&self) -> &RobotModel {
        &self.model
    }

    pub fn config(&self) -> &RetargetConfig {
        &self.config
    }

    pub fn human_pairs(&self) -> &[(usize, usize)] {
        &self.human
    }

    pub fn compute_human_vectors(&self, keypoints_local: &[Vector3<f64>]) -> Result<HumanVectors, RetargetError> {
        compute_human_vectors(keypoints_local, &self.config)
    }

    /// `fᵢ(q)` for every pair.
    pub fn robot_vectors(&self, q: &[f64]) -> Result<Vec<Vector3<f64>>, RetargetError> {
        let poses = self.model.link_poses(q)?;
        Ok(self
            .robot
            .iter()
            .map(|&(a, b)| poses[b].translation - poses[a].translation)
            .collect())
    }

    fn check_vectors(&self, v: &HumanVectors) -> Result<(), RetargetError> {
        if v.vectors.len() != self.robot.len() {
            return Err(RetargetError::VectorCount {
                expected: self.robot.len(),
                got: v.vectors.len(),
            });
        }
        if v.vectors.iter().any(|x| x.iter().any(|c| !c.is_finite())) {
            return Err(RetargetError::NonFiniteInput);
        }
        Ok(())
    }

    fn evaluate(&self, q: &[f64], v: &HumanVectors, q_prev: &[f64]) -> Result<(f64, DVector<f64>), KinematicsError> {
        let poses = self.model.link_poses(q)?;
        let n = q.len();
        let mut value = 0.0;
        let mut grad = DVector::zeros(n);
        for (&(a, b), target) in self.robot.iter().zip(&v.vectors) {
            let pa = poses[a].translation;
            let pb = poses[b].translation;
            let residual = target * self.config.alpha - (pb - pa);
            value += residual.norm_squared();
            let jac = self.model.point_jacobian(&poses, b, &pb) - self.model.point_jacobian(&poses, a, &pa);
            grad -= jac.transpose() * residual * 2.0;
        }
        let beta = self.config.beta;
        for i in 0..n {
            let d = q[i] - q_prev[i];
            value += beta * d * d;
            grad[i] += 2.0 * beta * d;
        }
        Ok((value, grad))
    }

    /// Objective value and gradient at `q`.
    pub fn objective(&self, q: &[f64], v: &HumanVectors, q_prev: &[f64]) -> Result<(f64, DVector<f64>), RetargetError> {
        self.check_vectors(v)?;
        self.model.check_dimension(q_prev)?;
        Ok(self.evaluate(q, v, q_prev)?)
    }

    /// Solves for the hand configuration and stores it as the next warm start.
    pub fn retarget(&self, state: &mut RetargetState, v: &HumanVectors) -> Result<JointConfig, RetargetError> {
        self.retarget_detailed(state, v).map(|(q, _)| q)
    }

    pub fn retarget_detailed(&self, state: &mut RetargetState, v: &HumanVectors) -> Result<(JointConfig, Minimum), RetargetError> {
        self.check_vectors(v)?;
        let mut q_prev = match &state.q_prev {
            Some(q) => q.values.clone(),
            None => self.model.mid_configuration(),
        };
        self.model.check_dimension(&q_prev)?;
        self.model.clamp_slice(&mut q_prev);
        let start = DVector::from_column_slice(&q_prev);
        let f = |x: &DVector<f64>| match self.evaluate(x.as_slice(), v, &q_prev) {
            Ok(r) => r,
            Err(_) => (f64::NAN, DVector::zeros(x.len())),
        };
        let minimum = minimize_box(f, &start, &self.lower, &self.upper, &self.config.solver).map_err(|e| match e {
            OptimError::NonFinite => RetargetError::SolverDiverged,
            OptimError::Dimension => RetargetError::Kinematics(KinematicsError::DimensionMismatch {
                expected: self.model.dof(),
                got: q_prev.len(),
            }),
        })?;
        let q = JointConfig::new(minimum.x.as_slice().to_vec());
        state.q_prev = Some(q.clone());
        Ok((q, minimum))
    }
}
