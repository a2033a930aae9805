//! Robot descriptions, forward kinematics and Jacobians.
//!
//! A [`RobotModel`] is parsed from a URDF subset and is immutable afterwards,
//! so one model can be shared by every session that drives the same robot.
//! Configuration vectors follow [`RobotModel::actuated_joint_names`]: every
//! revolute or prismatic joint in document order, minus mimic joints, which
//! are folded into the column of the joint they follow.

mod urdf;

use std::collections::{HashMap, HashSet};

use nalgebra::{DMatrix, Matrix3xX, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::RigidTransform;

pub use urdf::{CONTINUOUS_DEFAULT_VELOCITY, CONTINUOUS_RANGE};

const AXIS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid kinematic tree: {0}")]
    Kinematic(String),
    #[error("unknown link `{0}`")]
    UnknownLink(String),
    #[error("configuration has {got} values, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointKind {
    Revolute,
    Prismatic,
    Fixed,
}

/// How a joint's scalar position is obtained from the configuration vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JointDrive {
    Fixed,
    Actuated(usize),
    Mimic {
        source: usize,
        multiplier: f64,
        offset: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLimits {
    pub lower: f64,
    pub upper: f64,
    pub velocity: f64,
}

#[derive(Debug, Clone)]
pub struct Joint {
    pub name: String,
    pub kind: JointKind,
    pub parent: usize,
    pub child: usize,
    pub origin: RigidTransform,
    pub axis: Unit<Vector3<f64>>,
    pub limits: JointLimits,
    pub drive: JointDrive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionSphere {
    pub center: Vector3<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone)]
pub struct Link {
    pub name: String,
    pub visual_mesh: Option<String>,
    pub spheres: Vec<CollisionSphere>,
}

/// Joint positions for one robot (or one part of it), plus a timestamp in µs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct JointConfig {
    pub values: Vec<f64>,
    #[serde(default)]
    pub timestamp_us: u64,
}

impl JointConfig {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            values,
            timestamp_us: 0,
        }
    }

    pub fn at(values: Vec<f64>, timestamp_us: u64) -> Self {
        Self {
            values,
            timestamp_us,
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub(crate) struct RawLink {
    name: String,
    visual_mesh: Option<String>,
}

pub(crate) struct RawMimic {
    joint: String,
    multiplier: f64,
    offset: f64,
}

pub(crate) struct RawJoint {
    name: String,
    kind: JointKind,
    parent: String,
    child: String,
    origin: RigidTransform,
    axis: Vector3<f64>,
    lower: f64,
    upper: f64,
    velocity: f64,
    mimic: Option<RawMimic>,
}

#[derive(Debug, Clone)]
pub struct RobotModel {
    name: String,
    links: Vec<Link>,
    joints: Vec<Joint>,
    /// Joint indices in configuration order.
    actuated: Vec<usize>,
    root: usize,
    parent_joint: Vec<Option<usize>>,
    /// Links ordered so that every parent precedes its children.
    topo_order: Vec<usize>,
    /// Joint indices from the root down to each link.
    chains: Vec<Vec<usize>>,
    link_lookup: HashMap<String, usize>,
}

/// Parses a URDF document and, when given, the sphere sidecar JSON.
pub fn load_robot_description(
    urdf_text: &str,
    spheres_json: Option<&str>,
) -> Result<RobotModel, KinematicsError> {
    let parsed = urdf::parse(urdf_text)?;
    let spheres = spheres_json.map(urdf::parse_spheres).transpose()?;
    RobotModel::build(parsed.name, parsed.links, parsed.joints, spheres)
}

impl RobotModel {
    fn build(
        name: String,
        raw_links: Vec<RawLink>,
        raw_joints: Vec<RawJoint>,
        spheres: Option<HashMap<String, Vec<CollisionSphere>>>,
    ) -> Result<Self, KinematicsError> {
        let kin = |m: String| KinematicsError::Kinematic(m);

        let mut link_lookup = HashMap::new();
        let mut links = Vec::with_capacity(raw_links.len());
        for raw in raw_links {
            if link_lookup.insert(raw.name.clone(), links.len()).is_some() {
                return Err(kin(format!("duplicate link `{}`", raw.name)));
            }
            links.push(Link {
                name: raw.name,
                visual_mesh: raw.visual_mesh,
                spheres: Vec::new(),
            });
        }
        if links.is_empty() {
            return Err(kin("robot has no links".into()));
        }

        if let Some(spheres) = spheres {
            for (link_name, list) in spheres {
                let idx = *link_lookup.get(&link_name).ok_or_else(|| {
                    kin(format!("sphere sidecar references unknown link `{link_name}`"))
                })?;
                for s in &list {
                    if !(s.radius > 0.0) || !s.center.iter().all(|v| v.is_finite()) {
                        return Err(kin(format!(
                            "collision sphere on `{link_name}` must have finite center and radius > 0"
                        )));
                    }
                }
                links[idx].spheres = list;
            }
        }

        let mut joint_lookup = HashMap::new();
        for (i, j) in raw_joints.iter().enumerate() {
            if joint_lookup.insert(j.name.clone(), i).is_some() {
                return Err(kin(format!("duplicate joint `{}`", j.name)));
            }
        }

        // Actuated ordering: non-fixed, non-mimic joints in document order.
        let mut actuated = Vec::new();
        let mut config_index = vec![None; raw_joints.len()];
        for (i, j) in raw_joints.iter().enumerate() {
            if j.kind != JointKind::Fixed && j.mimic.is_none() {
                config_index[i] = Some(actuated.len());
                actuated.push(i);
            }
        }

        let mut parent_joint = vec![None; links.len()];
        let mut joints = Vec::with_capacity(raw_joints.len());
        for (i, raw) in raw_joints.iter().enumerate() {
            let parent = *link_lookup
                .get(&raw.parent)
                .ok_or_else(|| kin(format!("joint `{}` parent `{}` is not a link", raw.name, raw.parent)))?;
            let child = *link_lookup
                .get(&raw.child)
                .ok_or_else(|| kin(format!("joint `{}` child `{}` is not a link", raw.name, raw.child)))?;
            if parent_joint[child].replace(i).is_some() {
                return Err(kin(format!("link `{}` has more than one parent joint", raw.child)));
            }

            let axis_norm = raw.axis.norm();
            if raw.kind != JointKind::Fixed && (axis_norm - 1.0).abs() > AXIS_TOLERANCE {
                return Err(kin(format!(
                    "joint `{}` axis has norm {axis_norm}, expected a unit vector",
                    raw.name
                )));
            }
            let axis = if axis_norm > 0.0 {
                Unit::new_normalize(raw.axis)
            } else {
                Vector3::x_axis()
            };

            if raw.kind != JointKind::Fixed {
                if raw.lower > raw.upper {
                    return Err(kin(format!("joint `{}` has lower limit above upper limit", raw.name)));
                }
                if raw.mimic.is_none() && !(raw.velocity > 0.0) {
                    return Err(kin(format!("joint `{}` needs a positive velocity limit", raw.name)));
                }
            }

            let drive = match (&raw.mimic, raw.kind) {
                (_, JointKind::Fixed) => JointDrive::Fixed,
                (None, _) => JointDrive::Actuated(config_index[i].expect("actuated index")),
                (Some(_), _) => resolve_mimic(i, &raw_joints, &joint_lookup, &config_index)?,
            };

            joints.push(Joint {
                name: raw.name.clone(),
                kind: raw.kind,
                parent,
                child,
                origin: raw.origin,
                axis,
                limits: JointLimits {
                    lower: raw.lower,
                    upper: raw.upper,
                    velocity: raw.velocity,
                },
                drive,
            });
        }

        let roots: Vec<usize> = (0..links.len()).filter(|&l| parent_joint[l].is_none()).collect();
        let root = match roots.as_slice() {
            [single] => *single,
            [] => return Err(kin("no root link: the joint graph contains a cycle".into())),
            many => {
                let names: Vec<&str> = many.iter().map(|&l| links[l].name.as_str()).collect();
                return Err(kin(format!("multiple root links: {}", names.join(", "))));
            }
        };

        let mut children: Vec<Vec<usize>> = vec![Vec::new(); links.len()];
        for (ji, j) in joints.iter().enumerate() {
            children[j.parent].push(ji);
        }
        let mut topo_order = Vec::with_capacity(links.len());
        let mut chains = vec![Vec::new(); links.len()];
        let mut stack = vec![root];
        while let Some(l) = stack.pop() {
            topo_order.push(l);
            for &ji in children[l].iter().rev() {
                let c = joints[ji].child;
                let mut chain = chains[l].clone();
                chain.push(ji);
                chains[c] = chain;
                stack.push(c);
            }
        }
        if topo_order.len() != links.len() {
            return Err(kin("joint graph contains a cycle detached from the root".into()));
        }

        Ok(Self {
            name,
            links,
            joints,
            actuated,
            root,
            parent_joint,
            topo_order,
            chains,
            link_lookup,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn root_link(&self) -> &str {
        &self.links[self.root].name
    }

    /// Number of configuration variables.
    pub fn dof(&self) -> usize {
        self.actuated.len()
    }

    pub fn actuated_joints(&self) -> impl Iterator<Item = &Joint> {
        self.actuated.iter().map(|&j| &self.joints[j])
    }

    pub fn actuated_joint_names(&self) -> Vec<String> {
        self.actuated_joints().map(|j| j.name.clone()).collect()
    }

    pub fn lower_limits(&self) -> Vec<f64> {
        self.actuated_joints().map(|j| j.limits.lower).collect()
    }

    pub fn upper_limits(&self) -> Vec<f64> {
        self.actuated_joints().map(|j| j.limits.upper).collect()
    }

    pub fn velocity_limits(&self) -> Vec<f64> {
        self.actuated_joints().map(|j| j.limits.velocity).collect()
    }

    /// `(q_l + q_u) / 2` for every actuated joint.
    pub fn mid_configuration(&self) -> Vec<f64> {
        self.actuated_joints()
            .map(|j| 0.5 * (j.limits.lower + j.limits.upper))
            .collect()
    }

    pub fn link_index(&self, name: &str) -> Result<usize, KinematicsError> {
        self.link_lookup
            .get(name)
            .copied()
            .ok_or_else(|| KinematicsError::UnknownLink(name.to_string()))
    }

    pub fn sphere_count(&self) -> usize {
        self.links.iter().map(|l| l.spheres.len()).sum()
    }

    /// True when the two links are joined directly by a joint.
    pub fn adjacent(&self, a: usize, b: usize) -> bool {
        let joined = |child: usize, parent: usize| {
            self.parent_joint[child].is_some_and(|j| self.joints[j].parent == parent)
        };
        joined(a, b) || joined(b, a)
    }

    pub fn check_dimension(&self, q: &[f64]) -> Result<(), KinematicsError> {
        if q.len() != self.dof() {
            return Err(KinematicsError::DimensionMismatch {
                expected: self.dof(),
                got: q.len(),
            });
        }
        Ok(())
    }

    /// Scalar position of every joint (fixed joints read 0, mimics resolved).
    fn joint_positions(&self, q: &[f64]) -> Vec<f64> {
        self.joints
            .iter()
            .map(|j| match j.drive {
                JointDrive::Fixed => 0.0,
                JointDrive::Actuated(i) => q[i],
                JointDrive::Mimic {
                    source,
                    multiplier,
                    offset,
                } => multiplier * q[source] + offset,
            })
            .collect()
    }

    fn joint_motion(joint: &Joint, position: f64) -> RigidTransform {
        match joint.kind {
            JointKind::Fixed => RigidTransform::identity(),
            JointKind::Revolute => {
                RigidTransform::from_rotation(Rotation3::from_axis_angle(&joint.axis, position))
            }
            JointKind::Prismatic => RigidTransform::from_translation(joint.axis.into_inner() * position),
        }
    }

    /// Base-frame pose of every link.
    pub fn link_poses(&self, q: &[f64]) -> Result<Vec<RigidTransform>, KinematicsError> {
        self.check_dimension(q)?;
        let positions = self.joint_positions(q);
        let mut poses = vec![RigidTransform::identity(); self.links.len()];
        for &l in &self.topo_order[1..] {
            let ji = self.parent_joint[l].expect("non-root link has a parent joint");
            let joint = &self.joints[ji];
            poses[l] = poses[joint.parent] * joint.origin * Self::joint_motion(joint, positions[ji]);
        }
        Ok(poses)
    }

    pub fn forward_kinematics(&self, q: &[f64], link: &str) -> Result<RigidTransform, KinematicsError> {
        let idx = self.link_index(link)?;
        self.check_dimension(q)?;
        let positions = self.joint_positions(q);
        let mut pose = RigidTransform::identity();
        for &ji in &self.chains[idx] {
            let joint = &self.joints[ji];
            pose = pose * joint.origin * Self::joint_motion(joint, positions[ji]);
        }
        Ok(pose)
    }

    /// `p(to_link) − p(from_link)` in the base frame.
    pub fn keypoint_vector(&self, q: &[f64], from_link: &str, to_link: &str) -> Result<Vector3<f64>, KinematicsError> {
        let from = self.forward_kinematics(q, from_link)?;
        let to = self.forward_kinematics(q, to_link)?;
        Ok(to.translation - from.translation)
    }

    /// Geometric Jacobian of the link origin: rows 0..3 linear, rows 3..6 angular.
    pub fn jacobian(&self, q: &[f64], link: &str) -> Result<DMatrix<f64>, KinematicsError> {
        let idx = self.link_index(link)?;
        let poses = self.link_poses(q)?;
        let point = poses[idx].translation;
        let mut jac = DMatrix::zeros(6, self.dof());
        self.accumulate_point_jacobian(&poses, idx, &point, |col, lin, ang| {
            for r in 0..3 {
                jac[(r, col)] += lin[r];
                jac[(r + 3, col)] += ang[r];
            }
        });
        Ok(jac)
    }

    /// Linear Jacobian (3×n) of a point rigidly attached to `link`, given in the base frame.
    pub fn point_jacobian(&self, poses: &[RigidTransform], link: usize, point: &Vector3<f64>) -> Matrix3xX<f64> {
        let mut jac = Matrix3xX::zeros(self.dof());
        self.accumulate_point_jacobian(poses, link, point, |col, lin, _| {
            for r in 0..3 {
                jac[(r, col)] += lin[r];
            }
        });
        jac
    }

    fn accumulate_point_jacobian(
        &self,
        poses: &[RigidTransform],
        link: usize,
        point: &Vector3<f64>,
        mut add: impl FnMut(usize, Vector3<f64>, Vector3<f64>),
    ) {
        for &ji in &self.chains[link] {
            let joint = &self.joints[ji];
            let (col, scale) = match joint.drive {
                JointDrive::Fixed => continue,
                JointDrive::Actuated(i) => (i, 1.0),
                JointDrive::Mimic { source, multiplier, .. } => (source, multiplier),
            };
            // Joint frame: parent pose composed with the static origin.
            let frame = poses[joint.parent] * joint.origin;
            let axis = frame.rotation * joint.axis.into_inner();
            let (lin, ang) = match joint.kind {
                JointKind::Revolute => (axis.cross(&(point - frame.translation)), axis),
                JointKind::Prismatic => (axis, Vector3::zeros()),
                JointKind::Fixed => unreachable!(),
            };
            add(col, lin * scale, ang * scale);
        }
    }

    pub fn clamp_to_limits(&self, q: &JointConfig) -> Result<JointConfig, KinematicsError> {
        self.check_dimension(&q.values)?;
        let values = q
            .values
            .iter()
            .zip(self.actuated_joints())
            .map(|(v, j)| v.clamp(j.limits.lower, j.limits.upper))
            .collect();
        Ok(JointConfig::at(values, q.timestamp_us))
    }

    pub fn clamp_slice(&self, q: &mut [f64]) {
        for (v, j) in q.iter_mut().zip(self.actuated_joints()) {
            *v = v.clamp(j.limits.lower, j.limits.upper);
        }
    }

    pub fn within_limits(&self, q: &[f64]) -> bool {
        q.len() == self.dof()
            && q
                .iter()
                .zip(self.actuated_joints())
                .all(|(v, j)| v.is_finite() && *v >= j.limits.lower && *v <= j.limits.upper)
    }

    /// Links strictly below `link` (excluding `link` itself).
    pub fn descendants(&self, link: &str) -> Result<HashSet<usize>, KinematicsError> {
        let idx = self.link_index(link)?;
        Ok((0..self.links.len())
            .filter(|&l| l != idx && self.chains[l].iter().any(|&j| self.joints[j].parent == idx))
            .collect())
    }

    /// The subtree rooted at `link`, with `link` as the new base frame.
    pub fn subtree(&self, link: &str) -> Result<RobotModel, KinematicsError> {
        let idx = self.link_index(link)?;
        let mut keep = self.descendants(link)?;
        keep.insert(idx);
        self.restricted(&keep)
    }

    /// Everything except the links strictly below `link`.
    pub fn without_subtree(&self, link: &str) -> Result<RobotModel, KinematicsError> {
        let drop = self.descendants(link)?;
        let keep: HashSet<usize> = (0..self.links.len()).filter(|l| !drop.contains(l)).collect();
        self.restricted(&keep)
    }

    fn restricted(&self, keep: &HashSet<usize>) -> Result<RobotModel, KinematicsError> {
        let raw_links = self
            .links
            .iter()
            .enumerate()
            .filter(|(i, _)| keep.contains(i))
            .map(|(_, l)| RawLink {
                name: l.name.clone(),
                visual_mesh: l.visual_mesh.clone(),
            })
            .collect();
        let mut raw_joints = Vec::new();
        for j in &self.joints {
            if !(keep.contains(&j.parent) && keep.contains(&j.child)) {
                continue;
            }
            let mimic = match j.drive {
                JointDrive::Mimic {
                    source,
                    multiplier,
                    offset,
                } => {
                    let src = &self.joints[self.actuated[source]];
                    if !(keep.contains(&src.parent) && keep.contains(&src.child)) {
                        return Err(KinematicsError::Kinematic(format!(
                            "mimic joint `{}` would be split from its source `{}`",
                            j.name, src.name
                        )));
                    }
                    Some(RawMimic {
                        joint: src.name.clone(),
                        multiplier,
                        offset,
                    })
                }
                _ => None,
            };
            raw_joints.push(RawJoint {
                name: j.name.clone(),
                kind: j.kind,
                parent: self.links[j.parent].name.clone(),
                child: self.links[j.child].name.clone(),
                origin: j.origin,
                axis: j.axis.into_inner(),
                lower: j.limits.lower,
                upper: j.limits.upper,
                velocity: j.limits.velocity,
                mimic,
            });
        }
        let spheres = self
            .links
            .iter()
            .enumerate()
            .filter(|(i, l)| keep.contains(i) && !l.spheres.is_empty())
            .map(|(_, l)| (l.name.clone(), l.spheres.clone()))
            .collect();
        RobotModel::build(self.name.clone(), raw_links, raw_joints, Some(spheres))
    }
}

fn resolve_mimic(
    joint: usize,
    raw: &[RawJoint],
    lookup: &HashMap<String, usize>,
    config_index: &[Option<usize>],
) -> Result<JointDrive, KinematicsError> {
    let mut multiplier = 1.0;
    let mut offset = 0.0;
    let mut current = joint;
    let mut seen = HashSet::new();
    loop {
        if !seen.insert(current) {
            return Err(KinematicsError::Kinematic(format!(
                "mimic joints form a cycle through `{}`",
                raw[joint].name
            )));
        }
        let Some(m) = &raw[current].mimic else {
            break;
        };
        let next = *lookup.get(&m.joint).ok_or_else(|| {
            KinematicsError::Kinematic(format!(
                "joint `{}` mimics unknown joint `{}`",
                raw[current].name, m.joint
            ))
        })?;
        // value(current) = m·value(next) + o, with value(next) itself possibly a mimic.
        offset += multiplier * m.offset;
        multiplier *= m.multiplier;
        current = next;
    }
    match config_index[current] {
        Some(source) => Ok(JointDrive::Mimic {
            source,
            multiplier,
            offset,
        }),
        None => Err(KinematicsError::Kinematic(format!(
            "joint `{}` mimics a fixed joint",
            raw[joint].name
        ))),
    }
}

#[cfg(test)]
mod tests;
