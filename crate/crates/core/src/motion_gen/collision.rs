//! Sphere-based self-collision queries.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::MotionError;
use crate::geometry::RigidTransform;
use crate::kinematics::{KinematicsError, RobotModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpherePair {
    pub link_a: usize,
    pub sphere_a: usize,
    pub link_b: usize,
    pub sphere_b: usize,
}

/// All sphere pairs on non-adjacent links, in a fixed order.
#[derive(Debug, Clone)]
pub struct CollisionModel {
    pairs: Vec<SpherePair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionReport {
    /// Smallest surface distance; negative when spheres overlap.
    pub distance: f64,
    pub links: (String, String),
}

/// A sphere pair with its current geometry, used for repulsion.
#[derive(Debug, Clone, Copy)]
pub struct PairGeometry {
    pub pair: SpherePair,
    pub center_a: Vector3<f64>,
    pub center_b: Vector3<f64>,
    pub distance: f64,
}

impl CollisionModel {
    pub fn new(model: &RobotModel) -> Result<Self, MotionError> {
        let links = model.links();
        let mut pairs = Vec::new();
        for a in 0..links.len() {
            for b in (a + 1)..links.len() {
                if model.adjacent(a, b) {
                    continue;
                }
                for sa in 0..links[a].spheres.len() {
                    for sb in 0..links[b].spheres.len() {
                        pairs.push(SpherePair {
                            link_a: a,
                            sphere_a: sa,
                            link_b: b,
                            sphere_b: sb,
                        });
                    }
                }
            }
        }
        if pairs.is_empty() {
            return Err(MotionError::NoCollisionModel);
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[SpherePair] {
        &self.pairs
    }

    fn geometry(&self, model: &RobotModel, poses: &[RigidTransform], pair: &SpherePair) -> PairGeometry {
        let links = model.links();
        let sa = &links[pair.link_a].spheres[pair.sphere_a];
        let sb = &links[pair.link_b].spheres[pair.sphere_b];
        let center_a = poses[pair.link_a].transform_point(&sa.center);
        let center_b = poses[pair.link_b].transform_point(&sb.center);
        PairGeometry {
            pair: *pair,
            center_a,
            center_b,
            distance: (center_a - center_b).norm() - sa.radius - sb.radius,
        }
    }

    /// Minimum distance and the index of the pair attaining it.
    pub fn min_distance(&self, model: &RobotModel, poses: &[RigidTransform]) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for (i, pair) in self.pairs.iter().enumerate() {
            let d = self.geometry(model, poses, pair).distance;
            if d < best.0 {
                best = (d, i);
            }
        }
        best
    }

    /// Pairs closer than `margin`.
    pub fn within(&self, model: &RobotModel, poses: &[RigidTransform], margin: f64) -> Vec<PairGeometry> {
        self.pairs
            .iter()
            .map(|p| self.geometry(model, poses, p))
            .filter(|g| g.distance < margin)
            .collect()
    }

    pub fn report(&self, model: &RobotModel, q: &[f64]) -> Result<CollisionReport, KinematicsError> {
        let poses = model.link_poses(q)?;
        let (distance, idx) = self.min_distance(model, &poses);
        let pair = &self.pairs[idx];
        Ok(CollisionReport {
            distance,
            links: (model.links()[pair.link_a].name.clone(), model.links()[pair.link_b].name.clone()),
        })
    }
}

pub fn self_collision_distance(model: &RobotModel, q: &[f64]) -> Result<CollisionReport, MotionError> {
    let collision = CollisionModel::new(model)?;
    Ok(collision.report(model, q)?)
}
