//! 6D wrist pose in the camera frame from a single [`HandFrame`].
//!
//! With depth, the metric local keypoints are aligned to back-projected camera
//! points in closed form and then refined on the 2D reprojection error of all
//! 21 keypoints. Without depth, the wrist position comes from the
//! weak-perspective scale and the orientation from a palm triad lifted along
//! the pixel rays.

use nalgebra::{Matrix2x3, Matrix3, Matrix6, Rotation3, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{orthonormalize, skew, so3_exp, RigidTransform};
use crate::hand::{
    CameraError, CameraIntrinsics, FrameError, HandFrame, INDEX_MCP, MIDDLE_MCP, NUM_KEYPOINTS,
    WRIST,
};

pub const MIN_CORRESPONDENCES: usize = 4;
pub const MAX_REFINE_ITERATIONS: usize = 10;
const COLLINEAR_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WristPoseError {
    #[error(transparent)]
    InvalidFrame(#[from] FrameError),
    #[error("invalid depth {0}")]
    InvalidDepth(f64),
    #[error("{0} keypoints with valid depth, at least {MIN_CORRESPONDENCES} required")]
    InsufficientCorrespondences(usize),
    #[error("valid keypoints are collinear")]
    DegenerateConfiguration,
    #[error("wrist, index MCP and middle MCP are collinear")]
    DegenerateHand,
    #[error("frame carries no weak-perspective scale")]
    MissingScale,
    #[error("weak-perspective scale must be positive, got {0}")]
    InvalidScale(f64),
    #[error("estimated wrist is not in front of the camera")]
    BehindCamera,
}

impl From<CameraError> for WristPoseError {
    fn from(e: CameraError) -> Self {
        match e {
            CameraError::InvalidDepth(d) => WristPoseError::InvalidDepth(d),
            _ => WristPoseError::BehindCamera,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseSource {
    Rgbd,
    RgbOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WristPose {
    pub camera_id: String,
    pub timestamp_us: u64,
    /// Wrist frame expressed in the camera frame.
    pub pose: RigidTransform,
    pub source: PoseSource,
    /// Sum of squared pixel residuals before and after each refinement iteration.
    #[serde(default)]
    pub residual_trace: Vec<f64>,
}

pub fn backproject(
    pixel: &Vector2<f64>,
    depth: f64,
    intr: &CameraIntrinsics,
) -> Result<Vector3<f64>, WristPoseError> {
    Ok(intr.backproject(pixel, depth)?)
}

/// Least-squares rigid alignment `q ≈ R·p + t` (no scale).
pub fn align_point_sets(local: &[Vector3<f64>], camera: &[Vector3<f64>]) -> RigidTransform {
    let n = local.len() as f64;
    let pc = local.iter().sum::<Vector3<f64>>() / n;
    let qc = camera.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (p, q) in local.iter().zip(camera) {
        h += (p - pc) * (q - qc).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd u");
    let v = svd.v_t.expect("svd v_t").transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let rotation = Rotation3::from_matrix_unchecked(r);
    RigidTransform::new(rotation, qc - rotation * pc)
}

fn max_line_distance(points: &[Vector3<f64>]) -> f64 {
    let n = points.len() as f64;
    let c = points.iter().sum::<Vector3<f64>>() / n;
    let mut scatter = Matrix3::zeros();
    for p in points {
        scatter += (p - c) * (p - c).transpose();
    }
    let eig = scatter.symmetric_eigen();
    let k = eig.eigenvalues.imax();
    let dir = eig.eigenvectors.column(k).into_owned();
    points
        .iter()
        .map(|p| {
            let d = p - c;
            (d - dir * d.dot(&dir)).norm()
        })
        .fold(0.0, f64::max)
}

fn reprojection_cost(pose: &RigidTransform, local: &[Vector3<f64>], pixels: &[Vector2<f64>], intr: &CameraIntrinsics) -> f64 {
    let mut cost = 0.0;
    for (p, uv) in local.iter().zip(pixels) {
        let x = pose.transform_point(p);
        if x.z <= 0.0 {
            return f64::INFINITY;
        }
        let proj = Vector2::new(intr.fx * x.x / x.z + intr.cx, intr.fy * x.y / x.z + intr.cy);
        cost += (proj - uv).norm_squared();
    }
    cost
}

/// Damped Gauss-Newton on the pixel reprojection error; only cost-decreasing steps are taken.
fn refine_reprojection(
    initial: RigidTransform,
    local: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    intr: &CameraIntrinsics,
) -> (RigidTransform, Vec<f64>) {
    let mut pose = initial;
    let mut cost = reprojection_cost(&pose, local, pixels, intr);
    let mut trace = vec![cost];
    if !cost.is_finite() {
        return (pose, trace);
    }
    let mut lambda = 1e-3;
    for _ in 0..MAX_REFINE_ITERATIONS {
        let mut jtj = Matrix6::zeros();
        let mut jtr = Vector6::zeros();
        for (p, uv) in local.iter().zip(pixels) {
            let rp = pose.rotation * p;
            let x = rp + pose.translation;
            let iz = 1.0 / x.z;
            let proj = Vector2::new(intr.fx * x.x * iz + intr.cx, intr.fy * x.y * iz + intr.cy);
            let r = proj - uv;
            let dpi = Matrix2x3::new(
                intr.fx * iz,
                0.0,
                -intr.fx * x.x * iz * iz,
                0.0,
                intr.fy * iz,
                -intr.fy * x.y * iz * iz,
            );
            let mut jx = nalgebra::Matrix3x6::zeros();
            jx.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&rp)));
            jx.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
            let j = dpi * jx;
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        if jtr.norm() < 1e-12 {
            break;
        }
        let mut improved = false;
        for _ in 0..8 {
            let mut damped = jtj;
            for i in 0..6 {
                damped[(i, i)] += lambda * (1.0 + jtj[(i, i)]);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let omega = Vector3::new(step[0], step[1], step[2]);
            let dt = Vector3::new(step[3], step[4], step[5]);
            let rotation = orthonormalize((so3_exp(&omega) * pose.rotation).matrix());
            let candidate = RigidTransform::new(rotation, pose.translation + dt);
            let new_cost = reprojection_cost(&candidate, local, pixels, intr);
            if new_cost < cost {
                pose = candidate;
                cost = new_cost;
                lambda = (lambda * 0.3).max(1e-9);
                improved = true;
                break;
            }
            lambda *= 10.0;
        }
        trace.push(cost);
        if !improved {
            break;
        }
    }
    (pose, trace)
}

pub fn wrist_pose_rgbd(frame: &HandFrame, intr: &CameraIntrinsics) -> Result<WristPose, WristPoseError> {
    frame.validate()?;
    let valid = frame.valid_depth_indices();
    if valid.len() < MIN_CORRESPONDENCES {
        return Err(WristPoseError::InsufficientCorrespondences(valid.len()));
    }
    let depth = frame.depth.as_ref().expect("valid depths imply depth");
    let local = frame.metric_keypoints();
    let mut src = Vec::with_capacity(valid.len());
    let mut dst = Vec::with_capacity(valid.len());
    for &i in &valid {
        src.push(local[i]);
        dst.push(backproject(&frame.pixel(i), depth[i], intr)?);
    }
    if max_line_distance(&src) < COLLINEAR_TOLERANCE || max_line_distance(&dst) < COLLINEAR_TOLERANCE {
        return Err(WristPoseError::DegenerateConfiguration);
    }
    let initial = align_point_sets(&src, &dst);
    let pixels: Vec<Vector2<f64>> = (0..NUM_KEYPOINTS).map(|i| frame.pixel(i)).collect();
    let (pose, residual_trace) = refine_reprojection(initial, &local, &pixels, intr);
    if pose.translation.z <= 0.0 {
        return Err(WristPoseError::BehindCamera);
    }
    Ok(WristPose {
        camera_id: frame.camera_id.clone(),
        timestamp_us: frame.timestamp_us,
        pose,
        source: PoseSource::Rgbd,
        residual_trace,
    })
}

fn palm_basis(wrist: &Vector3<f64>, index_mcp: &Vector3<f64>, middle_mcp: &Vector3<f64>) -> Result<Matrix3<f64>, WristPoseError> {
    let to_middle = middle_mcp - wrist;
    let to_index = index_mcp - wrist;
    if to_middle.norm() < COLLINEAR_TOLERANCE {
        return Err(WristPoseError::DegenerateHand);
    }
    let x = to_middle.normalize();
    let z = x.cross(&to_index);
    if z.norm() < COLLINEAR_TOLERANCE {
        return Err(WristPoseError::DegenerateHand);
    }
    let z = z.normalize();
    let y = z.cross(&x);
    Ok(Matrix3::from_columns(&[x, y, z]))
}

/// Rotation taking the palm triad `(wrist, index MCP, middle MCP)` in the
/// local frame onto the same triad in the camera frame.
pub fn orientation_from_triads(local: [Vector3<f64>; 3], camera: [Vector3<f64>; 3]) -> Result<Rotation3<f64>, WristPoseError> {
    let bl = palm_basis(&local[0], &local[1], &local[2])?;
    let bc = palm_basis(&camera[0], &camera[1], &camera[2])?;
    Ok(Rotation3::from_matrix_unchecked(bc * bl.transpose()))
}

fn ray_sphere(dir: &Vector3<f64>, center: &Vector3<f64>, radius: f64) -> [f64; 2] {
    let b = dir.dot(center);
    let disc = b * b - (center.norm_squared() - radius * radius);
    let s = disc.max(0.0).sqrt();
    [b - s, b + s]
}

/// Wrist orientation from pixels and local keypoints, given the wrist position.
///
/// Each MCP is placed on its pixel ray at its local distance from the wrist;
/// of the two intersections per ray, the combination whose pose best
/// reprojects all 21 keypoints is kept.
pub fn wrist_orientation_rgb(
    frame: &HandFrame,
    intr: &CameraIntrinsics,
    wrist_position: &Vector3<f64>,
) -> Result<Rotation3<f64>, WristPoseError> {
    frame.validate()?;
    let local = frame.metric_keypoints();
    let local_triad = [local[WRIST], local[INDEX_MCP], local[MIDDLE_MCP]];
    palm_basis(&local_triad[0], &local_triad[1], &local_triad[2])?;

    let ray_index = intr.ray(&frame.pixel(INDEX_MCP)).normalize();
    let ray_middle = intr.ray(&frame.pixel(MIDDLE_MCP)).normalize();
    let r_index = (local[INDEX_MCP] - local[WRIST]).norm();
    let r_middle = (local[MIDDLE_MCP] - local[WRIST]).norm();
    let pixels: Vec<Vector2<f64>> = (0..NUM_KEYPOINTS).map(|i| frame.pixel(i)).collect();

    let mut best: Option<(f64, Rotation3<f64>)> = None;
    let mut last_err = WristPoseError::DegenerateHand;
    for li in ray_sphere(&ray_index, wrist_position, r_index) {
        for lm in ray_sphere(&ray_middle, wrist_position, r_middle) {
            let camera_triad = [*wrist_position, ray_index * li, ray_middle * lm];
            match orientation_from_triads(local_triad, camera_triad) {
                Ok(rotation) => {
                    let pose = RigidTransform::new(rotation, *wrist_position);
                    let cost = reprojection_cost(&pose, &local, &pixels, intr);
                    if best.as_ref().is_none_or(|(c, _)| cost < *c) {
                        best = Some((cost, rotation));
                    }
                }
                Err(e) => last_err = e,
            }
        }
    }
    best.map(|(_, r)| r).ok_or(last_err)
}

pub fn wrist_position_weak_perspective(frame: &HandFrame, intr: &CameraIntrinsics) -> Result<Vector3<f64>, WristPoseError> {
    let s = frame.weak_persp_scale.ok_or(WristPoseError::MissingScale)?;
    if !(s > 0.0) || !s.is_finite() {
        return Err(WristPoseError::InvalidScale(s));
    }
    backproject(&frame.pixel(WRIST), intr.fx / s, intr)
}

pub fn wrist_pose_rgb(frame: &HandFrame, intr: &CameraIntrinsics) -> Result<WristPose, WristPoseError> {
    frame.validate()?;
    let position = wrist_position_weak_perspective(frame, intr)?;
    let rotation = wrist_orientation_rgb(frame, intr, &position)?;
    Ok(WristPose {
        camera_id: frame.camera_id.clone(),
        timestamp_us: frame.timestamp_us,
        pose: RigidTransform::new(rotation, position),
        source: PoseSource::RgbOnly,
        residual_trace: Vec::new(),
    })
}

pub fn estimate_wrist_pose(frame: &HandFrame, intr: &CameraIntrinsics) -> Result<WristPose, WristPoseError> {
    frame.validate()?;
    if frame.valid_depth_indices().len() >= MIN_CORRESPONDENCES {
        wrist_pose_rgbd(frame, intr)
    } else {
        wrist_pose_rgb(frame, intr)
    }
}
