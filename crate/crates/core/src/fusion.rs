//! Multi-camera auto-calibration and confidence-based motion selection.
//!
//! The operator's hand serves as the calibration marker: during the first `N`
//! synchronized frames each camera's wrist orientations are aligned to the
//! reference camera's, and the mean hand-shape estimate becomes the reference
//! against which later detections are scored. Afterwards only relative wrist
//! motions are forwarded, taken from the most confident camera and expressed in
//! the reference camera's frame.

use std::collections::BTreeMap;

use nalgebra::{DVector, Matrix3, Rotation3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{orthonormalize, so3_log, RigidTransform};
use crate::hand::SHAPE_DIM;
use crate::wrist_pose::WristPose;

pub const DEFAULT_CALIBRATION_FRAMES: usize = 50;
/// Shape error assumed for detections that carry no shape estimate.
pub const MISSING_SHAPE_ERROR: f64 = 10.0;
pub const RANK_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("camera `{0}` is not registered")]
    UnknownCamera(String),
    #[error("camera `{0}` lacks rotational diversity for calibration")]
    CalibrationRankDeficient(String),
    #[error("calibration has not finished")]
    NotCalibrated,
    #[error("no camera supplied a usable pose pair")]
    NoValidCamera,
    #[error("motion at {got} µs is not newer than {last} µs")]
    StaleMotion { last: u64, got: u64 },
    #[error("invalid calibration setup: {0}")]
    InvalidSetup(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationPhase {
    Calibrating,
    Ready,
}

#[derive(Debug, Clone, Default)]
struct CameraSlot {
    rotations: Vec<Rotation3<f64>>,
    shapes: Vec<Vec<f64>>,
    relative_rotation: Option<Rotation3<f64>>,
}

#[derive(Debug, Clone)]
pub struct CalibrationState {
    reference_camera: String,
    frames_required: usize,
    cameras: BTreeMap<String, CameraSlot>,
    shape_reference: Option<DVector<f64>>,
    phase: CalibrationPhase,
}

impl CalibrationState {
    /// Starts calibration for `cameras`; the reference defaults to the smallest id.
    pub fn new<I, S>(cameras: I, frames_required: usize, reference: Option<&str>) -> Result<Self, FusionError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let cameras: BTreeMap<String, CameraSlot> =
            cameras.into_iter().map(|c| (c.into(), CameraSlot::default())).collect();
        if cameras.is_empty() {
            return Err(FusionError::InvalidSetup("no cameras".into()));
        }
        if frames_required == 0 {
            return Err(FusionError::InvalidSetup("N must be at least 1".into()));
        }
        let reference_camera = match reference {
            Some(r) if cameras.contains_key(r) => r.to_string(),
            Some(r) => return Err(FusionError::UnknownCamera(r.to_string())),
            None => cameras.keys().next().expect("non-empty").clone(),
        };
        Ok(Self {
            reference_camera,
            frames_required,
            cameras,
            shape_reference: None,
            phase: CalibrationPhase::Calibrating,
        })
    }

    /// A state that is already calibrated, e.g. restored from a previous run.
    pub fn ready(
        reference: &str,
        relative_rotations: BTreeMap<String, Rotation3<f64>>,
        shape_reference: Vec<f64>,
    ) -> Result<Self, FusionError> {
        if !relative_rotations.contains_key(reference) {
            return Err(FusionError::UnknownCamera(reference.to_string()));
        }
        if shape_reference.len() != SHAPE_DIM || shape_reference.iter().any(|v| !v.is_finite()) {
            return Err(FusionError::InvalidSetup("shape reference must be 10 finite values".into()));
        }
        let cameras = relative_rotations
            .into_iter()
            .map(|(id, r)| {
                let slot = CameraSlot {
                    relative_rotation: Some(r),
                    ..CameraSlot::default()
                };
                (id, slot)
            })
            .collect();
        Ok(Self {
            reference_camera: reference.to_string(),
            frames_required: DEFAULT_CALIBRATION_FRAMES,
            cameras,
            shape_reference: Some(DVector::from_vec(shape_reference)),
            phase: CalibrationPhase::Ready,
        })
    }

    pub fn phase(&self) -> CalibrationPhase {
        self.phase
    }

    pub fn reference_camera(&self) -> &str {
        &self.reference_camera
    }

    pub fn frames_required(&self) -> usize {
        self.frames_required
    }

    pub fn cameras(&self) -> impl Iterator<Item = &str> {
        self.cameras.keys().map(String::as_str)
    }

    pub fn has_camera(&self, id: &str) -> bool {
        self.cameras.contains_key(id)
    }

    pub fn buffered(&self, id: &str) -> usize {
        self.cameras.get(id).map_or(0, |s| s.rotations.len())
    }

    pub fn relative_rotation(&self, id: &str) -> Option<Rotation3<f64>> {
        self.cameras.get(id).and_then(|s| s.relative_rotation)
    }

    pub fn shape_reference(&self) -> Option<&[f64]> {
        self.shape_reference.as_ref().map(|v| v.as_slice())
    }

    /// Buffers one calibration frame; calibrates once every camera holds `N` frames.
    ///
    /// Frames beyond `N` for a camera that is already full are ignored. On a
    /// rank failure the buffers are cleared so calibration starts over.
    pub fn accumulate_calibration(
        &mut self,
        camera_id: &str,
        pose: &WristPose,
        shape: Option<&[f64]>,
    ) -> Result<CalibrationPhase, FusionError> {
        let n = self.frames_required;
        let slot = self
            .cameras
            .get_mut(camera_id)
            .ok_or_else(|| FusionError::UnknownCamera(camera_id.to_string()))?;
        if self.phase == CalibrationPhase::Ready {
            return Ok(self.phase);
        }
        if slot.rotations.len() < n {
            slot.rotations.push(pose.pose.rotation);
            if let Some(s) = shape.filter(|s| s.len() == SHAPE_DIM && s.iter().all(|v| v.is_finite())) {
                slot.shapes.push(s.to_vec());
            }
        }
        if self.cameras.values().all(|s| s.rotations.len() >= n) {
            if let Err(e) = self.finish_calibration() {
                for slot in self.cameras.values_mut() {
                    slot.rotations.clear();
                    slot.shapes.clear();
                }
                return Err(e);
            }
        }
        Ok(self.phase)
    }

    fn finish_calibration(&mut self) -> Result<(), FusionError> {
        let reference = self.cameras[&self.reference_camera].rotations.clone();
        let mut solved = BTreeMap::new();
        for (id, slot) in &self.cameras {
            if *id == self.reference_camera {
                solved.insert(id.clone(), Rotation3::identity());
                continue;
            }
            let mut procrustes = Matrix3::zeros();
            let mut motion_cov = Matrix3::zeros();
            for (r_ref, r_cam) in reference.iter().zip(&slot.rotations) {
                procrustes += r_ref.matrix() * r_cam.matrix().transpose();
                let a = so3_log(&(r_ref * reference[0].inverse()));
                let b = so3_log(&(r_cam * slot.rotations[0].inverse()));
                motion_cov += a * b.transpose();
            }
            let sv = motion_cov.singular_values();
            let mut sorted = [sv[0], sv[1], sv[2]];
            sorted.sort_by(|a, b| b.total_cmp(a));
            if sorted[1] < RANK_TOLERANCE {
                return Err(FusionError::CalibrationRankDeficient(id.clone()));
            }
            solved.insert(id.clone(), orthonormalize(&procrustes));
        }

        let shapes: Vec<&Vec<f64>> = self.cameras.values().flat_map(|s| s.shapes.iter()).collect();
        let mut mean = DVector::zeros(SHAPE_DIM);
        for s in &shapes {
            mean += DVector::from_column_slice(s);
        }
        if !shapes.is_empty() {
            mean /= shapes.len() as f64;
        }

        for (id, r) in solved {
            let slot = self.cameras.get_mut(&id).expect("known camera");
            slot.relative_rotation = Some(r);
            slot.rotations.clear();
            slot.shapes.clear();
        }
        self.shape_reference = Some(mean);
        self.phase = CalibrationPhase::Ready;
        Ok(())
    }

    /// `exp(−‖shape − reference‖₂)`; detections without a shape estimate get `exp(−10)`.
    pub fn confidence(&self, shape: Option<&[f64]>) -> Result<f64, FusionError> {
        let reference = self.shape_reference.as_ref().ok_or(FusionError::NotCalibrated)?;
        match shape {
            Some(s) if s.len() == SHAPE_DIM && s.iter().all(|v| v.is_finite()) => {
                let err = (DVector::from_column_slice(s) - reference).norm();
                Ok((-err).exp())
            }
            _ => Ok((-MISSING_SHAPE_ERROR).exp()),
        }
    }

    /// Selects the most confident camera and returns its motion in the reference frame.
    ///
    /// A motion spans two frames and scores the lower of their two confidences.
    pub fn fuse(&self, observations: &[CameraObservation]) -> Result<FusedMotion, FusionError> {
        if self.phase != CalibrationPhase::Ready {
            return Err(FusionError::NotCalibrated);
        }
        let mut sorted: Vec<&CameraObservation> = observations.iter().collect();
        sorted.sort_by(|a, b| a.camera_id.cmp(&b.camera_id));

        let mut best: Option<(f64, &CameraObservation, &WristPose, &WristPose)> = None;
        for obs in sorted {
            if !self.cameras.contains_key(&obs.camera_id) {
                return Err(FusionError::UnknownCamera(obs.camera_id.clone()));
            }
            let (Some(current), Some(previous)) = (&obs.current, &obs.previous) else {
                continue;
            };
            let c = self.confidence(obs.shape.as_deref())?.min(self.confidence(obs.previous_shape.as_deref())?);
            if best.as_ref().is_none_or(|(bc, ..)| c > *bc) {
                best = Some((c, obs, current, previous));
            }
        }
        let (confidence, obs, current, previous) = best.ok_or(FusionError::NoValidCamera)?;
        let r_rel = self.relative_rotation(&obs.camera_id).ok_or(FusionError::NotCalibrated)?;
        let delta = current.pose * previous.pose.inverse();
        Ok(FusedMotion {
            timestamp_us: current.timestamp_us,
            delta_pose: conjugate(&delta, &r_rel),
            chosen_camera: obs.camera_id.clone(),
            confidence,
        })
    }
}

/// Re-expresses a motion given in one frame in a frame rotated by `r`.
pub fn conjugate(delta: &RigidTransform, r: &Rotation3<f64>) -> RigidTransform {
    RigidTransform::new(r * delta.rotation * r.inverse(), r * delta.translation)
}

/// Consecutive poses (and the current shape estimate) reported by one camera.
#[derive(Debug, Clone)]
pub struct CameraObservation {
    pub camera_id: String,
    pub current: Option<WristPose>,
    pub previous: Option<WristPose>,
    pub shape: Option<Vec<f64>>,
    pub previous_shape: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedMotion {
    pub timestamp_us: u64,
    pub delta_pose: RigidTransform,
    pub chosen_camera: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegratedWristState {
    pub pose: RigidTransform,
    pub last_timestamp_us: u64,
}

impl IntegratedWristState {
    pub fn new(pose: RigidTransform, timestamp_us: u64) -> Self {
        Self {
            pose,
            last_timestamp_us: timestamp_us,
        }
    }

    pub fn integrate(&mut self, motion: &FusedMotion) -> Result<(), FusionError> {
        if motion.timestamp_us <= self.last_timestamp_us {
            return Err(FusionError::StaleMotion {
                last: self.last_timestamp_us,
                got: motion.timestamp_us,
            });
        }
        self.pose = (motion.delta_pose * self.pose).orthonormalized();
        self.last_timestamp_us = motion.timestamp_us;
        Ok(())
    }
}
