//! Per-camera hand detections and pinhole camera geometry.
//!
//! Keypoints follow the common 21-landmark hand layout. The local wrist frame
//! used throughout has `x` pointing from the wrist toward the middle finger,
//! `y` toward the thumb side and `z = x × y`; fingers flex toward `-z`.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NUM_KEYPOINTS: usize = 21;
pub const SHAPE_DIM: usize = 10;

pub const WRIST: usize = 0;
pub const THUMB_TIP: usize = 4;
pub const INDEX_MCP: usize = 5;
pub const INDEX_TIP: usize = 8;
pub const MIDDLE_MCP: usize = 9;
pub const MIDDLE_TIP: usize = 12;
pub const RING_MCP: usize = 13;
pub const RING_TIP: usize = 16;
pub const PINKY_MCP: usize = 17;
pub const PINKY_TIP: usize = 20;

/// Landmark names accepted in configuration files, indexed by landmark id.
pub const KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "wrist",
    "thumb_cmc",
    "thumb_mcp",
    "thumb_ip",
    "thumb_tip",
    "index_mcp",
    "index_pip",
    "index_dip",
    "index_tip",
    "middle_mcp",
    "middle_pip",
    "middle_dip",
    "middle_tip",
    "ring_mcp",
    "ring_pip",
    "ring_dip",
    "ring_tip",
    "pinky_mcp",
    "pinky_pip",
    "pinky_dip",
    "pinky_tip",
];

pub fn keypoint_index(name: &str) -> Option<usize> {
    KEYPOINT_NAMES.iter().position(|n| *n == name)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrameError {
    #[error("expected {NUM_KEYPOINTS} {what}, got {got}")]
    WrongCount { what: &'static str, got: usize },
    #[error("wrist keypoint must be the local origin")]
    WristNotAtOrigin,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("negative depth value")]
    NegativeDepth,
    #[error("shape parameters must have {SHAPE_DIM} entries, got {0}")]
    ShapeDimension(usize),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("invalid depth {0}")]
    InvalidDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("point is not in front of the camera")]
    BehindCamera,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), CameraError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width
            && self.cy > 0.0
            && self.cy < self.height;
        if ok {
            Ok(())
        } else {
            Err(CameraError::InvalidIntrinsics(format!("{self:?}")))
        }
    }

    /// Pinhole projection of a camera-frame point.
    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, CameraError> {
        if !(p.z > 0.0) {
            return Err(CameraError::BehindCamera);
        }
        Ok(Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Lifts a pixel with metric depth into the camera frame.
    pub fn backproject(&self, pixel: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>, CameraError> {
        if !depth.is_finite() || depth <= 0.0 {
            return Err(CameraError::InvalidDepth(depth));
        }
        Ok(Vector3::new(
            (pixel.x - self.cx) * depth / self.fx,
            (pixel.y - self.cy) * depth / self.fy,
            depth,
        ))
    }

    /// Unit-depth ray direction (z = 1) through a pixel.
    pub fn ray(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0)
    }
}

/// One detection of one hand by one camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandFrame {
    pub camera_id: String,
    pub timestamp_us: u64,
    /// Metric keypoints in the wrist frame (index 0 is the origin).
    pub keypoints_local: Vec<[f64; 3]>,
    pub keypoints_pixel: Vec<[f64; 2]>,
    /// Per-keypoint depth in metres; 0 marks an invalid reading.
    pub depth: Option<Vec<f64>>,
    pub shape_params: Option<Vec<f64>>,
    /// Weak-perspective scale in pixels per metre.
    pub weak_persp_scale: Option<f64>,
    /// Metric wrist to middle-MCP distance.
    pub hand_reference_size: f64,
}

impl HandFrame {
    pub fn validate(&self) -> Result<(), FrameError> {
        if self.keypoints_local.len() != NUM_KEYPOINTS {
            return Err(FrameError::WrongCount {
                what: "local keypoints",
                got: self.keypoints_local.len(),
            });
        }
        if self.keypoints_pixel.len() != NUM_KEYPOINTS {
            return Err(FrameError::WrongCount {
                what: "pixel keypoints",
                got: self.keypoints_pixel.len(),
            });
        }
        if !self.keypoints_local.iter().flatten().all(|v| v.is_finite()) {
            return Err(FrameError::NonFinite("local keypoints"));
        }
        if !self.keypoints_pixel.iter().flatten().all(|v| v.is_finite()) {
            return Err(FrameError::NonFinite("pixel keypoints"));
        }
        if Vector3::from(self.keypoints_local[WRIST]).norm() > 1e-9 {
            return Err(FrameError::WristNotAtOrigin);
        }
        if let Some(depth) = &self.depth {
            if depth.len() != NUM_KEYPOINTS {
                return Err(FrameError::WrongCount {
                    what: "depth values",
                    got: depth.len(),
                });
            }
            if depth.iter().any(|d| !d.is_finite()) {
                return Err(FrameError::NonFinite("depth"));
            }
            if depth.iter().any(|d| *d < 0.0) {
                return Err(FrameError::NegativeDepth);
            }
        }
        if let Some(shape) = &self.shape_params {
            if shape.len() != SHAPE_DIM {
                return Err(FrameError::ShapeDimension(shape.len()));
            }
            if shape.iter().any(|v| !v.is_finite()) {
                return Err(FrameError::NonFinite("shape parameters"));
            }
        }
        if let Some(s) = self.weak_persp_scale {
            if !s.is_finite() {
                return Err(FrameError::NonFinite("weak-perspective scale"));
            }
        }
        if !self.hand_reference_size.is_finite() {
            return Err(FrameError::NonFinite("hand reference size"));
        }
        Ok(())
    }

    pub fn local(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.keypoints_local[i])
    }

    pub fn pixel(&self, i: usize) -> Vector2<f64> {
        Vector2::from(self.keypoints_pixel[i])
    }

    /// Local keypoints rescaled so that wrist→middle-MCP equals `hand_reference_size`.
    ///
    /// A non-positive reference size leaves the keypoints untouched.
    pub fn metric_keypoints(&self) -> Vec<Vector3<f64>> {
        let raw: Vec<Vector3<f64>> = self.keypoints_local.iter().map(|p| Vector3::from(*p)).collect();
        let measured = (raw[MIDDLE_MCP] - raw[WRIST]).norm();
        if self.hand_reference_size > 0.0 && measured > 1e-9 {
            let s = self.hand_reference_size / measured;
            raw.into_iter().map(|p| p * s).collect()
        } else {
            raw
        }
    }

    /// Indices whose depth reading is usable.
    pub fn valid_depth_indices(&self) -> Vec<usize> {
        match &self.depth {
            Some(d) => (0..NUM_KEYPOINTS).filter(|&i| d[i] > 0.0).collect(),
            None => Vec::new(),
        }
    }
}

/// A representative adult right hand in the wrist frame, in metres.
pub fn template_hand_keypoints() -> [[f64; 3]; NUM_KEYPOINTS] {
    [
        [0.0, 0.0, 0.0],
        [0.020, 0.025, -0.005],
        [0.045, 0.045, -0.010],
        [0.065, 0.060, -0.015],
        [0.085, 0.072, -0.020],
        [0.090, 0.030, 0.0],
        [0.130, 0.032, -0.005],
        [0.155, 0.033, -0.012],
        [0.175, 0.034, -0.020],
        [0.095, 0.008, 0.0],
        [0.140, 0.008, -0.005],
        [0.168, 0.008, -0.012],
        [0.190, 0.008, -0.020],
        [0.090, -0.013, 0.0],
        [0.130, -0.015, -0.005],
        [0.155, -0.016, -0.012],
        [0.175, -0.017, -0.020],
        [0.082, -0.032, 0.0],
        [0.110, -0.036, -0.005],
        [0.128, -0.038, -0.012],
        [0.145, -0.040, -0.020],
    ]
}
