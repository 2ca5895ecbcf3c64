//! SE(3) pose algebra, hand-eye wrist camera derivation, depth unprojection
//! and multi-view fusion, and the image / depth / point-cloud metric suite.

mod camera;
mod cloud;
mod metrics;
mod pose;

pub use camera::{unproject_and_fuse, CameraKind, CameraModel, Image, Intrinsics};
pub use cloud::{chamfer, chamfer_bounded, KdTree, PointCloud, CHAMFER_MAX_POINTS};
pub use metrics::{depth_metrics, image_metrics, psnr, ssim, DepthMetrics, ImageMetrics, DELTA1_THRESHOLD, PSNR_CAP_DB};
pub use pose::{add, cross, dot, mat_vec, norm, quat_from_matrix, scale, sub, wrist_pose, Mat3, Pose, Quat, Vec3};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("point cloud contains non-finite coordinates")]
    NonFinite,
    #[error("depth mask selects no pixels")]
    EmptyMask,
    #[error("ground-truth depth must be positive on masked pixels, got {0}")]
    InvalidDepth(f64),
    #[error("resolution mismatch: {0}")]
    Resolution(String),
    #[error("invalid camera: {0}")]
    Camera(String),
    #[error("view {view} has no extrinsic (wrist views need a per-frame pose)")]
    MissingExtrinsic { view: usize },
}
