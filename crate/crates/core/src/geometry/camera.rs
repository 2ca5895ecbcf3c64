use serde::{Deserialize, Serialize};

use super::{GeometryError, PointCloud, Pose, Vec3};

/// Row-major `height x width x channels` float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self, GeometryError> {
        if data.len() != width * height * channels {
            return Err(GeometryError::Resolution(format!(
                "{}x{}x{} image needs {} values, got {}",
                width,
                height,
                channels,
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn at(&self, u: usize, v: usize, c: usize) -> f64 {
        self.data[(v * self.width + u) * self.channels + c]
    }

    pub fn set(&mut self, u: usize, v: usize, c: usize, value: f64) {
        self.data[(v * self.width + u) * self.channels + c] = value;
    }

    pub fn same_layout(&self, o: &Image) -> bool {
        self.width == o.width && self.height == o.height && self.channels == o.channels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CameraKind {
    Static,
    Wrist,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Pinhole camera. `extrinsic` maps camera coordinates (x right, y down,
/// z forward) into the world frame; wrist cameras receive theirs per frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub intrinsics: Intrinsics,
    pub width: usize,
    pub height: usize,
    pub kind: CameraKind,
    pub extrinsic: Option<Pose>,
}

impl CameraModel {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(GeometryError::Camera(format!("focal lengths must be positive: fx={} fy={}", k.fx, k.fy)));
        }
        if !(k.cx >= 0.0 && k.cx < self.width as f64 && k.cy >= 0.0 && k.cy < self.height as f64) {
            return Err(GeometryError::Camera(format!(
                "principal point ({}, {}) outside {}x{} image",
                k.cx, k.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn with_extrinsic(mut self, pose: Pose) -> Self {
        self.extrinsic = Some(pose);
        self
    }

    /// Camera-frame ray through pixel `(u, v)` with unit z component.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        let k = &self.intrinsics;
        [(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0]
    }

    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        let r = self.ray(u, v);
        [r[0] * depth, r[1] * depth, depth]
    }
}

/// Lifts every valid depth pixel of every view into the world frame and
/// concatenates the clouds. Pixels with depth at or beyond `far_clip` (or
/// non-positive) are dropped.
pub fn unproject_and_fuse(views: &[(&Image, &CameraModel)], far_clip: f64) -> Result<PointCloud, GeometryError> {
    let mut points = Vec::new();
    for (i, (depth, cam)) in views.iter().enumerate() {
        cam.validate()?;
        if depth.channels != 1 || depth.width != cam.width || depth.height != cam.height {
            return Err(GeometryError::Resolution(format!(
                "view {i}: depth {}x{}x{} vs camera {}x{}",
                depth.width, depth.height, depth.channels, cam.width, cam.height
            )));
        }
        let pose = cam.extrinsic.ok_or(GeometryError::MissingExtrinsic { view: i })?;
        for v in 0..cam.height {
            for u in 0..cam.width {
                let d = depth.at(u, v, 0);
                if !(d > 0.0) || d >= far_clip {
                    continue;
                }
                points.push(pose.transform_point(cam.unproject(u as f64, v as f64, d)));
            }
        }
    }
    PointCloud::new(points)
}
