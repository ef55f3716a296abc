//! Cameras, rigid poses, rays and axis-aligned bounds.
//!
//! Camera frame follows the usual computer-vision convention: +x right,
//! +y down, +z along the optical axis. Pixel `(u, v)` has its center at
//! `(u + 0.5, v + 0.5)` in image coordinates.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Pinhole intrinsics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = CameraModel {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Square-pixel camera with the principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
        )
    }

    /// Camera whose horizontal field of view is `fov_x` radians.
    pub fn from_fov(fov_x: f64, width: usize, height: usize) -> Result<Self> {
        let focal = width as f64 / 2.0 / (fov_x / 2.0).tan();
        Self::centered(focal, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("camera has zero-sized image".into()));
        }
        let inside = (0.0..=self.width as f64).contains(&self.cx)
            && (0.0..=self.height as f64).contains(&self.cy);
        if !inside {
            return Err(Error::InvalidArgument(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Unit direction in the camera frame through the center of pixel `(u, v)`.
    pub fn camera_direction(&self, u: usize, v: usize) -> Vec3 {
        let x = (u as f64 + 0.5 - self.cx) / self.fx;
        let y = (v as f64 + 0.5 - self.cy) / self.fy;
        Vec3::new(x, y, 1.0).normalize()
    }

    /// Projects a camera-frame point to continuous image coordinates.
    pub fn project(&self, p_cam: &Vec3) -> Option<(f64, f64)> {
        if p_cam.z <= 0.0 {
            return None;
        }
        Some((
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        ))
    }
}

/// Rigid camera-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let pose = Pose {
            rotation,
            translation,
        };
        pose.validate(1e-9)?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        Pose {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn validate(&self, tol: f64) -> Result<()> {
        let err = (self.rotation.transpose() * self.rotation - Mat3::identity()).abs().max();
        if !(err <= tol) {
            return Err(Error::InvalidArgument(format!(
                "rotation not orthonormal (|R^T R - I| = {err:e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > tol.max(1e-9) * 10.0 {
            return Err(Error::InvalidArgument(format!(
                "rotation determinant {det} != +1"
            )));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite translation".into()));
        }
        Ok(())
    }

    /// Camera placed at `eye`, optical axis through `target`, image "down"
    /// aligned with world `-up` as far as possible.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let forward = target - eye;
        let dist = forward.norm();
        if !(dist > 1e-12) {
            return Err(Error::Degenerate(
                "camera position coincides with look-at point".into(),
            ));
        }
        let f = forward / dist;
        let mut right = f.cross(&up);
        if right.norm() < 1e-9 {
            // looking straight along the up axis
            right = f.cross(&Vec3::new(0.0, 1.0, 0.0));
            if right.norm() < 1e-9 {
                right = f.cross(&Vec3::new(1.0, 0.0, 0.0));
            }
        }
        let right = right.normalize();
        let down = f.cross(&right);
        let rotation = Mat3::from_columns(&[right, down, f]);
        Ok(Pose {
            rotation,
            translation: eye,
        })
    }

    pub fn center(&self) -> Vec3 {
        self.translation
    }

    pub fn optical_axis(&self) -> Vec3 {
        self.rotation.column(2).into_owned()
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Pinhole rays through the centers of `pixels` (given as `(u, v)`).
pub fn generate_rays(cam: &CameraModel, pose: &Pose, pixels: &[(usize, usize)]) -> Result<Vec<Ray>> {
    pixels
        .iter()
        .map(|&(u, v)| {
            if u >= cam.width || v >= cam.height {
                return Err(Error::InvalidArgument(format!(
                    "pixel ({u}, {v}) outside {}x{} image",
                    cam.width, cam.height
                )));
            }
            Ok(pixel_ray(cam, pose, u, v))
        })
        .collect()
}

pub(crate) fn pixel_ray(cam: &CameraModel, pose: &Pose, u: usize, v: usize) -> Ray {
    let d = pose.rotation * cam.camera_direction(u, v);
    Ray {
        origin: pose.translation,
        direction: d.normalize(),
    }
}

/// All rays of a view in row-major pixel order.
pub fn view_rays(cam: &CameraModel, pose: &Pose) -> Vec<Ray> {
    let mut rays = Vec::with_capacity(cam.pixel_count());
    for v in 0..cam.height {
        for u in 0..cam.width {
            rays.push(pixel_ray(cam, pose, u, v));
        }
    }
    rays
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if !(0..3).all(|i| min[i] < max[i]) {
            return Err(Error::InvalidArgument(format!(
                "degenerate bounds min={min:?} max={max:?}"
            )));
        }
        Ok(Aabb { min, max })
    }

    pub fn cube(center: Vec3, half_extent: f64) -> Self {
        let h = Vec3::repeat(half_extent);
        Aabb {
            min: center - h,
            max: center + h,
        }
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn half_extent(&self) -> Vec3 {
        (self.max - self.min) * 0.5
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Grows every side by `fraction` of the box extent along that axis.
    pub fn padded(&self, fraction: f64) -> Self {
        let pad = (self.max - self.min) * fraction;
        Aabb {
            min: self.min - pad,
            max: self.max + pad,
        }
    }

    pub fn diagonal(&self) -> f64 {
        (self.max - self.min).norm()
    }

    /// Slab test; returns the parametric `[near, far]` segment with `near >= 0`.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            let d = ray.direction[i];
            let o = ray.origin[i];
            if d.abs() < 1e-15 {
                if o < self.min[i] || o > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let mut a = (self.min[i] - o) * inv;
            let mut b = (self.max[i] - o) * inv;
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 >= t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}

/// Rotation about a unit axis by `angle` radians.
pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    let unit = nalgebra::Unit::new_normalize(*axis);
    nalgebra::Rotation3::from_axis_angle(&unit, angle).into_inner()
}

/// Geodesic angle between two rotations.
pub fn rotation_angle_between(a: &Mat3, b: &Mat3) -> f64 {
    let rel = a.transpose() * b;
    let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos()
}
