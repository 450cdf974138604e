//! Pinhole cameras and rigid frames.
//!
//! Cameras follow the usual vision convention: x right, y down, z forward.
//! Pixel `(col j, row i)` covers `[j, j+1) × [i, i+1)`, so its center sits at
//! `(j + 0.5, i + 0.5)`.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};

/// Points closer than this (meters, camera z) are behind the camera.
pub const Z_NEAR: f64 = 1e-4;
/// Far limit of the evaluation frustum, meters.
pub const Z_FAR: f64 = 4.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraJson", into = "CameraJson")]
pub struct CameraModel {
    /// Intrinsics in pixels.
    pub k: Matrix3<f64>,
    /// World-to-camera extrinsics `[R | t]`.
    pub e: Matrix3x4<f64>,
    pub height: usize,
    pub width: usize,
}

#[derive(Serialize, Deserialize)]
struct CameraJson {
    #[serde(rename = "K")]
    k: Vec<f64>,
    #[serde(rename = "E")]
    e: Vec<f64>,
    #[serde(rename = "H")]
    h: usize,
    #[serde(rename = "W")]
    w: usize,
}

impl TryFrom<CameraJson> for CameraModel {
    type Error = crate::Error;

    fn try_from(j: CameraJson) -> Result<Self> {
        if j.k.len() != 9 || j.e.len() != 12 {
            return Err(validation("camera needs 9 K entries and 12 E entries"));
        }
        let cam = CameraModel {
            k: Matrix3::from_row_slice(&j.k),
            e: Matrix3x4::from_row_slice(&j.e),
            height: j.h,
            width: j.w,
        };
        cam.validate()?;
        Ok(cam)
    }
}

impl From<CameraModel> for CameraJson {
    fn from(c: CameraModel) -> Self {
        CameraJson {
            k: c.k.transpose().iter().copied().collect(),
            e: c.e.transpose().iter().copied().collect(),
            h: c.height,
            w: c.width,
        }
    }
}

impl CameraModel {
    pub fn new(k: Matrix3<f64>, e: Matrix3x4<f64>, height: usize, width: usize) -> Result<Self> {
        let cam = CameraModel { k, e, height, width };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.k;
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(validation("intrinsics must be upper triangular"));
        }
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) || (k[(2, 2)] - 1.0).abs() > 1e-12 {
            return Err(validation("intrinsics need positive focal lengths and K[2][2] = 1"));
        }
        let r = self.rotation();
        if (r.transpose() * r - Matrix3::identity()).abs().max() > 1e-6 || r.determinant() < 0.0 {
            return Err(validation("extrinsic rotation is not orthonormal"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(validation("image size must be nonzero"));
        }
        if self.e.iter().chain(self.k.iter()).any(|v| !v.is_finite()) {
            return Err(validation("camera has non-finite entries"));
        }
        Ok(())
    }

    /// Pinhole camera at `eye` looking at `target`, world up `+z`.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        hfov_deg: f64,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let up = Vector3::z();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(validation("look direction is parallel to world up"));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye);
        let f = 0.5 * width as f64 / (0.5 * hfov_deg.to_radians()).tan();
        let k = Matrix3::new(f, 0.0, 0.5 * width as f64, 0.0, f, 0.5 * height as f64, 0.0, 0.0, 1.0);
        let mut e = Matrix3x4::zeros();
        e.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        e.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self::new(k, e, height, width)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.e.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.e.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn position(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Pixel coordinates of a camera-frame point, ignoring validity.
    pub fn camera_to_pixel(&self, c: &Vector3<f64>) -> [f64; 2] {
        let n = Vector3::new(c[0] / c[2], c[1] / c[2], 1.0);
        let px = self.k * n;
        [px[0], px[1]]
    }

    pub fn in_image(&self, px: [f64; 2]) -> bool {
        px[0] >= 0.0 && px[0] < self.width as f64 && px[1] >= 0.0 && px[1] < self.height as f64
    }

    /// Camera expressed relative to a frame: maps frame-local points to pixels.
    pub fn relative_to(&self, frame: &RigidTransform) -> CameraModel {
        let r = self.rotation() * frame.rotation;
        let t = self.rotation() * frame.translation + self.translation();
        let mut e = Matrix3x4::zeros();
        e.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        e.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        CameraModel {
            k: self.k,
            e,
            height: self.height,
            width: self.width,
        }
    }

    pub fn focal(&self) -> (f64, f64) {
        (self.k[(0, 0)], self.k[(1, 1)])
    }
}

/// Projected pixel and whether it is usable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: [f64; 2],
    pub depth: f64,
    pub valid: bool,
}

/// World points to pixels. Points with camera depth `≤ Z_NEAR` or falling
/// outside the image are marked invalid.
pub fn project(points: &[Vector3<f64>], cam: &CameraModel) -> Vec<Projection> {
    points
        .iter()
        .map(|p| {
            let c = cam.to_camera(p);
            if !(c[2] > Z_NEAR) {
                return Projection {
                    pixel: [f64::NAN; 2],
                    depth: c[2],
                    valid: false,
                };
            }
            let pixel = cam.camera_to_pixel(&c);
            Projection {
                pixel,
                depth: c[2],
                valid: cam.in_image(pixel),
            }
        })
        .collect()
}

/// Rigid map from a local frame to the world: `world = R · local + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Rotation by `yaw` radians about +z, then translation.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        let (s, c) = yaw.sin_cos();
        RigidTransform {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse_apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }
}

pub fn save_cameras(cams: &[CameraModel], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(cams)?)?;
    Ok(())
}

pub fn load_cameras(path: impl AsRef<Path>) -> Result<Vec<CameraModel>> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
