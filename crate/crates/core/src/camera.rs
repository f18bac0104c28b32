//! Pinhole cameras, EWA projection of 3D Gaussians and pseudo-view synthesis.

use std::path::Path;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, write_json_atomic};

/// Additive screen-space variance (px^2) applied to every projected footprint.
pub const COV2D_FLOOR: f64 = 0.3;
pub const DEFAULT_NEAR: f64 = 0.01;

/// Pinhole camera with a world-to-camera pose `x_cam = R x_world + t`.
///
/// Camera space is right-handed with +z forward and +y down in the image.
/// Pixel `(i, j)` has its center at `(i + 0.5, j + 0.5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub id: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Camera {
    pub fn new(
        id: impl Into<String>,
        intrinsics: [f64; 4],
        size: (usize, usize),
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let cam = Self {
            id: id.into(),
            fx: intrinsics[0],
            fy: intrinsics[1],
            cx: intrinsics[2],
            cy: intrinsics[3],
            width: size.0,
            height: size.1,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, image +y aligned with `-up`.
    pub fn look_at(
        id: impl Into<String>,
        intrinsics: [f64; 4],
        size: (usize, usize),
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -rotation * eye;
        Self::new(id, intrinsics, size, rotation, translation)
    }

    pub fn validate(&self) -> Result<()> {
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity())
            .abs()
            .max();
        if !(ortho < 1e-6) || !((self.rotation.determinant() - 1.0).abs() < 1e-6) {
            return Err(Error::InvalidArgument(format!(
                "camera `{}` rotation is not a proper orthonormal matrix",
                self.id
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument(format!(
                "camera `{}` has an empty image",
                self.id
            )));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "camera `{}` focal lengths must be positive",
                self.id
            )));
        }
        Ok(())
    }

    /// World-space camera origin `o = -R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn project_point(&self, p_cam: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        )
    }

    /// Unit world-space direction through the center of pixel `(x, y)`.
    pub fn pixel_ray(&self, x: usize, y: usize) -> Vector3<f64> {
        let d_cam = Vector3::new(
            (x as f64 + 0.5 - self.cx) / self.fx,
            (y as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        );
        (self.rotation.transpose() * d_cam).normalize()
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// A Gaussian footprint in screen space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGaussian {
    pub mean2d: Vector2<f64>,
    /// `J W Sigma W^T J^T` plus the low-pass floor.
    pub cov2d: Matrix2<f64>,
    pub cam_z: f64,
    /// Distance from the camera center, `||mu - o||`.
    pub euclid_depth: f64,
    /// `ceil(3 * sqrt(lambda_max(cov2d)))` in pixels.
    pub radius: f64,
}

/// Affine approximation of the perspective projection at camera-space `t`.
pub(crate) fn projection_jacobian(cam: &Camera, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * t.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * t.y * iz * iz,
    )
}

pub(crate) fn max_eigenvalue_2x2(m: &Matrix2<f64>) -> f64 {
    let mid = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    mid + (mid * mid - det).max(0.0).sqrt()
}

/// Projects a Gaussian; `None` when it lies at or behind the near plane.
pub fn project_gaussian(
    position: &Vector3<f64>,
    covariance: &Matrix3<f64>,
    camera: &Camera,
    near: f64,
) -> Option<ProjectedGaussian> {
    let t = camera.world_to_camera(position);
    if !(t.z > near) {
        return None;
    }
    let j = projection_jacobian(camera, &t);
    let jw = j * camera.rotation;
    let mut cov2d = jw * covariance * jw.transpose();
    cov2d[(0, 0)] += COV2D_FLOOR;
    cov2d[(1, 1)] += COV2D_FLOOR;
    let radius = (3.0 * max_eigenvalue_2x2(&cov2d).sqrt()).ceil();
    Some(ProjectedGaussian {
        mean2d: camera.project_point(&t),
        cov2d,
        cam_z: t.z,
        euclid_depth: (position - camera.center()).norm(),
        radius,
    })
}

/// Camera-local rotation axis for pseudo-view perturbations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbAxis {
    /// Camera-local y (image vertical).
    Up,
    /// Camera-local x.
    Right,
    /// Optical axis.
    Forward,
}

impl PerturbAxis {
    fn unit(self) -> Vector3<f64> {
        match self {
            PerturbAxis::Up => Vector3::y(),
            PerturbAxis::Right => Vector3::x(),
            PerturbAxis::Forward => Vector3::z(),
        }
    }

    fn tag(self) -> &'static str {
        match self {
            PerturbAxis::Up => "up",
            PerturbAxis::Right => "right",
            PerturbAxis::Forward => "fwd",
        }
    }
}

/// Rotation of `angle_deg` about a camera-local axis.
pub fn axis_rotation(axis: PerturbAxis, angle_deg: f64) -> Matrix3<f64> {
    let a = angle_deg.to_radians();
    let (s, c) = a.sin_cos();
    match axis {
        PerturbAxis::Up => Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
        PerturbAxis::Right => Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c),
        PerturbAxis::Forward => Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
    }
}

/// Rotates `camera` about one of its own axes, keeping its center fixed.
pub fn perturb_camera(camera: &Camera, axis: PerturbAxis, angle_deg: f64) -> Camera {
    debug_assert!(axis.unit().norm() == 1.0);
    let center = camera.center();
    // Left-multiplying W by a camera-frame rotation equals right-multiplying by
    // the same rotation expressed in world coordinates.
    let rotation = axis_rotation(axis, angle_deg) * camera.rotation;
    let translation = -(rotation * center);
    Camera {
        id: format!("{}@{}{:+}", camera.id, axis.tag(), angle_deg),
        rotation,
        translation,
        ..camera.clone()
    }
}

/// One pseudo camera per training camera and perturbation, training-camera-major.
///
/// With the default `axes = [Up]` each camera yields `+angle` and `-angle`.
pub fn make_pseudo_views(train_cameras: &[Camera], angle_deg: f64, axes: &[PerturbAxis]) -> Result<Vec<Camera>> {
    if !(angle_deg > 0.0 && angle_deg < 30.0) {
        return Err(Error::InvalidArgument(format!(
            "pseudo-view angle {angle_deg} must lie in (0, 30) degrees"
        )));
    }
    let mut out = Vec::with_capacity(train_cameras.len() * axes.len() * 2);
    for cam in train_cameras {
        for &axis in axes {
            for sign in [1.0, -1.0] {
                out.push(perturb_camera(cam, axis, sign * angle_deg));
            }
        }
    }
    Ok(out)
}

/// JSON form of a camera. Rotation is world-to-camera, row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        let r = &c.rotation;
        Self {
            id: c.id.clone(),
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [c.translation.x, c.translation.y, c.translation.z],
        }
    }
}

impl TryFrom<CameraRecord> for Camera {
    type Error = Error;

    fn try_from(r: CameraRecord) -> Result<Self> {
        Camera::new(
            r.id,
            [r.fx, r.fy, r.cx, r.cy],
            (r.width, r.height),
            Matrix3::from_row_slice(&r.rotation),
            Vector3::from_column_slice(&r.translation),
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraSet {
    pub cameras: Vec<CameraRecord>,
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    let set: CameraSet = read_json(path)?;
    set.cameras.into_iter().map(Camera::try_from).collect()
}

pub fn save_cameras(path: &Path, cameras: &[Camera]) -> Result<()> {
    let set = CameraSet {
        cameras: cameras.iter().map(CameraRecord::from).collect(),
    };
    write_json_atomic(path, &set)
}
