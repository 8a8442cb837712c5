//! Pinhole cameras with world-to-camera poses.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Maximum `|R^T R - I|` entry accepted as a rotation.
pub const ORTHONORMAL_TOLERANCE: f64 = 1e-9;

/// Intrinsics in pixels plus a world-to-camera pose, `x_cam = R * x_world + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidCamera("principal point must be finite".into()));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCamera("translation must be finite".into()));
        }
        let dev = orthonormality_error(&rotation);
        if !(dev < ORTHONORMAL_TOLERANCE) || rotation.determinant() <= 0.0 {
            return Err(Error::InvalidCamera(format!(
                "rotation is not a proper rotation (|R^T R - I| = {dev:e}, det = {})",
                rotation.determinant()
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
        })
    }

    /// Camera at the world origin looking down +z.
    pub fn identity_pose(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        Self::new(fx, fy, cx, cy, Matrix3::identity(), Vector3::zeros())
    }

    /// Builds a camera from `[fx, fy, cx, cy]` and a row-major 3x4 world-to-camera matrix.
    pub fn from_flat(intrinsics: &[f64; 4], pose: &[f64; 12]) -> Result<Self> {
        let (rotation, translation) = split_pose(pose);
        Self::new(
            intrinsics[0],
            intrinsics[1],
            intrinsics[2],
            intrinsics[3],
            rotation,
            translation,
        )
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn intrinsics(&self) -> [f64; 4] {
        [self.fx, self.fy, self.cx, self.cy]
    }

    /// Row-major 3x4 `[R | t]`.
    pub fn pose_flat(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
        ]
    }

    pub fn k(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn k_inverse(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }

    /// Projects a world point to `(u, v, depth)`; `None` behind the camera.
    pub fn project(&self, world: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let p = self.world_to_camera(world);
        if p.z <= 0.0 {
            return None;
        }
        Some((
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
            p.z,
        ))
    }

    /// World point seen at pixel `(u, v)` with camera-space depth `depth`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        let cam = Vector3::new((u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth);
        self.rotation.transpose() * (cam - self.translation)
    }

    /// Same camera with its translation multiplied by `k` (a world rescaling).
    pub fn with_scaled_translation(&self, k: f64) -> Camera {
        Camera {
            translation: self.translation * k,
            ..self.clone()
        }
    }

    pub fn with_intrinsics(&self, intrinsics: [f64; 4]) -> Result<Camera> {
        Camera::new(
            intrinsics[0],
            intrinsics[1],
            intrinsics[2],
            intrinsics[3],
            self.rotation,
            self.translation,
        )
    }
}

pub(crate) fn split_pose(pose: &[f64; 12]) -> (Matrix3<f64>, Vector3<f64>) {
    let rotation = Matrix3::new(
        pose[0], pose[1], pose[2], pose[4], pose[5], pose[6], pose[8], pose[9], pose[10],
    );
    (rotation, Vector3::new(pose[3], pose[7], pose[11]))
}

/// `max |R^T R - I|` over entries.
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).amax()
}

/// Nearest proper rotation to `r` in the Frobenius sense.
pub fn reorthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut fix = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    u * fix * v_t
}

/// Rotation from a Rodrigues vector (axis * angle).
pub fn rotation_from_axis_angle(axis_angle: Vector3<f64>) -> Matrix3<f64> {
    nalgebra::Rotation3::new(axis_angle).into_inner()
}
