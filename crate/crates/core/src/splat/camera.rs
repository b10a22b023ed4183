//! Pinhole camera with world-to-camera extrinsics, +z forward.

use nalgebra::{Matrix3, Vector3};

use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation: `x_cam = R x_world + t`.
    pub translation: Vector3<f64>,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "focal length must be positive (fx={fx}, fy={fy})"
            )));
        }
        let err = (rotation * rotation.transpose() - Matrix3::identity()).norm();
        if err > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "camera rotation not orthonormal (residual {err:.2e})"
            )));
        }
        Ok(Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
        })
    }

    /// Camera centered at `eye` looking at `target`, pixel y axis pointing
    /// down the image as usual.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right).normalize();
        // rows of R are the camera axes expressed in world coordinates
        let rotation = Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]);
        let translation = -rotation * eye;
        Camera::new(
            fx,
            fy,
            width as f64 * 0.5,
            height as f64 * 0.5,
            width,
            height,
            rotation,
            translation,
        )
    }

    #[inline]
    pub fn world_to_cam(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera origin in world coordinates.
    pub fn position(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Project a world point; `None` when behind the near plane.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let t = self.world_to_cam(p);
        if t.z <= 1e-4 {
            return None;
        }
        Some((
            self.fx * t.x / t.z + self.cx,
            self.fy * t.y / t.z + self.cy,
            t.z,
        ))
    }

    /// World-space unit ray direction through image coordinates `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        let d_cam = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        (self.rotation.transpose() * d_cam).normalize()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_projects_target_to_principal_point() {
        let cam = Camera::look_at(
            Vector3::new(0.0, 0.0, -3.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            100.0,
            100.0,
            128,
            128,
        )
        .unwrap();
        let (u, v, z) = cam.project(&Vector3::zeros()).unwrap();
        assert!((u - 64.0).abs() < 1e-9);
        assert!((v - 64.0).abs() < 1e-9);
        assert!((z - 3.0).abs() < 1e-9);
    }

    #[test]
    fn behind_camera_rejected() {
        let cam = Camera::look_at(
            Vector3::new(0.0, 0.0, -3.0),
            Vector3::zeros(),
            Vector3::new(0.0, 1.0, 0.0),
            100.0,
            100.0,
            64,
            64,
        )
        .unwrap();
        assert!(cam.project(&Vector3::new(0.0, 0.0, -5.0)).is_none());
    }

    #[test]
    fn nonpositive_focal_rejected() {
        let r = Camera::new(
            0.0,
            1.0,
            0.0,
            0.0,
            8,
            8,
            Matrix3::identity(),
            Vector3::zeros(),
        );
        assert!(r.is_err());
    }
}
