//! Pinhole camera, point projection and EWA covariance projection.

use nalgebra::{Matrix2x3, Matrix3, Matrix4, Vector2, Vector3};

use crate::error::{Error, Result};

/// Low-pass dilation added to every projected covariance, in pixel².
pub const COV2D_DILATION: f64 = 0.3;

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Rigid world-to-camera transform. Camera looks down +z, x right, y down.
    pub world_to_cam: Matrix4<f64>,
    pub near_clip: f64,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        world_to_cam: Matrix4<f64>,
        near_clip: f64,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            world_to_cam,
            near_clip,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::contract("focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::contract("camera image size must be at least 1x1"));
        }
        if !(self.near_clip > 0.0) {
            return Err(Error::contract("near clip must be positive"));
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).amax();
        if err > 1e-6 {
            return Err(Error::contract(format!(
                "world_to_cam rotation block not orthonormal (error {err:e})"
            )));
        }
        let last = self.world_to_cam.row(3);
        if (last[0].abs() + last[1].abs() + last[2].abs() + (last[3] - 1.0).abs()) > 1e-9 {
            return Err(Error::contract("world_to_cam last row must be (0, 0, 0, 1)"));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        // Image y points down, so the camera's y axis is -up projected.
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Camera::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
            m,
            0.01,
        )
    }

    #[inline]
    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_cam.fixed_view::<3, 3>(0, 0).into_owned()
    }

    #[inline]
    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_cam.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    #[inline]
    pub fn to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * x + self.translation()
    }

    /// Jacobian of the pinhole map evaluated at camera-space point `t`.
    pub fn projection_jacobian(&self, t: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / t.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * t.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * t.y * iz2,
        )
    }
}

/// Mean part of a projection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointProjection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
    pub valid: bool,
}

/// Symmetric 2x2 matrix stored as (xx, xy, yy).
///
/// Gradients use the same layout, where the `xy` slot is the derivative with
/// respect to the single shared off-diagonal value.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Sym2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Sym2 {
    pub fn new(xx: f64, xy: f64, yy: f64) -> Self {
        Self { xx, xy, yy }
    }

    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    pub fn eigenvalues(&self) -> (f64, f64) {
        let mid = 0.5 * (self.xx + self.yy);
        let disc = (0.25 * (self.xx - self.yy).powi(2) + self.xy * self.xy).sqrt();
        (mid - disc, mid + disc)
    }

    pub fn inverse(&self) -> Option<Sym2> {
        let det = self.det();
        if det <= 0.0 || !det.is_finite() {
            return None;
        }
        let inv = 1.0 / det;
        Some(Sym2::new(self.yy * inv, -self.xy * inv, self.xx * inv))
    }

    pub fn add_assign(&mut self, other: &Sym2) {
        self.xx += other.xx;
        self.xy += other.xy;
        self.yy += other.yy;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedGaussian {
    pub pixel_mean: Vector2<f64>,
    pub depth: f64,
    pub cov2d: Sym2,
    pub valid: bool,
}

impl ProjectedGaussian {
    pub fn invalid() -> Self {
        Self {
            pixel_mean: Vector2::zeros(),
            depth: 0.0,
            cov2d: Sym2::default(),
            valid: false,
        }
    }
}

pub fn project_point(x: &Vector3<f64>, cam: &Camera) -> PointProjection {
    let t = cam.to_camera(x);
    if t.z <= cam.near_clip {
        return PointProjection {
            pixel: Vector2::zeros(),
            depth: t.z,
            valid: false,
        };
    }
    PointProjection {
        pixel: Vector2::new(cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy),
        depth: t.z,
        valid: true,
    }
}

/// dL/dX from dL/dpixel. Zero for points behind the near plane.
pub fn project_point_backward(
    x: &Vector3<f64>,
    cam: &Camera,
    d_pixel: &Vector2<f64>,
) -> Vector3<f64> {
    let t = cam.to_camera(x);
    if t.z <= cam.near_clip {
        return Vector3::zeros();
    }
    let d_t = cam.projection_jacobian(&t).transpose() * d_pixel;
    cam.rotation().transpose() * d_t
}

/// EWA projection `J W Σ Wᵀ Jᵀ + 0.3 I`.
pub fn project_covariance(sigma: &Matrix3<f64>, x: &Vector3<f64>, cam: &Camera) -> Result<Sym2> {
    let t = cam.to_camera(x);
    if t.z <= cam.near_clip {
        return Err(Error::contract(
            "project_covariance called on a point behind the near plane",
        ));
    }
    let r = cam.rotation();
    let j = cam.projection_jacobian(&t);
    let m = j * r * sigma * r.transpose() * j.transpose();
    Ok(Sym2::new(
        m[(0, 0)] + COV2D_DILATION,
        0.5 * (m[(0, 1)] + m[(1, 0)]),
        m[(1, 1)] + COV2D_DILATION,
    ))
}

/// Backward of [`project_covariance`]: returns (dL/dΣ, dL/dX).
pub fn project_covariance_backward(
    sigma: &Matrix3<f64>,
    x: &Vector3<f64>,
    cam: &Camera,
    d_cov: &Sym2,
) -> (Matrix3<f64>, Vector3<f64>) {
    let t = cam.to_camera(x);
    if t.z <= cam.near_clip {
        return (Matrix3::zeros(), Vector3::zeros());
    }
    let r = cam.rotation();
    let j = cam.projection_jacobian(&t);
    let g = nalgebra::Matrix2::new(d_cov.xx, 0.5 * d_cov.xy, 0.5 * d_cov.xy, d_cov.yy);
    let m = r * sigma * r.transpose();

    let d_m = j.transpose() * g * j;
    let d_sigma = r.transpose() * d_m * r;

    let d_j = g * j * m.transpose() + g.transpose() * j * m;
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let (fx, fy) = (cam.fx, cam.fy);
    let d_t = Vector3::new(
        -fx * iz2 * d_j[(0, 2)],
        -fy * iz2 * d_j[(1, 2)],
        -fx * iz2 * d_j[(0, 0)] + 2.0 * fx * t.x * iz3 * d_j[(0, 2)] - fy * iz2 * d_j[(1, 1)]
            + 2.0 * fy * t.y * iz3 * d_j[(1, 2)],
    );
    (d_sigma, r.transpose() * d_t)
}

/// Full projection of one Gaussian. Invalid behind the near plane.
pub fn project_gaussian(x: &Vector3<f64>, sigma: &Matrix3<f64>, cam: &Camera) -> ProjectedGaussian {
    let p = project_point(x, cam);
    if !p.valid {
        return ProjectedGaussian::invalid();
    }
    match project_covariance(sigma, x, cam) {
        Ok(cov2d) => ProjectedGaussian {
            pixel_mean: p.pixel,
            depth: p.depth,
            cov2d,
            valid: true,
        },
        Err(_) => ProjectedGaussian::invalid(),
    }
}

#[inline]
fn pixel_to_uv_scale(extent: usize) -> f64 {
    if extent > 1 {
        2.0 / (extent as f64 - 1.0)
    } else {
        0.0
    }
}

/// Corner-aligned normalized image coordinates in `[-1, 1]²`: pixel 0 maps to
/// -1 and pixel `width - 1` maps to +1. `None` when behind the near plane or
/// outside the image.
pub fn normalized_projection(x: &Vector3<f64>, cam: &Camera) -> Option<Vector2<f64>> {
    let p = project_point(x, cam);
    if !p.valid {
        return None;
    }
    let u = p.pixel.x * pixel_to_uv_scale(cam.width) - 1.0;
    let v = p.pixel.y * pixel_to_uv_scale(cam.height) - 1.0;
    let u = if cam.width == 1 { 0.0 } else { u };
    let v = if cam.height == 1 { 0.0 } else { v };
    if u.abs() > 1.0 || v.abs() > 1.0 || !u.is_finite() || !v.is_finite() {
        return None;
    }
    Some(Vector2::new(u, v))
}

/// dL/dX from dL/duv for a valid normalized projection.
pub fn normalized_projection_backward(
    x: &Vector3<f64>,
    cam: &Camera,
    d_uv: &Vector2<f64>,
) -> Vector3<f64> {
    let d_pixel = Vector2::new(
        d_uv.x * pixel_to_uv_scale(cam.width),
        d_uv.y * pixel_to_uv_scale(cam.height),
    );
    project_point_backward(x, cam, &d_pixel)
}
