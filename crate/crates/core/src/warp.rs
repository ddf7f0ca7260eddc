//! Generative warps `W(x; p)` and the SO(3) helpers behind them.
//!
//! Two models are provided:
//!
//! * [`RotationWarp`]: the pure-rotation homography `pi(K R K^-1 x)`,
//!   parameterised by an axis-angle vector `omega` (3 DoF).
//! * [`TranslationWarp`]: an image-plane shift (2 DoF), used for the
//!   exhaustive 2-D cost-surface demonstrations because it makes the surface
//!   exactly reproducible.
//!
//! Warps always store their motion in full-resolution (level 0) pixel
//! units. The solver works on a level-local copy obtained with
//! [`Warp::at_scale`] and writes the result back with
//! [`Warp::adopt_from_scale`].

use nalgebra::{Matrix2x3, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rotated rays with `z` at or below this are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-9;

/// Below this angle `so3_exp` switches to its second-order Taylor expansion.
const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WarpError {
    #[error("point ({x:.3}, {y:.3}) maps behind the camera")]
    BehindCamera { x: f64, y: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("expected {expected} warp parameters, got {actual}")]
    ParamCount { expected: usize, actual: usize },
}

/// `[v]x`, so that `skew(v) * u == v.cross(u)`.
#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    #[rustfmt::skip]
    let m = Matrix3::new(
        0.0, -v.z, v.y,
        v.z, 0.0, -v.x,
        -v.y, v.x, 0.0,
    );
    m
}

/// Exponential map from an axis-angle vector to a rotation matrix
/// (Rodrigues' formula).
pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let k = skew(omega);
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Matrix3::identity() + a * k + b * k * k
}

/// Principal-branch logarithm: the axis-angle vector with `|omega| <= pi`.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let w = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let s = 0.5 * w.norm();
    let c = 0.5 * (r.trace() - 1.0);
    let theta = s.atan2(c);
    if theta < 1e-7 {
        // sin(theta)/theta ~ 1 - theta^2/6
        return 0.5 * (1.0 + theta * theta / 6.0) * w;
    }
    if std::f64::consts::PI - theta > 1e-6 {
        return (theta / (2.0 * theta.sin())) * w;
    }
    // Near pi the antisymmetric part vanishes; recover the axis from R + I.
    let b = (r + Matrix3::identity()) * 0.5;
    let (mut best, mut col) = (-1.0, 0);
    for i in 0..3 {
        if b[(i, i)] > best {
            best = b[(i, i)];
            col = i;
        }
    }
    let mut axis: Vector3<f64> = b.column(col).into();
    axis /= axis.norm();
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    theta * axis
}

/// Geodesic distance `|log(R1^T R2)|` in radians, in `[0, pi]`.
pub fn angular_distance(r1: &Matrix3<f64>, r2: &Matrix3<f64>) -> f64 {
    // atan2 keeps precision for tiny angles where acos((tr - 1) / 2) does not.
    let r = r1.transpose() * r2;
    let w = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let s = 0.5 * w.norm();
    let c = (0.5 * (r.trace() - 1.0)).clamp(-1.0, 1.0);
    s.atan2(c).clamp(0.0, std::f64::consts::PI)
}

/// Nearest rotation matrix in the Frobenius sense (polar factor).
pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * vt;
    }
    r
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, WarpError> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(WarpError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got ({fx}, {fy})"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(WarpError::InvalidIntrinsics("non-finite principal point".into()));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Fallback when no calibration is supplied: `f = width`, principal point
    /// at the image centre.
    pub fn default_for(width: usize, height: usize) -> Self {
        Self {
            fx: width as f64,
            fy: width as f64,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }

    /// Intrinsics of a pyramid level whose pixels are `scale` input pixels wide.
    pub fn scaled_to(&self, scale: f64) -> Self {
        assert!(scale > 0.0);
        Self {
            fx: self.fx / scale,
            fy: self.fy / scale,
            cx: self.cx / scale,
            cy: self.cy / scale,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
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

    /// Back-projects a pixel to a ray with unit `z`.
    #[inline]
    pub fn unproject(&self, x: [f64; 2]) -> Vector3<f64> {
        Vector3::new((x[0] - self.cx) / self.fx, (x[1] - self.cy) / self.fy, 1.0)
    }

    /// Projects a camera-frame ray; `None` when it points backwards.
    #[inline]
    pub fn project(&self, ray: &Vector3<f64>) -> Option<[f64; 2]> {
        if ray.z <= MIN_DEPTH {
            return None;
        }
        Some([self.fx * ray.x / ray.z + self.cx, self.fy * ray.y / ray.z + self.cy])
    }
}

/// Warp parameter vector: 2 entries for translation, 3 (axis-angle) for rotation.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpParams(pub Vec<f64>);

impl WarpParams {
    pub fn zeros(dof: usize) -> Self {
        Self(vec![0.0; dof])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Serializable snapshot of a warp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum WarpRecord {
    Rotation {
        axis_angle: [f64; 3],
        /// Row-major.
        matrix: [f64; 9],
        intrinsics: Intrinsics,
    },
    Translation {
        t: [f64; 2],
    },
}

/// Jacobian of the warped position with respect to the parameters; only the
/// first `DOF` columns are meaningful.
pub type WarpJacobian = [[f64; 3]; 2];

/// A parametric warp usable by the inverse-compositional solver.
pub trait Warp: Clone + Send + Sync + std::fmt::Debug {
    const DOF: usize;

    /// The warp as a planar homography acting on homogeneous pixels.
    fn homography(&self) -> Matrix3<f64>;

    /// `d W(x; p) / dp` at `p = 0`, where `W(x; p)` perturbs the current
    /// warp by composing the parameter increment on the right.
    fn jacobian_at_zero(&self, x: [f64; 2]) -> Result<WarpJacobian, WarpError>;

    /// `W <- W o W(dp)^-1`.
    fn compose_with_inverse_update(&mut self, delta: &[f64]);

    /// Level-local copy for a level whose pixels span `scale` input pixels.
    fn at_scale(&self, scale: f64) -> Self;

    /// Takes over the motion of a level-local warp produced by `at_scale`.
    fn adopt_from_scale(&mut self, local: &Self, scale: f64);

    /// Same camera model, zero motion.
    fn identity_like(&self) -> Self;

    /// Same camera model with absolute parameters `p`.
    fn with_params(&self, p: &[f64]) -> Self;

    fn params(&self) -> Vec<f64>;

    fn record(&self) -> WarpRecord;

    /// Maps a pixel through the warp.
    fn warp_point(&self, x: [f64; 2]) -> Result<[f64; 2], WarpError> {
        let q = self.homography() * Vector3::new(x[0], x[1], 1.0);
        if q.z <= MIN_DEPTH {
            return Err(WarpError::BehindCamera { x: x[0], y: x[1] });
        }
        Ok([q.x / q.z, q.y / q.z])
    }
}

/// Image-plane translation `x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct TranslationWarp {
    pub t: [f64; 2],
}

impl TranslationWarp {
    pub fn new(tx: f64, ty: f64) -> Self {
        Self { t: [tx, ty] }
    }
}

impl Warp for TranslationWarp {
    const DOF: usize = 2;

    fn homography(&self) -> Matrix3<f64> {
        Matrix3::new(1.0, 0.0, self.t[0], 0.0, 1.0, self.t[1], 0.0, 0.0, 1.0)
    }

    fn warp_point(&self, x: [f64; 2]) -> Result<[f64; 2], WarpError> {
        Ok([x[0] + self.t[0], x[1] + self.t[1]])
    }

    fn jacobian_at_zero(&self, _x: [f64; 2]) -> Result<WarpJacobian, WarpError> {
        Ok([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    }

    fn compose_with_inverse_update(&mut self, delta: &[f64]) {
        self.t[0] -= delta[0];
        self.t[1] -= delta[1];
    }

    fn at_scale(&self, scale: f64) -> Self {
        Self::new(self.t[0] / scale, self.t[1] / scale)
    }

    fn adopt_from_scale(&mut self, local: &Self, scale: f64) {
        self.t = [local.t[0] * scale, local.t[1] * scale];
    }

    fn identity_like(&self) -> Self {
        Self::default()
    }

    fn with_params(&self, p: &[f64]) -> Self {
        Self::new(p[0], p[1])
    }

    fn params(&self) -> Vec<f64> {
        self.t.to_vec()
    }

    fn record(&self) -> WarpRecord {
        WarpRecord::Translation { t: self.t }
    }
}

/// Pure camera rotation seen through intrinsics `K`: `pi(K R K^-1 x)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationWarp {
    r: Matrix3<f64>,
    k: Intrinsics,
}

impl RotationWarp {
    /// Re-orthonormalizes `r` on the way in.
    pub fn new(r: Matrix3<f64>, k: Intrinsics) -> Self {
        Self {
            r: orthonormalize(&r),
            k,
        }
    }

    pub fn identity(k: Intrinsics) -> Self {
        Self {
            r: Matrix3::identity(),
            k,
        }
    }

    pub fn from_axis_angle(omega: Vector3<f64>, k: Intrinsics) -> Self {
        Self { r: so3_exp(&omega), k }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.r
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.k
    }

    pub fn axis_angle(&self) -> Vector3<f64> {
        so3_log(&self.r)
    }

    pub fn with_rotation(&self, r: Matrix3<f64>) -> Self {
        Self::new(r, self.k)
    }
}

impl Warp for RotationWarp {
    const DOF: usize = 3;

    fn homography(&self) -> Matrix3<f64> {
        self.k.matrix() * self.r * self.k.inverse_matrix()
    }

    fn warp_point(&self, x: [f64; 2]) -> Result<[f64; 2], WarpError> {
        let ray = self.r * self.k.unproject(x);
        self.k.project(&ray).ok_or(WarpError::BehindCamera { x: x[0], y: x[1] })
    }

    fn jacobian_at_zero(&self, x: [f64; 2]) -> Result<WarpJacobian, WarpError> {
        // q(omega) = K R exp(omega^) y,  dq/domega at 0 = -K R [y]x
        let y = self.k.unproject(x);
        let q = self.k.matrix() * (self.r * y);
        if q.z <= MIN_DEPTH {
            return Err(WarpError::BehindCamera { x: x[0], y: x[1] });
        }
        let dq = -(self.k.matrix() * self.r * skew(&y));
        let iz = 1.0 / q.z;
        let dpi = Matrix2x3::new(iz, 0.0, -q.x * iz * iz, 0.0, iz, -q.y * iz * iz);
        let j = dpi * dq;
        Ok([[j[(0, 0)], j[(0, 1)], j[(0, 2)]], [j[(1, 0)], j[(1, 1)], j[(1, 2)]]])
    }

    fn compose_with_inverse_update(&mut self, delta: &[f64]) {
        let d = so3_exp(&Vector3::new(delta[0], delta[1], delta[2]));
        self.r = orthonormalize(&(self.r * d.transpose()));
    }

    fn at_scale(&self, scale: f64) -> Self {
        Self {
            r: self.r,
            k: self.k.scaled_to(scale),
        }
    }

    fn adopt_from_scale(&mut self, local: &Self, _scale: f64) {
        self.r = local.r;
    }

    fn identity_like(&self) -> Self {
        Self::identity(self.k)
    }

    fn with_params(&self, p: &[f64]) -> Self {
        Self::from_axis_angle(Vector3::new(p[0], p[1], p[2]), self.k)
    }

    fn params(&self) -> Vec<f64> {
        let w = self.axis_angle();
        vec![w.x, w.y, w.z]
    }

    fn record(&self) -> WarpRecord {
        let w = self.axis_angle();
        let m = &self.r;
        WarpRecord::Rotation {
            axis_angle: [w.x, w.y, w.z],
            matrix: [
                m[(0, 0)],
                m[(0, 1)],
                m[(0, 2)],
                m[(1, 0)],
                m[(1, 1)],
                m[(1, 2)],
                m[(2, 0)],
                m[(2, 1)],
                m[(2, 2)],
            ],
            intrinsics: self.k,
        }
    }
}
