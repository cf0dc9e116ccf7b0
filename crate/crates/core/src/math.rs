//! Small linear-algebra helpers shared by the forward and backward passes.
//!
//! Gradients of matrix-valued quantities are always carried as full 3x3 (or
//! 2x2) matrices `G` with `dL = sum_ij G_ij dM_ij`, even when `M` is symmetric.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat2 = Matrix2<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat2x3 = Matrix2x3<f64>;

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Backward of `y = x / |x|` given `y` and `|x|`.
pub fn normalize_vjp(y: &Vec3, norm: f64, dy: &Vec3) -> Vec3 {
    (dy - y * y.dot(dy)) / norm
}

/// Backward of `c = a x b`; returns `(da, db)`.
pub fn cross_vjp(a: &Vec3, b: &Vec3, dc: &Vec3) -> (Vec3, Vec3) {
    (b.cross(dc), dc.cross(a))
}

pub fn is_finite3(v: &Vec3) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn max_abs(m: &Mat3) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Symmetric part, used when a consumer only sees the symmetric component.
pub fn sym(m: &Mat3) -> Mat3 {
    (m + m.transpose()) * 0.5
}

/// Clamp `x` to the ball of radius `max`; returns the clamped vector and the
/// scale applied (1 when inside).
pub fn clamp_norm(x: &Vec3, max: f64) -> Vec3 {
    let n = x.norm();
    if n > max {
        x * (max / n)
    } else {
        *x
    }
}

/// Backward of [`clamp_norm`] evaluated at the unclamped input `x`.
pub fn clamp_norm_vjp(x: &Vec3, max: f64, dy: &Vec3) -> Vec3 {
    let n = x.norm();
    if n > max {
        let xh = x / n;
        (dy - xh * xh.dot(dy)) * (max / n)
    } else {
        *dy
    }
}
