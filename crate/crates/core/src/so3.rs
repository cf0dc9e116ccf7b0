//! Rotation utilities: the SO(3) exponential map, quaternion <-> matrix
//! conversion, and the matching vector-Jacobian products.
//!
//! Quaternions are stored `[w, x, y, z]`.

use crate::error::{Error, Result};
use crate::math::{skew, Mat3, Vec3};

pub type Quat = [f64; 4];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

/// Below this angle the Rodrigues coefficients are evaluated by series.
const SERIES_ANGLE: f64 = 1e-2;

/// Coefficients `(A, B)` of `R = I + A K + B K^2` with `A = sin t / t` and
/// `B = (1 - cos t) / t^2`.
fn rodrigues_coeffs(theta: f64) -> (f64, f64) {
    if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
        )
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
    }
}

/// `(A'(t)/t, B'(t)/t)`, the radial derivatives of the Rodrigues coefficients.
fn rodrigues_coeff_derivs(theta: f64) -> (f64, f64) {
    if theta < SERIES_ANGLE {
        let t2 = theta * theta;
        (
            -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0,
            -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t3 = theta * theta * theta;
        (
            (theta * c - s) / t3,
            (theta * s - 2.0 * (1.0 - c)) / (t3 * theta),
        )
    }
}

/// Rodrigues' formula. Tiny angles fall through the series branch, so
/// `|w| < 1e-12` yields the identity to machine precision.
pub fn exp_map_so3(omega: &Vec3) -> Mat3 {
    let theta = omega.norm();
    let (a, b) = rodrigues_coeffs(theta);
    let k = skew(omega);
    Mat3::identity() + k * a + k * k * b
}

/// Backward of [`exp_map_so3`]: maps `dL/dR` to `dL/dw`.
pub fn exp_map_so3_vjp(omega: &Vec3, grad_r: &Mat3) -> Vec3 {
    let theta = omega.norm();
    let (a, b) = rodrigues_coeffs(theta);
    let (a1, b1) = rodrigues_coeff_derivs(theta);
    let k = skew(omega);
    let k2 = k * k;
    let mut out = Vec3::zeros();
    for i in 0..3 {
        let e = skew(&Vec3::ith(i, 1.0));
        let d = k * (a1 * omega[i]) + e * a + k2 * (b1 * omega[i]) + (e * k + k * e) * b;
        out[i] = grad_r.component_mul(&d).sum();
    }
    out
}

/// Logarithm of a rotation matrix (inverse of [`exp_map_so3`] for angles < pi).
pub fn log_map_so3(r: &Mat3) -> Vec3 {
    let q = quat_from_rotation_unchecked(r);
    let v = Vec3::new(q[1], q[2], q[3]);
    let s = v.norm();
    if s < 1e-12 {
        return v * 2.0;
    }
    let angle = 2.0 * s.atan2(q[0]);
    v * (angle / s)
}

pub fn quat_norm(q: &Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn quat_normalize(q: &Quat) -> Quat {
    let n = quat_norm(q);
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Rotation matrix of a unit quaternion.
pub fn unit_quat_to_rotation(q: &Quat) -> Mat3 {
    let [w, x, y, z] = *q;
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Rotation matrix of an arbitrary nonzero quaternion (normalized first).
pub fn quat_to_rotation(q: &Quat) -> Mat3 {
    unit_quat_to_rotation(&quat_normalize(q))
}

/// Backward of [`quat_to_rotation`], including the normalization.
pub fn quat_to_rotation_vjp(q: &Quat, g: &Mat3) -> Quat {
    let n = quat_norm(q);
    let [w, x, y, z] = quat_normalize(q);
    let dw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
        + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let dq = [dw, dx, dy, dz];
    let qh = [w, x, y, z];
    let dot: f64 = (0..4).map(|i| qh[i] * dq[i]).sum();
    [
        (dq[0] - qh[0] * dot) / n,
        (dq[1] - qh[1] * dot) / n,
        (dq[2] - qh[2] * dot) / n,
        (dq[3] - qh[3] * dot) / n,
    ]
}

fn quat_from_rotation_unchecked(r: &Mat3) -> Quat {
    // Shepperd: branch on the largest diagonal combination.
    let tr = r.trace();
    let q = if tr > r[(0, 0)] && tr > r[(1, 1)] && tr > r[(2, 2)] {
        let s = (1.0 + tr).sqrt() * 2.0;
        [
            0.25 * s,
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        ]
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        [
            (r[(2, 1)] - r[(1, 2)]) / s,
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        ]
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        [
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        [
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    let q = quat_normalize(&q);
    if q[0] < 0.0 {
        [-q[0], -q[1], -q[2], -q[3]]
    } else {
        q
    }
}

/// Unit quaternion of a proper rotation matrix, canonicalized to `w >= 0`.
pub fn rotation_to_quat(r: &Mat3) -> Result<Quat> {
    if r.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("rotation matrix has non-finite entries"));
    }
    let det = r.determinant();
    if det < 0.0 {
        return Err(Error::invalid(format!(
            "rotation matrix has negative determinant {det}"
        )));
    }
    Ok(quat_from_rotation_unchecked(r))
}

/// Hamilton product `a * b`.
pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}
