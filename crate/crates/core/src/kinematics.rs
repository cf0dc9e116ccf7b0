//! Motion-aligned kinematic frames and kinematics-guided covariance
//! refinement.
//!
//! A dynamic Gaussian with velocity `v` gets a right-handed frame whose third
//! axis follows `v`. Its predicted covariance is read out along that frame,
//! the along-motion extent is stretched by the distance travelled during the
//! blur interval, and the covariance is rebuilt from the stretched scales and
//! the frame composed with a small residual rotation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{rs_covariance, rs_covariance_vjp, Covariance3};
use crate::math::{cross_vjp, is_finite3, normalize_vjp, sigmoid, Mat3, Vec3};
use crate::so3::{exp_map_so3, exp_map_so3_vjp, rotation_to_quat, Quat};

/// Below this speed (world units per time unit) refinement is skipped.
pub const VELOCITY_FLOOR: f64 = 1e-6;
/// Division guard for the basis normalizations.
pub const BASIS_EPS: f64 = 1e-8;
/// `sigmoid(-2.1972) ~= 0.1`.
pub const DEFAULT_KAPPA: f64 = -2.1972;
pub const DEFAULT_LAMBDA_S: f64 = 0.1;
/// Above this `|u_z . x|` the reference direction switches to +y.
pub const COLINEAR_THRESHOLD: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RefBranch {
    /// Reference direction `(1, 0, 0)`.
    X,
    /// Reference direction `(0, 1, 0)`, used when motion is nearly along x.
    Y,
}

impl RefBranch {
    pub fn direction(self) -> Vec3 {
        match self {
            RefBranch::X => Vec3::x(),
            RefBranch::Y => Vec3::y(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinematicBasis {
    pub u_x: Vec3,
    pub u_y: Vec3,
    pub u_z: Vec3,
    pub branch: RefBranch,
    /// `|v|` actually used (1 for the degenerate fallback).
    speed: f64,
    cross_norm: f64,
}

impl KinematicBasis {
    /// `[u_x | u_y | u_z]`.
    pub fn matrix(&self) -> Mat3 {
        Mat3::from_columns(&[self.u_x, self.u_y, self.u_z])
    }

    pub fn axis(&self, k: usize) -> Vec3 {
        match k {
            0 => self.u_x,
            1 => self.u_y,
            _ => self.u_z,
        }
    }
}

pub fn kinematic_basis(v: &Vec3) -> Result<KinematicBasis> {
    if !is_finite3(v) {
        return Err(Error::invalid("kinematic_basis: non-finite velocity"));
    }
    let speed = v.norm();
    let (dir, speed) = if speed < VELOCITY_FLOOR {
        (Vec3::z(), 1.0)
    } else {
        (*v, speed)
    };
    let u_z = dir / speed.max(BASIS_EPS);
    let branch = if u_z.x.abs() > COLINEAR_THRESHOLD {
        RefBranch::Y
    } else {
        RefBranch::X
    };
    let c = u_z.cross(&branch.direction());
    let cross_norm = c.norm();
    let u_x = c / cross_norm.max(BASIS_EPS);
    let u_y = u_z.cross(&u_x);
    Ok(KinematicBasis {
        u_x,
        u_y,
        u_z,
        branch,
        speed,
        cross_norm,
    })
}

/// Backward of [`kinematic_basis`] with the reference branch held fixed.
/// Takes gradients on the three axes and returns `dL/dv`. Zero for the
/// degenerate fallback frame.
pub fn kinematic_basis_vjp(v: &Vec3, basis: &KinematicBasis, d_axes: &[Vec3; 3]) -> Vec3 {
    if v.norm() < VELOCITY_FLOOR {
        return Vec3::zeros();
    }
    let (mut du_x, du_y, mut du_z) = (d_axes[0], d_axes[1], d_axes[2]);
    let (a, b) = cross_vjp(&basis.u_z, &basis.u_x, &du_y);
    du_z += a;
    du_x += b;
    let dc = normalize_vjp(&basis.u_x, basis.cross_norm, &du_x);
    du_z += cross_vjp(&basis.u_z, &basis.branch.direction(), &dc).0;
    normalize_vjp(&basis.u_z, basis.speed, &du_z)
}

/// Variances `u_k^T Sigma u_k` of the covariance along each frame axis.
pub fn project_variances(cov: &Covariance3, basis: &KinematicBasis) -> Vec3 {
    let m = cov.to_matrix();
    Vec3::from_fn(|k, _| {
        let u = basis.axis(k);
        u.dot(&(m * u))
    })
}

/// `max(|r_z . u_z|, sigmoid(kappa))`.
pub fn alignment_factor(r_z: &Vec3, u_z: &Vec3, kappa: f64) -> f64 {
    r_z.dot(u_z).abs().max(sigmoid(kappa))
}

/// Axis scales after stretching the along-motion deviation by `eta |v| dt`.
pub fn blur_scales(sigma: &Vec3, v: &Vec3, dt: f64, eta: f64) -> Vec3 {
    Vec3::new(sigma.x, sigma.y, sigma.z + eta * v.norm() * dt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementInputs {
    /// Predicted covariance before refinement.
    pub sigma: Covariance3,
    pub velocity: Vec3,
    /// Blur interval.
    pub dt: f64,
    /// Log-scale residual.
    pub delta_s: Vec3,
    /// Axis-angle rotation residual.
    pub delta_r: Vec3,
    /// Principal axis of the predicted deformation rotation.
    pub r_z: Vec3,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedShape {
    pub sigma_kin: Covariance3,
    pub rotation: Mat3,
    pub scale: Vec3,
}

/// Every intermediate of one refinement, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct RefinementTape {
    pub basis: KinematicBasis,
    pub variances: Vec3,
    pub eta: f64,
    /// True when `eta` came from `|r_z . u_z|` rather than the floor.
    pub eta_from_alignment: bool,
    pub blurred: Vec3,
    pub scale: Vec3,
    pub residual_rotation: Mat3,
    pub rotation: Mat3,
    pub sigma_kin: Mat3,
}

/// Gradients of a refinement with respect to its inputs.
#[derive(Debug, Clone, Default)]
pub struct RefinementGrads {
    pub sigma: Mat3,
    pub velocity: Vec3,
    pub delta_s: Vec3,
    pub delta_r: Vec3,
    pub r_z: Vec3,
}

/// Forward refinement on raw matrices; the renderer's entry point.
#[allow(clippy::too_many_arguments)]
pub fn refine_forward(
    sigma: &Mat3,
    velocity: &Vec3,
    dt: f64,
    delta_s: &Vec3,
    delta_r: &Vec3,
    r_z: &Vec3,
    kappa: f64,
    lambda_s: f64,
) -> Result<RefinementTape> {
    let basis = kinematic_basis(velocity)?;
    let variances = Vec3::from_fn(|k, _| {
        let u = basis.axis(k);
        u.dot(&(sigma * u))
    });
    if variances.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::numerical(
            "variances",
            format!("non-positive projected variance {variances:?}"),
        ));
    }
    let sd = variances.map(f64::sqrt);
    let dot = r_z.dot(&basis.u_z);
    let floor = sigmoid(kappa);
    let eta_from_alignment = dot.abs() > floor;
    let eta = if eta_from_alignment { dot.abs() } else { floor };
    let blurred = blur_scales(&sd, velocity, dt, eta);
    let log_scale = blurred.map(f64::ln) + delta_s * lambda_s;
    let scale = log_scale.map(f64::exp);
    if !is_finite3(&scale) || scale.iter().any(|&s| s <= 0.0) {
        return Err(Error::numerical(
            "scale",
            format!("refined scale not finite/positive: {scale:?}"),
        ));
    }
    let residual_rotation = exp_map_so3(delta_r);
    let rotation = basis.matrix() * residual_rotation;
    let sigma_kin = rs_covariance(&rotation, &scale);
    if sigma_kin.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical("sigma_kin", "non-finite covariance"));
    }
    Ok(RefinementTape {
        basis,
        variances,
        eta,
        eta_from_alignment,
        blurred,
        scale,
        residual_rotation,
        rotation,
        sigma_kin,
    })
}

/// Backward of [`refine_forward`] given `dL/dSigma_kin`.
#[allow(clippy::too_many_arguments)]
pub fn refine_backward(
    tape: &RefinementTape,
    sigma: &Mat3,
    velocity: &Vec3,
    dt: f64,
    delta_r: &Vec3,
    r_z: &Vec3,
    lambda_s: f64,
    grad: &Mat3,
) -> RefinementGrads {
    let (d_rot, d_scale) = rs_covariance_vjp(&tape.rotation, &tape.scale, grad);
    let d_log = d_scale.component_mul(&tape.scale);
    let delta_s = d_log * lambda_s;
    let d_blurred = d_log.component_div(&tape.blurred);

    let d_basis = d_rot * tape.residual_rotation.transpose();
    let d_resid = tape.basis.matrix().transpose() * d_rot;
    let delta_r = exp_map_so3_vjp(delta_r, &d_resid);

    let speed = velocity.norm();
    let d_len = d_blurred.z;
    let d_eta = d_len * speed * dt;
    let mut d_velocity = Vec3::zeros();
    if speed > 0.0 {
        d_velocity += velocity * (d_len * tape.eta * dt / speed);
    }

    let mut d_axes = [
        d_basis.column(0).into_owned(),
        d_basis.column(1).into_owned(),
        d_basis.column(2).into_owned(),
    ];
    let mut d_rz = Vec3::zeros();
    if tape.eta_from_alignment {
        let dot = r_z.dot(&tape.basis.u_z);
        let d_dot = d_eta * dot.signum();
        d_rz += tape.basis.u_z * d_dot;
        d_axes[2] += r_z * d_dot;
    }

    let mut d_sigma = Mat3::zeros();
    let sym = sigma + sigma.transpose();
    for k in 0..3 {
        let u = tape.basis.axis(k);
        let d_var = d_blurred[k] / (2.0 * tape.variances[k].sqrt());
        d_sigma += u * u.transpose() * d_var;
        d_axes[k] += sym * u * d_var;
    }
    d_velocity += kinematic_basis_vjp(velocity, &tape.basis, &d_axes);

    RefinementGrads {
        sigma: d_sigma,
        velocity: d_velocity,
        delta_s,
        delta_r,
        r_z: d_rz,
    }
}

pub fn refine_covariance(inputs: &RefinementInputs, lambda_s: f64) -> Result<RefinedShape> {
    let speed = inputs.velocity.norm();
    if !speed.is_finite() {
        return Err(Error::numerical("velocity", "non-finite velocity"));
    }
    if speed < VELOCITY_FLOOR {
        return Err(Error::invalid(format!(
            "refine_covariance: speed {speed} below floor {VELOCITY_FLOOR}"
        )));
    }
    if !(inputs.dt > 0.0) {
        return Err(Error::invalid("refine_covariance: dt must be positive"));
    }
    for (name, v) in [
        ("delta_s", &inputs.delta_s),
        ("delta_r", &inputs.delta_r),
        ("r_z", &inputs.r_z),
    ] {
        if !is_finite3(v) {
            return Err(Error::numerical(name, "non-finite input"));
        }
    }
    let tape = refine_forward(
        &inputs.sigma.to_matrix(),
        &inputs.velocity,
        inputs.dt,
        &inputs.delta_s,
        &inputs.delta_r,
        &inputs.r_z,
        inputs.kappa,
        lambda_s,
    )?;
    Ok(RefinedShape {
        sigma_kin: Covariance3::from_matrix(&tape.sigma_kin),
        rotation: tape.rotation,
        scale: tape.scale,
    })
}

pub fn refined_rotation_quaternion(r: &Mat3) -> Result<Quat> {
    rotation_to_quat(r)
}
