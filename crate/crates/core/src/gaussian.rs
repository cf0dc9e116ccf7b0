//! Gaussian primitives, covariance algebra, pinhole/EWA projection and
//! front-to-back alpha compositing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{is_finite3, sigmoid, Mat2, Mat2x3, Mat3, Vec2, Vec3};
use crate::so3::{quat_to_rotation, Quat};

/// Added to the diagonal of every projected 2D covariance (pixels^2).
pub const COV2D_DILATION: f64 = 0.3;
/// Compositing stops once accumulated transmittance falls below this.
pub const TRANSMITTANCE_CUTOFF: f64 = 1e-4;
/// Per-pixel opacity ceiling.
pub const MAX_ALPHA: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub position: Vec3,
    /// `[w, x, y, z]`, renormalized after every optimizer step.
    pub rotation: Quat,
    /// Unconstrained scale parameter; see [`crate::lod::effective_scale`].
    pub log_scale_opt: Vec3,
    pub opacity_logit: f64,
    pub color: Vec3,
    /// Level-of-detail index, starting at 1.
    pub level: u32,
    pub accumulated_importance: f64,
    pub dynamic: bool,
}

impl Gaussian {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }
}

/// Symmetric 3x3 matrix stored by its six unique entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Covariance3 {
    pub xx: f64,
    pub xy: f64,
    pub xz: f64,
    pub yy: f64,
    pub yz: f64,
    pub zz: f64,
}

impl Covariance3 {
    /// Takes the symmetric part of `m`.
    pub fn from_matrix(m: &Mat3) -> Self {
        Covariance3 {
            xx: m[(0, 0)],
            xy: 0.5 * (m[(0, 1)] + m[(1, 0)]),
            xz: 0.5 * (m[(0, 2)] + m[(2, 0)]),
            yy: m[(1, 1)],
            yz: 0.5 * (m[(1, 2)] + m[(2, 1)]),
            zz: m[(2, 2)],
        }
    }

    pub fn to_matrix(&self) -> Mat3 {
        Mat3::new(
            self.xx, self.xy, self.xz, self.xy, self.yy, self.yz, self.xz, self.yz, self.zz,
        )
    }

    pub fn identity() -> Self {
        Self::from_matrix(&Mat3::identity())
    }

    pub fn trace(&self) -> f64 {
        self.xx + self.yy + self.zz
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.to_matrix().symmetric_eigenvalues().min()
    }
}

/// `R diag(s)^2 R^T` for a rotation matrix.
pub fn rs_covariance(r: &Mat3, scale: &Vec3) -> Mat3 {
    let d = Mat3::from_diagonal(&scale.component_mul(scale));
    r * d * r.transpose()
}

/// Backward of [`rs_covariance`]; returns `(dR, ds)`.
pub fn rs_covariance_vjp(r: &Mat3, scale: &Vec3, g: &Mat3) -> (Mat3, Vec3) {
    let d = Mat3::from_diagonal(&scale.component_mul(scale));
    let gs = g + g.transpose();
    let dr = gs * r * d;
    let inner = r.transpose() * g * r;
    let ds = Vec3::new(
        2.0 * scale.x * inner[(0, 0)],
        2.0 * scale.y * inner[(1, 1)],
        2.0 * scale.z * inner[(2, 2)],
    );
    (dr, ds)
}

pub fn covariance_from_rs(rotation: &Quat, scale: &Vec3) -> Result<Covariance3> {
    if rotation.iter().any(|x| !x.is_finite()) || !is_finite3(scale) {
        return Err(Error::invalid("covariance_from_rs: non-finite input"));
    }
    if scale.iter().any(|&s| s <= 0.0) {
        return Err(Error::invalid(format!(
            "covariance_from_rs: scale must be positive, got {scale:?}"
        )));
    }
    Ok(Covariance3::from_matrix(&rs_covariance(
        &quat_to_rotation(rotation),
        scale,
    )))
}

/// Pinhole camera, OpenCV convention (x right, y down, z forward). Pixel
/// `(i, j)` covers `[i, i+1) x [j, j+1)`, so its center is `(i+0.5, j+0.5)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    /// World-to-camera rotation.
    pub rotation: Mat3,
    /// World-to-camera translation.
    pub translation: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub near: f64,
}

impl Camera {
    pub fn new(
        rotation: Mat3,
        translation: Vec3,
        focal: (f64, f64),
        principal: (f64, f64),
        size: (u32, u32),
        near: f64,
    ) -> Result<Self> {
        let cam = Camera {
            rotation,
            translation,
            fx: focal.0,
            fy: focal.1,
            cx: principal.0,
            cy: principal.1,
            width: size.0,
            height: size.1,
            near,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking along +z of the world with no rotation.
    pub fn axis_aligned(eye: Vec3, focal: f64, width: u32, height: u32) -> Self {
        Camera {
            rotation: Mat3::identity(),
            translation: -eye,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            near: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rtr = self.rotation.transpose() * self.rotation;
        if crate::math::max_abs(&(rtr - Mat3::identity())) > 1e-6
            || (self.rotation.determinant() - 1.0).abs() > 1e-6
        {
            return Err(Error::invalid("camera rotation is not a proper rotation"));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("camera focal lengths must be positive"));
        }
        if !(self.near > 0.0) {
            return Err(Error::invalid("camera near plane must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera image size must be nonzero"));
        }
        Ok(())
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub mean2d: Vec2,
    /// Includes [`COV2D_DILATION`].
    pub cov2d: Mat2,
    pub depth: f64,
    pub cam_pos: Vec3,
    /// `J W`, the linearized world-to-image map at the mean.
    pub jw: Mat2x3,
}

/// EWA projection of a 3D Gaussian. `None` means culled by the near plane.
pub fn project_gaussian(cov: &Mat3, position: &Vec3, cam: &Camera) -> Option<Projection> {
    let pc = cam.to_camera(position);
    if !(pc.z >= cam.near) {
        return None;
    }
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let j = Mat2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * x / (z * z),
        0.0,
        cam.fy / z,
        -cam.fy * y / (z * z),
    );
    let jw = j * cam.rotation;
    let cov2d = jw * cov * jw.transpose() + Mat2::identity() * COV2D_DILATION;
    Some(Projection {
        mean2d: Vec2::new(cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy),
        cov2d,
        depth: z,
        cam_pos: pc,
        jw,
    })
}

/// Backward of [`project_gaussian`]. Takes upstream gradients on the 2D mean
/// and the full 2x2 covariance; returns `(dSigma3, dPosition)`.
pub fn project_gaussian_vjp(
    cov: &Mat3,
    proj: &Projection,
    cam: &Camera,
    d_mean: &Vec2,
    d_cov2d: &Mat2,
) -> (Mat3, Vec3) {
    let jw = &proj.jw;
    let d_cov3 = jw.transpose() * d_cov2d * jw;
    let d_jw = d_cov2d * jw * cov.transpose() + d_cov2d.transpose() * jw * cov;
    let d_j = d_jw * cam.rotation.transpose();
    let (x, y, z) = (proj.cam_pos.x, proj.cam_pos.y, proj.cam_pos.z);
    let (fx, fy) = (cam.fx, cam.fy);
    let z2 = z * z;
    let z3 = z2 * z;
    let mut dpc = Vec3::zeros();
    dpc.z += d_j[(0, 0)] * (-fx / z2);
    dpc.x += d_j[(0, 2)] * (-fx / z2);
    dpc.z += d_j[(0, 2)] * (2.0 * fx * x / z3);
    dpc.z += d_j[(1, 1)] * (-fy / z2);
    dpc.y += d_j[(1, 2)] * (-fy / z2);
    dpc.z += d_j[(1, 2)] * (2.0 * fy * y / z3);
    dpc.x += d_mean.x * fx / z;
    dpc.z += d_mean.x * (-fx * x / z2);
    dpc.y += d_mean.y * fy / z;
    dpc.z += d_mean.y * (-fy * y / z2);
    (d_cov3, cam.rotation.transpose() * dpc)
}

/// Front-to-back compositing of depth-sorted `(color, alpha)` splats over
/// `background`. Returns the color and the final transmittance.
pub fn alpha_blend(splats: &[(Vec3, f64)], background: &Vec3) -> (Vec3, f64) {
    let mut out = Vec3::zeros();
    let mut t = 1.0;
    for (c, a) in splats {
        out += c * (a * t);
        t *= 1.0 - a;
        if t < TRANSMITTANCE_CUTOFF {
            break;
        }
    }
    (out + background * t, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::max_abs;
    use crate::so3::{exp_map_so3, rotation_to_quat, IDENTITY_QUAT};
    use proptest::prelude::*;

    #[test]
    fn covariance_examples() {
        let c = covariance_from_rs(&IDENTITY_QUAT, &Vec3::new(1.0, 1.0, 1.0)).unwrap();
        assert_eq!(c.to_matrix(), Mat3::identity());
        let c = covariance_from_rs(&IDENTITY_QUAT, &Vec3::new(2.0, 1.0, 1.0)).unwrap();
        assert_eq!(c.to_matrix(), Mat3::from_diagonal(&Vec3::new(4.0, 1.0, 1.0)));
        let qz = rotation_to_quat(&exp_map_so3(&Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2)))
            .unwrap();
        let c = covariance_from_rs(&qz, &Vec3::new(2.0, 1.0, 1.0)).unwrap();
        let expected = Mat3::from_diagonal(&Vec3::new(1.0, 4.0, 1.0));
        assert!(max_abs(&(c.to_matrix() - expected)) < 1e-12);
    }

    #[test]
    fn covariance_rejects_bad_input() {
        assert!(covariance_from_rs(&IDENTITY_QUAT, &Vec3::new(f64::NAN, 1.0, 1.0)).is_err());
        assert!(covariance_from_rs(&[f64::INFINITY, 0.0, 0.0, 0.0], &Vec3::repeat(1.0)).is_err());
        assert!(covariance_from_rs(&IDENTITY_QUAT, &Vec3::new(0.0, 1.0, 1.0)).is_err());
    }

    #[test]
    fn on_axis_projection() {
        let cam = Camera::axis_aligned(Vec3::zeros(), 100.0, 64, 64);
        let p = project_gaussian(&Mat3::identity(), &Vec3::new(0.0, 0.0, 2.0), &cam).unwrap();
        assert_eq!(p.mean2d, Vec2::new(32.0, 32.0));
        // sigma = 0.1 at depth 4, f = 200 -> (f sigma / d)^2 = 25
        let cam = Camera::axis_aligned(Vec3::zeros(), 200.0, 64, 64);
        let p = project_gaussian(&(Mat3::identity() * 0.01), &Vec3::new(0.0, 0.0, 4.0), &cam)
            .unwrap();
        let expected = Mat2::identity() * (25.0 + COV2D_DILATION);
        assert!((p.cov2d - expected).abs().max() < 1e-12);
    }

    #[test]
    fn behind_near_plane_is_culled() {
        let cam = Camera::axis_aligned(Vec3::zeros(), 100.0, 64, 64);
        assert!(project_gaussian(&Mat3::identity(), &Vec3::new(0.0, 0.0, 0.001), &cam).is_none());
        assert!(project_gaussian(&Mat3::identity(), &Vec3::new(0.0, 0.0, -3.0), &cam).is_none());
    }

    #[test]
    fn projection_vjp_matches_central_differences() {
        let r = exp_map_so3(&Vec3::new(0.2, -0.1, 0.3));
        let cam = Camera::new(
            r,
            Vec3::new(0.1, -0.2, 3.0),
            (80.0, 90.0),
            (30.0, 34.0),
            (64, 64),
            0.01,
        )
        .unwrap();
        let cov = rs_covariance(&exp_map_so3(&Vec3::new(-0.4, 0.5, 0.1)), &Vec3::new(0.3, 0.1, 0.2));
        let pos = Vec3::new(0.3, -0.2, 0.5);
        let dm = Vec2::new(0.7, -0.3);
        let dc = Mat2::new(0.4, -0.2, 0.1, 0.9);
        let loss = |cov: &Mat3, pos: &Vec3| {
            let p = project_gaussian(cov, pos, &cam).unwrap();
            p.mean2d.dot(&dm) + p.cov2d.component_mul(&dc).sum()
        };
        let proj = project_gaussian(&cov, &pos, &cam).unwrap();
        let (dcov, dpos) = project_gaussian_vjp(&cov, &proj, &cam, &dm, &dc);
        let h = 1e-6;
        for k in 0..3 {
            let mut pp = pos;
            let mut pm = pos;
            pp[k] += h;
            pm[k] -= h;
            let fd = (loss(&cov, &pp) - loss(&cov, &pm)) / (2.0 * h);
            assert!((fd - dpos[k]).abs() < 1e-5 * fd.abs().max(1.0), "{fd} {}", dpos[k]);
        }
        for i in 0..3 {
            for j in 0..3 {
                let mut cp = cov;
                let mut cm = cov;
                cp[(i, j)] += h;
                cm[(i, j)] -= h;
                let fd = (loss(&cp, &pos) - loss(&cm, &pos)) / (2.0 * h);
                assert!((fd - dcov[(i, j)]).abs() < 1e-5 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn rs_vjp_matches_central_differences() {
        let w = Vec3::new(0.3, -0.7, 0.2);
        let s = Vec3::new(0.5, 1.3, 0.8);
        let g = Mat3::new(0.1, 0.4, -0.3, 0.2, -0.5, 0.6, 0.9, 0.05, -0.2);
        let f = |w: &Vec3, s: &Vec3| rs_covariance(&exp_map_so3(w), s).component_mul(&g).sum();
        let (dr, ds) = rs_covariance_vjp(&exp_map_so3(&w), &s, &g);
        let dw = crate::so3::exp_map_so3_vjp(&w, &dr);
        let h = 1e-6;
        for k in 0..3 {
            let mut sp = s;
            let mut sm = s;
            sp[k] += h;
            sm[k] -= h;
            assert!(((f(&w, &sp) - f(&w, &sm)) / (2.0 * h) - ds[k]).abs() < 1e-7);
            let mut wp = w;
            let mut wm = w;
            wp[k] += h;
            wm[k] -= h;
            assert!(((f(&wp, &s) - f(&wm, &s)) / (2.0 * h) - dw[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn blend_examples() {
        let c = Vec3::new(0.2, 0.5, 0.9);
        let bg = Vec3::zeros();
        let (out, _) = alpha_blend(&[(c, 1.0 - 1e-9)], &bg);
        assert!((out - c).norm() < 1e-8);
        let c1 = Vec3::new(1.0, 0.0, 0.0);
        let c2 = Vec3::new(0.0, 1.0, 0.0);
        let (out, t) = alpha_blend(&[(c1, 0.5), (c2, 0.5)], &bg);
        assert!((out - (c1 * 0.5 + c2 * 0.25)).norm() < 1e-15);
        assert_eq!(t, 0.25);
        let bg = Vec3::new(0.1, 0.2, 0.3);
        assert_eq!(alpha_blend(&[], &bg).0, bg);
    }

    #[test]
    fn camera_roll_equivariance() {
        let theta: f64 = 0.7;
        let roll = exp_map_so3(&Vec3::new(0.0, 0.0, theta));
        let cam = Camera::axis_aligned(Vec3::new(0.0, 0.0, -3.0), 120.0, 64, 64);
        let mut rolled = cam.clone();
        rolled.rotation = roll * cam.rotation;
        rolled.translation = roll * cam.translation;
        let cov = rs_covariance(&exp_map_so3(&Vec3::new(0.3, 0.2, -0.5)), &Vec3::new(0.2, 0.05, 0.1));
        let pos = Vec3::new(0.4, -0.3, 0.6);
        let a = project_gaussian(&cov, &pos, &cam).unwrap();
        let b = project_gaussian(&cov, &pos, &rolled).unwrap();
        let r2 = Mat2::new(theta.cos(), -theta.sin(), theta.sin(), theta.cos());
        let pp = Vec2::new(cam.cx, cam.cy);
        assert!((b.mean2d - (pp + r2 * (a.mean2d - pp))).norm() < 1e-6);
        assert!((b.cov2d - r2 * a.cov2d * r2.transpose()).abs().max() < 1e-6);
    }

    proptest! {
        #[test]
        fn covariance_is_spd(
            w in prop::array::uniform3(-3.0f64..3.0),
            s in prop::array::uniform3(1e-6f64..10.0),
        ) {
            let q = rotation_to_quat(&exp_map_so3(&Vec3::from(w))).unwrap();
            let c = covariance_from_rs(&q, &Vec3::from(s)).unwrap();
            let m = c.to_matrix();
            prop_assert_eq!(m, m.transpose());
            prop_assert!(c.min_eigenvalue() > 0.0);
        }

        #[test]
        fn blend_stays_in_unit_range(
            splats in prop::collection::vec(
                (prop::array::uniform3(0.0f64..=1.0), 0.0f64..0.999), 0..20),
            bg in prop::array::uniform3(0.0f64..=1.0),
        ) {
            let s: Vec<(Vec3, f64)> = splats.iter().map(|(c, a)| (Vec3::from(*c), *a)).collect();
            let (out, _) = alpha_blend(&s, &Vec3::from(bg));
            for v in out.iter() {
                prop_assert!(*v >= 0.0 && *v <= 1.0 + 1e-9);
            }
        }

        #[test]
        fn equal_splats_are_order_free(a in 0.0f64..0.99, n in 1usize..8) {
            let c = Vec3::new(0.3, 0.6, 0.1);
            let s = vec![(c, a); n];
            let mut r = s.clone();
            r.reverse();
            prop_assert_eq!(alpha_blend(&s, &Vec3::zeros()).0, alpha_blend(&r, &Vec3::zeros()).0);
        }
    }
}
