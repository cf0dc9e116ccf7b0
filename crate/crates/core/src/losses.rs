//! Training objective terms and image-quality metrics.
//!
//! Every loss here comes with its gradient so the renderer's backward pass can
//! chain through it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::Vec3;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_dssim: f64,
    pub lambda_reg: f64,
    pub lambda_ani: f64,
    pub eps_ani: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_dssim: 0.2,
            lambda_reg: 0.01,
            lambda_ani: 0.001,
            eps_ani: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_dssim, self.lambda_reg, self.lambda_ani]
            .iter()
            .any(|w| !(*w >= 0.0))
            || !(self.eps_ani > 0.0)
        {
            return Err(Error::Config(
                "loss weights must be >= 0 and eps_ani > 0".into(),
            ));
        }
        Ok(())
    }
}

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::invalid(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Separable Gaussian window renormalized at the borders, so each output is a
/// proper weighted average of the in-bounds pixels.
struct Window {
    taps: Vec<f64>,
}

impl Window {
    fn new() -> Self {
        let r = (SSIM_WINDOW / 2) as isize;
        let taps: Vec<f64> = (-r..=r)
            .map(|d| (-(d * d) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
            .collect();
        let s: f64 = taps.iter().sum();
        Window {
            taps: taps.into_iter().map(|t| t / s).collect(),
        }
    }

    fn radius(&self) -> isize {
        (self.taps.len() / 2) as isize
    }

    /// Normalizers per output coordinate along an axis of length `n`.
    fn norms(&self, n: usize) -> Vec<f64> {
        let r = self.radius();
        (0..n as isize)
            .map(|p| {
                (-r..=r)
                    .filter(|d| (0..n as isize).contains(&(p + d)))
                    .map(|d| self.taps[(d + r) as usize])
                    .sum()
            })
            .collect()
    }

    /// 1D pass along x (`horizontal`) or y over a single-channel plane.
    /// `adjoint` applies the transpose of the normalized filter.
    fn pass(&self, src: &[f64], w: usize, h: usize, horizontal: bool, adjoint: bool) -> Vec<f64> {
        let r = self.radius();
        let n = if horizontal { w } else { h };
        let norms = self.norms(n);
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let p = if horizontal { x } else { y } as isize;
                let mut acc = 0.0;
                for d in -r..=r {
                    let q = p + d;
                    if q < 0 || q >= n as isize {
                        continue;
                    }
                    let (sx, sy) = if horizontal {
                        (q as usize, y)
                    } else {
                        (x, q as usize)
                    };
                    let tap = self.taps[(d + r) as usize];
                    // forward: out[p] = sum_q tap(q-p)/Z(p) src[q]
                    // adjoint: out[p] = sum_q tap(p-q)/Z(q) src[q]
                    let wgt = if adjoint { tap / norms[q as usize] } else { tap / norms[p as usize] };
                    acc += wgt * src[sy * w + sx];
                }
                out[y * w + x] = acc;
            }
        }
        out
    }

    fn filter(&self, src: &[f64], w: usize, h: usize) -> Vec<f64> {
        let tmp = self.pass(src, w, h, true, false);
        self.pass(&tmp, w, h, false, false)
    }

    fn filter_adjoint(&self, src: &[f64], w: usize, h: usize) -> Vec<f64> {
        let tmp = self.pass(src, w, h, false, true);
        self.pass(&tmp, w, h, true, true)
    }
}

fn channel(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(3).copied().collect()
}

/// Mean SSIM over pixels and channels, plus `dSSIM/dA` when requested.
fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let (w, h) = (a.width as usize, a.height as usize);
    let win = Window::new();
    let n = (w * h * 3) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; w * h * 3]);
    for c in 0..3 {
        let x = channel(a, c);
        let y = channel(b, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = win.filter(&x, w, h);
        let my = win.filter(&y, w, h);
        let exx = win.filter(&xx, w, h);
        let eyy = win.filter(&yy, w, h);
        let exy = win.filter(&xy, w, h);
        let mut g_m = vec![0.0; w * h];
        let mut g_exx = vec![0.0; w * h];
        let mut g_exy = vec![0.0; w * h];
        for p in 0..w * h {
            let (mux, muy) = (mx[p], my[p]);
            let vx = exx[p] - mux * mux;
            let vy = eyy[p] - muy * muy;
            let cxy = exy[p] - mux * muy;
            let a1 = 2.0 * mux * muy + SSIM_C1;
            let a2 = 2.0 * cxy + SSIM_C2;
            let b1 = mux * mux + muy * muy + SSIM_C1;
            let b2 = vx + vy + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let d_mu = 2.0 * muy * a2 / (b1 * b2) - s * 2.0 * mux / b1;
                let d_cxy = 2.0 * a1 / (b1 * b2);
                let d_vx = -s / b2;
                g_m[p] = (d_mu - d_cxy * muy - d_vx * 2.0 * mux) / n;
                g_exx[p] = d_vx / n;
                g_exy[p] = d_cxy / n;
            }
        }
        if let Some(g) = grad.as_mut() {
            let t_m = win.filter_adjoint(&g_m, w, h);
            let t_xx = win.filter_adjoint(&g_exx, w, h);
            let t_xy = win.filter_adjoint(&g_exy, w, h);
            for p in 0..w * h {
                g[3 * p + c] = t_m[p] + 2.0 * x[p] * t_xx[p] + y[p] * t_xy[p];
            }
        }
    }
    (total / n, grad)
}

/// Mean SSIM (11x11 Gaussian window, sigma 1.5), per channel then averaged.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    Ok(ssim_impl(a, b, false).0)
}

pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Vec<f64>)> {
    check_shapes(a, b)?;
    let (s, g) = ssim_impl(a, b, true);
    Ok((s, g.expect("gradient requested")))
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64)
}

/// `10 log10(1 / MSE)` on unit-range images, capped at 99 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// `(1 - l) mean|I - I_gt| + l (1 - SSIM)`, returning `dL/dI` too.
pub fn image_loss_with_grad(img: &Image, gt: &Image, lambda_dssim: f64) -> Result<(f64, Vec<f64>)> {
    check_shapes(img, gt)?;
    let n = img.data.len() as f64;
    let mut grad: Vec<f64> = img
        .data
        .iter()
        .zip(&gt.data)
        .map(|(a, b)| (1.0 - lambda_dssim) * (a - b).signum() * ((a != b) as u8 as f64) / n)
        .collect();
    let l1 = img.data.iter().zip(&gt.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let mut loss = (1.0 - lambda_dssim) * l1;
    if lambda_dssim > 0.0 {
        let (s, g) = ssim_with_grad(img, gt)?;
        loss += lambda_dssim * (1.0 - s);
        for (a, b) in grad.iter_mut().zip(g) {
            *a -= lambda_dssim * b;
        }
    }
    Ok((loss, grad))
}

pub fn image_loss(img: &Image, gt: &Image, lambda_dssim: f64) -> Result<f64> {
    Ok(image_loss_with_grad(img, gt, lambda_dssim)?.0)
}

/// Mean `|dx|` over the static set plus mean `|dx|` over the dynamic set;
/// returns the loss and per-Gaussian `dL/d(dx)`.
pub fn reg_loss_with_grad(dx: &[Vec3], dynamic: &[bool]) -> (f64, Vec<Vec3>) {
    let n_dyn = dynamic.iter().filter(|&&d| d).count();
    let n_static = dynamic.len() - n_dyn;
    let mut loss = 0.0;
    let mut grad = vec![Vec3::zeros(); dx.len()];
    for (i, (v, &d)) in dx.iter().zip(dynamic).enumerate() {
        let count = if d { n_dyn } else { n_static } as f64;
        let norm = v.norm();
        loss += norm / count;
        if norm > 0.0 {
            grad[i] = v / (norm * count);
        }
    }
    (loss, grad)
}

pub fn reg_loss(dx: &[Vec3], dynamic: &[bool]) -> f64 {
    reg_loss_with_grad(dx, dynamic).0
}

/// Mean `max(s) / (min(s) + eps)`; returns the loss and `dL/ds`.
pub fn ani_loss_with_grad(scales: &[Vec3], eps: f64) -> (f64, Vec<Vec3>) {
    if scales.is_empty() {
        return (0.0, Vec::new());
    }
    let n = scales.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![Vec3::zeros(); scales.len()];
    for (s, g) in scales.iter().zip(grad.iter_mut()) {
        let imax = s.imax();
        let imin = s.imin();
        let den = s[imin] + eps;
        loss += s[imax] / den;
        g[imax] += 1.0 / (den * n);
        g[imin] -= s[imax] / (den * den * n);
    }
    (loss / n, grad)
}

pub fn ani_loss(scales: &[Vec3], eps: f64) -> f64 {
    ani_loss_with_grad(scales, eps).0
}
