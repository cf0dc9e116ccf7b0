//! Tile-based rasterization of projected 3D Gaussians with front-to-back
//! compositing, and its analytic backward pass.
//!
//! Splats are depth-sorted once (ties broken by index), binned into square
//! tiles by a conservative screen-space radius, and every pixel walks its
//! tile's list in order. Binning only drops splats whose alpha is provably
//! below `alpha_min` at every pixel of the tile, so the result is identical
//! to a naive per-pixel loop over all splats.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::{
    project_gaussian, project_gaussian_vjp, Camera, Projection, MAX_ALPHA, TRANSMITTANCE_CUTOFF,
};
use crate::image::Image;
use crate::math::{Mat2, Mat3, Vec2, Vec3};

pub const TILE_SIZE: u32 = 16;

/// A Gaussian ready for projection: world mean and covariance, opacity in
/// `(0, 1)`, linear RGB color.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub mean: Vec3,
    pub cov: Mat3,
    pub opacity: f64,
    pub color: Vec3,
}

#[derive(Debug, Clone, Copy)]
pub struct RasterSettings {
    pub background: Vec3,
    /// Splats fainter than this at a pixel are skipped; 0 disables both the
    /// skip and the screen-space culling (full-image support).
    pub alpha_min: f64,
    pub tile_size: u32,
}

impl Default for RasterSettings {
    fn default() -> Self {
        RasterSettings {
            background: Vec3::zeros(),
            alpha_min: 1.0 / 255.0,
            tile_size: TILE_SIZE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub image: Image,
    /// Final transmittance per pixel, row-major.
    pub transmittance: Vec<f64>,
    /// Per-primitive sum over pixels of its blending weight.
    pub importance: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Splat {
    prim: usize,
    mean2d: Vec2,
    conic: Mat2,
    opacity: f64,
    color: Vec3,
}

/// Everything the backward pass needs to replay a rasterization.
#[derive(Debug, Clone)]
pub struct RasterTape {
    width: u32,
    height: u32,
    tile_size: u32,
    tiles_x: u32,
    background: Vec3,
    alpha_min: f64,
    projections: Vec<Option<Projection>>,
    splats: Vec<Splat>,
    /// Per tile, indices into `splats` in depth order.
    tile_lists: Vec<Vec<u32>>,
    /// Per pixel, how many entries of its tile list were traversed.
    last: Vec<u32>,
    final_t: Vec<f64>,
    /// Unclamped composited color, used to mask the output clamp.
    raw: Vec<f64>,
}

impl RasterTape {
    pub fn primitive_count(&self) -> usize {
        self.projections.len()
    }

    pub fn projection(&self, i: usize) -> Option<&Projection> {
        self.projections[i].as_ref()
    }
}

/// Gradients of a rasterization w.r.t. its primitives.
#[derive(Debug, Clone)]
pub struct PrimitiveGrads {
    pub mean: Vec<Vec3>,
    pub cov: Vec<Mat3>,
    pub opacity: Vec<f64>,
    pub color: Vec<Vec3>,
    /// `|dL/dmean2d|` per primitive (the densification signal).
    pub mean2d_norm: Vec<f64>,
}

impl PrimitiveGrads {
    fn zeros(n: usize) -> Self {
        PrimitiveGrads {
            mean: vec![Vec3::zeros(); n],
            cov: vec![Mat3::zeros(); n],
            opacity: vec![0.0; n],
            color: vec![Vec3::zeros(); n],
            mean2d_norm: vec![0.0; n],
        }
    }
}

fn max_eigenvalue_2x2(m: &Mat2) -> f64 {
    let a = m[(0, 0)];
    let c = m[(1, 1)];
    let b = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    let mid = 0.5 * (a + c);
    let half = 0.5 * (a - c);
    mid + (half * half + b * b).sqrt()
}

#[inline]
fn splat_alpha(s: &Splat, px: f64, py: f64) -> (f64, f64, Vec2) {
    let d = Vec2::new(px - s.mean2d.x, py - s.mean2d.y);
    let power = -0.5 * d.dot(&(s.conic * d));
    let g = power.exp();
    (s.opacity * g, g, d)
}

/// Tile range `[lo, hi)` along one axis covering pixel centers within
/// `radius` of `center`.
fn tile_span(center: f64, radius: f64, pixels: u32, tile: u32) -> Option<(u32, u32)> {
    let lo = (center - radius - 0.5).ceil().max(0.0);
    let hi = (center + radius - 0.5).floor().min(pixels as f64 - 1.0);
    if !(lo <= hi) {
        return None;
    }
    Some((lo as u32 / tile, hi as u32 / tile + 1))
}

fn check_primitive(i: usize, p: &Primitive) -> Result<()> {
    let finite = p.mean.iter().chain(p.cov.iter()).chain(p.color.iter()).all(|v| v.is_finite())
        && p.opacity.is_finite();
    if !finite {
        return Err(Error::numerical(
            format!("gaussian {i}"),
            "non-finite primitive reached the rasterizer",
        ));
    }
    Ok(())
}

/// Forward rasterization. The tape is always produced; it is cheap relative
/// to the render itself.
pub fn rasterize(prims: &[Primitive], cam: &Camera, settings: &RasterSettings) -> Result<(RenderedFrame, RasterTape)> {
    cam.validate()?;
    if settings.tile_size == 0 || !(settings.alpha_min >= 0.0) {
        return Err(Error::invalid("raster settings: tile size and alpha_min must be positive"));
    }
    for (i, p) in prims.iter().enumerate() {
        check_primitive(i, p)?;
    }
    let (w, h, ts) = (cam.width, cam.height, settings.tile_size);
    let tiles_x = w.div_ceil(ts);
    let tiles_y = h.div_ceil(ts);

    let projections: Vec<Option<Projection>> = prims
        .par_iter()
        .map(|p| project_gaussian(&p.cov, &p.mean, cam))
        .collect();

    let mut order: Vec<usize> = (0..prims.len()).filter(|&i| projections[i].is_some()).collect();
    order.sort_by(|&a, &b| {
        let da = projections[a].as_ref().map_or(0.0, |p| p.depth);
        let db = projections[b].as_ref().map_or(0.0, |p| p.depth);
        da.total_cmp(&db).then(a.cmp(&b))
    });

    let mut splats = Vec::with_capacity(order.len());
    let mut tile_lists: Vec<Vec<u32>> = vec![Vec::new(); (tiles_x * tiles_y) as usize];
    for &i in &order {
        let proj = projections[i].as_ref().expect("filtered");
        let p = &prims[i];
        let Some(conic) = proj.cov2d.try_inverse() else {
            return Err(Error::numerical(format!("gaussian {i}"), "singular 2D covariance"));
        };
        let span = if settings.alpha_min > 0.0 {
            if p.opacity < settings.alpha_min {
                continue;
            }
            let lmax = max_eigenvalue_2x2(&proj.cov2d);
            let r = (2.0 * (p.opacity / settings.alpha_min).ln() * lmax).sqrt();
            let r = r * (1.0 + 1e-9) + 1e-9;
            match (
                tile_span(proj.mean2d.x, r, w, ts),
                tile_span(proj.mean2d.y, r, h, ts),
            ) {
                (Some(x), Some(y)) => (x, y),
                _ => continue,
            }
        } else {
            ((0, tiles_x), (0, tiles_y))
        };
        let k = splats.len() as u32;
        splats.push(Splat {
            prim: i,
            mean2d: proj.mean2d,
            conic,
            opacity: p.opacity,
            color: p.color,
        });
        for ty in span.1 .0..span.1 .1 {
            for tx in span.0 .0..span.0 .1 {
                tile_lists[(ty * tiles_x + tx) as usize].push(k);
            }
        }
    }

    struct TileOut {
        pixels: Vec<(Vec3, f64, u32)>,
        importance: Vec<f64>,
    }
    let alpha_min = settings.alpha_min;
    let bg = settings.background;
    let outs: Vec<TileOut> = (0..tile_lists.len())
        .into_par_iter()
        .map(|tile| {
            let list = &tile_lists[tile];
            let (tx, ty) = (tile as u32 % tiles_x, tile as u32 / tiles_x);
            let x0 = tx * ts;
            let y0 = ty * ts;
            let x1 = (x0 + ts).min(w);
            let y1 = (y0 + ts).min(h);
            let mut importance = vec![0.0; list.len()];
            let mut pixels = Vec::with_capacity(((x1 - x0) * (y1 - y0)) as usize);
            for y in y0..y1 {
                for x in x0..x1 {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut c = Vec3::zeros();
                    let mut t = 1.0;
                    let mut n = 0u32;
                    for (k, &si) in list.iter().enumerate() {
                        n = k as u32 + 1;
                        let s = &splats[si as usize];
                        let alpha = splat_alpha(s, px, py).0.min(MAX_ALPHA);
                        if alpha < alpha_min {
                            continue;
                        }
                        let weight = alpha * t;
                        c += s.color * weight;
                        importance[k] += weight;
                        t *= 1.0 - alpha;
                        if t < TRANSMITTANCE_CUTOFF {
                            break;
                        }
                    }
                    pixels.push((c + bg * t, t, n));
                }
            }
            TileOut { pixels, importance }
        })
        .collect();

    let npix = (w * h) as usize;
    let mut image = Image::new(w, h);
    let mut raw = vec![0.0; npix * 3];
    let mut final_t = vec![0.0; npix];
    let mut last = vec![0u32; npix];
    let mut importance = vec![0.0; prims.len()];
    for (tile, out) in outs.iter().enumerate() {
        let (tx, ty) = (tile as u32 % tiles_x, tile as u32 / tiles_x);
        let x0 = tx * ts;
        let y0 = ty * ts;
        let x1 = (x0 + ts).min(w);
        let mut k = 0;
        for y in y0..(y0 + ts).min(h) {
            for x in x0..x1 {
                let (c, t, n) = out.pixels[k];
                k += 1;
                let p = (y * w + x) as usize;
                for ch in 0..3 {
                    if !c[ch].is_finite() {
                        return Err(Error::numerical(
                            format!("pixel ({x}, {y})"),
                            "non-finite composited color",
                        ));
                    }
                    raw[p * 3 + ch] = c[ch];
                    image.data[p * 3 + ch] = c[ch].clamp(0.0, 1.0);
                }
                final_t[p] = t;
                last[p] = n;
            }
        }
        for (k, &si) in tile_lists[tile].iter().enumerate() {
            importance[splats[si as usize].prim] += out.importance[k];
        }
    }

    let frame = RenderedFrame {
        image,
        transmittance: final_t.clone(),
        importance,
    };
    let tape = RasterTape {
        width: w,
        height: h,
        tile_size: ts,
        tiles_x,
        background: bg,
        alpha_min,
        projections,
        splats,
        tile_lists,
        last,
        final_t,
        raw,
    };
    Ok((frame, tape))
}

/// Per-pixel reference loop over the globally sorted splats, without tiles.
pub fn rasterize_naive(prims: &[Primitive], cam: &Camera, settings: &RasterSettings) -> Result<Image> {
    let (_, tape) = rasterize(prims, cam, &RasterSettings { tile_size: cam.width.max(cam.height), ..*settings })?;
    let mut image = Image::new(cam.width, cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut splats = Vec::new();
            for s in &tape.splats {
                let alpha = splat_alpha(s, px, py).0.min(MAX_ALPHA);
                if alpha >= settings.alpha_min {
                    splats.push((s.color, alpha));
                }
            }
            let (c, _) = crate::gaussian::alpha_blend(&splats, &settings.background);
            image.set(x, y, c.map(|v| v.clamp(0.0, 1.0)));
        }
    }
    Ok(image)
}

/// Backward of [`rasterize`] given `dL/dimage` (interleaved RGB).
pub fn rasterize_backward(
    tape: &RasterTape,
    prims: &[Primitive],
    cam: &Camera,
    d_image: &[f64],
) -> Result<PrimitiveGrads> {
    let npix = (tape.width * tape.height) as usize;
    if d_image.len() != npix * 3 || prims.len() != tape.primitive_count() {
        return Err(Error::invalid("rasterize_backward: tape does not match inputs"));
    }
    let (w, h, ts, tiles_x) = (tape.width, tape.height, tape.tile_size, tape.tiles_x);

    #[derive(Clone, Copy)]
    struct SplatGrad {
        mean2d: Vec2,
        conic: Mat2,
        opacity: f64,
        color: Vec3,
    }
    let zero = SplatGrad {
        mean2d: Vec2::zeros(),
        conic: Mat2::zeros(),
        opacity: 0.0,
        color: Vec3::zeros(),
    };

    let per_tile: Vec<Vec<SplatGrad>> = (0..tape.tile_lists.len())
        .into_par_iter()
        .map(|tile| {
            let list = &tape.tile_lists[tile];
            let mut grads = vec![zero; list.len()];
            if list.is_empty() {
                return grads;
            }
            let (tx, ty) = (tile as u32 % tiles_x, tile as u32 / tiles_x);
            let x0 = tx * ts;
            let y0 = ty * ts;
            for y in y0..(y0 + ts).min(h) {
                for x in x0..(x0 + ts).min(w) {
                    let p = (y * w + x) as usize;
                    let mut dc = Vec3::zeros();
                    for ch in 0..3 {
                        let v = tape.raw[p * 3 + ch];
                        if (0.0..=1.0).contains(&v) {
                            dc[ch] = d_image[p * 3 + ch];
                        }
                    }
                    if dc == Vec3::zeros() {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut t = tape.final_t[p];
                    // Color composited behind the current splat, already
                    // weighted by transmittance.
                    let mut behind = tape.background * t;
                    for k in (0..tape.last[p] as usize).rev() {
                        let s = &tape.splats[list[k] as usize];
                        let (raw_alpha, g, d) = splat_alpha(s, px, py);
                        let alpha = raw_alpha.min(MAX_ALPHA);
                        if alpha < tape.alpha_min {
                            continue;
                        }
                        let t_k = t / (1.0 - alpha);
                        let gk = &mut grads[k];
                        gk.color += dc * (alpha * t_k);
                        let d_alpha = dc.dot(&(s.color * t_k - behind / (1.0 - alpha)));
                        behind += s.color * (alpha * t_k);
                        t = t_k;
                        if raw_alpha > MAX_ALPHA {
                            continue;
                        }
                        gk.opacity += d_alpha * g;
                        let d_power = d_alpha * raw_alpha;
                        // power = -0.5 d^T A d with d = pixel - mean
                        gk.mean2d += (s.conic + s.conic.transpose()) * d * (0.5 * d_power);
                        gk.conic += d * d.transpose() * (-0.5 * d_power);
                    }
                }
            }
            grads
        })
        .collect();

    let mut splat_grads = vec![zero; tape.splats.len()];
    for (tile, grads) in per_tile.iter().enumerate() {
        for (k, g) in grads.iter().enumerate() {
            let sg = &mut splat_grads[tape.tile_lists[tile][k] as usize];
            sg.mean2d += g.mean2d;
            sg.conic += g.conic;
            sg.opacity += g.opacity;
            sg.color += g.color;
        }
    }

    let mut out = PrimitiveGrads::zeros(prims.len());
    for (s, g) in tape.splats.iter().zip(&splat_grads) {
        let i = s.prim;
        let proj = tape.projections[i].as_ref().expect("splat has a projection");
        let a = s.conic;
        let d_cov2d = -(a.transpose() * g.conic * a.transpose());
        let (d_cov, d_mean) = project_gaussian_vjp(&prims[i].cov, proj, cam, &g.mean2d, &d_cov2d);
        out.mean[i] = d_mean;
        out.cov[i] = d_cov;
        out.opacity[i] = g.opacity;
        out.color[i] = g.color;
        out.mean2d_norm[i] = g.mean2d.norm();
    }
    Ok(out)
}
