//! Per-frame forward model: deformation of the canonical Gaussians,
//! kinematic covariance refinement of moving ones, and the analytic
//! backward pass through both.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::raster::{rasterize, rasterize_backward, Primitive, PrimitiveGrads, RasterSettings, RasterTape, RenderedFrame};
use crate::deform::{coarse_deform, DeformField, DeformationOffsets, FieldGrads, OffsetTape};
use crate::error::{Error, Result};
use crate::gaussian::{rs_covariance, rs_covariance_vjp, Camera, Gaussian};
use crate::kinematics::{refine_backward, refine_forward, RefinementTape, DEFAULT_KAPPA, DEFAULT_LAMBDA_S, VELOCITY_FLOOR};
use crate::lod::{effective_scale, LodConfig};
use crate::math::{sigmoid, Mat3, Vec3};
use crate::so3::{exp_map_so3, exp_map_so3_vjp, quat_norm, quat_normalize, quat_to_rotation, quat_to_rotation_vjp, Quat};

/// Gaussians per work item when reducing network gradients; fixed so the
/// summation order does not depend on the thread count.
const GRAD_CHUNK: usize = 64;

/// How the per-Gaussian velocity is obtained from the deformation field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocityMode {
    /// Central difference of the composed offset over one interval `dt`.
    FiniteDifference,
    /// The offset itself divided by `dt`.
    Offset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    pub background: Vec3,
    pub alpha_min: f64,
    pub kappa: f64,
    pub lambda_s: f64,
    /// Frame interval in normalized time; also the blur interval.
    pub dt: f64,
    pub velocity_mode: VelocityMode,
    /// Kinematic covariance refinement of moving Gaussians.
    pub refine: bool,
    /// Neighbourhood-mean coarse motion plus feature residual; when off the
    /// offset network's own prediction is used directly.
    pub coarse_fine: bool,
    /// Model exposure blur; off renders instantaneous (sharp) frames.
    pub blur: bool,
    /// Also evaluate the offset network for static Gaussians (their offsets
    /// are regularized but never rendered).
    pub static_offsets: bool,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            background: Vec3::zeros(),
            alpha_min: 1.0 / 255.0,
            kappa: DEFAULT_KAPPA,
            lambda_s: DEFAULT_LAMBDA_S,
            dt: 1.0 / 48.0,
            velocity_mode: VelocityMode::FiniteDifference,
            refine: true,
            coarse_fine: true,
            blur: true,
            static_offsets: true,
        }
    }
}

impl RenderSettings {
    /// Settings for evaluation renders: sharp, no auxiliary offsets.
    pub fn sharp(&self) -> Self {
        RenderSettings {
            blur: false,
            static_offsets: false,
            ..self.clone()
        }
    }

    pub fn raster(&self) -> RasterSettings {
        RasterSettings {
            background: self.background,
            alpha_min: self.alpha_min,
            ..RasterSettings::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config("render.dt must be positive".into()));
        }
        if !(self.alpha_min >= 0.0 && self.alpha_min < 1.0) {
            return Err(Error::Config("render.alpha_min must lie in [0, 1)".into()));
        }
        if !(self.lambda_s.is_finite() && self.kappa.is_finite()) {
            return Err(Error::Config("render.kappa and render.lambda_s must be finite".into()));
        }
        Ok(())
    }

    fn needs_velocity(&self) -> bool {
        self.blur && self.refine
    }
}

/// Read-only view of everything a render depends on.
#[derive(Debug, Clone, Copy)]
pub struct SceneView<'a> {
    pub gaussians: &'a [Gaussian],
    pub field: &'a DeformField,
    pub dynamic: &'a [bool],
    /// Nearest dynamic neighbours (global indices) of every dynamic Gaussian.
    pub neighbors: &'a [Vec<usize>],
    pub lod: &'a LodConfig,
}

impl SceneView<'_> {
    fn validate(&self) -> Result<()> {
        let n = self.gaussians.len();
        if n == 0 {
            return Err(Error::invalid("cannot render an empty scene"));
        }
        let d = self.field.config.feature_dim;
        if self.dynamic.len() != n || self.neighbors.len() != n || self.field.features.len() != n * d {
            return Err(Error::invalid(format!(
                "scene arrays disagree: {n} Gaussians, {} flags, {} neighbour lists, {} feature rows",
                self.dynamic.len(),
                self.neighbors.len(),
                self.field.features.len() / d.max(1)
            )));
        }
        for (i, nb) in self.neighbors.iter().enumerate() {
            if self.dynamic[i] && nb.iter().any(|&j| j >= n || !self.dynamic[j]) {
                return Err(Error::invalid(format!("gaussian {i}: neighbour outside the dynamic set")));
            }
        }
        Ok(())
    }
}

type Eval = Option<(DeformationOffsets, OffsetTape)>;

#[derive(Debug, Clone)]
struct Slot {
    raw: Vec<Eval>,
    fine: Vec<Eval>,
    dense: Vec<DeformationOffsets>,
}

#[derive(Debug, Clone)]
struct DynamicTape {
    offsets: DeformationOffsets,
    residual_rotation: Mat3,
    rotation: Mat3,
    scale: Vec3,
    sigma: Mat3,
    velocity: Vec3,
    refinement: Option<RefinementTape>,
}

#[derive(Debug, Clone)]
struct GaussianTape {
    base_rotation: Mat3,
    dynamic: Option<Box<DynamicTape>>,
}

/// Primitives of one frame together with the intermediates of their
/// construction.
#[derive(Debug, Clone)]
pub struct Deformed {
    pub prims: Vec<Primitive>,
    /// Regularized position offset per Gaussian: the composed offset for
    /// dynamic ones, the raw network offset for static ones.
    pub dx: Vec<Vec3>,
    /// Scale that the anisotropy term sees: predicted for dynamic Gaussians,
    /// effective for static ones.
    pub shape_scale: Vec<Vec3>,
    /// Number of Gaussians whose covariance was kinematically refined.
    pub refined: usize,
    s_eff: Vec<Vec3>,
    slots: Vec<Slot>,
    per: Vec<GaussianTape>,
}

fn composed(slot: &Slot, i: usize, neighbors: &[usize], coarse_fine: bool) -> DeformationOffsets {
    if !coarse_fine {
        return slot.dense[i];
    }
    let fine = slot.fine[i].as_ref().map_or(DeformationOffsets::zero(), |(o, _)| *o);
    coarse_deform(i, neighbors, &slot.dense) + fine
}

fn tag(i: usize, e: Error) -> Error {
    match e {
        Error::Numerical { field, detail } => Error::numerical(format!("gaussian {i}: {field}"), detail),
        other => other,
    }
}

/// Builds the frame's primitives from the canonical scene at time `t`.
///
/// `noise[i]` perturbs the time encoding seen by Gaussian `i`'s offset
/// prediction (empty for none); the same sample is reused for every time the
/// Gaussian is evaluated in this frame.
pub fn deform(scene: &SceneView, t: f64, noise: Option<&[Vec<f64>]>, settings: &RenderSettings) -> Result<Deformed> {
    scene.validate()?;
    settings.validate()?;
    let n = scene.gaussians.len();
    if let Some(nz) = noise {
        if nz.len() != n {
            return Err(Error::invalid("one noise vector per Gaussian expected"));
        }
    }
    let field = scene.field;
    let s_eff: Vec<Vec3> = scene
        .gaussians
        .iter()
        .map(|g| effective_scale(&g.log_scale_opt, g.level, scene.lod))
        .collect::<Result<_>>()?;

    let any_dynamic = scene.dynamic.iter().any(|&d| d);
    let fd = any_dynamic && settings.needs_velocity() && settings.velocity_mode == VelocityMode::FiniteDifference;
    let times = if fd {
        vec![t, t - 0.5 * settings.dt, t + 0.5 * settings.dt]
    } else {
        vec![t]
    };

    let empty: Vec<f64> = Vec::new();
    let mut slots = Vec::with_capacity(times.len());
    for (s, &tau) in times.iter().enumerate() {
        let raw: Vec<Eval> = (0..n)
            .into_par_iter()
            .map(|i| {
                if !(scene.dynamic[i] || (s == 0 && settings.static_offsets)) {
                    return Ok(None);
                }
                let g = &scene.gaussians[i];
                let nz = noise.map_or(&empty[..], |v| &v[i][..]);
                field
                    .predict_with_noise(&g.position, &g.rotation, &s_eff[i].map(f64::ln), tau, nz)
                    .map(Some)
                    .map_err(|e| tag(i, e))
            })
            .collect::<Result<_>>()?;
        let fine: Vec<Eval> = (0..n)
            .into_par_iter()
            .map(|i| {
                if !(settings.coarse_fine && scene.dynamic[i]) {
                    return Ok(None);
                }
                field.fine_deform(field.feature(i), tau).map(Some).map_err(|e| tag(i, e))
            })
            .collect::<Result<_>>()?;
        let dense = raw
            .iter()
            .map(|e| e.as_ref().map_or(DeformationOffsets::zero(), |(o, _)| *o))
            .collect();
        slots.push(Slot { raw, fine, dense });
    }

    let built: Vec<(Primitive, Vec3, Vec3, GaussianTape)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let g = &scene.gaussians[i];
            let base_rotation = quat_to_rotation(&g.rotation);
            let opacity = sigmoid(g.opacity_logit);
            if !scene.dynamic[i] {
                let prim = Primitive {
                    mean: g.position,
                    cov: rs_covariance(&base_rotation, &s_eff[i]),
                    opacity,
                    color: g.color,
                };
                let tape = GaussianTape {
                    base_rotation,
                    dynamic: None,
                };
                return Ok((prim, slots[0].dense[i].dx, s_eff[i], tape));
            }
            let nb = &scene.neighbors[i];
            let offsets = composed(&slots[0], i, nb, settings.coarse_fine);
            let residual_rotation = exp_map_so3(&offsets.dr);
            let rotation = base_rotation * residual_rotation;
            let scale = s_eff[i].component_mul(&offsets.ds.map(f64::exp));
            let sigma = rs_covariance(&rotation, &scale);
            let mut velocity = Vec3::zeros();
            let mut refinement = None;
            if settings.needs_velocity() {
                velocity = if fd {
                    (composed(&slots[2], i, nb, settings.coarse_fine).dx
                        - composed(&slots[1], i, nb, settings.coarse_fine).dx)
                        / settings.dt
                } else {
                    offsets.dx / settings.dt
                };
                if velocity.norm() >= VELOCITY_FLOOR {
                    let r_z = rotation.column(2).into_owned();
                    refinement = Some(
                        refine_forward(
                            &sigma,
                            &velocity,
                            settings.dt,
                            &offsets.ds,
                            &offsets.dr,
                            &r_z,
                            settings.kappa,
                            settings.lambda_s,
                        )
                        .map_err(|e| tag(i, e))?,
                    );
                }
            }
            let prim = Primitive {
                mean: g.position + offsets.dx,
                cov: refinement.as_ref().map_or(sigma, |r| r.sigma_kin),
                opacity,
                color: g.color,
            };
            let tape = GaussianTape {
                base_rotation,
                dynamic: Some(Box::new(DynamicTape {
                    offsets,
                    residual_rotation,
                    rotation,
                    scale,
                    sigma,
                    velocity,
                    refinement,
                })),
            };
            Ok((prim, offsets.dx, scale, tape))
        })
        .collect::<Result<_>>()?;

    let mut out = Deformed {
        prims: Vec::with_capacity(n),
        dx: Vec::with_capacity(n),
        shape_scale: Vec::with_capacity(n),
        refined: 0,
        s_eff,
        slots,
        per: Vec::with_capacity(n),
    };
    for (p, dx, s, tape) in built {
        out.refined += tape.dynamic.as_ref().is_some_and(|d| d.refinement.is_some()) as usize;
        out.prims.push(p);
        out.dx.push(dx);
        out.shape_scale.push(s);
        out.per.push(tape);
    }
    Ok(out)
}

/// Additional loss gradients on the auxiliary outputs of [`deform`].
#[derive(Debug, Clone, Default)]
pub struct ExtraGrads {
    /// `dL/d Deformed::dx`.
    pub dx: Vec<Vec3>,
    /// `dL/d Deformed::shape_scale`.
    pub shape_scale: Vec<Vec3>,
}

/// Gradients for every optimized quantity.
#[derive(Debug, Clone)]
pub struct SceneGrads {
    pub position: Vec<Vec3>,
    /// Gradient on the raw (unnormalized) quaternion.
    pub rotation: Vec<Quat>,
    pub log_scale: Vec<Vec3>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<Vec3>,
    pub features: Vec<f64>,
    pub field: FieldGrads,
    /// Screen-space positional gradient norm, for densification.
    pub mean2d_norm: Vec<f64>,
}

impl SceneGrads {
    pub fn zeros(n: usize, field: &DeformField) -> Self {
        SceneGrads {
            position: vec![Vec3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            log_scale: vec![Vec3::zeros(); n],
            opacity_logit: vec![0.0; n],
            color: vec![Vec3::zeros(); n],
            features: vec![0.0; field.features.len()],
            field: field.zero_grads(),
            mean2d_norm: vec![0.0; n],
        }
    }

    pub fn add_assign(&mut self, o: &SceneGrads) {
        for (a, b) in self.position.iter_mut().zip(&o.position) {
            *a += b;
        }
        for (a, b) in self.rotation.iter_mut().zip(&o.rotation) {
            for k in 0..4 {
                a[k] += b[k];
            }
        }
        for (a, b) in self.log_scale.iter_mut().zip(&o.log_scale) {
            *a += b;
        }
        for (a, b) in self.opacity_logit.iter_mut().zip(&o.opacity_logit) {
            *a += b;
        }
        for (a, b) in self.color.iter_mut().zip(&o.color) {
            *a += b;
        }
        for (a, b) in self.features.iter_mut().zip(&o.features) {
            *a += b;
        }
        for (a, b) in self.mean2d_norm.iter_mut().zip(&o.mean2d_norm) {
            *a += b;
        }
        self.field.add_assign(&o.field);
    }

    pub fn scale(&mut self, s: f64) {
        self.position.iter_mut().for_each(|v| *v *= s);
        self.rotation.iter_mut().flatten().for_each(|v| *v *= s);
        self.log_scale.iter_mut().for_each(|v| *v *= s);
        self.opacity_logit.iter_mut().for_each(|v| *v *= s);
        self.color.iter_mut().for_each(|v| *v *= s);
        self.features.iter_mut().for_each(|v| *v *= s);
        self.mean2d_norm.iter_mut().for_each(|v| *v *= s);
        for net in [&mut self.field.offset_net, &mut self.field.residual_net] {
            for t in net.tensors_mut() {
                t.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
}

fn quat_normalize_vjp(q: &Quat, d_unit: &Quat) -> Quat {
    let n = quat_norm(q);
    let u = quat_normalize(q);
    let dot: f64 = (0..4).map(|k| u[k] * d_unit[k]).sum();
    [
        (d_unit[0] - u[0] * dot) / n,
        (d_unit[1] - u[1] * dot) / n,
        (d_unit[2] - u[2] * dot) / n,
        (d_unit[3] - u[3] * dot) / n,
    ]
}

fn add_quat(a: &mut Quat, b: &Quat) {
    for k in 0..4 {
        a[k] += b[k];
    }
}

struct Local {
    position: Vec3,
    rotation: Quat,
    s_eff: Vec3,
    opacity_logit: f64,
    color: Vec3,
    /// Gradient on the composed (dynamic) or raw (static) offsets per slot.
    offsets: Vec<DeformationOffsets>,
}

/// Backward of [`deform`] given gradients on its primitives and auxiliary
/// outputs.
pub fn deform_backward(
    scene: &SceneView,
    deformed: &Deformed,
    prim_grads: &PrimitiveGrads,
    extra: Option<&ExtraGrads>,
    settings: &RenderSettings,
) -> Result<SceneGrads> {
    let n = scene.gaussians.len();
    if deformed.per.len() != n || prim_grads.mean.len() != n {
        return Err(Error::invalid("render tape does not match the scene"));
    }
    if let Some(e) = extra {
        if e.dx.len() != n || e.shape_scale.len() != n {
            return Err(Error::invalid("extra gradients do not match the scene"));
        }
    }
    let field = scene.field;
    let nslots = deformed.slots.len();
    let dt = settings.dt;

    let locals: Vec<Local> = (0..n)
        .into_par_iter()
        .map(|i| {
            let g = &scene.gaussians[i];
            let tape = &deformed.per[i];
            let d_cov = &prim_grads.cov[i];
            let extra_scale = extra.map_or(Vec3::zeros(), |e| e.shape_scale[i]);
            let extra_dx = extra.map_or(Vec3::zeros(), |e| e.dx[i]);
            let op = deformed.prims[i].opacity;
            let mut offsets = vec![DeformationOffsets::zero(); nslots];
            let Some(dy) = tape.dynamic.as_deref() else {
                let (d_rot, d_s) = rs_covariance_vjp(&tape.base_rotation, &deformed.s_eff[i], d_cov);
                offsets[0].dx = extra_dx;
                return Local {
                    position: prim_grads.mean[i],
                    rotation: quat_to_rotation_vjp(&g.rotation, &d_rot),
                    s_eff: d_s + extra_scale,
                    opacity_logit: prim_grads.opacity[i] * op * (1.0 - op),
                    color: prim_grads.color[i],
                    offsets,
                };
            };
            let mut d_dr = Vec3::zeros();
            let mut d_ds = Vec3::zeros();
            let mut d_rz = Vec3::zeros();
            let mut d_velocity = Vec3::zeros();
            let d_sigma = match &dy.refinement {
                Some(r) => {
                    let rg = refine_backward(
                        r,
                        &dy.sigma,
                        &dy.velocity,
                        dt,
                        &dy.offsets.dr,
                        &dy.rotation.column(2).into_owned(),
                        settings.lambda_s,
                        d_cov,
                    );
                    d_dr += rg.delta_r;
                    d_ds += rg.delta_s;
                    d_rz = rg.r_z;
                    d_velocity = rg.velocity;
                    rg.sigma
                }
                None => *d_cov,
            };
            let (mut d_rot, d_scale) = rs_covariance_vjp(&dy.rotation, &dy.scale, &d_sigma);
            let mut col = d_rot.column_mut(2);
            col += d_rz;
            let d_scale = d_scale + extra_scale;
            let d_base = d_rot * dy.residual_rotation.transpose();
            let d_resid = tape.base_rotation.transpose() * d_rot;
            d_dr += exp_map_so3_vjp(&dy.offsets.dr, &d_resid);
            d_ds += d_scale.component_mul(&dy.scale);
            let s_eff = d_scale.component_mul(&dy.offsets.ds.map(f64::exp));
            offsets[0] = DeformationOffsets {
                dx: prim_grads.mean[i] + extra_dx,
                dr: d_dr,
                ds: d_ds,
            };
            if dy.refinement.is_some() {
                if nslots == 3 {
                    offsets[2].dx += d_velocity / dt;
                    offsets[1].dx -= d_velocity / dt;
                } else {
                    offsets[0].dx += d_velocity / dt;
                }
            }
            Local {
                position: prim_grads.mean[i],
                rotation: quat_to_rotation_vjp(&g.rotation, &d_base),
                s_eff,
                opacity_logit: prim_grads.opacity[i] * op * (1.0 - op),
                color: prim_grads.color[i],
                offsets,
            }
        })
        .collect();

    // Route offset gradients to the raw network outputs and the residuals.
    let mut d_raw = vec![vec![DeformationOffsets::zero(); n]; nslots];
    let mut d_fine = vec![vec![DeformationOffsets::zero(); n]; nslots];
    for (i, local) in locals.iter().enumerate() {
        for (s, d) in local.offsets.iter().enumerate() {
            if deformed.slots[s].raw[i].is_none() && deformed.slots[s].fine[i].is_none() {
                continue;
            }
            if !scene.dynamic[i] || !settings.coarse_fine {
                d_raw[s][i] += *d;
                continue;
            }
            d_fine[s][i] = *d;
            let nb = &scene.neighbors[i];
            if nb.is_empty() {
                d_raw[s][i] += *d;
            } else {
                let w = 1.0 / nb.len() as f64;
                for &j in nb {
                    d_raw[s][j] += *d * w;
                }
            }
        }
    }

    let mut grads = SceneGrads::zeros(n, field);
    for (i, l) in locals.iter().enumerate() {
        grads.position[i] = l.position;
        grads.rotation[i] = l.rotation;
        grads.log_scale[i] = l.s_eff;
        grads.opacity_logit[i] = l.opacity_logit;
        grads.color[i] = l.color;
        grads.mean2d_norm[i] = prim_grads.mean2d_norm[i];
    }

    let zero = DeformationOffsets::zero();
    let raw_jobs: Vec<(usize, usize)> = (0..nslots)
        .flat_map(|s| (0..n).map(move |i| (s, i)))
        .filter(|&(s, i)| deformed.slots[s].raw[i].is_some() && d_raw[s][i] != zero)
        .collect();
    let raw_parts: Vec<_> = raw_jobs
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut net = field.offset_net.zeros_like();
            let inputs: Vec<_> = chunk
                .iter()
                .map(|&(s, i)| {
                    let (_, tape) = deformed.slots[s].raw[i].as_ref().expect("filtered");
                    (i, field.offset_backward(tape, &scene.gaussians[i].position, &d_raw[s][i], &mut net))
                })
                .collect();
            (net, inputs)
        })
        .collect();
    for (net, inputs) in raw_parts {
        grads.field.offset_net.add_assign(&net);
        for (i, ig) in inputs {
            grads.position[i] += ig.position;
            add_quat(&mut grads.rotation[i], &quat_normalize_vjp(&scene.gaussians[i].rotation, &ig.unit_rotation));
            grads.log_scale[i] += ig.log_scale.component_div(&deformed.s_eff[i]);
        }
    }

    let fine_jobs: Vec<(usize, usize)> = (0..nslots)
        .flat_map(|s| (0..n).map(move |i| (s, i)))
        .filter(|&(s, i)| deformed.slots[s].fine[i].is_some() && d_fine[s][i] != zero)
        .collect();
    let fine_parts: Vec<_> = fine_jobs
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut net = field.residual_net.zeros_like();
            let rows: Vec<_> = chunk
                .iter()
                .map(|&(s, i)| {
                    let (_, tape) = deformed.slots[s].fine[i].as_ref().expect("filtered");
                    (i, field.fine_backward(tape, &d_fine[s][i], &mut net))
                })
                .collect();
            (net, rows)
        })
        .collect();
    let d = field.config.feature_dim;
    for (net, rows) in fine_parts {
        grads.field.residual_net.add_assign(&net);
        for (i, row) in rows {
            for (a, b) in grads.features[i * d..(i + 1) * d].iter_mut().zip(&row) {
                *a += b;
            }
        }
    }

    // Effective scale -> optimized log-scale.
    for (i, g) in scene.gaussians.iter().enumerate() {
        grads.log_scale[i] = grads.log_scale[i].component_mul(&g.log_scale_opt.map(f64::exp));
    }
    Ok(grads)
}

/// Intermediates of one frame kept for [`render_backward`].
#[derive(Debug, Clone)]
pub struct RenderTape {
    pub deformed: Deformed,
    pub raster: RasterTape,
}

/// Deforms, refines and rasterizes the scene at time `t`.
pub fn render(
    scene: &SceneView,
    cam: &Camera,
    t: f64,
    noise: Option<&[Vec<f64>]>,
    settings: &RenderSettings,
) -> Result<(RenderedFrame, RenderTape)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("render time {t} outside [0, 1]")));
    }
    let deformed = deform(scene, t, noise, settings)?;
    let (frame, raster) = rasterize(&deformed.prims, cam, &settings.raster())?;
    Ok((frame, RenderTape { deformed, raster }))
}

/// Backward of [`render`] given `dL/dimage` and optional auxiliary-output
/// gradients.
pub fn render_backward(
    scene: &SceneView,
    tape: &RenderTape,
    cam: &Camera,
    d_image: &[f64],
    extra: Option<&ExtraGrads>,
    settings: &RenderSettings,
) -> Result<SceneGrads> {
    let pg = rasterize_backward(&tape.raster, &tape.deformed.prims, cam, d_image)?;
    deform_backward(scene, &tape.deformed, &pg, extra, settings)
}
