//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use kgs_core::deform::{knn_all, DeformField, FieldConfig};
use kgs_core::gaussian::{Camera, Gaussian};
use kgs_core::lod::LodConfig;
use kgs_core::math::{logit, Vec3};
use kgs_core::render::{render, render_backward, ExtraGrads, RenderSettings, SceneGrads, SceneView};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A small scene with a linear functional of every render output, used to
/// compare analytic gradients with central differences.
pub struct GradInstance {
    pub gaussians: Vec<Gaussian>,
    pub field: DeformField,
    pub dynamic: Vec<bool>,
    pub neighbors: Vec<Vec<usize>>,
    pub lod: LodConfig,
    pub cam: Camera,
    pub noise: Vec<Vec<f64>>,
    pub settings: RenderSettings,
    pub t: f64,
    w_image: Vec<f64>,
    w_dx: Vec<Vec3>,
    w_scale: Vec<Vec3>,
}

impl GradInstance {
    /// `n` Gaussians (the first `dynamic` of them moving) on an 8x8 image.
    pub fn new(n: usize, dynamic: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lod = LodConfig::default();
        let gaussians: Vec<Gaussian> = (0..n)
            .map(|i| Gaussian {
                position: Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 0.08 * i as f64 - 0.5),
                rotation: [
                    rng.gen_range(0.8..1.2),
                    rng.gen_range(-0.4..0.4),
                    rng.gen_range(-0.4..0.4),
                    rng.gen_range(-0.4..0.4),
                ],
                log_scale_opt: Vec3::from_fn(|_, _| rng.gen_range(-2.2f64..-1.4)),
                opacity_logit: logit(rng.gen_range(0.25..0.6)),
                color: Vec3::from_fn(|_, _| rng.gen_range(0.1..0.9)),
                level: 1,
                accumulated_importance: 0.0,
                dynamic: i < dynamic,
            })
            .collect();
        let cfg = FieldConfig {
            width: 16,
            feature_dim: 4,
            ..FieldConfig::default()
        };
        let mut field = DeformField::new(cfg, n, &mut rng);
        for net in [&mut field.offset_net, &mut field.residual_net] {
            for t in net.tensors_mut() {
                for v in t.iter_mut() {
                    *v += rng.gen_range(-0.15..0.15);
                }
            }
        }
        let dyn_flags: Vec<bool> = gaussians.iter().map(|g| g.dynamic).collect();
        let dyn_idx: Vec<usize> = (0..n).filter(|&i| dyn_flags[i]).collect();
        let pos: Vec<Vec3> = dyn_idx.iter().map(|&i| gaussians[i].position).collect();
        let mut neighbors = vec![Vec::new(); n];
        for (a, nb) in knn_all(&pos, 3).into_iter().enumerate() {
            neighbors[dyn_idx[a]] = nb.into_iter().map(|b| dyn_idx[b]).collect();
        }
        let noise = (0..n)
            .map(|_| (0..2 * field.config.time_bands).map(|_| rng.gen_range(-0.05..0.05)).collect())
            .collect();
        let cam = Camera::axis_aligned(Vec3::new(0.0, 0.0, -4.0), 9.6, 8, 8);
        let settings = RenderSettings {
            alpha_min: 0.0,
            background: Vec3::new(0.1, 0.2, 0.3),
            ..RenderSettings::default()
        };
        let w_image = (0..cam.pixel_count() * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w_dx = (0..n).map(|_| Vec3::from_fn(|_, _| rng.gen_range(-1.0..1.0))).collect();
        let w_scale = (0..n).map(|_| Vec3::from_fn(|_, _| rng.gen_range(-1.0..1.0))).collect();
        GradInstance {
            gaussians,
            field,
            dynamic: dyn_flags,
            neighbors,
            lod,
            cam,
            noise,
            settings,
            t: 0.37,
            w_image,
            w_dx,
            w_scale,
        }
    }

    fn view<'a>(&'a self, gaussians: &'a [Gaussian], field: &'a DeformField) -> SceneView<'a> {
        SceneView {
            gaussians,
            field,
            dynamic: &self.dynamic,
            neighbors: &self.neighbors,
            lod: &self.lod,
        }
    }

    pub fn loss_with(&self, gaussians: &[Gaussian], field: &DeformField) -> f64 {
        let view = self.view(gaussians, field);
        let (frame, tape) = render(&view, &self.cam, self.t, Some(&self.noise), &self.settings).unwrap();
        let img: f64 = frame.image.data.iter().zip(&self.w_image).map(|(a, b)| a * b).sum();
        let dx: f64 = tape.deformed.dx.iter().zip(&self.w_dx).map(|(a, b)| a.dot(b)).sum();
        let sc: f64 = tape.deformed.shape_scale.iter().zip(&self.w_scale).map(|(a, b)| a.dot(b)).sum();
        img + dx + sc
    }

    pub fn refined_count(&self) -> usize {
        let view = self.view(&self.gaussians, &self.field);
        let (_, tape) = render(&view, &self.cam, self.t, Some(&self.noise), &self.settings).unwrap();
        tape.deformed.refined
    }

    pub fn grads(&self) -> SceneGrads {
        let view = self.view(&self.gaussians, &self.field);
        let (_, tape) = render(&view, &self.cam, self.t, Some(&self.noise), &self.settings).unwrap();
        let extra = ExtraGrads {
            dx: self.w_dx.clone(),
            shape_scale: self.w_scale.clone(),
        };
        render_backward(&view, &tape, &self.cam, &self.w_image, Some(&extra), &self.settings).unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct ClassReport {
    pub name: &'static str,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

pub struct SuiteReport {
    pub classes: Vec<ClassReport>,
    /// Checks that only agreed after shrinking the step (a ReLU kink or
    /// clamp boundary lies within the original step).
    pub retried: usize,
}

impl ClassReport {
    fn new(name: &'static str) -> Self {
        ClassReport {
            name,
            checked: 0,
            max_rel_err: 0.0,
            worst: String::new(),
        }
    }

    fn record(&mut self, what: String, fd: f64, analytic: f64) {
        self.checked += 1;
        self.update(what, fd, analytic);
    }

    fn update(&mut self, what: String, fd: f64, analytic: f64) {
        let err = rel_err(fd, analytic);
        if err > self.max_rel_err {
            self.max_rel_err = err;
            self.worst = format!("{what}: fd {fd:.6e} analytic {analytic:.6e}");
        }
    }
}

pub fn rel_err(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6)
}

pub const GRADIENT_TOLERANCE: f64 = 1e-3;

/// Central differences for every optimized parameter class. With `retry`,
/// a check that fails at the given step is repeated at a tenth of it and
/// counted in [`SuiteReport::retried`]; the stricter result is kept only if
/// the retry also fails.
pub fn gradient_suite(inst: &GradInstance, step: f64, rotation_step: f64, retry: bool) -> SuiteReport {
    let g = inst.grads();
    let n = inst.gaussians.len();
    let central = |mutate: &dyn Fn(&mut Vec<Gaussian>, &mut DeformField, f64), h: f64| {
        let mut gp = inst.gaussians.clone();
        let mut fp = inst.field.clone();
        mutate(&mut gp, &mut fp, h);
        let mut gm = inst.gaussians.clone();
        let mut fm = inst.field.clone();
        mutate(&mut gm, &mut fm, -h);
        (inst.loss_with(&gp, &fp) - inst.loss_with(&gm, &fm)) / (2.0 * h)
    };
    let retried = std::cell::Cell::new(0usize);
    let fd = |mutate: &dyn Fn(&mut Vec<Gaussian>, &mut DeformField, f64), h: f64, analytic: f64| {
        let v = central(mutate, h);
        if !retry || rel_err(v, analytic) < GRADIENT_TOLERANCE {
            return v;
        }
        let w = central(mutate, h * 0.1);
        if rel_err(w, analytic) < GRADIENT_TOLERANCE {
            retried.set(retried.get() + 1);
            w
        } else {
            v
        }
    };

    let mut position = ClassReport::new("position");
    let mut rotation = ClassReport::new("rotation");
    let mut scale = ClassReport::new("log_scale");
    let mut opacity = ClassReport::new("opacity_logit");
    let mut color = ClassReport::new("color");
    for i in 0..n {
        for k in 0..3 {
            let v = fd(&|gs, _, h| gs[i].position[k] += h, step, g.position[i][k]);
            position.record(format!("g{i}.{k}"), v, g.position[i][k]);
            let v = fd(&|gs, _, h| gs[i].log_scale_opt[k] += h, step, g.log_scale[i][k]);
            scale.record(format!("g{i}.{k}"), v, g.log_scale[i][k]);
            let v = fd(&|gs, _, h| gs[i].color[k] += h, step, g.color[i][k]);
            color.record(format!("g{i}.{k}"), v, g.color[i][k]);
        }
        for k in 0..4 {
            let v = fd(&|gs, _, h| gs[i].rotation[k] += h, rotation_step, g.rotation[i][k]);
            rotation.record(format!("g{i}.{k}"), v, g.rotation[i][k]);
        }
        let v = fd(&|gs, _, h| gs[i].opacity_logit += h, step, g.opacity_logit[i]);
        opacity.record(format!("g{i}"), v, g.opacity_logit[i]);
    }

    let mut features = ClassReport::new("features");
    for k in 0..inst.field.features.len() {
        let v = fd(&|_, f, h| f.features[k] += h, step, g.features[k]);
        features.record(format!("f{k}"), v, g.features[k]);
    }

    let mut offset_net = ClassReport::new("offset_net");
    let mut residual_net = ClassReport::new("residual_net");
    for (report, which) in [(&mut offset_net, 0usize), (&mut residual_net, 1)] {
        let net = |f: &DeformField| if which == 0 { f.offset_net.clone() } else { f.residual_net.clone() };
        let analytic = if which == 0 { &g.field.offset_net } else { &g.field.residual_net };
        let tensors = net(&inst.field).tensors().iter().map(|t| t.len()).collect::<Vec<_>>();
        for (ti, len) in tensors.into_iter().enumerate() {
            for k in (0..len).step_by(7) {
                let v = fd(
                    &|_, f, h| {
                        let m = if which == 0 { &mut f.offset_net } else { &mut f.residual_net };
                        m.tensors_mut()[ti][k] += h;
                    },
                    step,
                    analytic.tensors()[ti][k],
                );
                report.record(format!("t{ti}[{k}]"), v, analytic.tensors()[ti][k]);
            }
        }
    }
    SuiteReport {
        classes: vec![position, rotation, scale, opacity, color, features, offset_net, residual_net],
        retried: retried.get(),
    }
}
