//! Optimization loop: Adam over every parameter group, with the
//! level-of-detail, decomposition, neighbour-refresh and densification
//! barriers that restructure the scene between steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::decomposition::{classify, deformation_variance, sample_times, Partition};
use crate::deform::{knn_all, DeformField};
use crate::error::{Error, Result};
use crate::gaussian::{Camera, Gaussian};
use crate::image::Image;
use crate::lod::{accumulate_importance, advance_level, densify_and_prune, solve_log_scale};
use crate::losses::{ani_loss_with_grad, image_loss_with_grad, psnr, reg_loss_with_grad, ssim};
use crate::math::{logit, Vec3};
use crate::render::{deform, render, render_backward, ExtraGrads, RenderSettings, SceneGrads, SceneView};
use crate::so3::{quat_normalize, rotation_to_quat, IDENTITY_QUAT};
use crate::synth::{initial_point_cloud, Dataset, SceneSpec};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;

/// First and second moments of one parameter group.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Adam update of `params` with moments stored from `offset` on.
    fn update(&mut self, offset: usize, params: &mut [f64], grads: &[f64], lr: f64, step: u64) {
        let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.m[offset + k];
            let v = &mut self.v[offset + k];
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
        }
    }

    /// Rows of width `w` gathered by `source`; fresh rows start at zero.
    fn remap(&mut self, source: &[usize], fresh: &[bool], w: usize) {
        let mut out = Moments::zeros(source.len() * w);
        for (r, (&s, &f)) in source.iter().zip(fresh).enumerate() {
            if !f {
                out.m[r * w..(r + 1) * w].copy_from_slice(&self.m[s * w..(s + 1) * w]);
                out.v[r * w..(r + 1) * w].copy_from_slice(&self.v[s * w..(s + 1) * w]);
            }
        }
        *self = out;
    }
}

/// Per-Gaussian parameter groups, in checkpoint order, with row widths.
pub const GAUSSIAN_GROUPS: [(&str, usize); 5] =
    [("position", 3), ("rotation", 4), ("scale", 3), ("opacity", 1), ("color", 3)];

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    /// Number of updates applied so far.
    pub step: u64,
    /// One entry per [`GAUSSIAN_GROUPS`] element.
    pub gaussian: Vec<Moments>,
    pub features: Moments,
    pub offset_net: Moments,
    pub residual_net: Moments,
}

fn net_len(net: &crate::deform::Mlp) -> usize {
    net.tensors().iter().map(|t| t.len()).sum()
}

impl AdamState {
    pub fn new(n: usize, field: &DeformField) -> Self {
        AdamState {
            step: 0,
            gaussian: GAUSSIAN_GROUPS.iter().map(|(_, w)| Moments::zeros(n * w)).collect(),
            features: Moments::zeros(field.features.len()),
            offset_net: Moments::zeros(net_len(&field.offset_net)),
            residual_net: Moments::zeros(net_len(&field.residual_net)),
        }
    }

    fn remap(&mut self, source: &[usize], fresh: &[bool], feature_dim: usize) {
        for (m, (_, w)) in self.gaussian.iter_mut().zip(GAUSSIAN_GROUPS) {
            m.remap(source, fresh, w);
        }
        self.features.remap(source, fresh, feature_dim);
    }
}

/// Exponential interpolation from `init` to `last` over `total` steps.
pub fn exp_decay(init: f64, last: f64, step: u64, total: u64) -> f64 {
    let f = (step as f64 / total.max(1) as f64).clamp(0.0, 1.0);
    (init.ln() * (1.0 - f) + last.ln() * f).exp()
}

/// Loss terms of one optimizer step (batch means).
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub iteration: u64,
    pub loss: f64,
    pub image: f64,
    pub reg: f64,
    pub ani: f64,
    pub gaussians: usize,
    pub dynamic: usize,
    pub level: u32,
    pub noise_sigma: f64,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "iteration,loss,l_img,l_reg,l_ani,gaussians,dynamic,level,noise_sigma";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{},{},{},{:e}",
            self.iteration,
            self.loss,
            self.image,
            self.reg,
            self.ani,
            self.gaussians,
            self.dynamic,
            self.level,
            self.noise_sigma
        )
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: RunConfig,
    /// Index of the next iteration to run.
    pub iteration: u64,
    pub gaussians: Vec<Gaussian>,
    pub field: DeformField,
    /// Nearest dynamic neighbours (global indices) of each dynamic Gaussian.
    pub neighbors: Vec<Vec<usize>>,
    /// Latest decomposition scores; empty before the first evaluation.
    pub scores: Vec<f64>,
    pub adam: AdamState,
    /// Summed screen-space gradient norms since the last densification.
    pub densify_grad: Vec<f64>,
    /// Frames in which each Gaussian was visible since the last densification.
    pub densify_count: Vec<u32>,
    pub rng: ChaCha8Rng,
}

fn finite_grads(g: &SceneGrads) -> bool {
    let v3 = |v: &[Vec3]| v.iter().all(|x| x.iter().all(|c| c.is_finite()));
    v3(&g.position)
        && v3(&g.log_scale)
        && v3(&g.color)
        && g.rotation.iter().flatten().all(|c| c.is_finite())
        && g.opacity_logit.iter().all(|c| c.is_finite())
        && g.features.iter().all(|c| c.is_finite())
        && g.field.offset_net.is_finite()
        && g.field.residual_net.is_finite()
}

fn flat3(v: impl Iterator<Item = Vec3>) -> Vec<f64> {
    v.flat_map(|x| [x.x, x.y, x.z]).collect()
}

impl TrainState {
    /// Fresh state initialized from the dataset's jittered ground-truth point
    /// cloud at the first frame: isotropic Gaussians sized by their three
    /// nearest neighbours, all treated as dynamic until the first partition.
    pub fn new(mut config: RunConfig, data: &Dataset) -> Result<Self> {
        Self::bind_dataset(&mut config, &data.spec);
        config.validate()?;
        let spec = &data.spec;
        let cloud = initial_point_cloud(spec, spec.timestamp(0), config.train.init_jitter, config.seed);
        if cloud.is_empty() {
            return Err(Error::invalid("scene has no Gaussians to initialize from"));
        }
        let positions: Vec<Vec3> = cloud.iter().map(|(p, _)| *p).collect();
        let near = knn_all(&positions, 3);
        let mut gaussians = Vec::with_capacity(cloud.len());
        for (i, (p, c)) in cloud.iter().enumerate() {
            let d = if near[i].is_empty() {
                0.1 * config.field.extent
            } else {
                near[i].iter().map(|&j| (positions[j] - p).norm()).sum::<f64>() / near[i].len() as f64
            };
            let (s, _) = solve_log_scale(&Vec3::repeat(d.max(1e-4)), 1, &config.lod)?;
            gaussians.push(Gaussian {
                position: *p,
                rotation: IDENTITY_QUAT,
                log_scale_opt: s,
                opacity_logit: logit(config.train.init_opacity),
                color: *c,
                level: 1,
                accumulated_importance: 0.0,
                dynamic: true,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let field = DeformField::new(config.field.clone(), gaussians.len(), &mut rng);
        Ok(Self::assemble(config, gaussians, field, rng))
    }

    /// A checkpoint holding the ground-truth Gaussians of a scene without
    /// moving objects, at the finest level (its floor is zero, so the
    /// effective scales are exact).
    pub fn oracle(mut config: RunConfig, spec: &SceneSpec) -> Result<Self> {
        Self::bind_dataset(&mut config, spec);
        config.validate()?;
        if spec.objects.iter().any(|o| !o.is_static()) {
            return Err(Error::invalid("oracle checkpoints need a scene without moving objects"));
        }
        let level = config.lod.max_level;
        let mut gaussians = Vec::with_capacity(spec.gaussian_count());
        for o in &spec.objects {
            for g in &o.gaussians {
                let (s, _) = solve_log_scale(&g.scale, level, &config.lod)?;
                gaussians.push(Gaussian {
                    position: g.position,
                    rotation: rotation_to_quat(&crate::so3::quat_to_rotation(&g.rotation))?,
                    log_scale_opt: s,
                    opacity_logit: logit(g.opacity),
                    color: g.color,
                    level,
                    accumulated_importance: 0.0,
                    dynamic: false,
                });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let field = DeformField::new(config.field.clone(), gaussians.len(), &mut rng);
        let mut state = Self::assemble(config, gaussians, field, rng);
        state.iteration = state.config.train.iterations;
        Ok(state)
    }

    /// The background and exposure interval come from the data, not the
    /// config file.
    fn bind_dataset(config: &mut RunConfig, spec: &SceneSpec) {
        config.render.background = spec.background;
        config.render.dt = spec.exposure_time();
    }

    fn assemble(config: RunConfig, gaussians: Vec<Gaussian>, field: DeformField, rng: ChaCha8Rng) -> Self {
        let n = gaussians.len();
        let adam = AdamState::new(n, &field);
        let mut state = TrainState {
            config,
            iteration: 0,
            gaussians,
            field,
            neighbors: Vec::new(),
            scores: Vec::new(),
            adam,
            densify_grad: vec![0.0; n],
            densify_count: vec![0; n],
            rng,
        };
        state.refresh_neighbors();
        state
    }

    pub fn dynamic_mask(&self) -> Vec<bool> {
        self.gaussians.iter().map(|g| g.dynamic).collect()
    }

    pub fn dynamic_count(&self) -> usize {
        self.gaussians.iter().filter(|g| g.dynamic).count()
    }

    pub fn level(&self) -> u32 {
        self.gaussians.first().map_or(1, |g| g.level)
    }

    pub fn refresh_neighbors(&mut self) {
        let n = self.gaussians.len();
        let idx: Vec<usize> = (0..n).filter(|&i| self.gaussians[i].dynamic).collect();
        let pos: Vec<Vec3> = idx.iter().map(|&i| self.gaussians[i].position).collect();
        self.neighbors = vec![Vec::new(); n];
        for (a, nb) in knn_all(&pos, self.config.train.knn_k).into_iter().enumerate() {
            self.neighbors[idx[a]] = nb.into_iter().map(|b| idx[b]).collect();
        }
    }

    fn view<'a>(&'a self, dynamic: &'a [bool]) -> SceneView<'a> {
        SceneView {
            gaussians: &self.gaussians,
            field: &self.field,
            dynamic,
            neighbors: &self.neighbors,
            lod: &self.config.lod,
        }
    }

    /// Temporal variance of every Gaussian's predicted position offset,
    /// noise-free, over the configured sample times: the composed
    /// (neighbourhood plus residual) offset for dynamic Gaussians, the offset
    /// network's own output for static ones.
    pub fn decomposition_scores(&self) -> Result<Vec<f64>> {
        let dynamic = self.dynamic_mask();
        let view = self.view(&dynamic);
        let settings = RenderSettings {
            refine: false,
            static_offsets: true,
            ..self.config.render.clone()
        };
        let n = self.gaussians.len();
        let mut samples = vec![Vec::with_capacity(self.config.decomposition.samples); n];
        for t in sample_times(self.config.decomposition.samples) {
            let d = deform(&view, t, None, &settings)?;
            for (s, dx) in samples.iter_mut().zip(d.dx) {
                s.push(dx);
            }
        }
        samples.par_iter().map(|s| deformation_variance(s)).collect()
    }

    pub fn partition(&self) -> Partition {
        let mut p = classify(&self.scores, self.config.decomposition.tau);
        if self.scores.is_empty() {
            p = Partition::all_dynamic(self.gaussians.len());
        }
        p
    }

    fn apply_partition(&mut self) -> Result<()> {
        self.scores = self.decomposition_scores()?;
        let p = classify(&self.scores, self.config.decomposition.tau);
        for (g, d) in self.gaussians.iter_mut().zip(p.is_dynamic_mask()) {
            g.dynamic = d;
        }
        log::info!(
            "iteration {}: partition {} dynamic / {} static",
            self.iteration,
            p.dynamic_indices.len(),
            p.static_indices.len()
        );
        Ok(())
    }

    /// Gathers every per-Gaussian array by `source` after the scene was
    /// restructured; fresh Gaussians inherit their source's feature row.
    fn remap(&mut self, source: &[usize], fresh: &[bool]) {
        self.field.remap_features(source);
        self.adam.remap(source, fresh, self.field.config.feature_dim);
        if !self.scores.is_empty() {
            self.scores = source.iter().map(|&s| self.scores[s]).collect();
        }
        self.densify_grad = vec![0.0; source.len()];
        self.densify_count = vec![0; source.len()];
    }

    fn run_barriers(&mut self) -> Result<()> {
        let k = self.iteration;
        let mut restructured = false;
        let target = self.config.lod.level_at(k, self.config.train.iterations);
        while self.level() < target {
            let report = advance_level(&mut self.gaussians, &self.config.lod)?;
            let fresh = vec![false; report.keep.len()];
            self.remap(&report.keep, &fresh);
            log::info!("iteration {k}: level {} with {} Gaussians", self.level(), self.gaussians.len());
            restructured = true;
        }
        if k > 0 && self.config.decomposition.schedule.should_evaluate(k) {
            self.apply_partition()?;
            restructured = true;
        }
        if restructured || k % self.config.train.knn_refresh == 0 {
            self.refresh_neighbors();
        }
        Ok(())
    }

    fn densify(&mut self) -> Result<()> {
        let k = self.iteration;
        let lod = &self.config.lod;
        if k == 0 || !(lod.is_densify_iteration(k) || k == lod.opacity_reset_iteration) {
            return Ok(());
        }
        let mean: Vec<f64> = self
            .densify_grad
            .iter()
            .zip(&self.densify_count)
            .map(|(g, &c)| if c > 0 { g / c as f64 } else { 0.0 })
            .collect();
        let lod = self.config.lod.clone();
        let report = densify_and_prune(&mut self.gaussians, &mean, k, self.config.field.extent, &lod, &mut self.rng)?;
        if self.gaussians.is_empty() {
            return Err(Error::numerical("densification", "every Gaussian was pruned"));
        }
        self.remap(&report.source, &report.fresh);
        self.refresh_neighbors();
        log::debug!(
            "iteration {k}: split {} clone {} prune {} -> {} Gaussians",
            report.split,
            report.cloned,
            report.pruned,
            self.gaussians.len()
        );
        Ok(())
    }

    fn frame_noise(&mut self, sigma: f64) -> Vec<Vec<f64>> {
        let n = self.gaussians.len();
        if self.config.train.noise_per_gaussian {
            (0..n).map(|_| self.field.sample_noise(sigma, &mut self.rng)).collect()
        } else {
            vec![self.field.sample_noise(sigma, &mut self.rng); n]
        }
    }

    /// Runs the barriers due at the current iteration, then one optimizer
    /// step on a batch of training frames.
    ///
    /// A non-finite loss or gradient aborts before any parameter is touched.
    pub fn step(&mut self, data: &Dataset) -> Result<StepRecord> {
        let train = data.train_indices(self.config.train.held_out_every);
        if train.is_empty() {
            return Err(Error::invalid("dataset has no training frames"));
        }
        self.run_barriers()?;
        let k = self.iteration;
        let sigma = self.config.noise.sigma(k);
        let settings = self.config.render.clone();
        let w = self.config.loss.clone();
        let dynamic = self.dynamic_mask();
        let n = self.gaussians.len();
        let batch = self.config.train.batch;

        let mut grads = SceneGrads::zeros(n, &self.field);
        let (mut l_img, mut l_reg, mut l_ani) = (0.0, 0.0, 0.0);
        let mut importance = vec![0.0; n];
        let mut visible_grad = vec![0.0; n];
        let mut visible = vec![0u32; n];
        for _ in 0..batch {
            let f = train[self.rng.gen_range(0..train.len())];
            let noise = self.frame_noise(sigma);
            let cam = data.cameras[f].camera()?;
            let t = data.spec.timestamp(f);
            let view = self.view(&dynamic);
            let (frame, tape) = render(&view, &cam, t, Some(&noise), &settings)?;
            let (li, d_image) = image_loss_with_grad(&frame.image, &data.blurred[f], w.lambda_dssim)?;
            let (lr, d_dx) = reg_loss_with_grad(&tape.deformed.dx, &dynamic);
            let (la, d_s) = ani_loss_with_grad(&tape.deformed.shape_scale, w.eps_ani);
            let extra = ExtraGrads {
                dx: d_dx.iter().map(|g| g * w.lambda_reg).collect(),
                shape_scale: d_s.iter().map(|g| g * w.lambda_ani).collect(),
            };
            let g = render_backward(&view, &tape, &cam, &d_image, Some(&extra), &settings)?;
            grads.add_assign(&g);
            l_img += li;
            l_reg += lr;
            l_ani += la;
            for i in 0..n {
                importance[i] += frame.importance[i];
                if frame.importance[i] > 0.0 {
                    visible_grad[i] += g.mean2d_norm[i];
                    visible[i] += 1;
                }
            }
        }
        let b = batch as f64;
        grads.scale(1.0 / b);
        let (l_img, l_reg, l_ani) = (l_img / b, l_reg / b, l_ani / b);
        let loss = l_img + w.lambda_reg * l_reg + w.lambda_ani * l_ani;
        if !loss.is_finite() {
            return Err(Error::numerical("loss", format!("non-finite loss at iteration {k}")));
        }
        if !finite_grads(&grads) {
            return Err(Error::numerical("gradients", format!("non-finite gradient at iteration {k}")));
        }

        self.apply_adam(&grads);
        accumulate_importance(&mut self.gaussians, &importance)?;
        for i in 0..n {
            self.densify_grad[i] += visible_grad[i];
            self.densify_count[i] += visible[i];
        }
        self.densify()?;
        let record = StepRecord {
            iteration: k,
            loss,
            image: l_img,
            reg: l_reg,
            ani: l_ani,
            gaussians: self.gaussians.len(),
            dynamic: self.dynamic_count(),
            level: self.level(),
            noise_sigma: sigma,
        };
        self.iteration += 1;
        Ok(record)
    }

    fn apply_adam(&mut self, grads: &SceneGrads) {
        let k = self.iteration;
        let total = self.config.train.iterations;
        let lr = self.config.train.lr.clone();
        self.adam.step += 1;
        let step = self.adam.step;
        let lr_pos = exp_decay(lr.position_init, lr.position_final, k, total);
        let lr_field = exp_decay(lr.field_init, lr.field_final, k, total);

        let gs = &mut self.gaussians;
        let mut p = flat3(gs.iter().map(|g| g.position));
        self.adam.gaussian[0].update(0, &mut p, &flat3(grads.position.iter().copied()), lr_pos, step);
        for (g, c) in gs.iter_mut().zip(p.chunks_exact(3)) {
            g.position = Vec3::new(c[0], c[1], c[2]);
        }
        let mut p: Vec<f64> = gs.iter().flat_map(|g| g.rotation).collect();
        let gr: Vec<f64> = grads.rotation.iter().flatten().copied().collect();
        self.adam.gaussian[1].update(0, &mut p, &gr, lr.rotation, step);
        for (g, c) in gs.iter_mut().zip(p.chunks_exact(4)) {
            g.rotation = quat_normalize(&[c[0], c[1], c[2], c[3]]);
        }
        let mut p = flat3(gs.iter().map(|g| g.log_scale_opt));
        self.adam.gaussian[2].update(0, &mut p, &flat3(grads.log_scale.iter().copied()), lr.scale, step);
        for (g, c) in gs.iter_mut().zip(p.chunks_exact(3)) {
            g.log_scale_opt = Vec3::new(c[0], c[1], c[2]);
        }
        let mut p: Vec<f64> = gs.iter().map(|g| g.opacity_logit).collect();
        self.adam.gaussian[3].update(0, &mut p, &grads.opacity_logit, lr.opacity, step);
        for (g, v) in gs.iter_mut().zip(p) {
            g.opacity_logit = v;
        }
        let mut p = flat3(gs.iter().map(|g| g.color));
        self.adam.gaussian[4].update(0, &mut p, &flat3(grads.color.iter().copied()), lr.color, step);
        for (g, c) in gs.iter_mut().zip(p.chunks_exact(3)) {
            g.color = Vec3::new(c[0], c[1], c[2]).map(|v| v.clamp(0.0, 1.0));
        }
        self.adam.features.update(0, &mut self.field.features, &grads.features, lr.feature, step);
        for (net, g, m) in [
            (&mut self.field.offset_net, &grads.field.offset_net, &mut self.adam.offset_net),
            (&mut self.field.residual_net, &grads.field.residual_net, &mut self.adam.residual_net),
        ] {
            let mut off = 0;
            for (p, g) in net.tensors_mut().into_iter().zip(g.tensors()) {
                m.update(off, p, g, lr_field, step);
                off += g.len();
            }
        }
    }

    /// Instantaneous render of the current scene.
    pub fn render_sharp(&self, cam: &Camera, t: f64) -> Result<Image> {
        let dynamic = self.dynamic_mask();
        let (frame, _) = render(&self.view(&dynamic), cam, t, None, &self.eval_settings())?;
        Ok(frame.image)
    }

    pub fn eval_settings(&self) -> RenderSettings {
        self.config.render.sharp()
    }

    /// PSNR/SSIM of every held-out frame's sharp render against the sharp
    /// ground truth.
    pub fn evaluate(&self, data: &Dataset) -> Result<Vec<FrameMetrics>> {
        data.eval_indices(self.config.train.held_out_every)
            .into_iter()
            .map(|i| {
                let img = self.render_sharp(&data.cameras[i].camera()?, data.spec.timestamp(i))?;
                Ok(FrameMetrics {
                    frame: i,
                    psnr: psnr(&img, &data.sharp[i])?,
                    ssim: ssim(&img, &data.sharp[i])?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMetrics {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
}

impl FrameMetrics {
    pub const CSV_HEADER: &'static str = "frame,psnr,ssim";

    pub fn csv_row(&self) -> String {
        format!("{},{:.6},{:.6}", self.frame, self.psnr, self.ssim)
    }

    /// `(mean PSNR, mean SSIM)`.
    pub fn mean(rows: &[FrameMetrics]) -> (f64, f64) {
        let n = rows.len().max(1) as f64;
        (
            rows.iter().map(|r| r.psnr).sum::<f64>() / n,
            rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        )
    }
}

/// Runs `state` up to its configured iteration count, reporting each step.
pub fn train_to_end(
    state: &mut TrainState,
    data: &Dataset,
    mut on_step: impl FnMut(&TrainState, &StepRecord) -> Result<()>,
) -> Result<()> {
    while state.iteration < state.config.train.iterations {
        let rec = state.step(data)?;
        on_step(state, &rec)?;
    }
    Ok(())
}
