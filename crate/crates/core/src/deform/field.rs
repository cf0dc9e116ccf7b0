//! The time-conditioned deformation field: a per-Gaussian offset predictor,
//! neighbourhood averaging for the coarse motion, and a feature-conditioned
//! residual network for the fine motion.

use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Mul};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::encoding::{encode_into, encode_vjp};
use super::mlp::{Mlp, MlpTape};
use crate::error::{Error, Result};
use crate::math::{clamp_norm, clamp_norm_vjp, Vec3};
use crate::so3::{quat_normalize, Quat};

pub const OFFSET_DIM: usize = 9;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DeformationOffsets {
    pub dx: Vec3,
    /// Axis-angle residual.
    pub dr: Vec3,
    /// Log-scale residual.
    pub ds: Vec3,
}

impl DeformationOffsets {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_finite(&self) -> bool {
        self.dx.iter().chain(self.dr.iter()).chain(self.ds.iter()).all(|v| v.is_finite())
    }

    fn from_raw(raw: &[f64]) -> Self {
        DeformationOffsets {
            dx: Vec3::new(raw[0], raw[1], raw[2]),
            dr: Vec3::new(raw[3], raw[4], raw[5]),
            ds: Vec3::new(raw[6], raw[7], raw[8]),
        }
    }

    fn to_raw(self) -> [f64; OFFSET_DIM] {
        [
            self.dx.x, self.dx.y, self.dx.z, self.dr.x, self.dr.y, self.dr.z, self.ds.x, self.ds.y,
            self.ds.z,
        ]
    }
}

impl Add for DeformationOffsets {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        DeformationOffsets {
            dx: self.dx + o.dx,
            dr: self.dr + o.dr,
            ds: self.ds + o.ds,
        }
    }
}

impl AddAssign for DeformationOffsets {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl Mul<f64> for DeformationOffsets {
    type Output = Self;
    fn mul(self, s: f64) -> Self {
        DeformationOffsets {
            dx: self.dx * s,
            dr: self.dr * s,
            ds: self.ds * s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub time_bands: usize,
    pub pos_bands: usize,
    pub feature_dim: usize,
    pub width: usize,
    pub depth: usize,
    /// Scene half-extent; normalizes encoded positions and bounds `|dx|`.
    pub extent: f64,
    pub max_log_scale_offset: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            time_bands: 6,
            pos_bands: 4,
            feature_dim: 16,
            width: 64,
            depth: 1,
            extent: 2.0,
            max_log_scale_offset: 5.0,
        }
    }
}

impl FieldConfig {
    pub fn offset_inputs(&self) -> usize {
        3 * 2 * self.pos_bands + 4 + 3 + 2 * self.time_bands
    }

    pub fn residual_inputs(&self) -> usize {
        self.feature_dim + 2 * self.time_bands
    }
}

/// Parameters of both networks plus the per-Gaussian feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformField {
    pub config: FieldConfig,
    pub offset_net: Mlp,
    pub residual_net: Mlp,
    /// `feature_dim` entries per Gaussian, consulted only for dynamic ones.
    pub features: Vec<f64>,
}

/// Tape of one offset-network evaluation.
#[derive(Debug, Clone)]
pub struct OffsetTape {
    mlp: MlpTape,
    raw: [f64; OFFSET_DIM],
}

/// Gradients of the offset network w.r.t. its Gaussian inputs.
#[derive(Debug, Clone, Copy, Default)]
pub struct OffsetInputGrads {
    pub position: Vec3,
    /// Gradient on the *normalized* quaternion.
    pub unit_rotation: Quat,
    pub log_scale: Vec3,
}

/// Gradient accumulator for the shared network weights.
#[derive(Debug, Clone)]
pub struct FieldGrads {
    pub offset_net: Mlp,
    pub residual_net: Mlp,
}

impl FieldGrads {
    pub fn add_assign(&mut self, o: &FieldGrads) {
        self.offset_net.add_assign(&o.offset_net);
        self.residual_net.add_assign(&o.residual_net);
    }
}

impl DeformField {
    pub fn new<R: Rng>(config: FieldConfig, gaussians: usize, rng: &mut R) -> Self {
        let offset_net = Mlp::new(
            config.offset_inputs(),
            config.width,
            config.depth,
            OFFSET_DIM,
            rng,
        );
        let residual_net = Mlp::new(
            config.residual_inputs(),
            config.width,
            config.depth,
            OFFSET_DIM,
            rng,
        );
        let mut field = DeformField {
            config,
            offset_net,
            residual_net,
            features: Vec::new(),
        };
        field.resize_features(gaussians, rng);
        field
    }

    pub fn zero_grads(&self) -> FieldGrads {
        FieldGrads {
            offset_net: self.offset_net.zeros_like(),
            residual_net: self.residual_net.zeros_like(),
        }
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        let d = self.config.feature_dim;
        &self.features[i * d..(i + 1) * d]
    }

    /// Grows or shrinks the feature table; new rows are small random values.
    pub fn resize_features<R: Rng>(&mut self, gaussians: usize, rng: &mut R) {
        let d = self.config.feature_dim;
        let normal = Normal::new(0.0, 0.1).expect("valid normal");
        let old = self.features.len() / d.max(1);
        if gaussians <= old {
            self.features.truncate(gaussians * d);
        } else {
            self.features
                .extend((0..(gaussians - old) * d).map(|_| normal.sample(rng)));
        }
    }

    /// Keeps the feature rows of `keep` in order (used after pruning and
    /// cloning).
    pub fn remap_features(&mut self, keep: &[usize]) {
        let d = self.config.feature_dim;
        let mut out = Vec::with_capacity(keep.len() * d);
        for &i in keep {
            out.extend_from_slice(&self.features[i * d..(i + 1) * d]);
        }
        self.features = out;
    }

    fn clamp_offsets(&self, raw: &[f64]) -> DeformationOffsets {
        let o = DeformationOffsets::from_raw(raw);
        let m = self.config.max_log_scale_offset;
        DeformationOffsets {
            dx: clamp_norm(&o.dx, self.config.extent),
            dr: clamp_norm(&o.dr, PI),
            ds: o.ds.map(|v| v.clamp(-m, m)),
        }
    }

    fn clamp_offsets_vjp(&self, raw: &[f64; OFFSET_DIM], d: &DeformationOffsets) -> [f64; OFFSET_DIM] {
        let o = DeformationOffsets::from_raw(raw);
        let m = self.config.max_log_scale_offset;
        DeformationOffsets {
            dx: clamp_norm_vjp(&o.dx, self.config.extent, &d.dx),
            dr: clamp_norm_vjp(&o.dr, PI, &d.dr),
            ds: Vec3::from_fn(|k, _| if o.ds[k].abs() > m { 0.0 } else { d.ds[k] }),
        }
        .to_raw()
    }

    fn offset_input(&self, position: &Vec3, unit_rot: &Quat, log_scale: &Vec3, t: f64, noise: &[f64]) -> Vec<f64> {
        let cfg = &self.config;
        let mut x = Vec::with_capacity(cfg.offset_inputs());
        for k in 0..3 {
            encode_into(position[k] / cfg.extent, cfg.pos_bands, &mut x);
        }
        x.extend_from_slice(unit_rot);
        x.extend(log_scale.iter().copied());
        let start = x.len();
        encode_into(t, cfg.time_bands, &mut x);
        for (v, n) in x[start..].iter_mut().zip(noise) {
            *v += n;
        }
        x
    }

    /// Offset prediction with an explicit noise vector (length `2 L_t`, or
    /// empty for none). `log_scale` is the log of the effective scale.
    pub fn predict_with_noise(
        &self,
        position: &Vec3,
        rotation: &Quat,
        log_scale: &Vec3,
        t: f64,
        noise: &[f64],
    ) -> Result<(DeformationOffsets, OffsetTape)> {
        let unit = quat_normalize(rotation);
        let input = self.offset_input(position, &unit, log_scale, t, noise);
        let tape = self.offset_net.forward(&input);
        let out = tape.output();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(
                "offset_net output layer",
                "non-finite deformation offsets",
            ));
        }
        let mut raw = [0.0; OFFSET_DIM];
        raw.copy_from_slice(out);
        Ok((self.clamp_offsets(&raw), OffsetTape { mlp: tape, raw }))
    }

    /// Draws i.i.d. `N(0, noise_sigma^2)` input noise and predicts offsets.
    pub fn predict_offsets<R: Rng>(
        &self,
        position: &Vec3,
        rotation: &Quat,
        log_scale: &Vec3,
        t: f64,
        noise_sigma: f64,
        rng: &mut R,
    ) -> Result<DeformationOffsets> {
        let noise = self.sample_noise(noise_sigma, rng);
        Ok(self.predict_with_noise(position, rotation, log_scale, t, &noise)?.0)
    }

    pub fn sample_noise<R: Rng>(&self, noise_sigma: f64, rng: &mut R) -> Vec<f64> {
        if noise_sigma <= 0.0 {
            return Vec::new();
        }
        let normal = Normal::new(0.0, noise_sigma).expect("positive sigma");
        (0..2 * self.config.time_bands).map(|_| normal.sample(rng)).collect()
    }

    /// Backward of [`Self::predict_with_noise`].
    pub fn offset_backward(
        &self,
        tape: &OffsetTape,
        position: &Vec3,
        d_offsets: &DeformationOffsets,
        grads: &mut Mlp,
    ) -> OffsetInputGrads {
        let d_raw = self.clamp_offsets_vjp(&tape.raw, d_offsets);
        let d_in = self.offset_net.backward(&tape.mlp, &d_raw, grads);
        let cfg = &self.config;
        let block = 2 * cfg.pos_bands;
        let mut out = OffsetInputGrads::default();
        for k in 0..3 {
            let slice = &d_in[k * block..(k + 1) * block];
            out.position[k] = encode_vjp(position[k] / cfg.extent, cfg.pos_bands, slice) / cfg.extent;
        }
        let r0 = 3 * block;
        out.unit_rotation.copy_from_slice(&d_in[r0..r0 + 4]);
        out.log_scale = Vec3::new(d_in[r0 + 4], d_in[r0 + 5], d_in[r0 + 6]);
        out
    }

    fn residual_input(&self, feature: &[f64], t: f64) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.config.residual_inputs());
        x.extend_from_slice(feature);
        encode_into(t, self.config.time_bands, &mut x);
        x
    }

    /// Fine residual for the Gaussian whose feature row is `feature`.
    pub fn fine_deform(&self, feature: &[f64], t: f64) -> Result<(DeformationOffsets, OffsetTape)> {
        let tape = self.residual_net.forward(&self.residual_input(feature, t));
        let out = tape.output();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(
                "residual_net output layer",
                "non-finite residual offsets",
            ));
        }
        let mut raw = [0.0; OFFSET_DIM];
        raw.copy_from_slice(out);
        Ok((self.clamp_offsets(&raw), OffsetTape { mlp: tape, raw }))
    }

    /// Backward of [`Self::fine_deform`]; returns `dL/dfeature`.
    pub fn fine_backward(&self, tape: &OffsetTape, d_offsets: &DeformationOffsets, grads: &mut Mlp) -> Vec<f64> {
        let d_raw = self.clamp_offsets_vjp(&tape.raw, d_offsets);
        let mut d_in = self.residual_net.backward(&tape.mlp, &d_raw, grads);
        d_in.truncate(self.config.feature_dim);
        d_in
    }

    pub fn is_finite(&self) -> bool {
        self.offset_net.is_finite()
            && self.residual_net.is_finite()
            && self.features.iter().all(|v| v.is_finite())
    }
}

/// Arithmetic mean of the neighbours' offsets, or the Gaussian's own
/// offsets when it has no neighbours.
pub fn coarse_deform(
    idx: usize,
    neighbors: &[usize],
    offsets: &[DeformationOffsets],
) -> DeformationOffsets {
    if neighbors.is_empty() {
        return offsets[idx];
    }
    let mut acc = DeformationOffsets::zero();
    for &j in neighbors {
        acc += offsets[j];
    }
    acc * (1.0 / neighbors.len() as f64)
}

pub fn compose_deformation(coarse: &DeformationOffsets, fine: &DeformationOffsets) -> DeformationOffsets {
    *coarse + *fine
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn perturbed_field(seed: u64) -> DeformField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = FieldConfig {
            width: 16,
            feature_dim: 4,
            ..FieldConfig::default()
        };
        let mut f = DeformField::new(cfg, 3, &mut rng);
        for net in [&mut f.offset_net, &mut f.residual_net] {
            for t in net.tensors_mut() {
                for v in t.iter_mut() {
                    *v += rng.gen_range(-0.2..0.2);
                }
            }
        }
        f
    }

    fn offsets_dot(o: &DeformationOffsets, w: &[f64; 9]) -> f64 {
        o.to_raw().iter().zip(w).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn zero_head_gives_zero_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = DeformField::new(FieldConfig::default(), 2, &mut rng);
        let o = f
            .predict_offsets(&Vec3::new(0.3, 0.1, -0.2), &[1.0, 0.0, 0.0, 0.0], &Vec3::zeros(), 0.4, 0.5, &mut rng)
            .unwrap();
        assert_eq!(o, DeformationOffsets::zero());
        let (fine, _) = f.fine_deform(f.feature(1), 0.7).unwrap();
        assert_eq!(fine, DeformationOffsets::zero());
    }

    #[test]
    fn noiseless_prediction_is_deterministic() {
        let f = perturbed_field(3);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let p = Vec3::new(0.4, -0.3, 0.9);
        let q = [0.9, 0.1, -0.2, 0.3];
        let a = f.predict_offsets(&p, &q, &Vec3::new(-2.0, -1.5, -1.0), 0.25, 0.0, &mut r1).unwrap();
        let b = f.predict_offsets(&p, &q, &Vec3::new(-2.0, -1.5, -1.0), 0.25, 0.0, &mut r2).unwrap();
        assert_eq!(a, b);
        let (c, _) = f.fine_deform(f.feature(0), 0.6).unwrap();
        let (d, _) = f.fine_deform(f.feature(0), 0.6).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn offset_gradients_match_central_differences() {
        let f = perturbed_field(5);
        let p = Vec3::new(0.4, -0.3, 0.9);
        let q: Quat = [0.9, 0.1, -0.2, 0.3];
        let ls = Vec3::new(-2.0, -1.5, -1.0);
        let w = [0.3, -0.5, 0.8, 0.1, 0.2, -0.4, 0.6, -0.1, 0.05];
        let loss = |f: &DeformField, p: &Vec3, q: &Quat, ls: &Vec3| {
            offsets_dot(&f.predict_with_noise(p, q, ls, 0.3, &[]).unwrap().0, &w)
        };
        let (o, tape) = f.predict_with_noise(&p, &q, &ls, 0.3, &[]).unwrap();
        assert!(o.is_finite());
        let mut grads = f.offset_net.zeros_like();
        let d = DeformationOffsets::from_raw(&w);
        let gi = f.offset_backward(&tape, &p, &d, &mut grads);
        let h = 1e-4;
        let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        for k in 0..3 {
            let e = Vec3::ith(k, h);
            let fd = (loss(&f, &(p + e), &q, &ls) - loss(&f, &(p - e), &q, &ls)) / (2.0 * h);
            assert!(rel(fd, gi.position[k]) < 1e-4, "pos {k}: {fd} {}", gi.position[k]);
            let fd = (loss(&f, &p, &q, &(ls + e)) - loss(&f, &p, &q, &(ls - e))) / (2.0 * h);
            assert!(rel(fd, gi.log_scale[k]) < 1e-4);
        }
        // weights of the first layer
        for wi in (0..f.offset_net.layers[0].weight.len()).step_by(37) {
            let mut fp = f.clone();
            let mut fm = f.clone();
            fp.offset_net.layers[0].weight[wi] += h;
            fm.offset_net.layers[0].weight[wi] -= h;
            let fd = (loss(&fp, &p, &q, &ls) - loss(&fm, &p, &q, &ls)) / (2.0 * h);
            let an = grads.layers[0].weight[wi];
            if fd.abs().max(an.abs()) > 1e-8 {
                assert!(rel(fd, an) < 1e-4, "w {wi}: {fd} {an}");
            }
        }
    }

    #[test]
    fn feature_gradients_match_central_differences() {
        let f = perturbed_field(7);
        let w = [0.3, -0.5, 0.8, 0.1, 0.2, -0.4, 0.6, -0.1, 0.05];
        let feat = f.feature(2).to_vec();
        let (_, tape) = f.fine_deform(&feat, 0.8).unwrap();
        let mut grads = f.residual_net.zeros_like();
        let df = f.fine_backward(&tape, &DeformationOffsets::from_raw(&w), &mut grads);
        let h = 1e-4;
        for k in 0..feat.len() {
            let mut fp = feat.clone();
            let mut fm = feat.clone();
            fp[k] += h;
            fm[k] -= h;
            let fd = (offsets_dot(&f.fine_deform(&fp, 0.8).unwrap().0, &w)
                - offsets_dot(&f.fine_deform(&fm, 0.8).unwrap().0, &w))
                / (2.0 * h);
            assert!((fd - df[k]).abs() <= 1e-4 * fd.abs().max(1e-4), "{fd} {}", df[k]);
        }
    }

    #[test]
    fn coarse_examples() {
        let o = DeformationOffsets {
            dx: Vec3::new(1.0, 2.0, 3.0),
            dr: Vec3::new(0.1, 0.0, 0.0),
            ds: Vec3::new(0.0, 0.2, 0.0),
        };
        let offs = vec![o; 5];
        assert_eq!(coarse_deform(0, &[1, 2, 3], &offs), o);

        let a = Vec3::new(0.5, -0.2, 0.1);
        let offs = vec![
            DeformationOffsets::zero(),
            DeformationOffsets { dx: a, ..Default::default() },
            DeformationOffsets { dx: -a, ..Default::default() },
        ];
        assert_eq!(coarse_deform(0, &[1, 2], &offs), DeformationOffsets::zero());

        let offs: Vec<DeformationOffsets> = (0..4)
            .map(|i| DeformationOffsets {
                dx: if i == 0 { Vec3::zeros() } else { Vec3::ith(i - 1, 1.0) },
                ..Default::default()
            })
            .collect();
        let c = coarse_deform(0, &[1, 2, 3], &offs);
        assert!((c.dx - Vec3::repeat(1.0 / 3.0)).norm() < 1e-15);
        assert_eq!(coarse_deform(2, &[], &offs), offs[2]);
    }

    #[test]
    fn composition() {
        let c = DeformationOffsets { dx: Vec3::repeat(1.0), ..Default::default() };
        let f = DeformationOffsets { dx: Vec3::new(-1.0, 0.0, 0.0), ..Default::default() };
        assert_eq!(compose_deformation(&c, &DeformationOffsets::zero()), c);
        assert_eq!(compose_deformation(&DeformationOffsets::zero(), &f), f);
        assert_eq!(compose_deformation(&c, &f).dx, Vec3::new(0.0, 1.0, 1.0));
        assert_eq!(compose_deformation(&c, &f), compose_deformation(&f, &c));
    }

    #[test]
    fn offsets_are_clamped() {
        let mut f = perturbed_field(9);
        let last = f.offset_net.layers.len() - 1;
        for b in f.offset_net.layers[last].bias.iter_mut() {
            *b = 100.0;
        }
        let (o, _) = f
            .predict_with_noise(&Vec3::zeros(), &[1.0, 0.0, 0.0, 0.0], &Vec3::zeros(), 0.0, &[])
            .unwrap();
        assert!(o.dx.norm() <= f.config.extent + 1e-12);
        assert!(o.dr.norm() <= PI + 1e-12);
        assert!(o.ds.iter().all(|v| v.abs() <= 5.0));
    }
}
