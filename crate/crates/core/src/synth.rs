//! Procedural ground-truth scenes, the temporal-integration blur oracle, and
//! the on-disk dataset layout.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! scene.json              the SceneSpec
//! cameras.json            per-frame world-to-camera [R|t], intrinsics,
//!                         timestamp and exposure
//! frames/00000_blur.ppm   exposure-averaged frame (binary P6, maxval 255)
//! frames/00000_sharp.ppm  instantaneous frame at the window center
//! ```

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{rs_covariance, Camera};
use crate::image::Image;
use crate::math::{Mat3, Vec3};
use crate::render::{rasterize, Primitive, RasterSettings};
use crate::so3::{exp_map_so3, quat_to_rotation, rotation_to_quat, Quat};

/// One elementary motion; objects compose several of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Motion {
    Linear { velocity: Vec3 },
    Sinusoid { amplitude: Vec3, frequency: f64, phase: f64 },
    /// Parabolic arcs of height `apex` along `up`, reflecting elastically off
    /// the floor every `period`.
    Bounce { up: Vec3, apex: f64, period: f64 },
    Spin { omega: Vec3 },
}

impl Motion {
    fn validate(&self) -> Result<()> {
        let ok = match self {
            Motion::Linear { velocity } => velocity.iter().all(|v| v.is_finite()),
            Motion::Sinusoid { amplitude, frequency, phase } => {
                amplitude.iter().all(|v| v.is_finite()) && frequency.is_finite() && phase.is_finite()
            }
            Motion::Bounce { up, apex, period } => up.norm() > 0.0 && apex.is_finite() && *period > 0.0,
            Motion::Spin { omega } => omega.iter().all(|v| v.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid motion {self:?}")))
        }
    }
}

/// Displacement and rotation of a motion at time `t`.
pub fn eval_trajectory(motion: &Motion, t: f64) -> (Vec3, Mat3) {
    match motion {
        Motion::Linear { velocity } => (velocity * t, Mat3::identity()),
        Motion::Sinusoid { amplitude, frequency, phase } => {
            (amplitude * (2.0 * PI * frequency * t + phase).sin(), Mat3::identity())
        }
        Motion::Bounce { up, apex, period } => {
            let u = (t / period).rem_euclid(1.0);
            let s = 2.0 * u - 1.0;
            (up.normalize() * (apex * (1.0 - s * s)), Mat3::identity())
        }
        Motion::Spin { omega } => (Vec3::zeros(), exp_map_so3(&(omega * t))),
    }
}

/// A ground-truth Gaussian in object space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub position: Vec3,
    pub rotation: Quat,
    pub scale: Vec3,
    pub opacity: f64,
    pub color: Vec3,
}

/// A rigid group of Gaussians sharing one composed trajectory about `pivot`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub name: String,
    pub pivot: Vec3,
    /// Empty for static objects.
    pub motions: Vec<Motion>,
    pub gaussians: Vec<Prototype>,
}

impl SceneObject {
    pub fn is_static(&self) -> bool {
        self.motions.is_empty()
    }

    /// Rigid transform `(translation, rotation)` at `t`: a point `x` maps to
    /// `pivot + translation + rotation (x - pivot)`.
    pub fn pose(&self, t: f64) -> (Vec3, Mat3) {
        let mut d = Vec3::zeros();
        let mut r = Mat3::identity();
        for m in &self.motions {
            let (dm, rm) = eval_trajectory(m, t);
            d += dm;
            r = rm * r;
        }
        (d, r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub eye: Vec3,
    pub focal: f64,
    pub width: u32,
    pub height: u32,
    /// Eye velocity in world units per unit time (zero for a static camera).
    pub pan: Vec3,
}

impl CameraSpec {
    pub fn at(&self, t: f64) -> Camera {
        Camera::axis_aligned(self.eye + self.pan * t, self.focal, self.width, self.height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub name: String,
    pub seed: u64,
    pub frames: usize,
    pub fps: f64,
    /// Fraction of the frame interval the shutter is open.
    pub exposure: f64,
    pub n_blur: usize,
    pub background: Vec3,
    pub camera: CameraSpec,
    pub objects: Vec<SceneObject>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::invalid("scene needs at least 2 frames"));
        }
        if !(self.exposure > 0.0 && self.exposure <= 1.0) {
            return Err(Error::invalid("exposure fraction must lie in (0, 1]"));
        }
        if self.n_blur == 0 {
            return Err(Error::invalid("n_blur must be at least 1"));
        }
        if !(self.fps > 0.0) {
            return Err(Error::invalid("fps must be positive"));
        }
        self.camera.at(0.0).validate()?;
        for o in &self.objects {
            for m in &o.motions {
                m.validate()?;
            }
            for g in &o.gaussians {
                if !(g.opacity > 0.0 && g.opacity < 1.0) || g.scale.iter().any(|&s| !(s > 0.0)) {
                    return Err(Error::invalid(format!("object {}: invalid prototype", o.name)));
                }
            }
        }
        Ok(())
    }

    pub fn gaussian_count(&self) -> usize {
        self.objects.iter().map(|o| o.gaussians.len()).sum()
    }

    /// Frame interval in normalized time.
    pub fn frame_interval(&self) -> f64 {
        1.0 / self.frames as f64
    }

    /// Center of frame `i`'s exposure window.
    pub fn timestamp(&self, i: usize) -> f64 {
        (i as f64 + 0.5) / self.frames as f64
    }

    pub fn exposure_time(&self) -> f64 {
        self.exposure * self.frame_interval()
    }

    /// `n_blur` centered strata of frame `i`'s exposure window.
    pub fn blur_times(&self, i: usize) -> Vec<f64> {
        let c = self.timestamp(i);
        let e = self.exposure_time();
        let n = self.n_blur as f64;
        (0..self.n_blur).map(|k| c + e * ((k as f64 + 0.5) / n - 0.5)).collect()
    }

    /// Ground-truth primitives at time `t`, object by object.
    pub fn primitives(&self, t: f64) -> Vec<Primitive> {
        let mut out = Vec::with_capacity(self.gaussian_count());
        for o in &self.objects {
            let (d, r) = o.pose(t);
            for g in &o.gaussians {
                let rot = r * quat_to_rotation(&g.rotation);
                out.push(Primitive {
                    mean: o.pivot + d + r * (g.position - o.pivot),
                    cov: rs_covariance(&rot, &g.scale),
                    opacity: g.opacity,
                    color: g.color,
                });
            }
        }
        out
    }

    /// Per-Gaussian "moving" flag in [`Self::primitives`] order.
    pub fn moving_mask(&self) -> Vec<bool> {
        self.objects
            .iter()
            .flat_map(|o| std::iter::repeat(!o.is_static()).take(o.gaussians.len()))
            .collect()
    }

    fn raster_settings(&self) -> RasterSettings {
        RasterSettings {
            background: self.background,
            ..RasterSettings::default()
        }
    }

    pub fn render_at(&self, t: f64) -> Result<Image> {
        let (frame, _) = rasterize(&self.primitives(t), &self.camera.at(t), &self.raster_settings())?;
        Ok(frame.image)
    }
}

/// Instantaneous render at the center of frame `i`.
pub fn render_sharp(spec: &SceneSpec, i: usize) -> Result<Image> {
    spec.render_at(spec.timestamp(i))
}

/// Mean of `n_blur` instantaneous renders across frame `i`'s exposure.
pub fn render_blurred(spec: &SceneSpec, i: usize) -> Result<Image> {
    let times = spec.blur_times(i);
    let mut acc = Image::new(spec.camera.width, spec.camera.height);
    for &t in &times {
        let img = spec.render_at(t)?;
        for (a, b) in acc.data.iter_mut().zip(&img.data) {
            *a += b;
        }
    }
    let n = times.len() as f64;
    acc.data.iter_mut().for_each(|v| *v /= n);
    Ok(acc)
}

/// Camera record as stored in `cameras.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameCamera {
    pub index: usize,
    /// Row-major 3x4 world-to-camera matrix.
    pub world_to_camera: [[f64; 4]; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub timestamp: f64,
    pub exposure: f64,
}

impl FrameCamera {
    pub fn new(index: usize, cam: &Camera, timestamp: f64, exposure: f64) -> Self {
        let mut m = [[0.0; 4]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for c in 0..3 {
                row[c] = cam.rotation[(r, c)];
            }
            row[3] = cam.translation[r];
        }
        FrameCamera {
            index,
            world_to_camera: m,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            timestamp,
            exposure,
        }
    }

    pub fn camera(&self) -> Result<Camera> {
        let m = &self.world_to_camera;
        let rotation = Mat3::from_fn(|r, c| m[r][c]);
        let translation = Vec3::new(m[0][3], m[1][3], m[2][3]);
        Camera::new(
            rotation,
            translation,
            (self.fx, self.fy),
            (self.cx, self.cy),
            (self.width, self.height),
            0.01,
        )
    }
}

/// A generated or loaded dataset. Frames are 8-bit quantized, exactly as
/// stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub cameras: Vec<FrameCamera>,
    pub blurred: Vec<Image>,
    pub sharp: Vec<Image>,
}

impl Dataset {
    /// Every `every`-th frame (starting at 0) is held out for evaluation.
    pub fn is_held_out(index: usize, every: usize) -> bool {
        every > 0 && index % every == 0
    }

    pub fn train_indices(&self, every: usize) -> Vec<usize> {
        (0..self.blurred.len()).filter(|&i| !Self::is_held_out(i, every)).collect()
    }

    pub fn eval_indices(&self, every: usize) -> Vec<usize> {
        (0..self.blurred.len()).filter(|&i| Self::is_held_out(i, every)).collect()
    }
}

pub fn generate_dataset(spec: &SceneSpec) -> Result<Dataset> {
    spec.validate()?;
    let frames: Vec<(Image, Image)> = (0..spec.frames)
        .into_par_iter()
        .map(|i| Ok((render_blurred(spec, i)?.quantized(), render_sharp(spec, i)?.quantized())))
        .collect::<Result<_>>()?;
    let cameras = (0..spec.frames)
        .map(|i| {
            let t = spec.timestamp(i);
            FrameCamera::new(i, &spec.camera.at(t), t, spec.exposure_time())
        })
        .collect();
    let (blurred, sharp) = frames.into_iter().unzip();
    Ok(Dataset {
        spec: spec.clone(),
        cameras,
        blurred,
        sharp,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn frame_path(dir: &Path, i: usize, kind: &str) -> std::path::PathBuf {
    dir.join("frames").join(format!("{i:05}_{kind}.ppm"))
}

pub fn write_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    let frames = dir.join("frames");
    std::fs::create_dir_all(&frames).map_err(|e| Error::io(&frames, e))?;
    write_json(&dir.join("scene.json"), &data.spec)?;
    write_json(&dir.join("cameras.json"), &data.cameras)?;
    for (i, (b, s)) in data.blurred.iter().zip(&data.sharp).enumerate() {
        b.write_ppm(&frame_path(dir, i, "blur"))?;
        s.write_ppm(&frame_path(dir, i, "sharp"))?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let spec: SceneSpec = read_json(&dir.join("scene.json"))?;
    spec.validate()
        .map_err(|e| Error::format(dir.join("scene.json"), e.to_string()))?;
    let cameras: Vec<FrameCamera> = read_json(&dir.join("cameras.json"))?;
    if cameras.len() != spec.frames {
        return Err(Error::format(
            dir.join("cameras.json"),
            format!("{} cameras for {} frames", cameras.len(), spec.frames),
        ));
    }
    let mut blurred = Vec::with_capacity(spec.frames);
    let mut sharp = Vec::with_capacity(spec.frames);
    for i in 0..spec.frames {
        for (kind, out) in [("blur", &mut blurred), ("sharp", &mut sharp)] {
            let path = frame_path(dir, i, kind);
            let img = Image::read_ppm(&path)?;
            if img.width != spec.camera.width || img.height != spec.camera.height {
                return Err(Error::format(&path, "frame size disagrees with scene.json"));
            }
            out.push(img);
        }
    }
    Ok(Dataset {
        spec,
        cameras,
        blurred,
        sharp,
    })
}

/// Ground-truth centers at `t` with isotropic Gaussian jitter, plus colors:
/// the stand-in for a structure-from-motion point cloud.
pub fn initial_point_cloud(spec: &SceneSpec, t: f64, jitter: f64, seed: u64) -> Vec<(Vec3, Vec3)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::Normal::new(0.0, jitter.max(0.0)).expect("finite jitter");
    spec.primitives(t)
        .into_iter()
        .map(|p| {
            let j = if jitter > 0.0 {
                Vec3::from_fn(|_, _| rng.sample(normal))
            } else {
                Vec3::zeros()
            };
            (p.mean + j, p.color)
        })
        .collect()
}

pub const PRESETS: &[&str] = &["rolldice-lite", "static-lite", "decomp", "single"];

fn iso(position: Vec3, scale: f64, opacity: f64, color: Vec3) -> Prototype {
    Prototype {
        position,
        rotation: [1.0, 0.0, 0.0, 0.0],
        scale: Vec3::repeat(scale),
        opacity,
        color,
    }
}

/// A colored wall facing the camera.
fn backdrop(rng: &mut ChaCha8Rng, n: usize, z: f64, half: f64) -> SceneObject {
    let step = 2.0 * half / n as f64;
    let mut gaussians = Vec::with_capacity(n * n);
    for iy in 0..n {
        for ix in 0..n {
            let checker = (ix / 3 + iy / 3) % 2 == 0;
            let base = if checker { Vec3::new(0.75, 0.7, 0.6) } else { Vec3::new(0.35, 0.4, 0.5) };
            let tint = Vec3::from_fn(|_, _| rng.gen_range(-0.05..0.05));
            gaussians.push(Prototype {
                position: Vec3::new(-half + (ix as f64 + 0.5) * step, -half + (iy as f64 + 0.5) * step, z),
                rotation: [1.0, 0.0, 0.0, 0.0],
                scale: Vec3::new(0.6 * step, 0.6 * step, 0.02),
                opacity: 0.95,
                color: (base + tint).map(|c| c.clamp(0.0, 1.0)),
            });
        }
    }
    SceneObject {
        name: "backdrop".into(),
        pivot: Vec3::new(0.0, 0.0, z),
        motions: Vec::new(),
        gaussians,
    }
}

/// Surface samples of a cube with differently colored faces.
fn dice(center: Vec3, half: f64, per_edge: usize, motions: Vec<Motion>) -> SceneObject {
    let colors = [
        Vec3::new(0.9, 0.15, 0.1),
        Vec3::new(0.1, 0.7, 0.2),
        Vec3::new(0.15, 0.3, 0.9),
        Vec3::new(0.95, 0.85, 0.1),
        Vec3::new(0.9, 0.9, 0.9),
        Vec3::new(0.6, 0.2, 0.7),
    ];
    let step = 2.0 * half / per_edge as f64;
    let mut gaussians = Vec::new();
    for axis in 0..3 {
        for (side, sign) in [(0, -1.0), (1, 1.0)] {
            let color = colors[axis * 2 + side];
            for a in 0..per_edge {
                for b in 0..per_edge {
                    let u = -half + (a as f64 + 0.5) * step;
                    let v = -half + (b as f64 + 0.5) * step;
                    let mut p = Vec3::zeros();
                    p[axis] = sign * half;
                    p[(axis + 1) % 3] = u;
                    p[(axis + 2) % 3] = v;
                    let mut s = Vec3::repeat(0.55 * step);
                    s[axis] = 0.015;
                    gaussians.push(Prototype {
                        position: center + p,
                        rotation: [1.0, 0.0, 0.0, 0.0],
                        scale: s,
                        opacity: 0.97,
                        color,
                    });
                }
            }
        }
    }
    SceneObject {
        name: "dice".into(),
        pivot: center,
        motions,
        gaussians,
    }
}

/// Named scene presets. `seed` drives the procedural texture jitter.
pub fn preset(name: &str, seed: u64) -> Result<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let camera = CameraSpec {
        eye: Vec3::new(0.0, 0.0, -4.0),
        focal: 64.0 * 1.6,
        width: 64,
        height: 64,
        pan: Vec3::zeros(),
    };
    let base = SceneSpec {
        name: name.to_owned(),
        seed,
        frames: 48,
        fps: 24.0,
        exposure: 1.0,
        n_blur: 33,
        background: Vec3::new(0.05, 0.05, 0.08),
        camera,
        objects: Vec::new(),
    };
    let spec = match name {
        "rolldice-lite" | "static-lite" => {
            let motions = if name == "rolldice-lite" {
                vec![
                    Motion::Spin { omega: Vec3::new(0.0, 0.0, 2.0 * PI * 1.5) },
                    Motion::Sinusoid {
                        amplitude: Vec3::new(0.45, 0.0, 0.0),
                        frequency: 2.0,
                        phase: 0.0,
                    },
                    Motion::Bounce {
                        up: Vec3::new(0.0, -1.0, 0.0),
                        apex: 0.3,
                        period: 0.5,
                    },
                ]
            } else {
                Vec::new()
            };
            SceneSpec {
                objects: vec![backdrop(&mut rng, 20, 1.0, 1.4), dice(Vec3::new(0.0, 0.2, 0.0), 0.25, 4, motions)],
                ..base
            }
        }
        "decomp" => {
            // 50 static Gaussians on the left, 50 oscillating ones on the right.
            let mut still = Vec::new();
            let mut moving = Vec::new();
            for i in 0..50 {
                let (a, b) = ((i % 5) as f64, (i / 5) as f64);
                let jitter = Vec3::from_fn(|_, _| rng.gen_range(-0.02..0.02));
                let c = Vec3::new(rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9));
                still.push(iso(Vec3::new(-1.0 + 0.12 * a, -0.6 + 0.12 * b, 0.2) + jitter, 0.05, 0.8, c));
                let jitter = Vec3::from_fn(|_, _| rng.gen_range(-0.02..0.02));
                let c = Vec3::new(rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9));
                moving.push(iso(Vec3::new(0.5 + 0.12 * a, -0.6 + 0.12 * b, 0.0) + jitter, 0.05, 0.8, c));
            }
            SceneSpec {
                objects: vec![
                    SceneObject {
                        name: "static".into(),
                        pivot: Vec3::new(-0.75, 0.0, 0.2),
                        motions: Vec::new(),
                        gaussians: still,
                    },
                    SceneObject {
                        name: "oscillating".into(),
                        pivot: Vec3::new(0.75, 0.0, 0.0),
                        motions: vec![Motion::Sinusoid {
                            amplitude: Vec3::new(0.0, 0.15, 0.0),
                            frequency: 1.0,
                            phase: 0.0,
                        }],
                        gaussians: moving,
                    },
                ],
                ..base
            }
        }
        "single" => SceneSpec {
            frames: 8,
            objects: vec![SceneObject {
                name: "blob".into(),
                pivot: Vec3::zeros(),
                motions: vec![Motion::Linear { velocity: Vec3::new(1.0, 0.0, 0.0) }],
                gaussians: vec![iso(Vec3::new(-0.5, 0.0, 0.0), 0.08, 0.8, Vec3::new(1.0, 0.8, 0.3))],
            }],
            ..base
        },
        _ => {
            return Err(Error::Config(format!(
                "unknown preset {name:?}; expected one of {}",
                PRESETS.join(", ")
            )))
        }
    };
    spec.validate()?;
    Ok(spec)
}

/// Quaternion of a rotation matrix, for callers building canonical
/// Gaussians from a posed prototype.
pub fn pose_quaternion(r: &Mat3, q: &Quat) -> Result<Quat> {
    rotation_to_quat(&(r * quat_to_rotation(q)))
}
