//! Versioned binary checkpoints holding the complete training state, so a
//! resumed run continues bit-exactly.
//!
//! All integers and floats are little-endian; floats are IEEE-754 `f64`.
//!
//! ```text
//! magic    4 bytes  "KGS1"
//! version  u32      1
//! count    u32      number of sections
//! section  repeated: tag (4 ASCII bytes), length u64, payload
//! ```
//!
//! | tag    | payload |
//! |--------|---------|
//! | `META` | UTF-8 JSON: `config` (flat dotted keys), `iteration`, `gaussians`, `rng` (`seed` hex, `stream`, `word_pos` decimal) |
//! | `GAUS` | per Gaussian: position 3, rotation 4 (`w x y z`), log-scale 3, opacity logit, color 3, importance (15 `f64`), level `u32`, dynamic `u8` |
//! | `FEAT` | count `u64`, features `f64` (row-major, `feature_dim` per Gaussian) |
//! | `ONET` | offset network: layers `u32`, then per layer inputs `u32`, outputs `u32`, weights (row-major `outputs x inputs`), biases |
//! | `RNET` | residual network, same layout as `ONET` |
//! | `ADAM` | step `u64`, groups `u32`, per group: length `u64`, first moments, second moments. Group order: position, rotation, scale, opacity, color, features, offset network, residual network |
//! | `NBRS` | count `u64`, per Gaussian: k `u32`, k neighbour indices `u32` |
//! | `DENS` | count `u64`, gradient sums `f64`, visibility counts `u32` |
//! | `SCOR` | count `u64`, decomposition scores `f64` (count 0 before the first partition) |
//!
//! Readers skip sections with unknown tags.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::deform::mlp::Dense;
use crate::deform::{DeformField, Mlp};
use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::math::Vec3;
use crate::train::{AdamState, Moments, TrainState, GAUSSIAN_GROUPS};

pub const MAGIC: &[u8; 4] = b"KGS1";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct RngMeta {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: serde_json::Map<String, serde_json::Value>,
    iteration: u64,
    gaussians: usize,
    rng: RngMeta,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|x| self.f64(*x));
    }
    fn vec3(&mut self, v: &Vec3) {
        self.f64s(v.as_slice());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, pos: 0, what }
    }
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!("section {} truncated", self.what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> std::result::Result<usize, String> {
        let n = self.u64()?;
        // Every element takes at least one byte, so this bounds allocations.
        if n > (self.buf.len() - self.pos) as u64 {
            return Err(format!("section {} declares {n} elements past its end", self.what));
        }
        Ok(n as usize)
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn vec3(&mut self) -> std::result::Result<Vec3, String> {
        Ok(Vec3::new(self.f64()?, self.f64()?, self.f64()?))
    }
    fn finish(&self) -> std::result::Result<(), String> {
        if self.pos != self.buf.len() {
            return Err(format!("section {} has {} trailing bytes", self.what, self.buf.len() - self.pos));
        }
        Ok(())
    }
}

fn write_net(w: &mut Writer, net: &Mlp) {
    w.u32(net.layers.len() as u32);
    for l in &net.layers {
        w.u32(l.inputs as u32);
        w.u32(l.outputs as u32);
        w.f64s(&l.weight);
        w.f64s(&l.bias);
    }
}

fn read_net(r: &mut Reader) -> std::result::Result<Mlp, String> {
    let n = r.u32()?;
    let mut layers = Vec::new();
    for _ in 0..n {
        let inputs = r.u32()? as usize;
        let outputs = r.u32()? as usize;
        if inputs.saturating_mul(outputs) > r.buf.len() {
            return Err("network layer larger than its section".into());
        }
        layers.push(Dense {
            inputs,
            outputs,
            weight: r.f64s(inputs * outputs)?,
            bias: r.f64s(outputs)?,
        });
    }
    for pair in layers.windows(2) {
        if pair[0].outputs != pair[1].inputs {
            return Err("network layer sizes do not chain".into());
        }
    }
    Ok(Mlp { layers })
}

fn write_moments(w: &mut Writer, m: &Moments) {
    w.u64(m.len() as u64);
    w.f64s(&m.m);
    w.f64s(&m.v);
}

fn read_moments(r: &mut Reader) -> std::result::Result<Moments, String> {
    let n = r.len()?;
    Ok(Moments {
        m: r.f64s(n)?,
        v: r.f64s(n)?,
    })
}

fn encode(state: &TrainState) -> Vec<u8> {
    let mut sections: Vec<([u8; 4], Vec<u8>)> = Vec::new();

    let meta = Meta {
        config: state.config.to_flat(),
        iteration: state.iteration,
        gaussians: state.gaussians.len(),
        rng: RngMeta {
            seed: state.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
    };
    sections.push((*b"META", serde_json::to_vec(&meta).expect("metadata serializes")));

    let mut w = Writer::default();
    for g in &state.gaussians {
        w.vec3(&g.position);
        w.f64s(&g.rotation);
        w.vec3(&g.log_scale_opt);
        w.f64(g.opacity_logit);
        w.vec3(&g.color);
        w.f64(g.accumulated_importance);
        w.u32(g.level);
        w.u8(g.dynamic as u8);
    }
    sections.push((*b"GAUS", w.0));

    let mut w = Writer::default();
    w.u64(state.field.features.len() as u64);
    w.f64s(&state.field.features);
    sections.push((*b"FEAT", w.0));

    for (tag, net) in [(*b"ONET", &state.field.offset_net), (*b"RNET", &state.field.residual_net)] {
        let mut w = Writer::default();
        write_net(&mut w, net);
        sections.push((tag, w.0));
    }

    let mut w = Writer::default();
    let a = &state.adam;
    w.u64(a.step);
    w.u32(a.gaussian.len() as u32 + 3);
    for m in a.gaussian.iter().chain([&a.features, &a.offset_net, &a.residual_net]) {
        write_moments(&mut w, m);
    }
    sections.push((*b"ADAM", w.0));

    let mut w = Writer::default();
    w.u64(state.neighbors.len() as u64);
    for nb in &state.neighbors {
        w.u32(nb.len() as u32);
        nb.iter().for_each(|&j| w.u32(j as u32));
    }
    sections.push((*b"NBRS", w.0));

    let mut w = Writer::default();
    w.u64(state.densify_grad.len() as u64);
    w.f64s(&state.densify_grad);
    state.densify_count.iter().for_each(|&c| w.u32(c));
    sections.push((*b"DENS", w.0));

    let mut w = Writer::default();
    w.u64(state.scores.len() as u64);
    w.f64s(&state.scores);
    sections.push((*b"SCOR", w.0));

    let mut out = Writer::default();
    out.0.extend_from_slice(MAGIC);
    out.u32(VERSION);
    out.u32(sections.len() as u32);
    for (tag, payload) in sections {
        out.0.extend_from_slice(&tag);
        out.u64(payload.len() as u64);
        out.0.extend(payload);
    }
    out.0
}

/// Serializes `state` to `path`, writing a sibling temporary file first so
/// an interrupted write never leaves a truncated checkpoint behind.
pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode(state)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|d| Error::format(path, d))
}

fn decode(bytes: &[u8]) -> std::result::Result<TrainState, String> {
    let mut r = Reader::new(bytes, "header");
    if r.take(4)? != MAGIC {
        return Err("not a KGS1 checkpoint (bad magic)".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let count = r.u32()?;
    let mut sections: HashMap<[u8; 4], &[u8]> = HashMap::new();
    for _ in 0..count {
        let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        let len = r.u64()?;
        if len > (bytes.len() - r.pos) as u64 {
            return Err(format!("section {} truncated", String::from_utf8_lossy(&tag)));
        }
        sections.insert(tag, r.take(len as usize)?);
    }
    r.finish()?;
    let section = |tag: &[u8; 4]| {
        sections
            .get(tag)
            .copied()
            .ok_or_else(|| format!("missing section {}", String::from_utf8_lossy(tag)))
    };

    let meta: Meta = serde_json::from_slice(section(b"META")?).map_err(|e| format!("bad META: {e}"))?;
    let config = RunConfig::from_json_str(&serde_json::Value::Object(meta.config).to_string())
        .map_err(|e| format!("bad META config: {e}"))?;
    let n = meta.gaussians;

    let mut r = Reader::new(section(b"GAUS")?, "GAUS");
    let mut gaussians = Vec::with_capacity(n.min(r.buf.len()));
    for _ in 0..n {
        let position = r.vec3()?;
        let rotation = [r.f64()?, r.f64()?, r.f64()?, r.f64()?];
        let log_scale_opt = r.vec3()?;
        let opacity_logit = r.f64()?;
        let color = r.vec3()?;
        let accumulated_importance = r.f64()?;
        let level = r.u32()?;
        let dynamic = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(format!("bad dynamic flag {v}")),
        };
        gaussians.push(Gaussian {
            position,
            rotation,
            log_scale_opt,
            opacity_logit,
            color,
            level,
            accumulated_importance,
            dynamic,
        });
    }
    r.finish()?;

    let mut r = Reader::new(section(b"FEAT")?, "FEAT");
    let len = r.len()?;
    let features = r.f64s(len)?;
    r.finish()?;
    if features.len() != n * config.field.feature_dim {
        return Err(format!("{} feature values for {n} Gaussians", features.len()));
    }

    let mut nets = Vec::new();
    for (tag, what) in [(b"ONET", "ONET"), (b"RNET", "RNET")] {
        let mut r = Reader::new(section(tag)?, what);
        nets.push(read_net(&mut r)?);
        r.finish()?;
    }
    let residual_net = nets.pop().expect("two networks");
    let offset_net = nets.pop().expect("two networks");
    let c = &config.field;
    if offset_net.inputs() != c.offset_inputs() || residual_net.inputs() != c.residual_inputs() {
        return Err("network shapes disagree with the stored config".into());
    }
    let field = DeformField {
        config: config.field.clone(),
        offset_net,
        residual_net,
        features,
    };

    let mut r = Reader::new(section(b"ADAM")?, "ADAM");
    let step = r.u64()?;
    let groups = r.u32()? as usize;
    if groups != GAUSSIAN_GROUPS.len() + 3 {
        return Err(format!("expected {} optimizer groups, found {groups}", GAUSSIAN_GROUPS.len() + 3));
    }
    let mut moments = (0..groups).map(|_| read_moments(&mut r)).collect::<std::result::Result<Vec<_>, _>>()?;
    r.finish()?;
    let residual = moments.pop().expect("groups");
    let offset = moments.pop().expect("groups");
    let feats = moments.pop().expect("groups");
    let adam = AdamState {
        step,
        gaussian: moments,
        features: feats,
        offset_net: offset,
        residual_net: residual,
    };
    let expected = AdamState::new(n, &field);
    let sizes = |a: &AdamState| {
        a.gaussian
            .iter()
            .chain([&a.features, &a.offset_net, &a.residual_net])
            .map(Moments::len)
            .collect::<Vec<_>>()
    };
    if sizes(&adam) != sizes(&expected) {
        return Err("optimizer state sizes disagree with the scene".into());
    }

    let mut r = Reader::new(section(b"NBRS")?, "NBRS");
    let count = r.len()?;
    if count != n {
        return Err(format!("{count} neighbour lists for {n} Gaussians"));
    }
    let mut neighbors = Vec::with_capacity(count);
    for _ in 0..count {
        let k = r.u32()? as usize;
        let nb = (0..k)
            .map(|_| {
                let j = r.u32()? as usize;
                if j >= n {
                    return Err(format!("neighbour index {j} out of range"));
                }
                Ok(j)
            })
            .collect::<std::result::Result<Vec<_>, String>>()?;
        neighbors.push(nb);
    }
    r.finish()?;

    let mut r = Reader::new(section(b"DENS")?, "DENS");
    let count = r.len()?;
    if count != n {
        return Err(format!("{count} densification entries for {n} Gaussians"));
    }
    let densify_grad = r.f64s(count)?;
    let densify_count = (0..count).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
    r.finish()?;

    let mut r = Reader::new(section(b"SCOR")?, "SCOR");
    let count = r.len()?;
    let scores = r.f64s(count)?;
    r.finish()?;
    if !(scores.is_empty() || scores.len() == n) {
        return Err(format!("{} decomposition scores for {n} Gaussians", scores.len()));
    }

    let seed_hex = &meta.rng.seed;
    if seed_hex.len() != 64 {
        return Err("rng seed must be 64 hex digits".into());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16).map_err(|_| "bad rng seed".to_string())?;
    }
    let word_pos: u128 = meta.rng.word_pos.parse().map_err(|_| "bad rng word position".to_string())?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(meta.rng.stream);
    rng.set_word_pos(word_pos);

    Ok(TrainState {
        config,
        iteration: meta.iteration,
        gaussians,
        field,
        neighbors,
        scores,
        adam,
        densify_grad,
        densify_count,
        rng,
    })
}
