//! Run configuration: every tunable of the pipeline, read from a flat JSON
//! object with dotted keys such as `"loss.lambda_reg"`.
//!
//! A config file only lists the keys it overrides; everything else keeps its
//! default. Unknown keys and type mismatches are rejected with the offending
//! key (or the JSON line/column for syntax errors).

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::decomposition::{PartitionSchedule, DEFAULT_SAMPLES, DEFAULT_TAU};
use crate::deform::{FieldConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::lod::LodConfig;
use crate::losses::LossWeights;
use crate::render::RenderSettings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningRates {
    /// Exponentially decayed from `position_init` to `position_final`.
    pub position_init: f64,
    pub position_final: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
    pub feature: f64,
    /// Both deformation networks, decayed like the positions.
    pub field_init: f64,
    pub field_final: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            rotation: 1e-3,
            scale: 5e-3,
            opacity: 0.05,
            color: 2.5e-3,
            feature: 2.5e-3,
            field_init: 5e-4,
            field_final: 5e-6,
        }
    }
}

impl LearningRates {
    fn validate(&self) -> Result<()> {
        let all = [
            self.position_init,
            self.position_final,
            self.rotation,
            self.scale,
            self.opacity,
            self.color,
            self.feature,
            self.field_init,
            self.field_final,
        ];
        if all.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch: usize,
    /// Nearest dynamic neighbours used by the coarse motion term.
    pub knn_k: usize,
    /// Neighbour lists are rebuilt every this many iterations.
    pub knn_refresh: u64,
    /// Every n-th frame is held out for evaluation.
    pub held_out_every: usize,
    /// Standard deviation of the jitter added to the initial point cloud.
    pub init_jitter: f64,
    pub init_opacity: f64,
    /// Draw the time-encoding noise per Gaussian (true) or once per frame.
    pub noise_per_gaussian: bool,
    /// Write an intermediate checkpoint every this many iterations (0: never).
    pub checkpoint_every: u64,
    pub lr: LearningRates,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 30_000,
            batch: 2,
            knn_k: 8,
            knn_refresh: 500,
            held_out_every: 8,
            init_jitter: 0.01,
            init_opacity: 0.1,
            noise_per_gaussian: true,
            checkpoint_every: 0,
            lr: LearningRates::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecompositionConfig {
    pub tau: f64,
    pub samples: usize,
    pub schedule: PartitionSchedule,
}

impl Default for DecompositionConfig {
    fn default() -> Self {
        DecompositionConfig {
            tau: DEFAULT_TAU,
            samples: DEFAULT_SAMPLES,
            schedule: PartitionSchedule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
    pub train: TrainConfig,
    pub render: RenderSettings,
    pub field: FieldConfig,
    pub noise: NoiseSchedule,
    pub loss: LossWeights,
    pub lod: LodConfig,
    pub decomposition: DecompositionConfig,
}

/// Named method variants compared by the ablation grid.
#[derive(Debug, Clone, PartialEq)]
pub enum Variant {
    Full,
    NoCoarseFine,
    NoKinematicRefinement,
    NoReg,
    NoAni,
    Tau(f64),
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Variant::Full,
            "no-cf" => Variant::NoCoarseFine,
            "no-kr" => Variant::NoKinematicRefinement,
            "no-reg" => Variant::NoReg,
            "no-ani" => Variant::NoAni,
            _ => match s.strip_prefix("tau=") {
                Some(v) => {
                    let tau: f64 = v
                        .parse()
                        .map_err(|_| Error::Config(format!("bad tau value in variant {s:?}")))?;
                    if !(tau >= 0.0 && tau.is_finite()) {
                        return Err(Error::Config(format!("tau must be >= 0 in variant {s:?}")));
                    }
                    Variant::Tau(tau)
                }
                None => {
                    return Err(Error::Config(format!(
                        "unknown variant {s:?}; expected full, no-cf, no-kr, no-reg, no-ani or tau=<value>"
                    )))
                }
            },
        })
    }

    pub fn name(&self) -> String {
        match self {
            Variant::Full => "full".into(),
            Variant::NoCoarseFine => "no-cf".into(),
            Variant::NoKinematicRefinement => "no-kr".into(),
            Variant::NoReg => "no-reg".into(),
            Variant::NoAni => "no-ani".into(),
            Variant::Tau(t) => format!("tau={t:e}"),
        }
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        match self {
            Variant::Full => {}
            Variant::NoCoarseFine => cfg.render.coarse_fine = false,
            Variant::NoKinematicRefinement => cfg.render.refine = false,
            Variant::NoReg => cfg.loss.lambda_reg = 0.0,
            Variant::NoAni => cfg.loss.lambda_ani = 0.0,
            Variant::Tau(t) => cfg.decomposition.tau = *t,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.iterations == 0 || t.batch == 0 || t.knn_k == 0 || t.knn_refresh == 0 {
            return Err(Error::Config(
                "train.iterations, train.batch, train.knn_k and train.knn_refresh must be positive".into(),
            ));
        }
        if t.held_out_every == 1 {
            return Err(Error::Config("train.held_out_every = 1 leaves no training frames".into()));
        }
        if !(t.init_jitter >= 0.0) || !(t.init_opacity > 0.0 && t.init_opacity < 1.0) {
            return Err(Error::Config("train.init_jitter must be >= 0 and init_opacity in (0, 1)".into()));
        }
        t.lr.validate()?;
        self.render
            .validate()
            .map_err(|e| Error::Config(format!("render: {e}")))?;
        let f = &self.field;
        if f.time_bands == 0 || f.pos_bands == 0 || f.feature_dim == 0 || f.width == 0 || !(f.extent > 0.0) {
            return Err(Error::Config("field sizes and extent must be positive".into()));
        }
        self.noise.validate()?;
        self.loss.validate()?;
        self.lod.validate()?;
        let d = &self.decomposition;
        if !(d.tau >= 0.0 && d.tau.is_finite()) || d.samples < 2 {
            return Err(Error::Config(
                "decomposition.tau must be >= 0 and decomposition.samples >= 2".into(),
            ));
        }
        Ok(())
    }

    /// Parses a flat dotted-key JSON object and overlays it on the defaults.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let overrides: Map<String, Value> =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        let mut flat = flatten(&serde_json::to_value(RunConfig::default()).expect("defaults serialize"));
        for (k, v) in overrides {
            match flat.get_mut(&k) {
                Some(slot) => *slot = v,
                None => return Err(Error::Config(format!("unknown config key {k:?}"))),
            }
        }
        let cfg = Self::from_flat(&flat)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Every key with its value, in declaration order.
    pub fn to_flat(&self) -> Map<String, Value> {
        flatten(&serde_json::to_value(self).expect("config serializes"))
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&Value::Object(self.to_flat())).expect("config serializes");
        s.push('\n');
        s
    }

    fn from_flat(flat: &Map<String, Value>) -> Result<Self> {
        let mut root = Map::new();
        for (k, v) in flat {
            insert_dotted(&mut root, k, v.clone());
        }
        // Deserialize section by section so type errors name the key.
        let value = Value::Object(root);
        serde_json::from_value(value.clone()).map_err(|e| {
            let key = flat
                .iter()
                .find(|(k, v)| {
                    let mut probe = flatten(&serde_json::to_value(RunConfig::default()).expect("defaults"));
                    probe.insert((*k).clone(), (*v).clone());
                    let mut r = Map::new();
                    for (pk, pv) in &probe {
                        insert_dotted(&mut r, pk, pv.clone());
                    }
                    serde_json::from_value::<RunConfig>(Value::Object(r)).is_err()
                })
                .map(|(k, _)| k.clone());
            match key {
                Some(k) => Error::Config(format!("bad value for {k:?}: {e}")),
                None => Error::Config(format!("bad config value: {e}")),
            }
        })
    }
}

/// Objects become dotted paths; arrays, numbers, strings and nulls are leaves.
fn flatten(v: &Value) -> Map<String, Value> {
    fn rec(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
        match v {
            Value::Object(m) => {
                for (k, c) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    rec(&key, c, out);
                }
            }
            leaf => {
                out.insert(prefix.to_owned(), leaf.clone());
            }
        }
    }
    let mut out = Map::new();
    rec("", v, &mut out);
    out
}

fn insert_dotted(root: &mut Map<String, Value>, key: &str, v: Value) {
    let mut parts = key.split('.').peekable();
    let mut cur = root;
    while let Some(p) = parts.next() {
        if parts.peek().is_none() {
            cur.insert(p.to_owned(), v);
            return;
        }
        cur = cur
            .entry(p.to_owned())
            .or_insert_with(|| Value::Object(Map::new()))
            .as_object_mut()
            .expect("config paths never mix leaves and sections");
    }
}
