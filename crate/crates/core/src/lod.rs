//! Level-of-detail lifecycle: per-level scale floors, scale
//! reparameterization, importance pruning, level advance and densification.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::math::{logit, Vec3};
use crate::so3::quat_to_rotation;

/// Smallest excess over the level floor that a re-solved scale may carry.
/// Targets below `floor + MIN_EXCESS` are clamped and counted.
pub const MIN_EXCESS: f64 = 1e-8;

/// Sign convention for the level exponent of the scale floor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExponentSign {
    /// `lambda * rho^(1 - l)`: the floor grows with the level.
    OneMinusLevel,
    /// `lambda * rho^(l - 1)`: the floor shrinks with the level.
    LevelMinusOne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LodConfig {
    pub max_level: u32,
    pub lambda: f64,
    pub rho: f64,
    pub exponent_sign: ExponentSign,
    /// Iterations per level; `None` splits the run evenly.
    pub level_budget: Option<u64>,
    pub prune_quantile: f64,
    pub densify_grad_threshold: f64,
    pub prune_opacity: f64,
    pub densify_start: u64,
    pub densify_end: u64,
    pub densify_interval: u64,
    pub opacity_reset_iteration: u64,
    pub opacity_reset_value: f64,
    /// Gaussians whose largest scale exceeds `percent_dense * extent` split.
    pub percent_dense: f64,
    pub split_scale_divisor: f64,
    pub max_gaussians: usize,
}

impl Default for LodConfig {
    fn default() -> Self {
        LodConfig {
            max_level: 3,
            lambda: 0.01,
            rho: 0.5,
            exponent_sign: ExponentSign::OneMinusLevel,
            level_budget: None,
            prune_quantile: 0.1,
            densify_grad_threshold: 1e-4,
            prune_opacity: 0.005,
            densify_start: 500,
            densify_end: 10_000,
            densify_interval: 300,
            opacity_reset_iteration: 3000,
            opacity_reset_value: 0.01,
            percent_dense: 0.01,
            split_scale_divisor: 1.6,
            max_gaussians: 2000,
        }
    }
}

impl LodConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("lod: {m}")));
        if self.max_level < 1 {
            return bad("max_level must be >= 1");
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be positive");
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad("rho must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.prune_quantile) {
            return bad("prune_quantile must lie in [0, 1]");
        }
        if !(self.densify_grad_threshold > 0.0) || !(self.prune_opacity > 0.0 && self.prune_opacity < 1.0) {
            return bad("thresholds must be positive");
        }
        if !(self.opacity_reset_value > 0.0 && self.opacity_reset_value < 1.0) {
            return bad("opacity_reset_value must lie in (0, 1)");
        }
        if !(self.percent_dense > 0.0) || !(self.split_scale_divisor > 1.0) {
            return bad("percent_dense must be positive and split_scale_divisor > 1");
        }
        if self.densify_interval == 0 || self.densify_start > self.densify_end {
            return bad("densify window is empty");
        }
        if self.level_budget == Some(0) {
            return bad("level_budget must be positive");
        }
        Ok(())
    }

    /// Level active at `iteration` of a run of `total` iterations.
    pub fn level_at(&self, iteration: u64, total: u64) -> u32 {
        let budget = self
            .level_budget
            .unwrap_or_else(|| total.div_ceil(self.max_level as u64).max(1));
        ((iteration / budget) as u32 + 1).min(self.max_level)
    }

    pub fn is_densify_iteration(&self, iteration: u64) -> bool {
        iteration >= self.densify_start
            && iteration <= self.densify_end
            && iteration > 0
            && iteration % self.densify_interval == 0
    }
}

/// Lower bound on every scale axis at level `l`.
pub fn min_scale(l: u32, cfg: &LodConfig) -> Result<f64> {
    if l < 1 || l > cfg.max_level {
        return Err(Error::invalid(format!(
            "level {l} outside 1..={}",
            cfg.max_level
        )));
    }
    if l == cfg.max_level {
        return Ok(0.0);
    }
    let e = match cfg.exponent_sign {
        ExponentSign::OneMinusLevel => 1.0 - l as f64,
        ExponentSign::LevelMinusOne => l as f64 - 1.0,
    };
    Ok(cfg.lambda * cfg.rho.powf(e))
}

/// `exp(s_opt) + s_min(l)` per axis.
pub fn effective_scale(s_opt: &Vec3, l: u32, cfg: &LodConfig) -> Result<Vec3> {
    let floor = min_scale(l, cfg)?;
    Ok(s_opt.map(|s| s.exp() + floor))
}

/// Inverse of [`effective_scale`]. Returns the parameter and whether any axis
/// had to be clamped because the target sits at or below the level floor.
pub fn solve_log_scale(target: &Vec3, l: u32, cfg: &LodConfig) -> Result<(Vec3, bool)> {
    let floor = min_scale(l, cfg)?;
    let mut clamped = false;
    let s = target.map(|t| {
        let excess = t - floor;
        if excess > MIN_EXCESS {
            excess.ln()
        } else {
            clamped = true;
            MIN_EXCESS.ln()
        }
    });
    Ok((s, clamped))
}

/// Adds per-Gaussian blending-weight sums from one render pass.
pub fn accumulate_importance(gaussians: &mut [Gaussian], increments: &[f64]) -> Result<()> {
    if gaussians.len() != increments.len() {
        return Err(Error::invalid(format!(
            "{} importance increments for {} Gaussians",
            increments.len(),
            gaussians.len()
        )));
    }
    for (g, inc) in gaussians.iter_mut().zip(increments) {
        g.accumulated_importance += inc.max(0.0);
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LevelReport {
    /// Source index of every surviving Gaussian, in output order.
    pub keep: Vec<usize>,
    /// Survivors whose effective scale could not be represented exactly.
    pub clamped: usize,
    /// Set when the quantile would have removed everything.
    pub kept_top_one: bool,
}

/// Prunes the lowest-importance quantile and moves survivors to the next
/// level with their effective scale preserved.
pub fn advance_level(gaussians: &mut Vec<Gaussian>, cfg: &LodConfig) -> Result<LevelReport> {
    let Some(level) = gaussians.first().map(|g| g.level) else {
        return Ok(LevelReport::default());
    };
    if gaussians.iter().any(|g| g.level != level) {
        return Err(Error::invalid("advance_level needs a single-level scene"));
    }
    if level >= cfg.max_level {
        return Err(Error::invalid(format!("already at the finest level {level}")));
    }
    let n = gaussians.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        gaussians[a]
            .accumulated_importance
            .total_cmp(&gaussians[b].accumulated_importance)
            .then(a.cmp(&b))
    });
    let mut drop = (cfg.prune_quantile * n as f64).floor() as usize;
    let mut report = LevelReport::default();
    if drop >= n {
        log::warn!("importance pruning would empty the scene; keeping the top Gaussian");
        drop = n - 1;
        report.kept_top_one = true;
    }
    let mut removed = vec![false; n];
    for &i in &order[..drop] {
        removed[i] = true;
    }
    report.keep = (0..n).filter(|&i| !removed[i]).collect();

    let mut out = Vec::with_capacity(report.keep.len());
    for &i in &report.keep {
        let mut g = gaussians[i].clone();
        let eff = effective_scale(&g.log_scale_opt, level, cfg)?;
        let (s, clamped) = solve_log_scale(&eff, level + 1, cfg)?;
        report.clamped += clamped as usize;
        g.log_scale_opt = s;
        g.level = level + 1;
        g.accumulated_importance = 0.0;
        out.push(g);
    }
    if report.clamped > 0 {
        log::warn!(
            "{} Gaussians fall below the level-{} scale floor and were clamped",
            report.clamped,
            level + 1
        );
    }
    *gaussians = out;
    Ok(report)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DensifyReport {
    /// Source index of every output Gaussian, in output order.
    pub source: Vec<usize>,
    /// Whether the output Gaussian is newly created (fresh optimizer state).
    pub fresh: Vec<bool>,
    pub split: usize,
    pub cloned: usize,
    pub pruned: usize,
    pub reset: bool,
}

/// One densification barrier: split/clone by mean screen-space gradient,
/// optional global opacity reset, then prune faint Gaussians.
///
/// `grads[i]` is the mean view-space positional gradient norm of Gaussian
/// `i` since the last barrier; `extent` is the scene radius.
pub fn densify_and_prune<R: Rng>(
    gaussians: &mut Vec<Gaussian>,
    grads: &[f64],
    iteration: u64,
    extent: f64,
    cfg: &LodConfig,
    rng: &mut R,
) -> Result<DensifyReport> {
    if grads.len() != gaussians.len() {
        return Err(Error::invalid(format!(
            "{} densification gradients for {} Gaussians",
            grads.len(),
            gaussians.len()
        )));
    }
    let mut report = DensifyReport::default();
    let mut out: Vec<Gaussian> = Vec::with_capacity(gaussians.len());
    let mut extra: Vec<(Gaussian, usize)> = Vec::new();
    let densify = cfg.is_densify_iteration(iteration);
    let dense_limit = cfg.percent_dense * extent;
    let mut budget = cfg.max_gaussians.saturating_sub(gaussians.len());

    for (i, g) in gaussians.iter().enumerate() {
        let hot = densify && grads[i] > cfg.densify_grad_threshold;
        if !hot || budget == 0 {
            out.push(g.clone());
            report.source.push(i);
            report.fresh.push(false);
            continue;
        }
        budget -= 1;
        let eff = effective_scale(&g.log_scale_opt, g.level, cfg)?;
        if eff.max() > dense_limit {
            // Two children at reduced scale, placed inside the parent footprint.
            let r = quat_to_rotation(&g.rotation);
            let (s, _) = solve_log_scale(&(eff / cfg.split_scale_divisor), g.level, cfg)?;
            for k in 0..2 {
                let z = Vec3::from_fn(|a, _| {
                    let n: f64 = StandardNormal.sample(rng);
                    n * eff[a]
                });
                let mut c = g.clone();
                c.position = g.position + r * z;
                c.log_scale_opt = s;
                if k == 0 {
                    out.push(c);
                    report.source.push(i);
                    report.fresh.push(true);
                } else {
                    extra.push((c, i));
                }
            }
            report.split += 1;
        } else {
            out.push(g.clone());
            report.source.push(i);
            report.fresh.push(false);
            extra.push((g.clone(), i));
            report.cloned += 1;
        }
    }
    for (g, i) in extra {
        out.push(g);
        report.source.push(i);
        report.fresh.push(true);
    }

    if iteration == cfg.opacity_reset_iteration {
        let cap = logit(cfg.opacity_reset_value);
        for g in &mut out {
            g.opacity_logit = g.opacity_logit.min(cap);
        }
        report.reset = true;
    }

    let mut k = 0;
    let mut source = Vec::with_capacity(out.len());
    let mut fresh = Vec::with_capacity(out.len());
    let mut kept = Vec::with_capacity(out.len());
    for g in out {
        if g.opacity() < cfg.prune_opacity {
            report.pruned += 1;
        } else {
            kept.push(g);
            source.push(report.source[k]);
            fresh.push(report.fresh[k]);
        }
        k += 1;
    }
    report.source = source;
    report.fresh = fresh;
    *gaussians = kept;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3::IDENTITY_QUAT;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian(log_scale: f64, opacity: f64, level: u32) -> Gaussian {
        Gaussian {
            position: Vec3::zeros(),
            rotation: IDENTITY_QUAT,
            log_scale_opt: Vec3::repeat(log_scale),
            opacity_logit: logit(opacity),
            color: Vec3::repeat(0.5),
            level,
            accumulated_importance: 0.0,
            dynamic: false,
        }
    }

    #[test]
    fn min_scale_examples() {
        let cfg = LodConfig { lambda: 0.1, rho: 0.5, max_level: 5, ..Default::default() };
        assert_eq!(min_scale(1, &cfg).unwrap(), 0.1);
        assert_eq!(min_scale(5, &cfg).unwrap(), 0.0);
        assert!((min_scale(3, &cfg).unwrap() - 0.4).abs() < 1e-15);
        assert!(min_scale(0, &cfg).is_err());
        assert!(min_scale(6, &cfg).is_err());
        let flipped = LodConfig { exponent_sign: ExponentSign::LevelMinusOne, ..cfg };
        assert!((min_scale(3, &flipped).unwrap() - 0.025).abs() < 1e-15);
    }

    #[test]
    fn effective_scale_examples() {
        let cfg = LodConfig::default();
        let l = cfg.max_level;
        assert_eq!(effective_scale(&Vec3::zeros(), l, &cfg).unwrap(), Vec3::repeat(1.0));
        let floor = min_scale(1, &cfg).unwrap();
        let e = effective_scale(&Vec3::repeat(-800.0), 1, &cfg).unwrap();
        assert_eq!(e, Vec3::repeat(floor));
    }

    #[test]
    fn advance_level_examples() {
        let cfg = LodConfig { prune_quantile: 0.0, ..Default::default() };
        let mut g = vec![gaussian(-1.0, 0.5, 1), gaussian(-2.0, 0.5, 1)];
        let r = advance_level(&mut g, &cfg).unwrap();
        assert_eq!(r.keep, vec![0, 1]);
        assert!(g.iter().all(|g| g.level == 2));

        let cfg = LodConfig { prune_quantile: 0.5, ..Default::default() };
        let mut g = vec![gaussian(-1.0, 0.5, 1), gaussian(-1.0, 0.5, 1)];
        g[0].accumulated_importance = 10.0;
        let r = advance_level(&mut g, &cfg).unwrap();
        assert_eq!(r.keep, vec![0]);
        assert_eq!(g[0].accumulated_importance, 0.0);

        let cfg = LodConfig { prune_quantile: 1.0, ..Default::default() };
        let mut g = vec![gaussian(-1.0, 0.5, 1), gaussian(-1.0, 0.5, 1)];
        g[1].accumulated_importance = 3.0;
        let r = advance_level(&mut g, &cfg).unwrap();
        assert!(r.kept_top_one);
        assert_eq!(r.keep, vec![1]);

        let mut top = vec![gaussian(0.0, 0.5, 3)];
        assert!(advance_level(&mut top, &LodConfig::default()).is_err());
    }

    #[test]
    fn advance_level_clamps_below_the_next_floor() {
        // Level 2's floor is 0.02 with the default exponent; a 0.011 scale
        // cannot be represented there.
        let cfg = LodConfig { prune_quantile: 0.0, ..Default::default() };
        let mut g = vec![gaussian((0.001f64).ln(), 0.5, 1)];
        let r = advance_level(&mut g, &cfg).unwrap();
        assert_eq!(r.clamped, 1);
        assert!(effective_scale(&g[0].log_scale_opt, 2, &cfg).unwrap().min() >= min_scale(2, &cfg).unwrap());
    }

    #[test]
    fn round_trip_is_exact_across_all_levels() {
        for sign in [ExponentSign::OneMinusLevel, ExponentSign::LevelMinusOne] {
            for max_level in 1..=5 {
                let cfg = LodConfig { max_level, exponent_sign: sign, ..Default::default() };
                for l in 1..max_level {
                    for s in [-3.0, -1.0, 0.0, 0.5] {
                        let s_opt = Vec3::new(s, s - 0.3, s + 0.2);
                        let eff = effective_scale(&s_opt, l, &cfg).unwrap();
                        let (next, clamped) = solve_log_scale(&eff, l + 1, &cfg).unwrap();
                        if !clamped {
                            let back = effective_scale(&next, l + 1, &cfg).unwrap();
                            assert!((back - eff).abs().max() < 1e-9);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn densify_examples() {
        let cfg = LodConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = vec![gaussian(-5.0, 0.5, 1); 4];
        let r = densify_and_prune(&mut g, &[1e-5; 4], 600, 2.0, &cfg, &mut rng).unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(r.split + r.cloned, 0);

        let mut g = vec![gaussian(-5.0, 0.5, 1), gaussian(-5.0, 0.004, 1)];
        let r = densify_and_prune(&mut g, &[0.0, 0.0], 1, 2.0, &cfg, &mut rng).unwrap();
        assert_eq!(r.pruned, 1);
        assert_eq!(r.source, vec![0]);
    }

    #[test]
    fn split_and_clone_follow_scale_rule() {
        let cfg = LodConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let big = gaussian((0.3f64).ln(), 0.5, cfg.max_level);
        let small = gaussian((0.001f64).ln(), 0.5, cfg.max_level);
        let mut g = vec![big, small];
        let r = densify_and_prune(&mut g, &[1.0, 1.0], 600, 2.0, &cfg, &mut rng).unwrap();
        assert_eq!((r.split, r.cloned), (1, 1));
        assert_eq!(g.len(), 4);
        assert_eq!(r.source, vec![0, 1, 0, 1]);
        assert_eq!(r.fresh, vec![true, false, true, true]);
        for k in [0, 2] {
            let e = effective_scale(&g[k].log_scale_opt, g[k].level, &cfg).unwrap();
            assert!((e - Vec3::repeat(0.3 / 1.6)).abs().max() < 1e-12);
        }
        assert_eq!(g[3], g[1]);
    }

    #[test]
    fn opacity_reset_and_window() {
        let cfg = LodConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = vec![gaussian(-5.0, 0.9, 1), gaussian(-5.0, 0.006, 1)];
        let r = densify_and_prune(&mut g, &[1.0, 1.0], 3000, 2.0, &cfg, &mut rng).unwrap();
        assert!(r.reset);
        assert!(g.iter().all(|g| g.opacity() <= 0.01 + 1e-12));
        assert!(!cfg.is_densify_iteration(200));
        assert!(cfg.is_densify_iteration(600));
        assert!(!cfg.is_densify_iteration(10_200));
    }

    #[test]
    fn level_schedule_splits_evenly() {
        let cfg = LodConfig::default();
        assert_eq!(cfg.level_at(0, 3000), 1);
        assert_eq!(cfg.level_at(999, 3000), 1);
        assert_eq!(cfg.level_at(1000, 3000), 2);
        assert_eq!(cfg.level_at(2999, 3000), 3);
        assert_eq!(cfg.level_at(10_000, 3000), 3);
    }

    proptest! {
        #[test]
        fn effective_scale_respects_the_floor(
            s in prop::array::uniform3(-50.0f64..3.0),
            l in 1u32..=3,
        ) {
            let cfg = LodConfig::default();
            let e = effective_scale(&Vec3::from(s), l, &cfg).unwrap();
            let floor = min_scale(l, &cfg).unwrap();
            prop_assert!(e.iter().all(|&x| x >= floor && x > 0.0));
        }

        #[test]
        fn densify_leaves_no_faint_gaussians(
            ops in prop::collection::vec(0.001f64..0.99, 1..30),
            grads in prop::collection::vec(0.0f64..1e-3, 30),
            iteration in 0u64..12_000,
        ) {
            let cfg = LodConfig::default();
            let mut rng = ChaCha8Rng::seed_from_u64(iteration);
            let mut g: Vec<Gaussian> = ops.iter().map(|&o| gaussian(-3.0, o, 1)).collect();
            let n = g.len();
            let r = densify_and_prune(&mut g, &grads[..n], iteration, 2.0, &cfg, &mut rng).unwrap();
            prop_assert!(g.iter().all(|g| g.opacity() >= cfg.prune_opacity));
            prop_assert_eq!(r.source.len(), g.len());
        }

        #[test]
        fn advance_never_grows(
            imps in prop::collection::vec(0.0f64..100.0, 1..40),
            q in 0.0f64..=1.0,
        ) {
            let cfg = LodConfig { prune_quantile: q, ..Default::default() };
            let mut g: Vec<Gaussian> = imps.iter().map(|&i| {
                let mut g = gaussian(-1.0, 0.5, 1);
                g.accumulated_importance = i;
                g
            }).collect();
            let n = g.len();
            advance_level(&mut g, &cfg).unwrap();
            prop_assert!(!g.is_empty() && g.len() <= n);
        }
    }
}
