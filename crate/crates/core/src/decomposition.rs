//! Static/dynamic partition from the temporal variance of predicted
//! position offsets.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec3;

pub const DEFAULT_TAU: f64 = 2e-5;
/// Timestamps sampled per variance evaluation.
pub const DEFAULT_SAMPLES: usize = 16;

/// `(1/T) sum_t |dx_t - mean(dx)|^2`.
pub fn deformation_variance(samples: &[Vec3]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::invalid(format!(
            "deformation_variance needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    // Shift by the first sample so constant trajectories give exactly zero.
    let n = samples.len() as f64;
    let origin = samples[0];
    let mean = samples.iter().fold(Vec3::zeros(), |a, b| a + (b - origin)) / n;
    Ok(samples
        .iter()
        .map(|s| (s - origin - mean).norm_squared())
        .sum::<f64>()
        / n)
}

/// Midpoints of `t` equal strata of `[0, 1]`.
pub fn sample_times(t: usize) -> Vec<f64> {
    (0..t).map(|i| (i as f64 + 0.5) / t as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub dynamic_indices: Vec<usize>,
    pub static_indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub tau: f64,
}

impl Partition {
    /// Everything dynamic; used before the first evaluation.
    pub fn all_dynamic(n: usize) -> Self {
        Partition {
            dynamic_indices: (0..n).collect(),
            static_indices: Vec::new(),
            scores: vec![f64::INFINITY; n],
            tau: DEFAULT_TAU,
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn is_dynamic_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.len()];
        for &i in &self.dynamic_indices {
            mask[i] = true;
        }
        mask
    }

    /// Checks disjointness, coverage and threshold consistency.
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![0u8; self.len()];
        for &i in self.dynamic_indices.iter().chain(&self.static_indices) {
            if i >= seen.len() {
                return Err(Error::invalid(format!("partition index {i} out of range")));
            }
            seen[i] += 1;
        }
        if seen.iter().any(|&c| c != 1) {
            return Err(Error::invalid("partition lists overlap or miss Gaussians"));
        }
        if self.dynamic_indices.iter().any(|&i| !(self.scores[i] > self.tau))
            || self.static_indices.iter().any(|&i| self.scores[i] > self.tau)
        {
            return Err(Error::invalid("partition labels disagree with scores"));
        }
        Ok(())
    }

    /// One `index,score,label` line per Gaussian.
    pub fn dump(&self) -> String {
        let mask = self.is_dynamic_mask();
        let mut out = String::new();
        for (i, (s, d)) in self.scores.iter().zip(mask).enumerate() {
            let _ = writeln!(out, "{i},{s:e},{}", if d { "dynamic" } else { "static" });
        }
        out
    }

    pub fn write_dump(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.dump()).map_err(|e| Error::io(path, e))
    }

    /// Parses [`Self::dump`] output back into `(scores, labels)`.
    pub fn parse_dump(text: &str) -> Result<(Vec<f64>, Vec<bool>)> {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let parts: Vec<&str> = line.split(',').collect();
            let bad = || Error::invalid(format!("partition dump line {}: {line:?}", n + 1));
            if parts.len() != 3 || parts[0].parse::<usize>().ok() != Some(n) {
                return Err(bad());
            }
            scores.push(parts[1].parse::<f64>().map_err(|_| bad())?);
            labels.push(match parts[2] {
                "dynamic" => true,
                "static" => false,
                _ => return Err(bad()),
            });
        }
        Ok((scores, labels))
    }
}

/// Strictly greater than `tau` is dynamic.
pub fn classify(scores: &[f64], tau: f64) -> Partition {
    let (dynamic_indices, static_indices) = (0..scores.len()).partition(|&i| scores[i] > tau);
    Partition {
        dynamic_indices,
        static_indices,
        scores: scores.to_vec(),
        tau,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSchedule {
    pub first: u64,
    pub period: u64,
}

impl Default for PartitionSchedule {
    fn default() -> Self {
        PartitionSchedule {
            first: 3000,
            period: 2000,
        }
    }
}

impl PartitionSchedule {
    pub fn should_evaluate(&self, iteration: u64) -> bool {
        iteration >= self.first
            && (self.period == 0 && iteration == self.first
                || self.period > 0 && (iteration - self.first) % self.period == 0)
    }
}

pub fn evaluate_partition_schedule(iteration: u64) -> bool {
    PartitionSchedule::default().should_evaluate(iteration)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn variance_examples() {
        let c = vec![Vec3::new(0.3, -0.2, 1.0); 16];
        assert_eq!(deformation_variance(&c).unwrap(), 0.0);
        let e = Vec3::new(1.0, 2.0, 2.0) / 3.0;
        let a = 0.7;
        let alt: Vec<Vec3> = (0..16).map(|i| e * if i % 2 == 0 { a } else { -a }).collect();
        assert!((deformation_variance(&alt).unwrap() - a * a).abs() < 1e-12);
        assert!(deformation_variance(&c[..1]).is_err());
    }

    #[test]
    fn variance_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let t = rng.gen_range(2..40);
            let s: Vec<Vec3> = (0..t)
                .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            // naive two-pass per component
            let mut expected = 0.0;
            for k in 0..3 {
                let m: f64 = s.iter().map(|v| v[k]).sum::<f64>() / t as f64;
                expected += s.iter().map(|v| (v[k] - m).powi(2)).sum::<f64>() / t as f64;
            }
            assert!((deformation_variance(&s).unwrap() - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn classify_examples() {
        let p = classify(&[0.0, 0.0, 0.0], DEFAULT_TAU);
        assert!(p.dynamic_indices.is_empty());
        let p = classify(&[0.0, 1e-3], DEFAULT_TAU);
        assert_eq!(p.static_indices, vec![0]);
        assert_eq!(p.dynamic_indices, vec![1]);
        p.validate().unwrap();
        let p = classify(&[1e-12, 3.0, 1e-7], 0.0);
        assert_eq!(p.dynamic_indices.len(), 3);
        // boundary: equal to tau stays static
        let p = classify(&[DEFAULT_TAU], DEFAULT_TAU);
        assert_eq!(p.static_indices, vec![0]);
    }

    #[test]
    fn schedule_examples() {
        assert!(!evaluate_partition_schedule(0));
        assert!(!evaluate_partition_schedule(2999));
        assert!(evaluate_partition_schedule(3000));
        assert!(evaluate_partition_schedule(5000));
        assert!(!evaluate_partition_schedule(5001));
        assert!(evaluate_partition_schedule(7000));
    }

    #[test]
    fn dump_round_trip() {
        let p = classify(&[0.0, 1e-3, 5e-6, 0.25], DEFAULT_TAU);
        let (scores, labels) = Partition::parse_dump(&p.dump()).unwrap();
        assert_eq!(scores, p.scores);
        assert_eq!(labels, p.is_dynamic_mask());
        assert!(Partition::parse_dump("0,1.0,moving\n").is_err());
    }

    proptest! {
        #[test]
        fn variance_is_translation_invariant_and_quadratic(
            pts in prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 2..20),
            shift in prop::array::uniform3(-5.0f64..5.0),
            c in 0.1f64..10.0,
        ) {
            let s: Vec<Vec3> = pts.iter().map(|p| Vec3::from(*p)).collect();
            let k = deformation_variance(&s).unwrap();
            let shifted: Vec<Vec3> = s.iter().map(|p| p + Vec3::from(shift)).collect();
            prop_assert!((deformation_variance(&shifted).unwrap() - k).abs() < 1e-12);
            let scaled: Vec<Vec3> = s.iter().map(|p| p * c).collect();
            let ks = deformation_variance(&scaled).unwrap();
            prop_assert!((ks - c * c * k).abs() <= 1e-9 * (c * c * k).max(1e-300));
        }

        #[test]
        fn classify_is_monotone_in_tau(
            scores in prop::collection::vec(0.0f64..1e-3, 1..50),
            t1 in 0.0f64..1e-3,
            dt in 0.0f64..1e-3,
        ) {
            let lo = classify(&scores, t1);
            let hi = classify(&scores, t1 + dt);
            lo.validate().unwrap();
            hi.validate().unwrap();
            let lo_mask = lo.is_dynamic_mask();
            for &i in &hi.dynamic_indices {
                prop_assert!(lo_mask[i]);
            }
        }
    }
}
