//! Annealed input-noise schedule with an optional sine warm-up.

use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigma_init: f64,
    pub sigma_final: f64,
    pub k_max: u64,
    pub w_delay: f64,
    pub k_delay: u64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            sigma_init: 0.1,
            sigma_final: 0.0,
            k_max: 3000,
            w_delay: 0.1,
            k_delay: 500,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_init >= self.sigma_final && self.sigma_final >= 0.0) {
            return Err(Error::Config(
                "noise schedule needs sigma_init >= sigma_final >= 0".into(),
            ));
        }
        if self.k_delay > self.k_max {
            return Err(Error::Config("noise schedule needs k_delay <= k_max".into()));
        }
        if !(self.w_delay > 0.0 && self.w_delay < 1.0) {
            return Err(Error::Config("noise schedule w_delay must lie in (0, 1)".into()));
        }
        if self.k_max == 0 {
            return Err(Error::Config("noise schedule k_max must be positive".into()));
        }
        Ok(())
    }

    /// Noise standard deviation at iteration `k`.
    pub fn sigma(&self, k: u64) -> f64 {
        let frac = (k as f64 / self.k_max as f64).clamp(0.0, 1.0);
        let base = self.sigma_init * (1.0 - frac) + self.sigma_final * frac;
        let w = if k < self.k_delay {
            self.w_delay
                + (1.0 - self.w_delay) * (FRAC_PI_2 * k as f64 / self.k_delay as f64).sin()
        } else {
            1.0
        };
        w * base
    }
}
