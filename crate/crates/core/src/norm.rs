//! Dataset normalization: states to zero mean/unit variance, rewards to
//! mean 5 / std 1 (computed on negated delay so that lower delay means
//! higher training reward), actions affinely to the unit box.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::IntersectionSpec;

pub const REWARD_CENTER: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    /// Mean of the negated-delay series.
    pub reward_mean: f64,
    /// Sample std of the negated-delay series.
    pub reward_std: f64,
    pub action_lo: Vec<f64>,
    pub action_hi: Vec<f64>,
}

/// Action bounds for unit-range scaling: cycle length spans the configured
/// bounds, green ratios already live in [0, 1].
pub fn action_bounds(spec: &IntersectionSpec) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![spec.cycle_bounds_s.0];
    let mut hi = vec![spec.cycle_bounds_s.1];
    lo.extend(std::iter::repeat(0.0).take(spec.phase_count));
    hi.extend(std::iter::repeat(1.0).take(spec.phase_count));
    (lo, hi)
}

impl NormStats {
    /// Fit from raw states and raw delays. Dimensions with zero variance get
    /// std forced to 1 so normalization stays defined.
    pub fn fit(states: &[Vec<f64>], delays: &[f64], spec: &IntersectionSpec) -> Result<Self> {
        if states.is_empty() || delays.is_empty() {
            return Err(Error::Data("cannot fit normalization on empty dataset".into()));
        }
        let dim = states[0].len();
        let n = states.len() as f64;
        let mut mean = vec![0.0; dim];
        for s in states {
            for (m, &v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut std = vec![0.0; dim];
        for s in states {
            for ((sd, &v), &m) in std.iter_mut().zip(s).zip(&mean) {
                *sd += (v - m) * (v - m);
            }
        }
        for sd in &mut std {
            *sd = if states.len() > 1 {
                (*sd / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            if *sd <= 1e-12 {
                *sd = 1.0;
            }
        }

        let negated: Vec<f64> = delays.iter().map(|&d| -d).collect();
        let rm = negated.iter().sum::<f64>() / negated.len() as f64;
        let mut rs = if negated.len() > 1 {
            (negated.iter().map(|&r| (r - rm) * (r - rm)).sum::<f64>()
                / (negated.len() as f64 - 1.0))
                .sqrt()
        } else {
            0.0
        };
        if rs <= 1e-12 {
            rs = 1.0;
        }

        let (action_lo, action_hi) = action_bounds(spec);
        Ok(NormStats {
            state_mean: mean,
            state_std: std,
            reward_mean: rm,
            reward_std: rs,
            action_lo,
            action_hi,
        })
    }

    pub fn normalize_state(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(&self.state_mean)
            .zip(&self.state_std)
            .map(|((&v, &m), &sd)| (v - m) / sd)
            .collect()
    }

    pub fn denormalize_state(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.state_mean)
            .zip(&self.state_std)
            .map(|((&v, &m), &sd)| v * sd + m)
            .collect()
    }

    pub fn normalize_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(&self.action_lo)
            .zip(&self.action_hi)
            .map(|((&v, &lo), &hi)| (v - lo) / (hi - lo))
            .collect()
    }

    pub fn denormalize_action(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(&self.action_lo)
            .zip(&self.action_hi)
            .map(|((&v, &lo), &hi)| lo + v * (hi - lo))
            .collect()
    }

    /// Training reward for a raw interval delay; larger delay gives a
    /// strictly smaller reward.
    pub fn reward_to_training(&self, delay: f64) -> f64 {
        REWARD_CENTER + (-delay - self.reward_mean) / self.reward_std
    }

    pub fn training_to_delay(&self, r: f64) -> f64 {
        -((r - REWARD_CENTER) * self.reward_std + self.reward_mean)
    }
}
