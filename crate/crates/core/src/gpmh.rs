//! Gaussian-process likelihood over observed counts and Metropolis-Hastings
//! inference of the per-cycle traffic flow parameters.
//!
//! The GP mean is the theoretical count curve of the queuing module; the
//! covariance is a squared-exponential kernel with a white-noise regulator,
//! so the factorization depends only on the sample times and is done once
//! per cycle. Each chain is an independence sampler: fresh uniform draws
//! from a fixed proposal box at every step, accepted on the likelihood
//! ratio. The estimate is the mean of accepted samples after burn-in.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::queuing::{CycleModel, CycleTiming, QueueParams};
use crate::types::{IntersectionSpec, LaneCycle};

/// Squared-exponential kernel hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    /// Kernel amplitude.
    pub amplitude: f64,
    /// Length scale, seconds.
    pub length_scale_s: f64,
    /// White-noise scale, vehicles.
    pub noise: f64,
}

impl Default for GpHyper {
    fn default() -> Self {
        GpHyper {
            amplitude: 0.5,
            length_scale_s: 2.0,
            noise: 1.0,
        }
    }
}

impl GpHyper {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("amplitude", self.amplitude),
            ("length_scale_s", self.length_scale_s),
            ("noise", self.noise),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Invariant(format!("gp {name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// How the chain is summarized into a point estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainEstimator {
    /// Mean over accepted samples only (rejected steps are not repeated).
    AcceptedMean,
    /// Textbook estimator: mean over the full chain, repeating held samples.
    ChainMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MhSettings {
    pub iterations: usize,
    /// Fraction of samples discarded as burn-in.
    pub burn_in: f64,
    /// Proposal box upper bound for the arrival rate, veh/s.
    pub arrival_max: f64,
    /// Proposal box upper bound for the saturation rate, veh/s.
    pub saturation_max: f64,
    pub estimator: ChainEstimator,
    pub record_trace: bool,
}

impl Default for MhSettings {
    fn default() -> Self {
        MhSettings {
            iterations: 1000,
            burn_in: 0.75,
            arrival_max: 1.0,
            saturation_max: 1.5,
            estimator: ChainEstimator::AcceptedMean,
            record_trace: false,
        }
    }
}

impl MhSettings {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 10 {
            return Err(Error::Invariant(format!(
                "mh iterations must be >= 10, got {}",
                self.iterations
            )));
        }
        if !(self.burn_in > 0.0 && self.burn_in < 1.0) {
            return Err(Error::Invariant(format!(
                "burn-in fraction must lie in (0, 1), got {}",
                self.burn_in
            )));
        }
        if !(self.arrival_max > 0.0 && self.saturation_max > self.arrival_max) {
            return Err(Error::Invariant(format!(
                "proposal box needs 0 < arrival_max < saturation_max, got {} and {}",
                self.arrival_max, self.saturation_max
            )));
        }
        Ok(())
    }
}

/// Covariance matrix over sample times: squared exponential plus eta^2 on
/// coincident times. Positive definite whenever the noise scale is positive.
pub fn kernel_matrix(timestamps: &[f64], hyper: &GpHyper) -> DMatrix<f64> {
    let n = timestamps.len();
    DMatrix::from_fn(n, n, |i, j| {
        let d = (timestamps[i] - timestamps[j]) / hyper.length_scale_s;
        let mut k = hyper.amplitude * (-d * d).exp();
        if timestamps[i] == timestamps[j] {
            k += hyper.noise * hyper.noise;
        }
        k
    })
}

/// Per-cycle likelihood evaluator with the kernel factorization cached.
pub struct CycleLikelihood {
    timestamps: Vec<f64>,
    counts: DVector<f64>,
    lower: DMatrix<f64>,
    /// -sum(ln L_ii) - n/2 ln(2 pi)
    log_norm: f64,
    timing: CycleTiming,
    capacity: f64,
    traverse: f64,
}

impl CycleLikelihood {
    pub fn new(obs: &LaneCycle, spec: &IntersectionSpec, hyper: &GpHyper) -> Result<Self> {
        hyper.validate()?;
        if obs.timestamps.is_empty() {
            return Err(Error::Data(format!(
                "lane {} cycle at {}s has no count samples",
                obs.lane, obs.start_s
            )));
        }
        let k = kernel_matrix(&obs.timestamps, hyper);
        let chol = k
            .cholesky()
            .ok_or_else(|| Error::NonFinite("kernel factorization".into()))?;
        let lower = chol.l();
        let log_det_half: f64 = (0..lower.nrows()).map(|i| lower[(i, i)].ln()).sum();
        let n = obs.timestamps.len() as f64;
        Ok(CycleLikelihood {
            timestamps: obs.timestamps.clone(),
            counts: DVector::from_column_slice(&obs.counts),
            lower,
            log_norm: -log_det_half - 0.5 * n * (2.0 * std::f64::consts::PI).ln(),
            timing: CycleTiming {
                cycle_s: obs.cycle_s,
                red_s: obs.red_s,
            },
            capacity: spec.capacity_veh(),
            traverse: spec.traverse_time_s,
        })
    }

    /// Log density of the observed counts under the count curve for `params`.
    /// Infeasible parameters score negative infinity.
    pub fn log_likelihood(&self, params: &QueueParams, flow: f64) -> f64 {
        let model = match CycleModel::new(*params, self.timing, flow, self.capacity, self.traverse)
        {
            Ok(m) => m,
            Err(_) => return f64::NEG_INFINITY,
        };
        let mut resid = self.counts.clone();
        for (i, &t) in self.timestamps.iter().enumerate() {
            resid[i] -= model.count(t);
        }
        let z = self
            .lower
            .solve_lower_triangular(&resid)
            .expect("cached Cholesky factor is nonsingular");
        -0.5 * z.dot(&z) + self.log_norm
    }
}

/// Convenience wrapper that builds the evaluator and scores one parameter set.
pub fn log_likelihood(
    params: &QueueParams,
    obs: &LaneCycle,
    flow: f64,
    spec: &IntersectionSpec,
    hyper: &GpHyper,
) -> Result<f64> {
    Ok(CycleLikelihood::new(obs, spec, hyper)?.log_likelihood(params, flow))
}

/// One sampler step, kept when tracing is enabled.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TraceStep {
    pub iteration: usize,
    pub proposal: QueueParams,
    pub log_likelihood: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct ThetaEstimate {
    pub params: QueueParams,
    pub accepted: usize,
    /// Set when the chain never accepted and the initializer was returned.
    pub low_confidence: bool,
    pub trace: Option<Vec<TraceStep>>,
}

/// Feasible-by-construction initializer: arrivals that exactly reproduce the
/// flow, a comfortably higher saturation rate, and the first observed count.
pub fn initial_params(obs: &LaneCycle, flow: f64, spec: &IntersectionSpec) -> QueueParams {
    let arrival = (flow / obs.cycle_s).max(1e-4);
    QueueParams {
        arrival,
        saturation: (2.0 * arrival).max(0.45),
        initial: obs
            .counts
            .first()
            .copied()
            .unwrap_or(0.0)
            .clamp(0.0, spec.capacity_veh()),
    }
}

/// Infer the queue parameters of one lane cycle. Deterministic per seed.
pub fn mh_infer(
    obs: &LaneCycle,
    flow: f64,
    spec: &IntersectionSpec,
    hyper: &GpHyper,
    mh: &MhSettings,
    seed: u64,
) -> Result<ThetaEstimate> {
    mh.validate()?;
    if !(flow > 0.0) {
        return Err(Error::Data(format!(
            "lane {} cycle at {}s: non-positive flow {flow} cannot be inferred",
            obs.lane, obs.start_s
        )));
    }
    let like = CycleLikelihood::new(obs, spec, hyper)?;
    let capacity = spec.capacity_veh();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let theta0 = initial_params(obs, flow, spec);
    let mut current = theta0;
    let mut current_ll = like.log_likelihood(&current, flow);

    let mut accepted: Vec<QueueParams> = Vec::new();
    let mut chain: Vec<QueueParams> = Vec::with_capacity(if mh.estimator == ChainEstimator::ChainMean {
        mh.iterations
    } else {
        0
    });
    let mut trace: Option<Vec<TraceStep>> = mh.record_trace.then(Vec::new);

    for iteration in 0..mh.iterations {
        let arrival = (1.0 - rng.gen::<f64>()) * mh.arrival_max;
        let saturation = arrival + (1.0 - rng.gen::<f64>()) * (mh.saturation_max - arrival);
        let initial = rng.gen::<f64>() * capacity;
        let proposal = QueueParams {
            arrival,
            saturation,
            initial,
        };
        let ll = like.log_likelihood(&proposal, flow);

        // Log-space acceptance: beta = min(exp(ll - current_ll), 1). A chain
        // stuck at -inf accepts the first finite proposal.
        let accept = if ll == f64::NEG_INFINITY {
            false
        } else if current_ll == f64::NEG_INFINITY || ll >= current_ll {
            true
        } else {
            rng.gen::<f64>().ln() < ll - current_ll
        };

        if accept {
            current = proposal;
            current_ll = ll;
            accepted.push(proposal);
        }
        if mh.estimator == ChainEstimator::ChainMean {
            chain.push(current);
        }
        if let Some(tr) = trace.as_mut() {
            tr.push(TraceStep {
                iteration,
                proposal,
                log_likelihood: ll,
                accepted: accept,
            });
        }
    }

    if accepted.is_empty() {
        return Ok(ThetaEstimate {
            params: theta0,
            accepted: 0,
            low_confidence: true,
            trace,
        });
    }

    let samples: &[QueueParams] = match mh.estimator {
        ChainEstimator::AcceptedMean => &accepted,
        ChainEstimator::ChainMean => &chain,
    };
    let skip = (mh.burn_in * samples.len() as f64).floor() as usize;
    let kept = &samples[skip.min(samples.len() - 1)..];
    let n = kept.len() as f64;
    let params = QueueParams {
        arrival: kept.iter().map(|p| p.arrival).sum::<f64>() / n,
        saturation: kept.iter().map(|p| p.saturation).sum::<f64>() / n,
        initial: kept.iter().map(|p| p.initial).sum::<f64>() / n,
    };
    Ok(ThetaEstimate {
        params,
        accepted: accepted.len(),
        low_confidence: false,
        trace,
    })
}

/// A lane cycle queued for batch inference.
pub struct InferTask<'a> {
    pub lane: usize,
    pub cycle_index: usize,
    pub obs: &'a LaneCycle,
    pub flow: f64,
}

/// Run independent chains for many lane cycles. Each task derives its own
/// seed from (base seed, lane, cycle index), so results do not depend on
/// scheduling.
pub fn infer_batch(
    tasks: &[InferTask<'_>],
    spec: &IntersectionSpec,
    hyper: &GpHyper,
    mh: &MhSettings,
    base_seed: u64,
) -> Vec<Result<ThetaEstimate>> {
    tasks
        .par_iter()
        .map(|task| {
            let seed = derive_seed(base_seed, task.lane as u64, task.cycle_index as u64);
            mh_infer(task.obs, task.flow, spec, hyper, mh, seed)
        })
        .collect()
}

/// Splitmix-style seed derivation; stable across platforms.
pub fn derive_seed(base: u64, lane: u64, cycle: u64) -> u64 {
    let mut z = base;
    for salt in [lane.wrapping_add(1), cycle.wrapping_add(0x5bd1e995)] {
        z ^= salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::PhaseTable;
    use approx::assert_relative_eq;

    fn spec() -> IntersectionSpec {
        IntersectionSpec {
            lane_count: 1,
            phase_count: 1,
            order_count: 1,
            phase_table: PhaseTable(vec![vec![vec![1]]]),
            controlled: vec![true],
            detection_range_m: 150.0,
            jam_density: 1.0 / 7.5,
            free_flow_mps: 15.0,
            shockwave_mps: 6.0,
            traverse_time_s: 25.0,
            cycle_bounds_s: (60.0, 120.0),
        }
    }

    fn cycle_from_params(params: &QueueParams, flow: f64, noise: &[f64]) -> LaneCycle {
        let timing = CycleTiming {
            cycle_s: 60.0,
            red_s: 30.0,
        };
        let model = CycleModel::new(*params, timing, flow, 20.0, 25.0).unwrap();
        let timestamps: Vec<f64> = (1..=12).map(|i| i as f64 * 5.0).collect();
        let counts: Vec<f64> = timestamps
            .iter()
            .enumerate()
            .map(|(i, &t)| (model.count(t) + noise.get(i).copied().unwrap_or(0.0)).max(0.0))
            .collect();
        LaneCycle {
            lane: 0,
            start_s: 0.0,
            cycle_s: 60.0,
            red_s: 30.0,
            green_s: 30.0,
            timestamps,
            counts,
            flow: Some(flow),
        }
    }

    #[test]
    fn kernel_diagonal_and_decay() {
        let hyper = GpHyper::default();
        let k = kernel_matrix(&[0.0, 2.0, 100.0], &hyper);
        assert_relative_eq!(k[(0, 0)], 1.5);
        // |ti - tj| = lambda gives amplitude * e^-1.
        assert_relative_eq!(k[(0, 1)], 0.5 * (-1.0f64).exp(), epsilon = 1e-12);
        assert!(k[(0, 2)].abs() < 1e-12);
        assert_eq!(k[(0, 1)], k[(1, 0)]);
    }

    #[test]
    fn kernel_is_positive_definite() {
        let hyper = GpHyper::default();
        let t: Vec<f64> = (0..24).map(|i| i as f64 * 5.0).collect();
        assert!(kernel_matrix(&t, &hyper).cholesky().is_some());
    }

    #[test]
    fn loglik_peaks_at_zero_residual() {
        let params = QueueParams {
            arrival: 0.1,
            saturation: 0.5,
            initial: 2.0,
        };
        let obs = cycle_from_params(&params, 6.0, &[]);
        let base = log_likelihood(&params, &obs, 6.0, &spec(), &GpHyper::default()).unwrap();
        for shift in [0.5, 1.0, 2.0] {
            let mut shifted = obs.clone();
            for c in &mut shifted.counts {
                *c += shift;
            }
            let ll = log_likelihood(&params, &shifted, 6.0, &spec(), &GpHyper::default()).unwrap();
            assert!(ll < base, "shift {shift}: {ll} !< {base}");
        }
    }

    #[test]
    fn loglik_scalar_case_matches_formula() {
        let hyper = GpHyper::default();
        let params = QueueParams {
            arrival: 0.1,
            saturation: 0.5,
            initial: 2.0,
        };
        // Single sample at t = 0 with residual 1: the model count there is
        // exactly the initial count.
        let obs = LaneCycle {
            lane: 0,
            start_s: 0.0,
            cycle_s: 60.0,
            red_s: 30.0,
            green_s: 30.0,
            timestamps: vec![0.0],
            counts: vec![3.0],
            flow: Some(6.0),
        };
        let ll = log_likelihood(&params, &obs, 6.0, &spec(), &hyper).unwrap();
        let k = 1.5;
        let expected = -0.5 / k - 0.5 * (2.0 * std::f64::consts::PI * k).ln();
        assert_relative_eq!(ll, expected, epsilon = 1e-12);
    }

    #[test]
    fn loglik_invariant_under_timestamp_reordering() {
        let params = QueueParams {
            arrival: 0.1,
            saturation: 0.5,
            initial: 2.0,
        };
        let obs = cycle_from_params(&params, 6.0, &[0.3, -0.2, 0.1, 0.4]);
        let mut permuted = obs.clone();
        permuted.timestamps.reverse();
        permuted.counts.reverse();
        let a = log_likelihood(&params, &obs, 6.0, &spec(), &GpHyper::default()).unwrap();
        let b = log_likelihood(&params, &permuted, 6.0, &spec(), &GpHyper::default()).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-9);
    }

    #[test]
    fn infeasible_theta_scores_neg_infinity() {
        let params = QueueParams {
            arrival: 0.9,
            saturation: 1.0,
            initial: 2.0,
        };
        let obs = cycle_from_params(
            &QueueParams {
                arrival: 0.1,
                saturation: 0.5,
                initial: 2.0,
            },
            6.0,
            &[],
        );
        // flow 6 < arrival * green = 27: dissipation time negative.
        let ll = log_likelihood(&params, &obs, 6.0, &spec(), &GpHyper::default()).unwrap();
        assert_eq!(ll, f64::NEG_INFINITY);
    }

    #[test]
    fn chains_are_deterministic_per_seed() {
        let truth = QueueParams {
            arrival: 0.1,
            saturation: 0.5,
            initial: 2.0,
        };
        let obs = cycle_from_params(&truth, 6.0, &[0.4, -0.3, 0.2]);
        let mh = MhSettings::default();
        let a = mh_infer(&obs, 6.0, &spec(), &GpHyper::default(), &mh, 7).unwrap();
        let b = mh_infer(&obs, 6.0, &spec(), &GpHyper::default(), &mh, 7).unwrap();
        assert_eq!(a.params.arrival.to_bits(), b.params.arrival.to_bits());
        assert_eq!(a.params.saturation.to_bits(), b.params.saturation.to_bits());
        assert_eq!(a.params.initial.to_bits(), b.params.initial.to_bits());
        let c = mh_infer(&obs, 6.0, &spec(), &GpHyper::default(), &mh, 8).unwrap();
        assert_ne!(a.params.arrival.to_bits(), c.params.arrival.to_bits());
    }

    #[test]
    fn trace_records_every_iteration() {
        let truth = QueueParams {
            arrival: 0.1,
            saturation: 0.5,
            initial: 2.0,
        };
        let obs = cycle_from_params(&truth, 6.0, &[]);
        let mh = MhSettings {
            iterations: 50,
            record_trace: true,
            ..Default::default()
        };
        let est = mh_infer(&obs, 6.0, &spec(), &GpHyper::default(), &mh, 3).unwrap();
        let trace = est.trace.unwrap();
        assert_eq!(trace.len(), 50);
        assert_eq!(trace.iter().filter(|s| s.accepted).count(), est.accepted);
    }

    #[test]
    fn batch_matches_individual_chains() {
        let truth = QueueParams {
            arrival: 0.12,
            saturation: 0.5,
            initial: 3.0,
        };
        let obs = cycle_from_params(&truth, 7.0, &[0.2, -0.1]);
        let tasks = vec![
            InferTask {
                lane: 0,
                cycle_index: 0,
                obs: &obs,
                flow: 7.0,
            },
            InferTask {
                lane: 0,
                cycle_index: 1,
                obs: &obs,
                flow: 7.0,
            },
        ];
        let mh = MhSettings {
            iterations: 100,
            ..Default::default()
        };
        let batch = infer_batch(&tasks, &spec(), &GpHyper::default(), &mh, 11);
        let solo =
            mh_infer(&obs, 7.0, &spec(), &GpHyper::default(), &mh, derive_seed(11, 0, 1)).unwrap();
        let b1 = batch[1].as_ref().unwrap();
        assert_eq!(b1.params.arrival.to_bits(), solo.params.arrival.to_bits());
    }
}
