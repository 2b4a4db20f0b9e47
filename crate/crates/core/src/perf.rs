//! Queue length, delay, and reward derived from inferred flow parameters.
//!
//! Units: shockwave speeds are stored signed (negative = propagating
//! backward, against the driving direction) and the geometry uses their
//! magnitudes; queue lengths are meters; the delay is the area swept by the
//! queue region (meter-seconds) converted to vehicle-seconds through the jam
//! density.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::NormStats;
use crate::queuing::QueueParams;
use crate::types::IntersectionSpec;

/// Performance of one lane over one signal cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CyclePerformance {
    /// Stopping shockwave speed, m/s (negative).
    pub stopping_wave: f64,
    /// Starting shockwave speed, m/s (negative).
    pub starting_wave: f64,
    /// Initial queue length, meters.
    pub initial_queue_m: f64,
    /// Maximum queue length, meters.
    pub max_queue_m: f64,
    /// Total delay, vehicle-seconds.
    pub delay_veh_s: f64,
}

/// Stopping and starting shockwave speeds for the inferred parameters.
/// Both are negative; the stopping wave is always slower in magnitude than
/// the starting wave.
pub fn shockwave_speeds(params: &QueueParams, spec: &IntersectionSpec) -> (f64, f64) {
    let kj = spec.jam_density;
    let denon = kj * (1.0 / params.arrival - 1.0 / params.saturation)
        + spec.traverse_time_s / spec.detection_range_m;
    (-1.0 / denon, -spec.shockwave_mps)
}

/// Maximum queue length in meters: the stopping wave grows the tail from the
/// initial queue during red; the starting wave launched at green onset
/// catches it at the maximum extent.
pub fn max_queue(params: &QueueParams, red_s: f64, spec: &IntersectionSpec) -> Result<f64> {
    let (w1, w2) = shockwave_speeds(params, spec);
    let (w1, w2) = (w1.abs(), w2.abs());
    if w2 - w1 <= 1e-12 {
        return Err(Error::Invariant(format!(
            "degenerate fundamental diagram: |starting wave| {w2} must exceed |stopping wave| {w1}"
        )));
    }
    let q0 = params.initial / spec.jam_density;
    Ok(w2 * (q0 + w1 * red_s) / (w2 - w1))
}

/// Cycle total delay in vehicle-seconds: the area enclosed by the shockwave
/// boundaries (a quadrilateral spanned by the initial queue, the stopping
/// wave, the starting wave, and the stopline) times the jam density.
pub fn lane_delay(params: &QueueParams, red_s: f64, spec: &IntersectionSpec) -> Result<f64> {
    let (w1, w2) = shockwave_speeds(params, spec);
    let (w1, w2) = (w1.abs(), w2.abs());
    let q_max = max_queue(params, red_s, spec)?;
    let q0 = params.initial / spec.jam_density;
    let area = 0.5 * (red_s * q_max + q0 * (w2 * red_s + q0) / (w2 - w1));
    Ok(area * spec.jam_density)
}

/// Full per-cycle performance record.
pub fn cycle_performance(
    params: &QueueParams,
    red_s: f64,
    spec: &IntersectionSpec,
) -> Result<CyclePerformance> {
    let (w1, w2) = shockwave_speeds(params, spec);
    Ok(CyclePerformance {
        stopping_wave: w1,
        starting_wave: w2,
        initial_queue_m: params.initial / spec.jam_density,
        max_queue_m: max_queue(params, red_s, spec)?,
        delay_veh_s: lane_delay(params, red_s, spec)?,
    })
}

/// Interval reward: per-cycle delays weighted by per-cycle flows across all
/// included lane cycles. Zero total flow gives zero reward.
pub fn interval_reward(delays: &[f64], flows: &[f64]) -> f64 {
    debug_assert_eq!(delays.len(), flows.len());
    let total: f64 = flows.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    delays
        .iter()
        .zip(flows)
        .map(|(&d, &f)| d * f)
        .sum::<f64>()
        / total
}

/// Map a raw interval delay to the training reward (mean 5, std 1 on the
/// fitted dataset, larger delay strictly smaller reward).
pub fn to_training_reward(delay: f64, norm: &NormStats) -> f64 {
    norm.reward_to_training(delay)
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

    fn theta() -> QueueParams {
        QueueParams {
            arrival: 0.1,
            saturation: 0.5,
            initial: 2.0,
        }
    }

    #[test]
    fn stopping_wave_direct_substitution() {
        let (w1, w2) = shockwave_speeds(&theta(), &spec());
        // 1 / (k_j * 8 + 25/150) with k_j = 1/7.5.
        assert_relative_eq!(w1, -0.81081081, epsilon = 1e-6);
        assert_relative_eq!(w2, -6.0);
    }

    #[test]
    fn stopping_wave_approaches_shockwave_speed_at_saturation() {
        let p = QueueParams {
            arrival: 0.499999999,
            saturation: 0.5,
            initial: 2.0,
        };
        let (w1, _) = shockwave_speeds(&p, &spec());
        assert_relative_eq!(w1.abs(), 6.0, epsilon = 1e-4);
    }

    #[test]
    fn no_queue_forms_without_red_or_initial() {
        let p = QueueParams {
            initial: 0.0,
            ..theta()
        };
        assert_relative_eq!(max_queue(&p, 0.0, &spec()).unwrap(), 0.0);
        assert_relative_eq!(lane_delay(&p, 0.0, &spec()).unwrap(), 0.0);
    }

    #[test]
    fn max_queue_at_least_initial_queue() {
        let q0_m = theta().initial / spec().jam_density;
        for red in [0.0, 10.0, 40.0, 80.0] {
            let q = max_queue(&theta(), red, &spec()).unwrap();
            assert!(q >= q0_m - 1e-9, "red {red}: {q} < {q0_m}");
        }
    }

    #[test]
    fn max_queue_strictly_increases_with_red() {
        let a = max_queue(&theta(), 30.0, &spec()).unwrap();
        let b = max_queue(&theta(), 60.0, &spec()).unwrap();
        assert!(b > a);
    }

    #[test]
    fn delay_is_triangle_area_when_initial_queue_empty() {
        let p = QueueParams {
            initial: 0.0,
            ..theta()
        };
        let red = 30.0;
        let q_max = max_queue(&p, red, &spec()).unwrap();
        let d = lane_delay(&p, red, &spec()).unwrap();
        assert_relative_eq!(d, 0.5 * red * q_max * spec().jam_density, epsilon = 1e-9);
    }

    #[test]
    fn delay_q0_zero_matches_vertical_queue_closed_form() {
        // With no initial queue the swept area reduces to the vertical
        // point-queue delay 0.5 * vn * vs * red^2 / (vs - vn).
        let p = QueueParams {
            initial: 0.0,
            ..theta()
        };
        let red = 45.0;
        let d = lane_delay(&p, red, &spec()).unwrap();
        let expected = 0.5 * p.arrival * p.saturation * red * red / (p.saturation - p.arrival);
        assert_relative_eq!(d, expected, epsilon = 1e-9);
    }

    #[test]
    fn reward_is_flow_weighted_mean() {
        assert_relative_eq!(interval_reward(&[10.0, 20.0], &[1.0, 3.0]), 17.5);
    }

    #[test]
    fn reward_of_constant_delays_is_that_delay() {
        assert_relative_eq!(interval_reward(&[7.0, 7.0, 7.0], &[1.0, 5.0, 0.2]), 7.0);
    }

    #[test]
    fn reward_zero_flow_is_zero() {
        assert_eq!(interval_reward(&[10.0, 20.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn reward_bounded_by_delay_extremes() {
        let delays = [3.0, 9.0, 5.0];
        let flows = [2.0, 1.0, 4.0];
        let r = interval_reward(&delays, &flows);
        assert!(r >= 3.0 && r <= 9.0);
    }
}
