//! Split a detection-interval flow total into per-cycle flows.
//!
//! The arrival rate of each cycle is assumed proportional to the maximum
//! spatial count observed in it; combined with flow conservation over the
//! interval this pins a unique normalized rate and closed-form per-cycle
//! flows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::LaneCycle;

/// One cycle's accounting window: its span plus the boundary and peak counts.
/// Partial cycles at interval edges are merged into the adjacent window, so a
/// window may be longer than its signal cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleWindow {
    pub duration_s: f64,
    pub start_count: f64,
    pub end_count: f64,
    pub max_count: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleDecomposition {
    /// Normalized arrival rate (vehicles/second per count unit), after any
    /// non-negativity clamp.
    pub zeta: f64,
    /// The closed-form solution before clamping.
    pub raw_zeta: f64,
    /// Per-cycle arrival rates, zeta * max_count.
    pub arrival_rates: Vec<f64>,
    /// Per-cycle flows after clamping/redistribution.
    pub flows: Vec<f64>,
    /// Per-cycle flows straight from the conservation solve.
    pub raw_flows: Vec<f64>,
    /// Count remaining at the end of the interval.
    pub residual: f64,
    /// True when zeta or any flow had to be clamped.
    pub clamped: bool,
}

impl CycleDecomposition {
    /// Post-clamp conservation gap: sum(flows) + residual - interval flow.
    pub fn conservation_gap(&self, interval_flow: f64) -> f64 {
        self.flows.iter().sum::<f64>() + self.residual - interval_flow
    }
}

/// Solve the proportional-rate conservation system over one interval.
///
/// `interval_flow` is the lane's flow total, `windows` the cycle accounting
/// windows in time order, `residual` the count at the interval end.
pub fn decompose(
    interval_flow: f64,
    windows: &[CycleWindow],
    residual: f64,
) -> Result<CycleDecomposition> {
    if windows.is_empty() {
        return Err(Error::Data("decompose needs at least one cycle".into()));
    }
    let denom: f64 = windows.iter().map(|w| w.max_count * w.duration_s).sum();
    let boundary_sum: f64 = windows.iter().map(|w| w.start_count - w.end_count).sum();

    if denom <= 0.0 {
        if interval_flow.abs() <= 1e-9 {
            return Ok(CycleDecomposition {
                zeta: 0.0,
                raw_zeta: 0.0,
                arrival_rates: vec![0.0; windows.len()],
                flows: vec![0.0; windows.len()],
                raw_flows: vec![0.0; windows.len()],
                residual,
                clamped: false,
            });
        }
        return Err(Error::Data(format!(
            "all cycle peak counts are zero but interval flow is {interval_flow}"
        )));
    }

    let raw_zeta = (interval_flow - residual - boundary_sum) / denom;
    let mut clamped = false;
    let zeta = if raw_zeta < 0.0 {
        log::warn!("negative normalized arrival rate {raw_zeta}, clamped to 0");
        clamped = true;
        0.0
    } else {
        raw_zeta
    };

    let raw_flows: Vec<f64> = windows
        .iter()
        .map(|w| w.start_count + raw_zeta * w.max_count * w.duration_s - w.end_count)
        .collect();
    let mut flows: Vec<f64> = windows
        .iter()
        .map(|w| w.start_count + zeta * w.max_count * w.duration_s - w.end_count)
        .collect();

    // Sharp boundary-count drops can push individual flows negative. Zero
    // them and take the excess out of the positive cycles proportionally so
    // the interval total is preserved.
    if flows.iter().any(|&f| f < 0.0) {
        clamped = true;
        let deficit: f64 = -flows.iter().filter(|&&f| f < 0.0).sum::<f64>();
        let positive: f64 = flows.iter().filter(|&&f| f > 0.0).sum();
        for f in &mut flows {
            if *f < 0.0 {
                *f = 0.0;
            } else if positive > deficit && positive > 0.0 {
                *f *= (positive - deficit) / positive;
            } else {
                *f = 0.0;
            }
        }
    }

    let arrival_rates = windows.iter().map(|w| zeta * w.max_count).collect();
    Ok(CycleDecomposition {
        zeta,
        raw_zeta,
        arrival_rates,
        flows,
        raw_flows,
        residual,
        clamped,
    })
}

/// Decompose over plain lane cycles: windows span exactly the cycles, with
/// boundary counts chained from the first sample of each cycle (the last
/// cycle closes on its own final sample).
pub fn decompose_cycles(
    interval_flow: f64,
    cycles: &[LaneCycle],
    residual: f64,
) -> Result<CycleDecomposition> {
    let windows: Vec<CycleWindow> = cycles
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let start_count = c.counts.first().copied().unwrap_or(0.0);
            let end_count = match cycles.get(i + 1) {
                Some(next) => next.counts.first().copied().unwrap_or(0.0),
                None => c.counts.last().copied().unwrap_or(0.0),
            };
            CycleWindow {
                duration_s: c.cycle_s,
                start_count,
                end_count,
                max_count: c.max_count(),
            }
        })
        .collect();
    decompose(interval_flow, &windows, residual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn window(duration: f64, start: f64, end: f64, max: f64) -> CycleWindow {
        CycleWindow {
            duration_s: duration,
            start_count: start,
            end_count: end,
            max_count: max,
        }
    }

    #[test]
    fn single_cycle_hand_solve() {
        let d = decompose(6.0, &[window(60.0, 3.0, 3.0, 5.0)], 0.0).unwrap();
        assert_relative_eq!(d.zeta, 0.02);
        assert_relative_eq!(d.arrival_rates[0], 0.1);
        assert_relative_eq!(d.flows[0], 6.0);
        assert!(!d.clamped);
    }

    #[test]
    fn empty_interval_gives_zeros() {
        let d = decompose(0.0, &[window(60.0, 0.0, 0.0, 0.0)], 0.0).unwrap();
        assert_eq!(d.zeta, 0.0);
        assert_eq!(d.flows, vec![0.0]);
    }

    #[test]
    fn zero_counts_with_flow_is_an_error() {
        assert!(decompose(5.0, &[window(60.0, 0.0, 0.0, 0.0)], 0.0).is_err());
    }

    #[test]
    fn conservation_is_exact_before_clamping() {
        let windows = [
            window(70.0, 2.0, 6.0, 7.0),
            window(80.0, 6.0, 1.0, 4.0),
            window(90.0, 1.0, 3.0, 9.0),
        ];
        let flow = 23.0;
        let residual = 3.0;
        let d = decompose(flow, &windows, residual).unwrap();
        let total: f64 = d.raw_flows.iter().sum();
        assert!((total + residual - flow).abs() < 1e-12);
    }

    #[test]
    fn negative_flow_clamped_and_total_preserved() {
        // Sharp drop across cycle 1 boundary counts forces a negative flow.
        let windows = [window(60.0, 1.0, 9.0, 1.0), window(60.0, 9.0, 1.0, 1.0)];
        let flow = 4.0;
        let d = decompose(flow, &windows, 0.0).unwrap();
        assert!(d.clamped);
        assert!(d.flows.iter().all(|&f| f >= 0.0));
        assert!(d.conservation_gap(flow).abs() < 1e-12);
    }

    #[test]
    fn negative_zeta_clamped() {
        // Boundary counts drop more than the flow plus residual can explain.
        let d = decompose(1.0, &[window(60.0, 8.0, 1.0, 8.0)], 4.0).unwrap();
        assert!(d.clamped);
        assert!(d.raw_zeta < 0.0);
        assert_eq!(d.zeta, 0.0);
        assert!(d.arrival_rates.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scale_equivariance() {
        let windows = [window(60.0, 2.0, 3.0, 5.0), window(60.0, 3.0, 1.0, 6.0)];
        let base = decompose(9.0, &windows, 1.0).unwrap();
        let s = 3.5;
        let scaled_windows: Vec<CycleWindow> = windows
            .iter()
            .map(|w| window(w.duration_s, w.start_count * s, w.end_count * s, w.max_count * s))
            .collect();
        let scaled = decompose(9.0 * s, &scaled_windows, 1.0 * s).unwrap();
        for (a, b) in base.flows.iter().zip(&scaled.flows) {
            assert_relative_eq!(b, &(a * s), epsilon = 1e-9);
        }
    }

    #[test]
    fn arrival_rates_proportional_to_peaks() {
        let windows = [
            window(60.0, 2.0, 3.0, 5.0),
            window(60.0, 3.0, 1.0, 8.0),
            window(60.0, 1.0, 2.0, 2.0),
        ];
        let d = decompose(12.0, &windows, 1.0).unwrap();
        for (v, w) in d.arrival_rates.iter().zip(&windows) {
            if w.max_count > 0.0 {
                assert_relative_eq!(v / w.max_count, d.zeta, epsilon = 1e-9);
            }
        }
    }
}
