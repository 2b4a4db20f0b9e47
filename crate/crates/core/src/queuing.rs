//! Single-cycle shockwave queuing model.
//!
//! A lane cycle is red on [0, red_s] and green on (red_s, cycle_s]. Arrivals
//! accumulate at a constant rate; departures are zero during red, run at the
//! saturation rate until the queue dissipates, then match arrivals. The
//! spatial count seen by a range-limited detector is the detected cumulative
//! arrival minus the cumulative departure, where detected arrivals are capped
//! by the departure curve one traverse time earlier plus the zone capacity
//! (local spillback: freed space propagates backward at the shockwave speed).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-lane-per-cycle traffic flow parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueueParams {
    /// Arrival rate, vehicles/second.
    pub arrival: f64,
    /// Saturation (discharge) rate, vehicles/second.
    pub saturation: f64,
    /// Spatial vehicle count at cycle start, vehicles.
    pub initial: f64,
}

impl QueueParams {
    pub fn validate(&self, capacity_veh: f64) -> Result<()> {
        if !(self.arrival > 0.0 && self.arrival.is_finite()) {
            return Err(Error::Invariant(format!(
                "arrival rate must be > 0, got {}",
                self.arrival
            )));
        }
        if !(self.saturation > self.arrival && self.saturation.is_finite()) {
            return Err(Error::Invariant(format!(
                "saturation rate {} must exceed arrival rate {}",
                self.saturation, self.arrival
            )));
        }
        if !(0.0..=capacity_veh).contains(&self.initial) {
            return Err(Error::Invariant(format!(
                "initial count {} outside [0, {capacity_veh}]",
                self.initial
            )));
        }
        Ok(())
    }
}

/// Red/green split of one lane cycle; green_s = cycle_s - red_s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleTiming {
    pub cycle_s: f64,
    pub red_s: f64,
}

impl CycleTiming {
    pub fn green_s(&self) -> f64 {
        self.cycle_s - self.red_s
    }
}

/// Time after green onset until the queued vehicles have discharged, given
/// that exactly `flow` vehicles cross the stopline this cycle. Errors when
/// the result falls outside [0, green_s]: no (arrival, saturation) process
/// can then produce `flow`.
pub fn dissipation_time(params: &QueueParams, green_s: f64, flow: f64) -> Result<f64> {
    let tau = (flow - params.arrival * green_s) / (params.saturation - params.arrival);
    if !(-1e-9..=green_s + 1e-9).contains(&tau) {
        return Err(Error::InfeasibleFlow {
            tau,
            green_s,
            arrival: params.arrival,
            saturation: params.saturation,
            flow,
        });
    }
    Ok(tau.clamp(0.0, green_s))
}

/// Cumulative arrivals by time `t` of the cycle (initial count included).
pub fn cumulative_arrival(params: &QueueParams, timing: &CycleTiming, t: f64) -> Result<f64> {
    check_in_cycle(t, timing.cycle_s)?;
    Ok(params.initial + params.arrival * t)
}

/// Cumulative departures by time `t` of the cycle.
pub fn cumulative_departure(
    params: &QueueParams,
    timing: &CycleTiming,
    flow: f64,
    t: f64,
) -> Result<f64> {
    check_in_cycle(t, timing.cycle_s)?;
    let model = CycleModel::new(*params, *timing, flow, f64::INFINITY, 0.0)?;
    Ok(model.departure(t))
}

/// Theoretical spatial vehicle count at time `t` of the cycle.
pub fn theoretical_count(
    params: &QueueParams,
    timing: &CycleTiming,
    flow: f64,
    capacity_veh: f64,
    traverse_time_s: f64,
    t: f64,
) -> Result<f64> {
    check_in_cycle(t, timing.cycle_s)?;
    let model = CycleModel::new(*params, *timing, flow, capacity_veh, traverse_time_s)?;
    Ok(model.count(t))
}

fn check_in_cycle(t: f64, cycle_s: f64) -> Result<()> {
    if !(0.0..=cycle_s + 1e-9).contains(&t) {
        return Err(Error::Invariant(format!(
            "time {t} outside cycle [0, {cycle_s}]"
        )));
    }
    Ok(())
}

/// One cycle's count model, validated once and cheap to evaluate repeatedly
/// (the sampler evaluates it at every proposal).
#[derive(Debug, Clone, Copy)]
pub struct CycleModel {
    params: QueueParams,
    timing: CycleTiming,
    flow: f64,
    capacity: f64,
    traverse: f64,
    tau: f64,
    /// True when the supplied initial count exceeded capacity and was clamped.
    pub clamped_initial: bool,
}

impl CycleModel {
    pub fn new(
        mut params: QueueParams,
        timing: CycleTiming,
        flow: f64,
        capacity_veh: f64,
        traverse_time_s: f64,
    ) -> Result<Self> {
        // Count feeds occasionally spike above capacity; clamp instead of
        // rejecting the whole cycle.
        let clamped_initial = params.initial > capacity_veh;
        if clamped_initial {
            log::warn!(
                "initial count {} above capacity {capacity_veh}, clamped",
                params.initial
            );
            params.initial = capacity_veh;
        }
        params.validate(capacity_veh)?;
        let tau = dissipation_time(&params, timing.green_s(), flow)?;
        Ok(CycleModel {
            params,
            timing,
            flow,
            capacity: capacity_veh,
            traverse: traverse_time_s,
            tau,
            clamped_initial,
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn arrival(&self, t: f64) -> f64 {
        self.params.initial + self.params.arrival * t
    }

    /// Piecewise cumulative departure; exact `flow` at the cycle end.
    /// Defined as 0 for t < 0 so it can be evaluated at shifted times.
    pub fn departure(&self, t: f64) -> f64 {
        let (vn, vs) = (self.params.arrival, self.params.saturation);
        let red = self.timing.red_s;
        if t >= self.timing.cycle_s {
            self.flow
        } else if t <= red {
            0.0
        } else if t <= red + self.tau {
            vs * (t - red)
        } else {
            vs * self.tau + vn * (t - red - self.tau)
        }
    }

    /// Count with an unlimited detection range: arrivals minus departures.
    ///
    /// During saturated discharge this is initial + vs*red + (vn - vs)*t; the
    /// sign of the vs*red term is fixed by continuity at t = red (both
    /// neighbouring branches must meet there).
    pub fn unbounded_count(&self, t: f64) -> f64 {
        let (vn, vs) = (self.params.arrival, self.params.saturation);
        let red = self.timing.red_s;
        let x0 = self.params.initial;
        if t <= red {
            x0 + vn * t
        } else if t <= red + self.tau {
            x0 + vs * red + (vn - vs) * t
        } else {
            x0 + vn * self.timing.cycle_s - self.flow
        }
    }

    /// Departure shortfall seen across one traverse time:
    /// departure(t - traverse) - departure(t). Branch selection keys on the
    /// positions of both t and t - traverse relative to the red end and the
    /// dissipation point, which covers every traverse-vs-tau regime; ties go
    /// to the earlier branch (the values agree there by continuity).
    pub fn spillback_margin(&self, t: f64) -> f64 {
        let (vn, vs) = (self.params.arrival, self.params.saturation);
        let red = self.timing.red_s;
        let cyc = self.timing.cycle_s;
        let ts = self.traverse;
        let s = t - ts;
        if t <= red {
            0.0
        } else if t <= red + self.tau {
            if s <= red {
                -vs * (t - red)
            } else {
                -vs * ts
            }
        } else if s <= red {
            vn * cyc - self.flow - vn * t
        } else if s <= red + self.tau {
            vn * cyc - vs * (ts + red) - self.flow + (vs - vn) * t
        } else {
            -vn * ts
        }
    }

    /// Theoretical spatial count: the unbounded count capped by what the
    /// detection zone can have admitted.
    pub fn count(&self, t: f64) -> f64 {
        let unbounded = self.unbounded_count(t);
        let capped = self.spillback_margin(t) + self.capacity;
        unbounded.min(capped)
    }
}
