//! Domain types shared by every stage: intersection topology, timing plans,
//! and the coarse observations the pipeline consumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary green map over (phase order, phase slot, lane).
///
/// `green(k, p, l)` is true when lane `l` shows green during the `p`-th slot
/// of phase order `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTable(pub Vec<Vec<Vec<u8>>>);

impl PhaseTable {
    pub fn order_count(&self) -> usize {
        self.0.len()
    }

    pub fn phase_count(&self) -> usize {
        self.0.first().map_or(0, |o| o.len())
    }

    pub fn lane_count(&self) -> usize {
        self.0
            .first()
            .and_then(|o| o.first())
            .map_or(0, |p| p.len())
    }

    pub fn green(&self, order: usize, phase: usize, lane: usize) -> bool {
        self.0[order][phase][lane] != 0
    }

    /// Phase slots in which `lane` is green under `order`, ascending.
    pub fn green_phases(&self, order: usize, lane: usize) -> Vec<usize> {
        (0..self.phase_count())
            .filter(|&p| self.green(order, p, lane))
            .collect()
    }

    fn validate(&self, orders: usize, phases: usize, lanes: usize) -> Result<()> {
        if self.order_count() != orders {
            return Err(Error::Shape(format!(
                "phase table has {} orders, spec says {orders}",
                self.order_count()
            )));
        }
        for (k, order) in self.0.iter().enumerate() {
            if order.len() != phases {
                return Err(Error::Shape(format!(
                    "phase table order {k} has {} phases, spec says {phases}",
                    order.len()
                )));
            }
            for (p, row) in order.iter().enumerate() {
                if row.len() != lanes {
                    return Err(Error::Shape(format!(
                        "phase table order {k} phase {p} covers {} lanes, spec says {lanes}",
                        row.len()
                    )));
                }
                if let Some(bad) = row.iter().find(|&&v| v > 1) {
                    return Err(Error::Invariant(format!(
                        "phase table entries must be 0 or 1, found {bad}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Static description of one signalized intersection plus the traffic-flow
/// constants used by the shockwave model.
///
/// `jam_density` is stored in vehicles per meter, so
/// `detection_range * jam_density` is the vehicle capacity of the detected
/// zone (a 7.5 m jam spacing becomes 1/7.5 ≈ 0.1333 veh/m, giving 20 vehicles
/// over a 150 m range).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntersectionSpec {
    pub lane_count: usize,
    pub phase_count: usize,
    pub order_count: usize,
    pub phase_table: PhaseTable,
    /// Lanes tied to signal-controlled movements; uncontrolled lanes
    /// (typically right turns) never stop and are excluded from rewards.
    pub controlled: Vec<bool>,
    /// Camera detection range behind the stopline, meters.
    pub detection_range_m: f64,
    /// Jam density, vehicles per meter.
    pub jam_density: f64,
    /// Free-flow speed, m/s.
    pub free_flow_mps: f64,
    /// Backward shockwave speed magnitude, m/s.
    pub shockwave_mps: f64,
    /// Time for the starting shockwave to traverse the detection range, s.
    pub traverse_time_s: f64,
    /// Allowed cycle lengths [min, max], seconds. Also the action bounds.
    pub cycle_bounds_s: (f64, f64),
}

impl IntersectionSpec {
    /// Vehicle capacity of the detected zone.
    pub fn capacity_veh(&self) -> f64 {
        self.detection_range_m * self.jam_density
    }

    pub fn controlled_lanes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.lane_count).filter(|&l| self.controlled[l])
    }

    pub fn validate(&self) -> Result<()> {
        if self.lane_count == 0 || self.phase_count == 0 || self.order_count == 0 {
            return Err(Error::Invariant(
                "lane_count, phase_count and order_count must be positive".into(),
            ));
        }
        self.phase_table
            .validate(self.order_count, self.phase_count, self.lane_count)?;
        if self.controlled.len() != self.lane_count {
            return Err(Error::Shape(format!(
                "controlled flags cover {} lanes, spec says {}",
                self.controlled.len(),
                self.lane_count
            )));
        }
        for (name, v) in [
            ("detection_range_m", self.detection_range_m),
            ("jam_density", self.jam_density),
            ("free_flow_mps", self.free_flow_mps),
            ("shockwave_mps", self.shockwave_mps),
            ("traverse_time_s", self.traverse_time_s),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Invariant(format!("{name} must be > 0, got {v}")));
            }
        }
        let derived = self.detection_range_m / self.shockwave_mps;
        if (derived - self.traverse_time_s).abs() > 1e-9 * derived.max(1.0) {
            return Err(Error::Invariant(format!(
                "traverse_time_s {} inconsistent with detection_range_m / shockwave_mps = {derived}",
                self.traverse_time_s
            )));
        }
        let (lo, hi) = self.cycle_bounds_s;
        if !(lo > 0.0 && hi > lo) {
            return Err(Error::Invariant(format!(
                "cycle bounds must satisfy 0 < min < max, got [{lo}, {hi}]"
            )));
        }
        // Every controlled lane must get green in at least one slot of every order.
        for k in 0..self.order_count {
            for l in self.controlled_lanes() {
                if self.phase_table.green_phases(k, l).is_empty() {
                    return Err(Error::Invariant(format!(
                        "controlled lane {l} never shows green under phase order {k}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A signal timing plan: cycle length plus the green-time ratio of each
/// phase slot. Ratios are strictly positive and sum to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingPlan {
    pub cycle_s: f64,
    pub green_ratios: Vec<f64>,
}

impl TimingPlan {
    pub fn new(cycle_s: f64, green_ratios: Vec<f64>, bounds: (f64, f64)) -> Result<Self> {
        let plan = TimingPlan {
            cycle_s,
            green_ratios,
        };
        plan.validate(bounds)?;
        Ok(plan)
    }

    pub fn validate(&self, bounds: (f64, f64)) -> Result<()> {
        if !(self.cycle_s >= bounds.0 - 1e-9 && self.cycle_s <= bounds.1 + 1e-9) {
            return Err(Error::Invariant(format!(
                "cycle length {} outside bounds [{}, {}]",
                self.cycle_s, bounds.0, bounds.1
            )));
        }
        if self.green_ratios.iter().any(|&g| !(g > 0.0)) {
            return Err(Error::Invariant(format!(
                "green ratios must be strictly positive, got {:?}",
                self.green_ratios
            )));
        }
        let sum: f64 = self.green_ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Invariant(format!(
                "green ratios sum {sum} \u{2260} 1"
            )));
        }
        Ok(())
    }

    pub fn green_s(&self, phase: usize) -> f64 {
        self.green_ratios[phase] * self.cycle_s
    }

    pub fn red_s(&self, phase: usize) -> f64 {
        self.cycle_s - self.green_s(phase)
    }

    /// Offset window [start, end) of a phase slot within the cycle.
    pub fn phase_window(&self, phase: usize) -> (f64, f64) {
        let start: f64 = self.green_ratios[..phase].iter().sum::<f64>() * self.cycle_s;
        (start, start + self.green_s(phase))
    }
}

/// One lane's observations over one (re-anchored) signal cycle: the cycle
/// starts when the lane's green ends, so red occupies [0, red_s] and green
/// (red_s, cycle_s]. This is the unit the queuing model and the sampler
/// operate on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneCycle {
    pub lane: usize,
    /// Absolute start time of the cycle, seconds from rollout start.
    pub start_s: f64,
    pub cycle_s: f64,
    pub red_s: f64,
    pub green_s: f64,
    /// Count sample times relative to `start_s`, strictly increasing in
    /// [0, cycle_s].
    pub timestamps: Vec<f64>,
    /// Spatial vehicle counts at `timestamps`.
    pub counts: Vec<f64>,
    /// Cycle flow (vehicles crossing the stopline), filled by decomposition.
    pub flow: Option<f64>,
}

impl LaneCycle {
    pub fn validate(&self, capacity_veh: f64) -> Result<()> {
        if self.timestamps.len() != self.counts.len() {
            return Err(Error::Shape(format!(
                "lane {}: {} timestamps vs {} counts",
                self.lane,
                self.timestamps.len(),
                self.counts.len()
            )));
        }
        let mut prev = -1.0;
        for &t in &self.timestamps {
            if t < 0.0 || t > self.cycle_s + 1e-9 {
                return Err(Error::Invariant(format!(
                    "lane {}: timestamp {t} outside [0, {}]",
                    self.lane, self.cycle_s
                )));
            }
            if t <= prev {
                return Err(Error::Invariant(format!(
                    "lane {}: timestamps not strictly increasing at {t}",
                    self.lane
                )));
            }
            prev = t;
        }
        // A count may exceed the zone capacity by at most one partially
        // entered vehicle.
        for &c in &self.counts {
            if c < 0.0 || c > capacity_veh + 1.0 {
                return Err(Error::Invariant(format!(
                    "lane {}: count {c} outside [0, {}]",
                    self.lane,
                    capacity_veh + 1.0
                )));
            }
        }
        if (self.red_s + self.green_s - self.cycle_s).abs() > 1e-6 {
            return Err(Error::Invariant(format!(
                "lane {}: red {} + green {} \u{2260} cycle {}",
                self.lane, self.red_s, self.green_s, self.cycle_s
            )));
        }
        Ok(())
    }

    pub fn max_count(&self) -> f64 {
        self.counts.iter().cloned().fold(0.0, f64::max)
    }
}

/// One signal cycle as logged by the controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub start_s: f64,
    pub order: usize,
    pub plan: TimingPlan,
}

impl CycleRecord {
    pub fn end_s(&self) -> f64 {
        self.start_s + self.plan.cycle_s
    }
}

/// Raw features of one decision interval, as available to the agent.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalObservation {
    pub index: usize,
    /// Per-lane flow over the interval, vehicles.
    pub flows: Vec<f64>,
    /// Per-lane 5 s count series over the interval (ends at the interval end).
    pub counts: Vec<Vec<f64>>,
    /// Active phase order during the interval.
    pub order: usize,
    /// Complete signal cycles that started within the interval.
    pub cycles: Vec<CycleRecord>,
}

impl IntervalObservation {
    /// Per-lane spatial count at the end of the interval (last sample).
    pub fn end_counts(&self) -> Vec<f64> {
        self.counts
            .iter()
            .map(|series| series.last().copied().unwrap_or(0.0))
            .collect()
    }
}
