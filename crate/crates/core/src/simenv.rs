//! Desk-scale deterministic intersection simulator: a 1-second discrete-time
//! point queue per lane with jam-spacing spatial projection. It produces the
//! same coarse observations the ingestion path consumes, plus hidden ground
//! truth (true delays, true queue extents) for validation and evaluation
//! only. It deliberately stands in for a full microscopic environment:
//! no car-following, no lost time between phases, single intersection.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpmh::derive_seed;
use crate::obs::{lane_green_window, ObservationLog};
use crate::orl::{act, phase_pool, PolicyCheckpoint};
use crate::types::{CycleRecord, IntersectionSpec, IntervalObservation, TimingPlan};

pub const INTERVAL_S: f64 = 300.0;
pub const COUNT_DT: f64 = 5.0;
pub const INTERVALS_PER_DAY: usize = 288;

/// Piecewise-constant per-lane arrival rates over a day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandSegment {
    pub start_hour: f64,
    /// Per-lane arrival rate, vehicles/second.
    pub rates: Vec<f64>,
}

/// Simulation scenario: demand, discharge capability, and the built-in
/// behavior/fixed controllers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Saturation discharge rate per lane, vehicles/second.
    pub saturation_rate: f64,
    /// Bernoulli-thinned arrivals when true; deterministic fluid otherwise.
    pub stochastic_arrivals: bool,
    pub demand: Vec<DemandSegment>,
    /// Background plan: the fixed baseline and the warmup plan.
    pub fixed_plan: TimingPlan,
    /// Std of the Gaussian noise the behavior policy adds to green ratios.
    pub behavior_noise: f64,
    /// Floor on behavior green ratios.
    pub behavior_min_ratio: f64,
    /// Cycle-length rule gain: seconds of cycle per vehicle of 5-min demand.
    pub behavior_cycle_gain: f64,
}

impl Scenario {
    pub fn validate(&self, spec: &IntersectionSpec) -> Result<()> {
        if self.demand.is_empty() {
            return Err(Error::Config("scenario needs at least one demand segment".into()));
        }
        if self.demand[0].start_hour != 0.0 {
            return Err(Error::Config("demand schedule must start at hour 0".into()));
        }
        for pair in self.demand.windows(2) {
            if pair[1].start_hour <= pair[0].start_hour {
                return Err(Error::Config("demand segments must be in increasing hour order".into()));
            }
        }
        for seg in &self.demand {
            if seg.rates.len() != spec.lane_count {
                return Err(Error::Shape(format!(
                    "demand segment at hour {} covers {} lanes, spec has {}",
                    seg.start_hour,
                    seg.rates.len(),
                    spec.lane_count
                )));
            }
            if seg.rates.iter().any(|&r| r < 0.0 || r > 1.0) {
                return Err(Error::Config("arrival rates must lie in [0, 1] veh/s".into()));
            }
        }
        if !(self.saturation_rate > 0.0) {
            return Err(Error::Config("saturation rate must be positive".into()));
        }
        self.fixed_plan.validate(spec.cycle_bounds_s)?;
        if self.behavior_min_ratio * spec.phase_count as f64 >= 1.0 {
            return Err(Error::Config("behavior min ratio leaves no room for the simplex".into()));
        }
        Ok(())
    }

    /// Arrival rate of `lane` at rollout time `t` (the warmup occupies the
    /// start of the horizon and uses the hour-0 segment).
    pub fn rate_at(&self, lane: usize, t_s: f64) -> f64 {
        let hour = t_s / 3600.0;
        let seg = self
            .demand
            .iter()
            .rev()
            .find(|s| s.start_hour <= hour)
            .unwrap_or(&self.demand[0]);
        seg.rates[lane]
    }
}

/// An interval-cadence controller.
pub trait TimingPolicy {
    /// Choose the plan for the upcoming interval from the previous
    /// interval's observation.
    fn plan(&mut self, prev: &IntervalObservation, spec: &IntersectionSpec) -> Result<TimingPlan>;
}

/// Always the background plan.
pub struct FixedPolicy(pub TimingPlan);

impl TimingPolicy for FixedPolicy {
    fn plan(&mut self, _prev: &IntervalObservation, _spec: &IntersectionSpec) -> Result<TimingPlan> {
        Ok(self.0.clone())
    }
}

/// Saturation-balance stand-in used to generate offline data: green ratios
/// proportional to phase-pooled demand plus seeded Gaussian noise, cycle
/// length rule-based within bounds.
pub struct BehaviorPolicy {
    noise: f64,
    min_ratio: f64,
    cycle_gain: f64,
    rng: ChaCha8Rng,
}

impl BehaviorPolicy {
    pub fn new(scenario: &Scenario, seed: u64) -> Self {
        BehaviorPolicy {
            noise: scenario.behavior_noise,
            min_ratio: scenario.behavior_min_ratio,
            cycle_gain: scenario.behavior_cycle_gain,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn gauss(&mut self) -> f64 {
        // Box-Muller; two uniforms per draw keeps the stream simple.
        let u1: f64 = self.rng.gen_range(1e-12..1.0);
        let u2: f64 = self.rng.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

impl TimingPolicy for BehaviorPolicy {
    fn plan(&mut self, prev: &IntervalObservation, spec: &IntersectionSpec) -> Result<TimingPlan> {
        let mut onehot = vec![0.0; spec.order_count];
        onehot[prev.order] = 1.0;
        let demand = phase_pool(&prev.flows, &onehot, &spec.phase_table)?;
        // Uniform prior mass keeps empty-night intervals near equal splits.
        let base: Vec<f64> = demand.iter().map(|d| d + 2.0).collect();
        let total: f64 = base.iter().sum();
        let mut ratios: Vec<f64> = base
            .iter()
            .map(|b| (b / total + self.noise * self.gauss()).max(self.min_ratio))
            .collect();
        let sum: f64 = ratios.iter().sum();
        for r in &mut ratios {
            *r /= sum;
        }
        let (lo, hi) = spec.cycle_bounds_s;
        let demand_total: f64 = demand.iter().sum();
        let cycle = (lo + self.cycle_gain * demand_total + 10.0 * self.noise * self.gauss())
            .clamp(lo, hi);
        TimingPlan::new(cycle, ratios, spec.cycle_bounds_s)
    }
}

/// Greedy trained policy.
pub struct LearnedPolicy(pub PolicyCheckpoint);

impl TimingPolicy for LearnedPolicy {
    fn plan(&mut self, prev: &IntervalObservation, spec: &IntersectionSpec) -> Result<TimingPlan> {
        act(&self.0, prev, spec)
    }
}

/// Ground truth for one re-anchored lane cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrueCycle {
    pub lane: usize,
    pub start_s: f64,
    pub end_s: f64,
    /// Farthest stopped-vehicle position during the cycle, meters.
    pub max_queue_m: f64,
    /// Vehicles that crossed the stopline during the cycle.
    pub departures: f64,
    /// Cumulative lane departures at the cycle start.
    pub cum_dep_at_start: f64,
}

/// Hidden simulator state exported for validation, never fed to training.
#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    /// True total delay per interval over controlled lanes, vehicle-seconds.
    pub interval_delay: Vec<f64>,
    pub true_cycles: Vec<TrueCycle>,
    /// Cumulative departures per count tick per lane, when recorded.
    pub departures_cum: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct RolloutResult {
    pub obs: ObservationLog,
    /// Plan chosen for each interval (index 0 is the warmup plan).
    pub actions: Vec<TimingPlan>,
    pub truth: GroundTruth,
}

#[derive(Debug, Clone, Copy)]
pub struct RolloutOptions {
    /// Total intervals including warmup.
    pub intervals: usize,
    pub warmup_intervals: usize,
    pub record_departures: bool,
    /// Seed for arrival thinning.
    pub seed: u64,
    /// Active phase order for the whole rollout.
    pub order: usize,
}

impl RolloutOptions {
    pub fn day(seed: u64, order: usize) -> Self {
        RolloutOptions {
            intervals: INTERVALS_PER_DAY + 1,
            warmup_intervals: 1,
            record_departures: false,
            seed,
            order,
        }
    }
}

struct LaneState {
    queue: usize,
    next_arrival: usize,
    budget: f64,
    cum_dep: f64,
    flow_interval: f64,
    // current lane-cycle bookkeeping
    anchor_s: f64,
    cycle_open: bool,
    /// Stopped-tail extent in vehicles: departures do not pull it in until
    /// the release wave passes, so it tracks joins, not the live count.
    tail_veh: f64,
    high_water_veh: f64,
    dep_at_anchor: f64,
    green: Option<(f64, f64)>,
}

/// Roll the intersection forward for the configured horizon under `policy`.
pub fn rollout(
    spec: &IntersectionSpec,
    scenario: &Scenario,
    policy: &mut dyn TimingPolicy,
    opts: &RolloutOptions,
) -> Result<RolloutResult> {
    spec.validate()?;
    scenario.validate(spec)?;
    if opts.order >= spec.order_count {
        return Err(Error::Config(format!(
            "phase order {} out of range (K = {})",
            opts.order, spec.order_count
        )));
    }
    let horizon = opts.intervals as f64 * INTERVAL_S;
    let ticks = (horizon / COUNT_DT) as usize + 1;
    let lanes = spec.lane_count;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    // Arrival times are a function of the demand profile and the seed only,
    // so they can be drawn up front. That also lets the detector count
    // vehicles still approaching inside the detection range.
    let arrivals: Vec<Vec<f64>> = (0..lanes)
        .map(|l| {
            let mut events = Vec::new();
            let mut accum = 0.0_f64;
            for t in 0..horizon as usize {
                let rate = scenario.rate_at(l, t as f64);
                if scenario.stochastic_arrivals {
                    if rng.gen::<f64>() < rate {
                        events.push(t as f64);
                    }
                } else {
                    accum += rate;
                    while accum >= 1.0 {
                        events.push(t as f64);
                        accum -= 1.0;
                    }
                }
            }
            events
        })
        .collect();

    let mut log = ObservationLog {
        lane_count: lanes,
        interval_s: INTERVAL_S,
        count_dt: COUNT_DT,
        warmup_intervals: opts.warmup_intervals,
        flows: vec![vec![0.0; lanes]; opts.intervals],
        counts: vec![vec![0.0; lanes]; ticks],
        orders: vec![opts.order; opts.intervals],
        cycles: Vec::new(),
    };
    let mut truth = GroundTruth {
        interval_delay: vec![0.0; opts.intervals],
        true_cycles: Vec::new(),
        departures_cum: opts.record_departures.then(|| vec![vec![0.0; lanes]; ticks]),
    };
    let mut actions: Vec<TimingPlan> = vec![scenario.fixed_plan.clone()];

    let mut lane_states: Vec<LaneState> = (0..lanes)
        .map(|_| LaneState {
            queue: 0,
            next_arrival: 0,
            budget: 0.0,
            cum_dep: 0.0,
            flow_interval: 0.0,
            anchor_s: 0.0,
            cycle_open: false,
            tail_veh: 0.0,
            high_water_veh: 0.0,
            dep_at_anchor: 0.0,
            green: None,
        })
        .collect();

    let mut pending_plan = scenario.fixed_plan.clone();
    let mut cycle_end = -1.0_f64; // force a roll at t = 0
    let capacity = spec.capacity_veh();
    let wave = spec.shockwave_mps;
    let kj = spec.jam_density;

    let total_seconds = horizon as usize;
    for t in 0..total_seconds {
        let tf = t as f64;

        // Count grid sample of the state entering this second. The detector
        // sees the stopped queue plus vehicles still approaching through the
        // unoccupied stretch of the range.
        if t % COUNT_DT as usize == 0 {
            let k = t / COUNT_DT as usize;
            for (l, ls) in lane_states.iter().enumerate() {
                let queued = (ls.queue as f64).min(capacity);
                let free_m = (spec.detection_range_m - ls.queue as f64 / kj).max(0.0);
                let window = free_m / spec.free_flow_mps;
                let ev = &arrivals[l];
                let lo = ev.partition_point(|&e| e <= tf);
                let hi = ev.partition_point(|&e| e <= tf + window);
                let movers = (hi - lo) as f64;
                log.counts[k][l] = (queued + movers).min(capacity);
                if let Some(dep) = truth.departures_cum.as_mut() {
                    dep[k][l] = ls.cum_dep;
                }
            }
        }

        // Interval boundary: close the previous interval, consult the policy.
        if t > 0 && t % INTERVAL_S as usize == 0 {
            let done = t / INTERVAL_S as usize - 1;
            for (l, ls) in lane_states.iter_mut().enumerate() {
                log.flows[done][l] = ls.flow_interval;
                ls.flow_interval = 0.0;
            }
            if done + 1 < opts.intervals {
                let prev = log.interval_observation(done);
                let plan = policy.plan(&prev, spec)?;
                plan.validate(spec.cycle_bounds_s)?;
                actions.push(plan.clone());
                pending_plan = plan;
            }
        }

        // Signal cycle roll.
        if tf >= cycle_end {
            let cycle_start = if cycle_end < 0.0 { 0.0 } else { cycle_end };
            let rec = CycleRecord {
                start_s: cycle_start,
                order: opts.order,
                plan: pending_plan.clone(),
            };
            cycle_end = rec.end_s();
            for l in 0..lanes {
                if spec.controlled[l] {
                    lane_states[l].green = Some(lane_green_window(&rec, spec, l)?);
                }
            }
            log.cycles.push(rec);
        }

        let interval = (t / INTERVAL_S as usize).min(opts.intervals - 1);
        for l in 0..lanes {
            let ls = &mut lane_states[l];
            let mid = tf + 0.5;

            // Lane-cycle truth bookkeeping: a cycle closes (and the next one
            // anchors) at each green end. The ge > anchor guard consumes
            // each green end exactly once even while the window is stale.
            if spec.controlled[l] {
                if let Some((_, ge)) = ls.green {
                    if mid >= ge && ge > ls.anchor_s + 1e-9 {
                        if ls.cycle_open {
                            truth.true_cycles.push(TrueCycle {
                                lane: l,
                                start_s: ls.anchor_s,
                                end_s: ge,
                                max_queue_m: ls.high_water_veh / kj,
                                departures: ls.cum_dep - ls.dep_at_anchor,
                                cum_dep_at_start: ls.dep_at_anchor,
                            });
                        }
                        ls.anchor_s = ge;
                        ls.dep_at_anchor = ls.cum_dep;
                        ls.tail_veh = ls.queue as f64;
                        ls.high_water_veh = ls.queue as f64;
                        ls.cycle_open = true;
                    }
                }
            }

            let green = match (spec.controlled[l], ls.green) {
                (false, _) => true,
                (true, Some((gs, ge))) => mid >= gs && mid < ge,
                (true, None) => false,
            };

            // Discharge.
            if spec.controlled[l] {
                if green {
                    ls.budget += scenario.saturation_rate;
                } else {
                    ls.budget = 0.0;
                }
                while ls.budget >= 1.0 && ls.queue > 0 {
                    ls.queue -= 1;
                    ls.budget -= 1.0;
                    ls.cum_dep += 1.0;
                    ls.flow_interval += 1.0;
                }
                if ls.queue == 0 {
                    ls.budget = ls.budget.min(1.0);
                }
            }

            // Arrivals scheduled for this second.
            let ev = &arrivals[l];
            let mut incoming = 0usize;
            while ls.next_arrival < ev.len() && ev[ls.next_arrival] <= tf {
                incoming += 1;
                ls.next_arrival += 1;
            }
            for _ in 0..incoming {
                let passes = !spec.controlled[l] || (green && ls.queue == 0 && ls.budget >= 1.0);
                if passes {
                    if spec.controlled[l] {
                        ls.budget -= 1.0;
                    }
                    ls.cum_dep += 1.0;
                    ls.flow_interval += 1.0;
                } else {
                    ls.queue += 1;
                    // The stopped tail extends only while the release wave
                    // (launched from the stopline at green onset) has not
                    // caught it; afterwards the queue is rolling and new
                    // arrivals stop near the live count.
                    let pos = (ls.tail_veh + 1.0) / kj;
                    let wavefront = match ls.green {
                        Some((gs, ge)) if mid >= gs && mid < ge => wave * (mid - gs),
                        _ => 0.0,
                    };
                    if pos > wavefront {
                        ls.tail_veh += 1.0;
                        ls.high_water_veh = ls.high_water_veh.max(ls.tail_veh);
                    } else {
                        ls.tail_veh = ls.queue as f64;
                    }
                }
            }

            if spec.controlled[l] {
                truth.interval_delay[interval] += ls.queue as f64;
            }
        }
    }

    // Final flow flush and trailing grid tick (no arrivals are scheduled
    // past the horizon, so the last sample is the queue alone).
    let last_interval = opts.intervals - 1;
    for (l, ls) in lane_states.iter().enumerate() {
        log.flows[last_interval][l] = ls.flow_interval;
        log.counts[ticks - 1][l] = (ls.queue as f64).min(capacity);
        if let Some(dep) = truth.departures_cum.as_mut() {
            dep[ticks - 1][l] = ls.cum_dep;
        }
    }

    Ok(RolloutResult {
        obs: log,
        actions,
        truth,
    })
}

/// One evaluated day.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EvalDay {
    pub day: usize,
    /// True total delay over the day, vehicle-seconds.
    pub total_delay: f64,
    /// Sum of true per-cycle maximum queue lengths, meters.
    pub total_queue_m: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub days: Vec<EvalDay>,
}

impl EvalReport {
    pub fn mean_delay(&self) -> f64 {
        self.days.iter().map(|d| d.total_delay).sum::<f64>() / self.days.len() as f64
    }

    pub fn mean_queue(&self) -> f64 {
        self.days.iter().map(|d| d.total_queue_m).sum::<f64>() / self.days.len() as f64
    }
}

/// Closed-loop evaluation: apply the policy every interval for `days`
/// simulated days and report the ground-truth totals per day.
pub fn evaluate(
    policy: &mut dyn TimingPolicy,
    spec: &IntersectionSpec,
    scenario: &Scenario,
    days: usize,
    seed: u64,
) -> Result<EvalReport> {
    let mut report = EvalReport { days: Vec::new() };
    for day in 0..days {
        let opts = RolloutOptions::day(derive_seed(seed, day as u64, 0), day % spec.order_count);
        let rolled = rollout(spec, scenario, policy, &opts)?;
        let total_delay: f64 = rolled.truth.interval_delay[opts.warmup_intervals..]
            .iter()
            .sum();
        let total_queue_m: f64 = rolled
            .truth
            .true_cycles
            .iter()
            .filter(|c| c.start_s >= opts.warmup_intervals as f64 * INTERVAL_S)
            .map(|c| c.max_queue_m)
            .sum();
        report.days.push(EvalDay {
            day,
            total_delay,
            total_queue_m,
        });
    }
    Ok(report)
}

/// Built-in desk-scale intersection: 8 lanes, 4 phases, one phase order.
/// Lanes pair up per phase (two approaches each); all controlled.
pub fn desk8_spec() -> IntersectionSpec {
    IntersectionSpec {
        lane_count: 8,
        phase_count: 4,
        order_count: 1,
        phase_table: crate::types::PhaseTable(vec![vec![
            vec![1, 1, 0, 0, 0, 0, 0, 0],
            vec![0, 0, 1, 1, 0, 0, 0, 0],
            vec![0, 0, 0, 0, 1, 1, 0, 0],
            vec![0, 0, 0, 0, 0, 0, 1, 1],
        ]]),
        controlled: vec![true; 8],
        detection_range_m: 150.0,
        jam_density: 1.0 / 7.5,
        free_flow_mps: 15.0,
        shockwave_mps: 6.0,
        traverse_time_s: 25.0,
        cycle_bounds_s: (60.0, 120.0),
    }
}

/// Demand profile for the desk-scale intersection: calm nights, a morning
/// peak on the first approach pair and an evening peak on the third. Peak
/// rates sit just under the equal-split service rate (0.25 * 0.5 veh/s per
/// lane), so the fixed plan grinds through long queues while demand-
/// proportional splits clear them; spillback past the detection range stays
/// an occasional event rather than the steady state.
pub fn desk8_scenario() -> Scenario {
    let mut morning = vec![0.04; 8];
    morning[0] = 0.12;
    morning[1] = 0.115;
    morning[2] = 0.06;
    morning[3] = 0.06;
    let midday = vec![0.07; 8];
    let mut evening = vec![0.04; 8];
    evening[4] = 0.12;
    evening[5] = 0.115;
    evening[6] = 0.06;
    evening[7] = 0.06;
    Scenario {
        saturation_rate: 0.5,
        stochastic_arrivals: true,
        demand: vec![
            DemandSegment {
                start_hour: 0.0,
                rates: vec![0.02; 8],
            },
            DemandSegment {
                start_hour: 6.0,
                rates: morning,
            },
            DemandSegment {
                start_hour: 10.0,
                rates: midday,
            },
            DemandSegment {
                start_hour: 16.0,
                rates: evening,
            },
            DemandSegment {
                start_hour: 20.0,
                rates: vec![0.03; 8],
            },
        ],
        fixed_plan: TimingPlan {
            cycle_s: 90.0,
            green_ratios: vec![0.25; 4],
        },
        behavior_noise: 0.05,
        behavior_min_ratio: 0.10,
        behavior_cycle_gain: 0.5,
    }
}

/// Fuller analog of a 4-phase, 17-lane intersection with two phase orders
/// (the second order swaps the straight/left service sequence). Right-turn
/// lanes 13..16 are uncontrolled.
pub fn full17_spec() -> IntersectionSpec {
    // Lanes 0..5: NS straight (3 per direction is collapsed to 6 total),
    // 6..9: NS left, 10..12: EW straight, 13..16 include EW left and the
    // uncontrolled right-turn lanes.
    let mut order0 = vec![vec![0u8; 17]; 4];
    for l in 0..5 {
        order0[0][l] = 1; // NS straight
    }
    for l in 5..9 {
        order0[1][l] = 1; // NS left
    }
    for l in 9..11 {
        order0[2][l] = 1; // EW straight
    }
    for l in 11..13 {
        order0[3][l] = 1; // EW left
    }
    // Second order serves EW first.
    let order1 = vec![
        order0[2].clone(),
        order0[3].clone(),
        order0[0].clone(),
        order0[1].clone(),
    ];
    let mut controlled = vec![true; 17];
    for l in 13..17 {
        controlled[l] = false;
    }
    IntersectionSpec {
        lane_count: 17,
        phase_count: 4,
        order_count: 2,
        phase_table: crate::types::PhaseTable(vec![order0, order1]),
        controlled,
        detection_range_m: 150.0,
        jam_density: 1.0 / 7.5,
        free_flow_mps: 15.0,
        shockwave_mps: 6.0,
        traverse_time_s: 25.0,
        cycle_bounds_s: (60.0, 120.0),
    }
}

pub fn full17_scenario() -> Scenario {
    let mut peak = vec![0.05; 17];
    for l in 0..5 {
        peak[l] = 0.10;
    }
    for l in 13..17 {
        peak[l] = 0.05;
    }
    Scenario {
        saturation_rate: 0.5,
        stochastic_arrivals: true,
        demand: vec![
            DemandSegment {
                start_hour: 0.0,
                rates: vec![0.02; 17],
            },
            DemandSegment {
                start_hour: 7.0,
                rates: peak,
            },
            DemandSegment {
                start_hour: 19.0,
                rates: vec![0.04; 17],
            },
        ],
        fixed_plan: TimingPlan {
            cycle_s: 100.0,
            green_ratios: vec![0.3, 0.2, 0.3, 0.2],
        },
        behavior_noise: 0.05,
        behavior_min_ratio: 0.08,
        behavior_cycle_gain: 0.4,
    }
}
