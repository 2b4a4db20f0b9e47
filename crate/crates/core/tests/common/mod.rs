//! Independent oracles used by the property and acceptance suites. These
//! re-derive expected values by direct simulation and never call the
//! closed-form code paths they check.
#![allow(dead_code)]

use stopline::queuing::{CycleTiming, QueueParams};
use stopline::types::IntersectionSpec;

/// Fluid point-queue oracle at a fixed step: arrivals accumulate at the
/// arrival rate, departures run at the saturation rate during green until
/// the dischargeable queue (total minus the conservation residual) is gone,
/// and vehicles enter the detection zone only while there is room, where
/// room frees one traverse time after the corresponding departure.
///
/// Returns (times, counts) sampled at every step boundary.
pub struct CountOracle {
    pub times: Vec<f64>,
    pub counts: Vec<f64>,
}

pub fn count_oracle(
    params: &QueueParams,
    timing: &CycleTiming,
    flow: f64,
    capacity: f64,
    traverse: f64,
    dt: f64,
) -> CountOracle {
    let steps = (timing.cycle_s / dt).round() as usize;
    let residual = params.initial + params.arrival * timing.cycle_s - flow;
    let delay_steps = (traverse / dt).round() as usize;

    let mut arrived = params.initial;
    let mut departed = 0.0_f64;
    let mut entered = params.initial.min(capacity);
    let mut dep_history = vec![0.0_f64; steps + 1];

    let mut times = Vec::with_capacity(steps + 1);
    let mut counts = Vec::with_capacity(steps + 1);
    times.push(0.0);
    counts.push(entered - departed);

    for k in 0..steps {
        let t_next = (k + 1) as f64 * dt;
        arrived += params.arrival * dt;

        if t_next > timing.red_s {
            let dischargeable = (arrived - residual - departed).max(0.0);
            let rate = if dischargeable > 1e-12 {
                params.saturation
            } else {
                params.arrival
            };
            departed += (rate * dt).min(dischargeable + params.arrival * dt);
            departed = departed.min(arrived - residual);
        }
        dep_history[k + 1] = departed;

        // Entry gate: room is bounded by the departure curve one traverse
        // time earlier plus the zone capacity.
        let delayed = if k + 1 >= delay_steps {
            dep_history[k + 1 - delay_steps]
        } else {
            0.0
        };
        let room = (delayed + capacity - entered).max(0.0);
        entered += (arrived - entered).max(0.0).min(room);

        times.push(t_next);
        counts.push(entered - departed);
    }
    CountOracle { times, counts }
}

/// Two-front meeting-point oracle for the maximum queue: the stopping front
/// advances from the initial queue at |w1|, the release front launches from
/// the stopline at green onset at |w2|; the maximum extent is where they
/// meet.
pub fn max_queue_oracle(w1_abs: f64, w2_abs: f64, initial_queue_m: f64, red_s: f64) -> f64 {
    let dt = 0.1;
    let mut tail = initial_queue_m;
    let mut t = 0.0;
    loop {
        let release = if t >= red_s { w2_abs * (t - red_s) } else { 0.0 };
        if release >= tail {
            return tail;
        }
        tail += w1_abs * dt;
        t += dt;
        if t > red_s + 100_000.0 {
            panic!("release front never catches the tail: w1 {w1_abs} w2 {w2_abs}");
        }
    }
}

/// Per-vehicle stopped-time oracle for the cycle delay. Vehicles approach at
/// the free-flow speed, stack at jam spacing behind the initial queue, and
/// resume when the release front (at the spec shockwave speed) passes their
/// stop position. Integrates vehicle-by-vehicle in fractional index steps.
pub fn delay_oracle(params: &QueueParams, red_s: f64, spec: &IntersectionSpec) -> f64 {
    let kj = spec.jam_density;
    let u = spec.free_flow_mps;
    let w = spec.shockwave_mps;
    let di = 0.01; // vehicles
    let mut stopped = 0.0;
    let mut i = di / 2.0;
    loop {
        let x = i / kj;
        let crossing = if i > params.initial {
            (i - params.initial) / params.arrival
        } else {
            0.0
        };
        let stop_t = (crossing - x / u).max(0.0);
        let go_t = red_s + x / w;
        if stop_t >= go_t {
            return stopped;
        }
        stopped += (go_t - stop_t) * di;
        i += di;
        if i > 10_000.0 {
            panic!("queue never releases");
        }
    }
}

/// Draw a feasible (theta, timing, flow) instance. `heavy` biases toward
/// spillback-prone settings.
pub fn random_feasible_instance(
    rng: &mut impl rand::Rng,
    capacity: f64,
    heavy: bool,
) -> (QueueParams, CycleTiming, f64) {
    loop {
        // Saturation stays below capacity/traverse (0.8 veh/s): a discharge
        // faster than the release wave sweeps the zone is unphysical.
        let arrival = if heavy {
            rng.gen_range(0.25..0.45)
        } else {
            rng.gen_range(0.02..0.35)
        };
        let saturation = rng.gen_range(f64::max(arrival + 0.08, 0.4)..0.78);
        let cycle_s = rng.gen_range(60.0..120.0);
        let red_s = cycle_s * rng.gen_range(0.3..0.7);
        let timing = CycleTiming { cycle_s, red_s };
        let green = timing.green_s();
        let tau = rng.gen_range(0.0..green);
        let flow = arrival * green + (saturation - arrival) * tau;
        // Conservation floor: the cycle cannot discharge more than the
        // initial count plus all arrivals.
        let min_initial = (flow - arrival * cycle_s).max(0.0);
        if min_initial > capacity {
            continue;
        }
        let initial = if heavy {
            rng.gen_range((capacity * 0.5).max(min_initial)..capacity)
        } else {
            rng.gen_range(min_initial..capacity)
        };
        let params = QueueParams {
            arrival,
            saturation,
            initial,
        };
        return (params, timing, flow);
    }
}
