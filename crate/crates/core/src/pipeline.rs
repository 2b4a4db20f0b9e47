//! Stage composition: decompose interval flows into cycle flows, infer queue
//! parameters per lane cycle, derive queue/delay performance, aggregate
//! interval rewards, and assemble transition datasets for offline training.

use rayon::prelude::*;
use serde::Serialize;

use crate::cycledecomp::decompose;
use crate::error::{Error, Result};
use crate::gpmh::{infer_batch, GpHyper, InferTask, MhSettings};
use crate::obs::ObservationLog;
use crate::orl::{augmented_state, Transition, TransitionDataset};
use crate::perf::{cycle_performance, interval_reward};
use crate::queuing::QueueParams;
use crate::simenv::{rollout, BehaviorPolicy, RolloutOptions, RolloutResult, Scenario};
use crate::types::{IntersectionSpec, TimingPlan};

/// Cycles carrying less than this flow are not inferred; their queue and
/// delay are taken as zero (they also carry almost no reward weight).
pub const MIN_INFER_FLOW: f64 = 1.0;

/// One lane cycle after decomposition, inference, and performance mapping.
#[derive(Debug, Clone, Serialize)]
pub struct CycleEstimate {
    pub lane: usize,
    pub interval: usize,
    pub start_s: f64,
    pub cycle_s: f64,
    pub red_s: f64,
    /// Decomposed cycle flow, vehicles.
    pub flow: f64,
    pub params: Option<QueueParams>,
    pub max_queue_m: f64,
    pub delay_veh_s: f64,
    pub low_confidence: bool,
}

/// Inferred reward for one interval.
#[derive(Debug, Clone, Serialize)]
pub struct RewardRow {
    pub interval: usize,
    /// Flow-weighted mean cycle delay (the reward signal).
    pub reward_delay: f64,
    /// Sum of cycle delays (estimated total interval delay).
    pub total_delay: f64,
    /// Per-lane maximum estimated queue during the interval, meters.
    pub lane_q_max: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct InferenceOutput {
    pub rewards: Vec<RewardRow>,
    pub cycles: Vec<CycleEstimate>,
    /// Lane-intervals whose decomposition needed clamping.
    pub clamped_intervals: usize,
    /// Chains that never accepted a proposal.
    pub low_confidence_chains: usize,
}

/// Full reward inference over one observation log.
pub fn infer_rewards(
    log: &ObservationLog,
    spec: &IntersectionSpec,
    hyper: &GpHyper,
    mh: &MhSettings,
    seed: u64,
) -> Result<InferenceOutput> {
    struct PendingCycle {
        lane: usize,
        interval: usize,
        global_index: usize,
        cycle: crate::types::LaneCycle,
        flow: f64,
    }

    let mut pending: Vec<PendingCycle> = Vec::new();
    let mut clamped_intervals = 0usize;

    for lane in spec.controlled_lanes() {
        let cycles = log.lane_cycles(spec, lane)?;
        let inputs = log.lane_interval_inputs(lane, &cycles);
        // Per-cycle flows accumulate across interval edges (a cycle can own
        // a stub window in the previous interval).
        let mut flow_acc: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
        for input in &inputs {
            // A free-flowing interval (flow without any queued counts) has
            // nothing to infer: vehicles passed without stopping, so split
            // the flow by window duration and leave delays at zero.
            let flows: Vec<f64> = if input.windows.iter().all(|w| w.max_count <= 0.0) {
                let total: f64 = input.windows.iter().map(|w| w.duration_s).sum();
                input
                    .windows
                    .iter()
                    .map(|w| input.flow * w.duration_s / total)
                    .collect()
            } else {
                let d = decompose(input.flow, &input.windows, input.residual)?;
                if d.clamped {
                    clamped_intervals += 1;
                }
                d.flows
            };
            for (slot, &cid) in input.window_cycles.iter().enumerate() {
                *flow_acc.entry(cid).or_insert(0.0) += flows[slot];
            }
        }
        for (&cid, &flow) in &flow_acc {
            let cycle = &cycles[cid];
            let end = cycle.start_s + cycle.cycle_s;
            let interval = (end / log.interval_s).floor() as usize;
            if interval < log.warmup_intervals || interval >= log.interval_count() {
                continue;
            }
            pending.push(PendingCycle {
                lane,
                interval,
                global_index: cid,
                cycle: cycle.clone(),
                flow: flow.max(0.0),
            });
        }
    }

    // Parallel chains with per-(lane, cycle) seeds; skip negligible flows.
    let tasks: Vec<(usize, InferTask<'_>)> = pending
        .iter()
        .enumerate()
        .filter(|(_, p)| p.flow >= MIN_INFER_FLOW && p.cycle.max_count() > 0.0)
        .map(|(i, p)| {
            (
                i,
                InferTask {
                    lane: p.lane,
                    cycle_index: p.global_index,
                    obs: &p.cycle,
                    flow: p.flow,
                },
            )
        })
        .collect();
    let plain: Vec<InferTask<'_>> = tasks
        .iter()
        .map(|(_, t)| InferTask {
            lane: t.lane,
            cycle_index: t.cycle_index,
            obs: t.obs,
            flow: t.flow,
        })
        .collect();
    let estimates = infer_batch(&plain, spec, hyper, mh, seed);

    let mut cycles_out: Vec<CycleEstimate> = pending
        .iter()
        .map(|p| CycleEstimate {
            lane: p.lane,
            interval: p.interval,
            start_s: p.cycle.start_s,
            cycle_s: p.cycle.cycle_s,
            red_s: p.cycle.red_s,
            flow: p.flow,
            params: None,
            max_queue_m: 0.0,
            delay_veh_s: 0.0,
            low_confidence: false,
        })
        .collect();

    let mut low_confidence_chains = 0usize;
    for ((slot, _), est) in tasks.iter().zip(estimates) {
        let est = est?;
        let out = &mut cycles_out[*slot];
        if est.low_confidence {
            low_confidence_chains += 1;
            out.low_confidence = true;
        }
        let perf = cycle_performance(&est.params, out.red_s, spec)?;
        out.params = Some(est.params);
        out.max_queue_m = perf.max_queue_m;
        out.delay_veh_s = perf.delay_veh_s;
    }

    // Aggregate per interval.
    let mut rewards = Vec::new();
    for interval in log.warmup_intervals..log.interval_count() {
        let in_interval: Vec<&CycleEstimate> = cycles_out
            .iter()
            .filter(|c| c.interval == interval)
            .collect();
        let delays: Vec<f64> = in_interval.iter().map(|c| c.delay_veh_s).collect();
        let flows: Vec<f64> = in_interval.iter().map(|c| c.flow).collect();
        let mut lane_q_max = vec![0.0_f64; spec.lane_count];
        for c in &in_interval {
            lane_q_max[c.lane] = lane_q_max[c.lane].max(c.max_queue_m);
        }
        rewards.push(RewardRow {
            interval,
            reward_delay: interval_reward(&delays, &flows),
            total_delay: delays.iter().sum(),
            lane_q_max,
        });
    }

    Ok(InferenceOutput {
        rewards,
        cycles: cycles_out,
        clamped_intervals,
        low_confidence_chains,
    })
}

/// Build transitions from one day's log, applied plans, and inferred
/// rewards: state = previous interval, action = plan applied during the
/// interval, reward = that interval's inferred delay, next state = the
/// interval itself. The final interval of the log is terminal.
pub fn assemble_transitions(
    log: &ObservationLog,
    actions: &[TimingPlan],
    rewards: &[RewardRow],
    spec: &IntersectionSpec,
    config_hash: &str,
) -> Result<TransitionDataset> {
    if actions.len() != log.interval_count() {
        return Err(Error::Shape(format!(
            "{} actions for {} intervals",
            actions.len(),
            log.interval_count()
        )));
    }
    let reward_of = |interval: usize| -> Result<f64> {
        rewards
            .iter()
            .find(|r| r.interval == interval)
            .map(|r| r.reward_delay)
            .ok_or_else(|| Error::Data(format!("no reward for interval {interval}")))
    };
    let mut transitions = Vec::new();
    for t in log.warmup_intervals..log.interval_count() {
        let state = augmented_state(&log.interval_observation(t - 1), spec)?;
        let next_state = augmented_state(&log.interval_observation(t), spec)?;
        let plan = &actions[t];
        let mut action = vec![plan.cycle_s];
        action.extend_from_slice(&plan.green_ratios);
        transitions.push(Transition {
            state,
            action,
            delay: reward_of(t)?,
            next_state,
            terminal: t + 1 == log.interval_count(),
        });
    }
    Ok(TransitionDataset {
        lane_count: spec.lane_count,
        order_count: spec.order_count,
        phase_count: spec.phase_count,
        transitions,
        config_hash: config_hash.to_string(),
    })
}

/// One generated day: the raw rollout plus its inference output.
pub struct DayData {
    pub rollout: RolloutResult,
    pub inference: InferenceOutput,
}

/// Offline dataset generation: roll the behavior policy for `days` days
/// (each with its own derived seed and rotating phase order), infer rewards
/// from the coarse observations alone, and assemble transitions at the
/// 5-minute cadence.
pub fn generate_dataset(
    spec: &IntersectionSpec,
    scenario: &Scenario,
    hyper: &GpHyper,
    mh: &MhSettings,
    days: usize,
    seed: u64,
    config_hash: &str,
) -> Result<(TransitionDataset, Vec<DayData>)> {
    if days == 0 {
        return Err(Error::Data("dataset generation needs at least one day".into()));
    }
    let rollouts: Vec<RolloutResult> = (0..days)
        .map(|day| {
            let mut behavior =
                BehaviorPolicy::new(scenario, crate::gpmh::derive_seed(seed, day as u64, 1));
            let opts = RolloutOptions::day(
                crate::gpmh::derive_seed(seed, day as u64, 0),
                day % spec.order_count,
            );
            rollout(spec, scenario, &mut behavior, &opts)
        })
        .collect::<Result<_>>()?;

    let inferences: Vec<InferenceOutput> = rollouts
        .par_iter()
        .enumerate()
        .map(|(day, r)| {
            infer_rewards(
                &r.obs,
                spec,
                hyper,
                mh,
                crate::gpmh::derive_seed(seed, day as u64, 2),
            )
        })
        .collect::<Result<_>>()?;

    let mut dataset = TransitionDataset {
        lane_count: spec.lane_count,
        order_count: spec.order_count,
        phase_count: spec.phase_count,
        transitions: Vec::new(),
        config_hash: config_hash.to_string(),
    };
    let mut days_out = Vec::new();
    for (r, inf) in rollouts.into_iter().zip(inferences) {
        let day_ds = assemble_transitions(&r.obs, &r.actions, &inf.rewards, spec, config_hash)?;
        dataset.transitions.extend(day_ds.transitions);
        days_out.push(DayData {
            rollout: r,
            inference: inf,
        });
    }
    Ok((dataset, days_out))
}

/// Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// Median of a sample (mean of the middle pair for even sizes).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}
