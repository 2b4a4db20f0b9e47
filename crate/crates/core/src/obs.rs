//! Coarse observation handling: the day-level observation log, per-lane
//! cycle extraction, per-interval decomposition inputs, and the delimited
//! file formats shared by the simulator output and the ingestion path.
//!
//! Lane cycles are re-anchored at the end of the lane's green period, so
//! each cycle is red first then green, matching the queuing model. Partial
//! cycles at interval edges are merged into the adjacent window for flow
//! accounting.

use std::fmt::Write as _;
use std::path::Path;

use crate::cycledecomp::CycleWindow;
use crate::error::{Error, Result};
use crate::types::{CycleRecord, IntersectionSpec, IntervalObservation, LaneCycle};

/// Everything a detector suite reports over one rollout: per-interval lane
/// flows, a 5-second spatial count grid, the active phase order per
/// interval, and the controller's cycle log. The first `warmup_intervals`
/// intervals only provide state context and are excluded from rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationLog {
    pub lane_count: usize,
    pub interval_s: f64,
    pub count_dt: f64,
    pub warmup_intervals: usize,
    /// Per-interval, per-lane flow (vehicles crossing the stopline).
    pub flows: Vec<Vec<f64>>,
    /// Count grid: `counts[k][lane]` sampled at time `k * count_dt`,
    /// covering 0..=horizon inclusive.
    pub counts: Vec<Vec<f64>>,
    /// Active phase order per interval.
    pub orders: Vec<usize>,
    /// Signal cycles in time order, covering the horizon.
    pub cycles: Vec<CycleRecord>,
}

impl ObservationLog {
    pub fn interval_count(&self) -> usize {
        self.flows.len()
    }

    pub fn horizon_s(&self) -> f64 {
        self.interval_count() as f64 * self.interval_s
    }

    /// Count at the grid tick nearest to `time_s`.
    pub fn count_at(&self, time_s: f64, lane: usize) -> f64 {
        let k = ((time_s / self.count_dt).round() as usize).min(self.counts.len() - 1);
        self.counts[k][lane]
    }

    /// The agent-facing view of one interval: its flows, per-lane count
    /// series (ending on the interval boundary), active order, and the
    /// complete cycles that started in it.
    pub fn interval_observation(&self, index: usize) -> IntervalObservation {
        let ticks_per = (self.interval_s / self.count_dt).round() as usize;
        let lo = index * ticks_per + 1;
        let hi = ((index + 1) * ticks_per).min(self.counts.len() - 1);
        let counts = (0..self.lane_count)
            .map(|l| (lo..=hi).map(|k| self.counts[k][l]).collect())
            .collect();
        let start = index as f64 * self.interval_s;
        let end = start + self.interval_s;
        let cycles = self
            .cycles
            .iter()
            .filter(|c| c.start_s >= start - 1e-9 && c.end_s() <= end + 1e-9)
            .cloned()
            .collect();
        IntervalObservation {
            index,
            flows: self.flows[index].clone(),
            counts,
            order: self.orders[index],
            cycles,
        }
    }

    /// Re-anchored lane cycles across the whole log. Cycle c runs from the
    /// lane's green end in signal cycle c-1 to its green end in signal
    /// cycle c; count samples are the grid ticks in [start, end).
    pub fn lane_cycles(&self, spec: &IntersectionSpec, lane: usize) -> Result<Vec<LaneCycle>> {
        let mut out = Vec::new();
        let mut prev_green_end: Option<f64> = None;
        for rec in &self.cycles {
            let (gs, ge) = lane_green_window(rec, spec, lane)?;
            if let Some(start) = prev_green_end {
                let cycle_s = ge - start;
                let green_s = ge - gs;
                let mut timestamps = Vec::new();
                let mut counts = Vec::new();
                let mut k = (start / self.count_dt).ceil() as usize;
                while (k as f64) * self.count_dt < ge - 1e-9 && k < self.counts.len() {
                    timestamps.push(k as f64 * self.count_dt - start);
                    counts.push(self.counts[k][lane]);
                    k += 1;
                }
                out.push(LaneCycle {
                    lane,
                    start_s: start,
                    cycle_s,
                    red_s: cycle_s - green_s,
                    green_s,
                    timestamps,
                    counts,
                    flow: None,
                });
            }
            prev_green_end = Some(ge);
        }
        Ok(out)
    }

    /// Decomposition inputs for one lane, grouped by interval. A cycle
    /// belongs to the interval its green end falls in, so nearly all of its
    /// discharge lies inside its own window; window boundaries sit at the
    /// cycle ends. The leading partial piece (head of the first cycle) and
    /// the trailing stub (head of the next interval's first cycle, which may
    /// already be discharging) each map to their owning cycle, so per-cycle
    /// flows can be accumulated across interval edges.
    pub fn lane_interval_inputs(
        &self,
        lane: usize,
        lane_cycles: &[LaneCycle],
    ) -> Vec<LaneIntervalInput> {
        let mut out = Vec::new();
        for interval in self.warmup_intervals..self.interval_count() {
            let start = interval as f64 * self.interval_s;
            let end = start + self.interval_s;
            let ids: Vec<usize> = lane_cycles
                .iter()
                .enumerate()
                .filter(|(_, c)| {
                    let cycle_end = c.start_s + c.cycle_s;
                    cycle_end >= start - 1e-9 && cycle_end < end - 1e-9
                })
                .map(|(i, _)| i)
                .collect();
            if ids.is_empty() {
                continue;
            }
            let mut bounds = vec![start];
            let mut window_cycles = Vec::new();
            for &id in &ids {
                let cycle_end = lane_cycles[id].start_s + lane_cycles[id].cycle_s;
                bounds.push(cycle_end);
                window_cycles.push(id);
            }
            // Trailing stub up to the interval end, owned by the next cycle
            // when the log still has one (else merged into the last window).
            let last_end = *bounds.last().unwrap();
            if end - last_end > 1e-9 {
                if ids.last().unwrap() + 1 < lane_cycles.len() {
                    bounds.push(end);
                    window_cycles.push(ids.last().unwrap() + 1);
                } else {
                    *bounds.last_mut().unwrap() = end;
                }
            }
            let windows: Vec<CycleWindow> = bounds
                .windows(2)
                .map(|b| CycleWindow {
                    duration_s: b[1] - b[0],
                    start_count: self.count_at(b[0], lane),
                    end_count: self.count_at(b[1], lane),
                    max_count: self.max_count_in(b[0], b[1], lane),
                })
                .collect();
            out.push(LaneIntervalInput {
                interval,
                lane,
                window_cycles,
                windows,
                flow: self.flows[interval][lane],
                residual: self.count_at(end, lane),
            });
        }
        out
    }

    fn max_count_in(&self, from_s: f64, to_s: f64, lane: usize) -> f64 {
        let mut k = (from_s / self.count_dt).ceil() as usize;
        let mut m: f64 = 0.0;
        while (k as f64) * self.count_dt < to_s - 1e-9 && k < self.counts.len() {
            m = m.max(self.counts[k][lane]);
            k += 1;
        }
        m
    }
}

/// One (lane, interval) decomposition problem.
#[derive(Debug, Clone)]
pub struct LaneIntervalInput {
    pub interval: usize,
    pub lane: usize,
    /// Index into the lane's cycle list owning each window. The same cycle
    /// can own a stub in one interval and its main window in the next.
    pub window_cycles: Vec<usize>,
    pub windows: Vec<CycleWindow>,
    pub flow: f64,
    pub residual: f64,
}

/// Absolute green window of `lane` within one signal cycle. Green phase
/// slots must be consecutive; a lane green across a slot gap has no single
/// red-then-green structure for the queuing model.
pub fn lane_green_window(
    rec: &CycleRecord,
    spec: &IntersectionSpec,
    lane: usize,
) -> Result<(f64, f64)> {
    let slots = spec.phase_table.green_phases(rec.order, lane);
    if slots.is_empty() {
        return Err(Error::Data(format!(
            "lane {lane} has no green slot under order {}",
            rec.order
        )));
    }
    for pair in slots.windows(2) {
        if pair[1] != pair[0] + 1 {
            return Err(Error::Data(format!(
                "lane {lane} green slots {slots:?} are not consecutive under order {}",
                rec.order
            )));
        }
    }
    let (gs, _) = rec.plan.phase_window(slots[0]);
    let (_, ge) = rec.plan.phase_window(*slots.last().unwrap());
    Ok((rec.start_s + gs, rec.start_s + ge))
}

// ---------------------------------------------------------------------------
// Delimited file formats. Every file starts with `#`-prefixed header lines
// carrying key=value metadata (config_hash among them), then one record per
// line with comma-separated columns. Column orders are fixed and documented
// in the README.
// ---------------------------------------------------------------------------

pub(crate) fn header(kind: &str, meta: &[(&str, String)]) -> String {
    let mut s = format!("# stopline {kind} v1\n");
    for (k, v) in meta {
        let _ = writeln!(s, "# {k}={v}");
    }
    s
}

pub(crate) fn parse_header(
    text: &str,
    kind: &str,
) -> Result<std::collections::HashMap<String, String>> {
    let mut lines = text.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("empty {kind} file")))?;
    if first != format!("# stopline {kind} v1") {
        return Err(Error::Parse(format!(
            "expected '# stopline {kind} v1' header, found '{first}'"
        )));
    }
    let mut meta = std::collections::HashMap::new();
    for line in lines {
        let Some(rest) = line.strip_prefix("# ") else {
            break;
        };
        if let Some((k, v)) = rest.split_once('=') {
            meta.insert(k.to_string(), v.to_string());
        }
    }
    Ok(meta)
}

pub(crate) fn meta_get<T: std::str::FromStr>(
    meta: &std::collections::HashMap<String, String>,
    key: &str,
) -> Result<T> {
    meta.get(key)
        .ok_or_else(|| Error::Parse(format!("missing header key {key}")))?
        .parse()
        .map_err(|_| Error::Parse(format!("bad header value for {key}")))
}

pub(crate) fn data_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
}

pub(crate) fn parse_fields(line: &str, want: usize, file: &str) -> Result<Vec<f64>> {
    let fields: Vec<f64> = line
        .split(',')
        .map(|f| f.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Parse(format!("{file}: bad numeric field in '{line}'")))?;
    if fields.len() != want {
        return Err(Error::Parse(format!(
            "{file}: expected {want} columns, found {} in '{line}'",
            fields.len()
        )));
    }
    Ok(fields)
}

/// Write the full observation log under `dir` as flows.csv, counts.csv and
/// timing.csv.
pub fn write_observations(dir: &Path, log: &ObservationLog, config_hash: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let base_meta = |extra: &mut Vec<(&'static str, String)>| {
        extra.push(("config_hash", config_hash.to_string()));
        extra.push(("lane_count", log.lane_count.to_string()));
        extra.push(("interval_s", log.interval_s.to_string()));
        extra.push(("count_dt", log.count_dt.to_string()));
        extra.push(("warmup_intervals", log.warmup_intervals.to_string()));
    };

    // flows.csv: interval, lane, flow, active_order
    let mut meta = Vec::new();
    base_meta(&mut meta);
    let mut s = header("flows", &meta);
    s.push_str("# columns: interval,lane,flow_veh,order\n");
    for (i, row) in log.flows.iter().enumerate() {
        for (l, f) in row.iter().enumerate() {
            let _ = writeln!(s, "{i},{l},{f},{}", log.orders[i]);
        }
    }
    std::fs::write(dir.join("flows.csv"), s)?;

    // counts.csv: time_s, lane, count
    let mut meta = Vec::new();
    base_meta(&mut meta);
    let mut s = header("counts", &meta);
    s.push_str("# columns: time_s,lane,count_veh\n");
    for (k, row) in log.counts.iter().enumerate() {
        let t = k as f64 * log.count_dt;
        for (l, c) in row.iter().enumerate() {
            let _ = writeln!(s, "{t},{l},{c}");
        }
    }
    std::fs::write(dir.join("counts.csv"), s)?;

    // timing.csv: cycle, start_s, order, cycle_len_s, green ratios...
    let mut meta = Vec::new();
    base_meta(&mut meta);
    let mut s = header("timing", &meta);
    s.push_str("# columns: cycle,start_s,order,cycle_len_s,green_ratio per phase...\n");
    for (i, c) in log.cycles.iter().enumerate() {
        let ratios: Vec<String> = c.plan.green_ratios.iter().map(|g| g.to_string()).collect();
        let _ = writeln!(
            s,
            "{i},{},{},{},{}",
            c.start_s,
            c.order,
            c.plan.cycle_s,
            ratios.join(",")
        );
    }
    std::fs::write(dir.join("timing.csv"), s)?;
    Ok(())
}

/// Read an observation log written by [`write_observations`]. Returns the
/// log and the config hash recorded in the files.
pub fn read_observations(dir: &Path, phase_count: usize) -> Result<(ObservationLog, String)> {
    let flows_text = std::fs::read_to_string(dir.join("flows.csv"))?;
    let meta = parse_header(&flows_text, "flows")?;
    let hash: String = meta_get(&meta, "config_hash")?;
    let lane_count: usize = meta_get(&meta, "lane_count")?;
    let interval_s: f64 = meta_get(&meta, "interval_s")?;
    let count_dt: f64 = meta_get(&meta, "count_dt")?;
    let warmup: usize = meta_get(&meta, "warmup_intervals")?;

    let mut flows: Vec<Vec<f64>> = Vec::new();
    let mut orders: Vec<usize> = Vec::new();
    for line in data_lines(&flows_text) {
        let f = parse_fields(line, 4, "flows.csv")?;
        let (i, l) = (f[0] as usize, f[1] as usize);
        if flows.len() <= i {
            flows.resize(i + 1, vec![0.0; lane_count]);
            orders.resize(i + 1, 0);
        }
        flows[i][l] = f[2];
        orders[i] = f[3] as usize;
    }

    let counts_text = std::fs::read_to_string(dir.join("counts.csv"))?;
    let cmeta = parse_header(&counts_text, "counts")?;
    check_same_hash(&cmeta, &hash, "counts.csv")?;
    let mut counts: Vec<Vec<f64>> = Vec::new();
    for line in data_lines(&counts_text) {
        let f = parse_fields(line, 3, "counts.csv")?;
        let k = (f[0] / count_dt).round() as usize;
        if counts.len() <= k {
            counts.resize(k + 1, vec![0.0; lane_count]);
        }
        counts[k][f[1] as usize] = f[2];
    }

    let timing_text = std::fs::read_to_string(dir.join("timing.csv"))?;
    let tmeta = parse_header(&timing_text, "timing")?;
    check_same_hash(&tmeta, &hash, "timing.csv")?;
    let mut cycles = Vec::new();
    for line in data_lines(&timing_text) {
        let f = parse_fields(line, 4 + phase_count, "timing.csv")?;
        cycles.push(CycleRecord {
            start_s: f[1],
            order: f[2] as usize,
            plan: crate::types::TimingPlan {
                cycle_s: f[3],
                green_ratios: f[4..].to_vec(),
            },
        });
    }

    Ok((
        ObservationLog {
            lane_count,
            interval_s,
            count_dt,
            warmup_intervals: warmup,
            flows,
            counts,
            orders,
            cycles,
        },
        hash,
    ))
}

pub(crate) fn check_same_hash(
    meta: &std::collections::HashMap<String, String>,
    expected: &str,
    file: &str,
) -> Result<()> {
    let found: String = meta_get(meta, "config_hash")?;
    if found != expected {
        return Err(Error::HashMismatch {
            expected: expected.to_string(),
            found,
            source_name: file.to_string(),
        });
    }
    Ok(())
}

/// Write the per-interval applied timing plans (the dataset actions).
pub fn write_actions(
    path: &Path,
    plans: &[crate::types::TimingPlan],
    config_hash: &str,
) -> Result<()> {
    let mut s = header("actions", &[("config_hash", config_hash.to_string())]);
    s.push_str("# columns: interval,cycle_len_s,green_ratio per phase...\n");
    for (i, p) in plans.iter().enumerate() {
        let ratios: Vec<String> = p.green_ratios.iter().map(|g| g.to_string()).collect();
        let _ = writeln!(s, "{i},{},{}", p.cycle_s, ratios.join(","));
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_actions(
    path: &Path,
    phase_count: usize,
) -> Result<(Vec<crate::types::TimingPlan>, String)> {
    let text = std::fs::read_to_string(path)?;
    let meta = parse_header(&text, "actions")?;
    let hash: String = meta_get(&meta, "config_hash")?;
    let mut plans = Vec::new();
    for line in data_lines(&text) {
        let f = parse_fields(line, 2 + phase_count, "actions.csv")?;
        plans.push(crate::types::TimingPlan {
            cycle_s: f[1],
            green_ratios: f[2..].to_vec(),
        });
    }
    Ok((plans, hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{PhaseTable, TimingPlan};

    fn spec() -> IntersectionSpec {
        IntersectionSpec {
            lane_count: 2,
            phase_count: 2,
            order_count: 1,
            phase_table: PhaseTable(vec![vec![vec![1, 0], vec![0, 1]]]),
            controlled: vec![true, true],
            detection_range_m: 150.0,
            jam_density: 1.0 / 7.5,
            free_flow_mps: 15.0,
            shockwave_mps: 6.0,
            traverse_time_s: 25.0,
            cycle_bounds_s: (60.0, 120.0),
        }
    }

    fn plan() -> TimingPlan {
        TimingPlan {
            cycle_s: 100.0,
            green_ratios: vec![0.4, 0.6],
        }
    }

    fn small_log() -> ObservationLog {
        // Two intervals of 300 s, cycles of 100 s back to back.
        let cycles: Vec<CycleRecord> = (0..6)
            .map(|i| CycleRecord {
                start_s: i as f64 * 100.0,
                order: 0,
                plan: plan(),
            })
            .collect();
        let ticks = 2 * 60 + 1;
        let counts = (0..ticks)
            .map(|k| vec![(k % 7) as f64, ((k + 3) % 5) as f64])
            .collect();
        ObservationLog {
            lane_count: 2,
            interval_s: 300.0,
            count_dt: 5.0,
            warmup_intervals: 1,
            flows: vec![vec![6.0, 9.0], vec![7.5, 8.0]],
            counts,
            orders: vec![0, 0],
            cycles,
        }
    }

    #[test]
    fn lane_green_window_respects_slot() {
        let rec = CycleRecord {
            start_s: 200.0,
            order: 0,
            plan: plan(),
        };
        // Lane 0 is green in slot 0: [0, 40) of the cycle.
        assert_eq!(lane_green_window(&rec, &spec(), 0).unwrap(), (200.0, 240.0));
        // Lane 1 is green in slot 1: [40, 100).
        assert_eq!(lane_green_window(&rec, &spec(), 1).unwrap(), (240.0, 300.0));
    }

    #[test]
    fn lane_cycles_are_contiguous_and_red_first() {
        let log = small_log();
        let cycles = log.lane_cycles(&spec(), 0).unwrap();
        // 6 signal cycles give 5 re-anchored lane cycles.
        assert_eq!(cycles.len(), 5);
        for (i, c) in cycles.iter().enumerate() {
            assert!((c.cycle_s - 100.0).abs() < 1e-9);
            assert!((c.red_s - 60.0).abs() < 1e-9);
            assert!((c.green_s - 40.0).abs() < 1e-9);
            assert!((c.start_s - (40.0 + 100.0 * i as f64)).abs() < 1e-9);
            c.validate(20.0).unwrap();
            assert_eq!(c.timestamps.len(), 20);
        }
        // Consecutive cycles tile the timeline.
        for pair in cycles.windows(2) {
            assert!((pair[0].start_s + pair[0].cycle_s - pair[1].start_s).abs() < 1e-9);
        }
    }

    #[test]
    fn interval_inputs_merge_partials_and_cover_interval() {
        let log = small_log();
        let lane_cycles = log.lane_cycles(&spec(), 0).unwrap();
        let inputs = log.lane_interval_inputs(0, &lane_cycles);
        // Warmup interval 0 is skipped; interval 1 remains.
        assert_eq!(inputs.len(), 1);
        let inp = &inputs[0];
        assert_eq!(inp.interval, 1);
        let total: f64 = inp.windows.iter().map(|w| w.duration_s).sum();
        assert!(
            (total - 300.0).abs() < 1e-9,
            "windows must tile the interval"
        );
        assert_eq!(inp.window_cycles.len(), inp.windows.len());
        // Owning cycles are consecutive (the stub belongs to the next one).
        for pair in inp.window_cycles.windows(2) {
            assert_eq!(pair[1], pair[0] + 1);
        }
    }

    #[test]
    fn observation_files_round_trip() {
        let dir = std::env::temp_dir().join(format!("stopline-obs-{}", std::process::id()));
        let log = small_log();
        write_observations(&dir, &log, "cafebabe").unwrap();
        let (back, hash) = read_observations(&dir, 2).unwrap();
        assert_eq!(hash, "cafebabe");
        assert_eq!(back, log);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn actions_round_trip() {
        let dir = std::env::temp_dir().join(format!("stopline-act-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("actions.csv");
        let plans = vec![plan(), plan()];
        write_actions(&path, &plans, "h1").unwrap();
        let (back, hash) = read_actions(&path, 2).unwrap();
        assert_eq!(hash, "h1");
        assert_eq!(back, plans);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn interval_observation_slices_counts() {
        let log = small_log();
        let obs = log.interval_observation(1);
        assert_eq!(obs.counts[0].len(), 60);
        assert_eq!(obs.flows, vec![7.5, 8.0]);
        // Series ends exactly on the interval boundary tick.
        assert_eq!(obs.end_counts()[0], log.counts[120][0]);
        // Cycles starting at 300, 400, 500 all complete within the interval.
        assert_eq!(obs.cycles.len(), 3);
    }
}
