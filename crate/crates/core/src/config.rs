//! Configuration: one TOML file with a section per subsystem. Absent keys
//! fall back to the documented defaults; derived quantities (shockwave speed
//! vs. traverse time) are completed and cross-checked. The config hash pins
//! every downstream artifact to the configuration that produced it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gpmh::{ChainEstimator, GpHyper, MhSettings};
use crate::orl::RlSettings;
use crate::simenv::{DemandSegment, Scenario};
use crate::types::{IntersectionSpec, PhaseTable, TimingPlan};

/// Fully validated toolkit configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Config {
    pub spec: IntersectionSpec,
    pub gp: GpHyper,
    pub mh: MhSettings,
    pub rl: RlSettings,
    pub scenario: Scenario,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        Config::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Config> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse failure: {e}")))?;
        raw.build()
    }

    /// Short content hash over the fully resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(&RawConfig::from(self)).expect("config serializes")
    }

    /// Built-in desk-scale profile (8 lanes, 4 phases, one order).
    pub fn desk8() -> Config {
        Config {
            spec: crate::simenv::desk8_spec(),
            gp: GpHyper::default(),
            mh: MhSettings::default(),
            rl: RlSettings::default(),
            scenario: crate::simenv::desk8_scenario(),
        }
    }

    /// Fuller 17-lane, two-order profile.
    pub fn full17() -> Config {
        Config {
            spec: crate::simenv::full17_spec(),
            gp: GpHyper::default(),
            mh: MhSettings::default(),
            rl: RlSettings::default(),
            scenario: crate::simenv::full17_scenario(),
        }
    }
}

// ---------------------------------------------------------------------------
// Raw TOML layer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawConfig {
    intersection: RawIntersection,
    #[serde(default)]
    gp: RawGp,
    #[serde(default)]
    mh: RawMh,
    #[serde(default)]
    rl: RawRl,
    sim: RawSim,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawIntersection {
    lanes: usize,
    phases: usize,
    #[serde(default = "one")]
    orders: usize,
    phase_table: Vec<Vec<Vec<u8>>>,
    controlled: Vec<bool>,
    #[serde(default = "default_detection_range")]
    detection_range_m: f64,
    #[serde(default = "default_jam_spacing")]
    jam_spacing_m: f64,
    #[serde(default = "default_free_flow")]
    free_flow_mps: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    shockwave_mps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    traverse_time_s: Option<f64>,
    cycle_min_s: f64,
    cycle_max_s: f64,
}

fn one() -> usize {
    1
}
fn default_detection_range() -> f64 {
    150.0
}
fn default_jam_spacing() -> f64 {
    7.5
}
fn default_free_flow() -> f64 {
    15.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct RawGp {
    amplitude: f64,
    length_scale_s: f64,
    noise: f64,
}

impl Default for RawGp {
    fn default() -> Self {
        let g = GpHyper::default();
        RawGp {
            amplitude: g.amplitude,
            length_scale_s: g.length_scale_s,
            noise: g.noise,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct RawMh {
    iterations: usize,
    burn_in: f64,
    arrival_max: f64,
    saturation_max: f64,
    estimator: String,
}

impl Default for RawMh {
    fn default() -> Self {
        let m = MhSettings::default();
        RawMh {
            iterations: m.iterations,
            burn_in: m.burn_in,
            arrival_max: m.arrival_max,
            saturation_max: m.saturation_max,
            estimator: "accepted_mean".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct RawRl {
    alpha: f64,
    gamma: f64,
    aug_std: f64,
    aug_clip: f64,
    learning_rate: f64,
    batch_size: usize,
    steps: usize,
    hidden: usize,
    target_rate: f64,
    diag_every: usize,
    init_log_std: f64,
}

impl Default for RawRl {
    fn default() -> Self {
        let r = RlSettings::default();
        RawRl {
            alpha: r.alpha,
            gamma: r.gamma,
            aug_std: r.aug_std,
            aug_clip: r.aug_clip,
            learning_rate: r.learning_rate,
            batch_size: r.batch_size,
            steps: r.steps,
            hidden: r.hidden,
            target_rate: r.target_rate,
            diag_every: r.diag_every,
            init_log_std: r.init_log_std,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawSim {
    saturation_rate: f64,
    #[serde(default = "yes")]
    stochastic_arrivals: bool,
    fixed_cycle_s: f64,
    fixed_green_ratios: Vec<f64>,
    #[serde(default = "default_behavior_noise")]
    behavior_noise: f64,
    #[serde(default = "default_min_ratio")]
    behavior_min_ratio: f64,
    #[serde(default = "default_cycle_gain")]
    behavior_cycle_gain: f64,
    demand: Vec<DemandSegment>,
}

fn yes() -> bool {
    true
}
fn default_behavior_noise() -> f64 {
    0.05
}
fn default_min_ratio() -> f64 {
    0.10
}
fn default_cycle_gain() -> f64 {
    0.5
}

impl RawConfig {
    fn build(self) -> Result<Config> {
        let i = self.intersection;
        if !(i.jam_spacing_m > 0.0) {
            return Err(Error::Config(format!(
                "jam_spacing_m must be > 0, got {}",
                i.jam_spacing_m
            )));
        }
        let (shockwave_mps, traverse_time_s) = match (i.shockwave_mps, i.traverse_time_s) {
            (Some(w), Some(ts)) => (w, ts),
            (Some(w), None) => (w, i.detection_range_m / w),
            (None, Some(ts)) => (i.detection_range_m / ts, ts),
            (None, None) => (i.detection_range_m / 25.0, 25.0),
        };
        let spec = IntersectionSpec {
            lane_count: i.lanes,
            phase_count: i.phases,
            order_count: i.orders,
            phase_table: PhaseTable(i.phase_table),
            controlled: i.controlled,
            detection_range_m: i.detection_range_m,
            jam_density: 1.0 / i.jam_spacing_m,
            free_flow_mps: i.free_flow_mps,
            shockwave_mps,
            traverse_time_s,
            cycle_bounds_s: (i.cycle_min_s, i.cycle_max_s),
        };
        spec.validate()?;

        let gp = GpHyper {
            amplitude: self.gp.amplitude,
            length_scale_s: self.gp.length_scale_s,
            noise: self.gp.noise,
        };
        gp.validate()?;

        let estimator = match self.mh.estimator.as_str() {
            "accepted_mean" => ChainEstimator::AcceptedMean,
            "chain_mean" => ChainEstimator::ChainMean,
            other => {
                return Err(Error::Config(format!(
                    "mh.estimator must be accepted_mean or chain_mean, got '{other}'"
                )))
            }
        };
        let mh = MhSettings {
            iterations: self.mh.iterations,
            burn_in: self.mh.burn_in,
            arrival_max: self.mh.arrival_max,
            saturation_max: self.mh.saturation_max,
            estimator,
            record_trace: false,
        };
        mh.validate()?;

        let rl = RlSettings {
            alpha: self.rl.alpha,
            gamma: self.rl.gamma,
            aug_std: self.rl.aug_std,
            aug_clip: self.rl.aug_clip,
            learning_rate: self.rl.learning_rate,
            batch_size: self.rl.batch_size,
            steps: self.rl.steps,
            hidden: self.rl.hidden,
            target_rate: self.rl.target_rate,
            diag_every: self.rl.diag_every,
            init_log_std: self.rl.init_log_std,
        };
        rl.validate()?;

        let scenario = Scenario {
            saturation_rate: self.sim.saturation_rate,
            stochastic_arrivals: self.sim.stochastic_arrivals,
            demand: self.sim.demand,
            fixed_plan: TimingPlan::new(
                self.sim.fixed_cycle_s,
                self.sim.fixed_green_ratios,
                spec.cycle_bounds_s,
            )?,
            behavior_noise: self.sim.behavior_noise,
            behavior_min_ratio: self.sim.behavior_min_ratio,
            behavior_cycle_gain: self.sim.behavior_cycle_gain,
        };
        scenario.validate(&spec)?;

        Ok(Config {
            spec,
            gp,
            mh,
            rl,
            scenario,
        })
    }
}

impl From<&Config> for RawConfig {
    fn from(c: &Config) -> RawConfig {
        RawConfig {
            intersection: RawIntersection {
                lanes: c.spec.lane_count,
                phases: c.spec.phase_count,
                orders: c.spec.order_count,
                phase_table: c.spec.phase_table.0.clone(),
                controlled: c.spec.controlled.clone(),
                detection_range_m: c.spec.detection_range_m,
                jam_spacing_m: 1.0 / c.spec.jam_density,
                free_flow_mps: c.spec.free_flow_mps,
                shockwave_mps: Some(c.spec.shockwave_mps),
                traverse_time_s: Some(c.spec.traverse_time_s),
                cycle_min_s: c.spec.cycle_bounds_s.0,
                cycle_max_s: c.spec.cycle_bounds_s.1,
            },
            gp: RawGp {
                amplitude: c.gp.amplitude,
                length_scale_s: c.gp.length_scale_s,
                noise: c.gp.noise,
            },
            mh: RawMh {
                iterations: c.mh.iterations,
                burn_in: c.mh.burn_in,
                arrival_max: c.mh.arrival_max,
                saturation_max: c.mh.saturation_max,
                estimator: match c.mh.estimator {
                    ChainEstimator::AcceptedMean => "accepted_mean".into(),
                    ChainEstimator::ChainMean => "chain_mean".into(),
                },
            },
            rl: RawRl {
                alpha: c.rl.alpha,
                gamma: c.rl.gamma,
                aug_std: c.rl.aug_std,
                aug_clip: c.rl.aug_clip,
                learning_rate: c.rl.learning_rate,
                batch_size: c.rl.batch_size,
                steps: c.rl.steps,
                hidden: c.rl.hidden,
                target_rate: c.rl.target_rate,
                diag_every: c.rl.diag_every,
                init_log_std: c.rl.init_log_std,
            },
            sim: RawSim {
                saturation_rate: c.scenario.saturation_rate,
                stochastic_arrivals: c.scenario.stochastic_arrivals,
                fixed_cycle_s: c.scenario.fixed_plan.cycle_s,
                fixed_green_ratios: c.scenario.fixed_plan.green_ratios.clone(),
                behavior_noise: c.scenario.behavior_noise,
                behavior_min_ratio: c.scenario.behavior_min_ratio,
                behavior_cycle_gain: c.scenario.behavior_cycle_gain,
                demand: c.scenario.demand.clone(),
            },
        }
    }
}
