//! In-sample offline RL for signal timing. A Q function, a V function, and a
//! Gaussian policy are trained from a fixed transition dataset; value targets
//! only ever use dataset actions. The V objective regresses on high Q values
//! through an indicator-gated quadratic, the policy is extracted by weighted
//! likelihood regression, and states are augmented with small clipped
//! Gaussian noise during value training.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::{AdamState, BatchCache, Grads, Mlp};
use crate::norm::NormStats;
use crate::types::{IntersectionSpec, IntervalObservation, PhaseTable, TimingPlan};

/// Training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlSettings {
    /// Behavior-regularization strength.
    pub alpha: f64,
    pub gamma: f64,
    /// Std of the state augmentation noise.
    pub aug_std: f64,
    /// Per-component clip on the augmentation noise.
    pub aug_clip: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Hidden width of the two-hidden-layer networks.
    pub hidden: usize,
    /// Polyak rate for the slow V copy used in the Q target.
    pub target_rate: f64,
    /// Diagnostics cadence, steps.
    pub diag_every: usize,
    /// Initial policy log-std (state independent, learnable).
    pub init_log_std: f64,
}

impl Default for RlSettings {
    fn default() -> Self {
        RlSettings {
            alpha: 0.01,
            gamma: 0.99,
            aug_std: 0.01,
            aug_clip: 0.025,
            learning_rate: 3e-5,
            batch_size: 256,
            steps: 1_000_000,
            hidden: 256,
            target_rate: 0.005,
            diag_every: 1000,
            init_log_std: -1.5,
        }
    }
}

impl RlSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Invariant(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return Err(Error::Invariant(format!(
                "gamma must lie in [0, 1), got {}",
                self.gamma
            )));
        }
        if !(self.aug_clip >= self.aug_std && self.aug_std >= 0.0) {
            return Err(Error::Invariant(format!(
                "need clip {} >= std {} >= 0",
                self.aug_clip, self.aug_std
            )));
        }
        if self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::Invariant("batch size and hidden width must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// State encoding
// ---------------------------------------------------------------------------

/// Aggregate lane flows into per-phase demand under the active phase order:
/// entry p sums the flows of lanes green in slot p. `order_onehot` must be
/// one-hot over the orders.
pub fn phase_pool(flows: &[f64], order_onehot: &[f64], table: &PhaseTable) -> Result<Vec<f64>> {
    if order_onehot.len() != table.order_count() {
        return Err(Error::Shape(format!(
            "order one-hot has {} entries, table has {} orders",
            order_onehot.len(),
            table.order_count()
        )));
    }
    let ones = order_onehot.iter().filter(|&&v| v == 1.0).count();
    if ones != 1 || order_onehot.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Invariant(format!(
            "phase order indicator must be one-hot, got {order_onehot:?}"
        )));
    }
    let order = order_onehot.iter().position(|&v| v == 1.0).unwrap();
    Ok((0..table.phase_count())
        .map(|p| {
            flows
                .iter()
                .enumerate()
                .map(|(l, &f)| if table.green(order, p, l) { f } else { 0.0 })
                .sum()
        })
        .collect())
}

fn onehot(order: usize, count: usize) -> Vec<f64> {
    let mut v = vec![0.0; count];
    v[order] = 1.0;
    v
}

/// Raw augmented state: [flows, end-of-interval counts, order one-hot,
/// phase-pooled demand], dimension 2L + K + |P|.
pub fn augmented_state(obs: &IntervalObservation, spec: &IntersectionSpec) -> Result<Vec<f64>> {
    let oh = onehot(obs.order, spec.order_count);
    let pooled = phase_pool(&obs.flows, &oh, &spec.phase_table)?;
    let mut s = Vec::with_capacity(state_dim(spec));
    s.extend_from_slice(&obs.flows);
    s.extend(obs.end_counts());
    s.extend_from_slice(&oh);
    s.extend_from_slice(&pooled);
    Ok(s)
}

pub fn state_dim(spec: &IntersectionSpec) -> usize {
    2 * spec.lane_count + spec.order_count + spec.phase_count
}

pub fn action_dim(spec: &IntersectionSpec) -> usize {
    1 + spec.phase_count
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// One decision step: raw (unnormalized) quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    /// Raw action [cycle_s, green ratios...].
    pub action: Vec<f64>,
    /// Raw interval delay (flow-weighted, vehicle-seconds scale).
    pub delay: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset {
    pub lane_count: usize,
    pub order_count: usize,
    pub phase_count: usize,
    pub transitions: Vec<Transition>,
    pub config_hash: String,
}

/// Flattened, normalized training arrays.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub state_dim: usize,
    pub action_dim: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Vec<f64>,
    pub terminals: Vec<f64>,
    pub norm: NormStats,
}

impl TrainData {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

impl TransitionDataset {
    /// Fit normalization statistics and produce training arrays: states to
    /// N(0,1) per dimension, rewards to N(5,1) on the negated delay, actions
    /// to the unit box.
    pub fn normalize(&self, spec: &IntersectionSpec) -> Result<TrainData> {
        if self.transitions.is_empty() {
            return Err(Error::Data("empty transition dataset".into()));
        }
        let states: Vec<Vec<f64>> = self.transitions.iter().map(|t| t.state.clone()).collect();
        let delays: Vec<f64> = self.transitions.iter().map(|t| t.delay).collect();
        let norm = NormStats::fit(&states, &delays, spec)?;
        Ok(self.normalize_with(&norm))
    }

    /// Apply existing statistics (used when reloading a saved dataset).
    pub fn normalize_with(&self, norm: &NormStats) -> TrainData {
        let sd = self.transitions[0].state.len();
        let ad = self.transitions[0].action.len();
        let mut data = TrainData {
            state_dim: sd,
            action_dim: ad,
            states: Vec::with_capacity(sd * self.transitions.len()),
            actions: Vec::with_capacity(ad * self.transitions.len()),
            rewards: Vec::with_capacity(self.transitions.len()),
            next_states: Vec::with_capacity(sd * self.transitions.len()),
            terminals: Vec::with_capacity(self.transitions.len()),
            norm: norm.clone(),
        };
        for t in &self.transitions {
            data.states.extend(norm.normalize_state(&t.state));
            data.actions.extend(norm.normalize_action(&t.action));
            data.rewards.push(norm.reward_to_training(t.delay));
            data.next_states.extend(norm.normalize_state(&t.next_state));
            data.terminals.push(if t.terminal { 1.0 } else { 0.0 });
        }
        data
    }

    /// Write as delimited text: header carries dimensions, config hash and
    /// the normalization statistics; one row per transition.
    pub fn write(&self, path: &Path, norm: &NormStats) -> Result<()> {
        use std::fmt::Write as _;
        let meta = vec![
            ("config_hash", self.config_hash.clone()),
            ("lane_count", self.lane_count.to_string()),
            ("order_count", self.order_count.to_string()),
            ("phase_count", self.phase_count.to_string()),
            (
                "norm",
                serde_json::to_string(norm).map_err(|e| Error::Parse(e.to_string()))?,
            ),
        ];
        let mut s = crate::obs::header("dataset", &meta);
        s.push_str("# columns: index,terminal,delay,state...,action...,next_state...\n");
        for (i, t) in self.transitions.iter().enumerate() {
            let mut row = format!("{i},{},{}", if t.terminal { 1 } else { 0 }, t.delay);
            for v in t.state.iter().chain(&t.action).chain(&t.next_state) {
                let _ = write!(row, ",{v}");
            }
            s.push_str(&row);
            s.push('\n');
        }
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<(Self, NormStats)> {
        let text = std::fs::read_to_string(path)?;
        let meta = crate::obs::parse_header(&text, "dataset")?;
        let config_hash: String = crate::obs::meta_get(&meta, "config_hash")?;
        let lane_count: usize = crate::obs::meta_get(&meta, "lane_count")?;
        let order_count: usize = crate::obs::meta_get(&meta, "order_count")?;
        let phase_count: usize = crate::obs::meta_get(&meta, "phase_count")?;
        let norm: NormStats = serde_json::from_str(
            meta.get("norm")
                .ok_or_else(|| Error::Parse("missing norm header".into()))?,
        )
        .map_err(|e| Error::Parse(format!("bad norm header: {e}")))?;
        let sd = 2 * lane_count + order_count + phase_count;
        let ad = 1 + phase_count;
        let want = 3 + 2 * sd + ad;
        let mut transitions = Vec::new();
        for line in crate::obs::data_lines(&text) {
            let f = crate::obs::parse_fields(line, want, "dataset")?;
            transitions.push(Transition {
                terminal: f[1] != 0.0,
                delay: f[2],
                state: f[3..3 + sd].to_vec(),
                action: f[3 + sd..3 + sd + ad].to_vec(),
                next_state: f[3 + sd + ad..].to_vec(),
            });
        }
        Ok((
            TransitionDataset {
                lane_count,
                order_count,
                phase_count,
                transitions,
                config_hash,
            },
            norm,
        ))
    }
}

// ---------------------------------------------------------------------------
// SQL losses
// ---------------------------------------------------------------------------

/// Indicator-gated quadratic V objective evaluated at x = q - v.
pub fn sql_v_loss(x: f64, alpha: f64) -> f64 {
    let r = 1.0 + x / (2.0 * alpha);
    if r > 0.0 {
        r * r - x / alpha
    } else {
        -x / alpha
    }
}

/// d/dx of [`sql_v_loss`].
pub fn sql_v_loss_dx(x: f64, alpha: f64) -> f64 {
    let r = 1.0 + x / (2.0 * alpha);
    if r > 0.0 {
        (r - 1.0) / alpha
    } else {
        -1.0 / alpha
    }
}

/// Policy regression weight: zero exactly when q - v <= -2 alpha.
pub fn sql_pi_weight(x: f64, alpha: f64) -> f64 {
    (1.0 + x / (2.0 * alpha)).max(0.0)
}

/// Clipped Gaussian augmentation noise.
pub fn sample_noise(rng: &mut ChaCha8Rng, n: usize, std: f64, clip: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let normal = Normal::new(0.0, std).expect("std validated non-negative");
    (0..n)
        .map(|_| normal.sample(rng).clamp(-clip, clip))
        .collect()
}

// ---------------------------------------------------------------------------
// Gaussian policy with squashed heads
// ---------------------------------------------------------------------------

/// Diagonal Gaussian over normalized actions. The network emits raw head
/// values; the mean is [sigmoid(head 0), softmax(heads 1..)], so a greedy
/// action always denormalizes to a valid timing plan. The log-std is a
/// learnable state-independent vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub net: Mlp,
    pub log_std: Vec<f64>,
}

impl GaussianPolicy {
    pub fn new(state_dim: usize, phase_count: usize, hidden: usize, init_log_std: f64, rng: &mut impl Rng) -> Self {
        let net = Mlp::init(&[state_dim, hidden, hidden, 1 + phase_count], rng);
        GaussianPolicy {
            net,
            log_std: vec![init_log_std; 1 + phase_count],
        }
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    /// Squash raw head values into the normalized action mean.
    pub fn squash(&self, raw: &[f64]) -> Vec<f64> {
        let mut mean = Vec::with_capacity(raw.len());
        mean.push(1.0 / (1.0 + (-raw[0]).exp()));
        let hi = raw[1..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = raw[1..].iter().map(|&z| (z - hi).exp()).collect();
        let sum: f64 = exps.iter().sum();
        mean.extend(exps.iter().map(|e| e / sum));
        mean
    }

    /// Greedy (mean) normalized action for one state.
    pub fn mean_action(&self, state: &[f64]) -> Result<Vec<f64>> {
        Ok(self.squash(&self.net.forward(state)?))
    }
}

/// Per-batch forward data for the policy loss.
struct PolicyForward {
    cache: BatchCache,
    means: Vec<f64>,
}

fn policy_forward(policy: &GaussianPolicy, states: &[f64], batch: usize) -> PolicyForward {
    let mut cache = BatchCache::default();
    policy.net.forward_batch(states, batch, &mut cache);
    let ad = policy.action_dim();
    let mut means = vec![0.0; batch * ad];
    for b in 0..batch {
        let raw = &cache.output()[b * ad..(b + 1) * ad];
        means[b * ad..(b + 1) * ad].copy_from_slice(&policy.squash(raw));
    }
    PolicyForward { cache, means }
}

/// Weighted negative log-likelihood of dataset actions:
/// loss = -mean(w * log pi(a|s)). Returns (loss, net grads, log-std grads).
pub fn pi_loss_batch(
    policy: &GaussianPolicy,
    states: &[f64],
    actions: &[f64],
    weights: &[f64],
    batch: usize,
) -> (f64, Grads, Vec<f64>) {
    let ad = policy.action_dim();
    let fwd = policy_forward(policy, states, batch);
    let ln2pi = (2.0 * std::f64::consts::PI).ln();

    let mut loss = 0.0;
    let mut dout = vec![0.0; batch * ad];
    let mut dlogstd = vec![0.0; ad];
    let inv_b = 1.0 / batch as f64;

    for b in 0..batch {
        let mean = &fwd.means[b * ad..(b + 1) * ad];
        let a = &actions[b * ad..(b + 1) * ad];
        let w = weights[b];

        let mut logp = 0.0;
        // d loss / d mean, before squash backprop
        let mut dmean = vec![0.0; ad];
        for d in 0..ad {
            let sigma = policy.log_std[d].exp();
            let z = (a[d] - mean[d]) / sigma;
            logp += -0.5 * z * z - policy.log_std[d] - 0.5 * ln2pi;
            dmean[d] = -w * inv_b * (z / sigma);
            dlogstd[d] += -w * inv_b * (z * z - 1.0);
        }
        loss += -w * inv_b * logp;

        // Backprop through sigmoid head 0 and the softmax block.
        let drow = &mut dout[b * ad..(b + 1) * ad];
        drow[0] = dmean[0] * mean[0] * (1.0 - mean[0]);
        let dot: f64 = (1..ad).map(|d| dmean[d] * mean[d]).sum();
        for d in 1..ad {
            drow[d] = mean[d] * (dmean[d] - dot);
        }
    }

    let mut grads = Grads::zeros_like(&policy.net);
    policy.net.backward_batch(&fwd.cache, &dout, &mut grads, false);
    (loss, grads, dlogstd)
}

/// V objective: mean of sql_v_loss(q - V(s_aug)). Returns (loss, grads).
pub fn v_loss_batch(
    v: &Mlp,
    states_aug: &[f64],
    q_vals: &[f64],
    batch: usize,
    alpha: f64,
) -> (f64, Grads) {
    let mut cache = BatchCache::default();
    v.forward_batch(states_aug, batch, &mut cache);
    let inv_b = 1.0 / batch as f64;
    let mut loss = 0.0;
    let mut dout = vec![0.0; batch];
    for b in 0..batch {
        let x = q_vals[b] - cache.output()[b];
        loss += sql_v_loss(x, alpha) * inv_b;
        // d/dv = -d/dx
        dout[b] = -sql_v_loss_dx(x, alpha) * inv_b;
    }
    let mut grads = Grads::zeros_like(v);
    v.backward_batch(&cache, &dout, &mut grads, false);
    (loss, grads)
}

/// Q regression: mean squared error of Q(inputs) against fixed targets.
pub fn q_loss_batch(q: &Mlp, inputs: &[f64], targets: &[f64], batch: usize) -> (f64, Grads) {
    let mut cache = BatchCache::default();
    q.forward_batch(inputs, batch, &mut cache);
    let inv_b = 1.0 / batch as f64;
    let mut loss = 0.0;
    let mut dout = vec![0.0; batch];
    for b in 0..batch {
        let diff = cache.output()[b] - targets[b];
        loss += diff * diff * inv_b;
        dout[b] = 2.0 * diff * inv_b;
    }
    let mut grads = Grads::zeros_like(q);
    q.backward_batch(&cache, &dout, &mut grads, false);
    (loss, grads)
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

/// Scalar Adam state for the policy log-std vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct VecAdam {
    lr: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl VecAdam {
    fn new(n: usize, lr: f64) -> Self {
        VecAdam {
            lr,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let lr_t = self.lr * (1.0 - 0.999f64.powi(t)).sqrt() / (1.0 - 0.9f64.powi(t));
        for i in 0..params.len() {
            let g = grads[i];
            if !g.is_finite() {
                return Err(Error::NonFinite("policy log-std gradients".into()));
            }
            self.m[i] = 0.9 * self.m[i] + 0.1 * g;
            self.v[i] = 0.999 * self.v[i] + 0.001 * g * g;
            params[i] -= lr_t * self.m[i] / (self.v[i].sqrt() + 1e-8);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub v_loss: f64,
    pub q_loss: f64,
    pub pi_loss: f64,
    /// Mean policy regression weight over the batch.
    pub mean_weight: f64,
    /// Fraction of batch samples whose weight clamped to zero.
    pub clamped_frac: f64,
}

pub struct SqlTrainer {
    pub q: Mlp,
    pub v: Mlp,
    pub v_target: Mlp,
    pub policy: GaussianPolicy,
    cfg: RlSettings,
    data: TrainData,
    opt_q: AdamState,
    opt_v: AdamState,
    opt_pi: AdamState,
    opt_log_std: VecAdam,
    rng: ChaCha8Rng,
    step: usize,
}

impl SqlTrainer {
    pub fn new(data: TrainData, cfg: RlSettings, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Data("cannot train on an empty dataset".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (sd, ad, h) = (data.state_dim, data.action_dim, cfg.hidden);
        let q = Mlp::init(&[sd + ad, h, h, 1], &mut rng);
        let v = Mlp::init(&[sd, h, h, 1], &mut rng);
        let v_target = v.clone();
        let policy = GaussianPolicy::new(sd, ad - 1, h, cfg.init_log_std, &mut rng);
        let lr = cfg.learning_rate;
        Ok(SqlTrainer {
            opt_q: AdamState::new(&q, lr),
            opt_v: AdamState::new(&v, lr),
            opt_pi: AdamState::new(&policy.net, lr),
            opt_log_std: VecAdam::new(ad, lr),
            q,
            v,
            v_target,
            policy,
            cfg,
            data,
            rng,
            step: 0,
        })
    }

    pub fn data(&self) -> &TrainData {
        &self.data
    }

    /// Package the current policy for acting against `spec`.
    pub fn policy_checkpoint(&self, spec: &IntersectionSpec, config_hash: &str) -> PolicyCheckpoint {
        PolicyCheckpoint {
            policy: self.policy.clone(),
            norm: self.data.norm.clone(),
            lane_count: spec.lane_count,
            order_count: spec.order_count,
            phase_count: spec.phase_count,
            cycle_bounds_s: spec.cycle_bounds_s,
            config_hash: config_hash.to_string(),
        }
    }

    fn gather(&self, idx: &[usize]) -> Batch {
        let (sd, ad) = (self.data.state_dim, self.data.action_dim);
        let b = idx.len();
        let mut batch = Batch {
            states: Vec::with_capacity(b * sd),
            actions: Vec::with_capacity(b * ad),
            rewards: Vec::with_capacity(b),
            next_states: Vec::with_capacity(b * sd),
            terminals: Vec::with_capacity(b),
        };
        for &i in idx {
            batch
                .states
                .extend_from_slice(&self.data.states[i * sd..(i + 1) * sd]);
            batch
                .actions
                .extend_from_slice(&self.data.actions[i * ad..(i + 1) * ad]);
            batch.rewards.push(self.data.rewards[i]);
            batch
                .next_states
                .extend_from_slice(&self.data.next_states[i * sd..(i + 1) * sd]);
            batch.terminals.push(self.data.terminals[i]);
        }
        batch
    }

    /// One gradient step on V, Q and the policy, plus the target update.
    pub fn train_step(&mut self) -> Result<StepDiagnostics> {
        let b = self.cfg.batch_size.min(self.data.len());
        let n = self.data.len();
        let idx: Vec<usize> = (0..b).map(|_| self.rng.gen_range(0..n)).collect();
        let batch = self.gather(&idx);
        let (sd, ad) = (self.data.state_dim, self.data.action_dim);

        // Clean-state forwards shared by the V and policy objectives.
        let mut qa_inputs = vec![0.0; b * (sd + ad)];
        for i in 0..b {
            qa_inputs[i * (sd + ad)..i * (sd + ad) + sd]
                .copy_from_slice(&batch.states[i * sd..(i + 1) * sd]);
            qa_inputs[i * (sd + ad) + sd..(i + 1) * (sd + ad)]
                .copy_from_slice(&batch.actions[i * ad..(i + 1) * ad]);
        }
        let mut cache = BatchCache::default();
        self.q.forward_batch(&qa_inputs, b, &mut cache);
        let q_clean: Vec<f64> = cache.output().to_vec();
        self.v.forward_batch(&batch.states, b, &mut cache);
        let v_clean: Vec<f64> = cache.output().to_vec();
        self.v_target.forward_batch(&batch.next_states, b, &mut cache);
        let v_next: Vec<f64> = cache.output().to_vec();

        // V step on augmented states.
        let noise = sample_noise(&mut self.rng, b * sd, self.cfg.aug_std, self.cfg.aug_clip);
        let states_aug: Vec<f64> = batch
            .states
            .iter()
            .zip(&noise)
            .map(|(s, e)| s + e)
            .collect();
        let (v_loss, v_grads) = v_loss_batch(&self.v, &states_aug, &q_clean, b, self.cfg.alpha);

        // Q step: augmented state input, clean bootstrap target.
        let noise_q = sample_noise(&mut self.rng, b * sd, self.cfg.aug_std, self.cfg.aug_clip);
        let mut q_inputs_aug = qa_inputs.clone();
        for i in 0..b {
            for d in 0..sd {
                q_inputs_aug[i * (sd + ad) + d] += noise_q[i * sd + d];
            }
        }
        let targets: Vec<f64> = (0..b)
            .map(|i| {
                batch.rewards[i] + self.cfg.gamma * (1.0 - batch.terminals[i]) * v_next[i]
            })
            .collect();
        let (q_loss, q_grads) = q_loss_batch(&self.q, &q_inputs_aug, &targets, b);

        // Policy step: weighted regression on dataset actions, clean states.
        let weights: Vec<f64> = (0..b)
            .map(|i| sql_pi_weight(q_clean[i] - v_clean[i], self.cfg.alpha))
            .collect();
        let (pi_loss, pi_grads, logstd_grads) =
            pi_loss_batch(&self.policy, &batch.states, &batch.actions, &weights, b);

        for (name, loss) in [("v", v_loss), ("q", q_loss), ("pi", pi_loss)] {
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("{name} loss at step {}", self.step)));
            }
        }

        self.opt_v.step(&mut self.v, &v_grads)?;
        self.opt_q.step(&mut self.q, &q_grads)?;
        self.opt_pi.step(&mut self.policy.net, &pi_grads)?;
        self.opt_log_std.step(&mut self.policy.log_std, &logstd_grads)?;

        // Slow V copy for the bootstrap target.
        let rho = self.cfg.target_rate;
        for l in 0..self.v.weights.len() {
            for (t, &s) in self.v_target.weights[l].iter_mut().zip(&self.v.weights[l]) {
                *t += rho * (s - *t);
            }
            for (t, &s) in self.v_target.biases[l].iter_mut().zip(&self.v.biases[l]) {
                *t += rho * (s - *t);
            }
        }

        self.step += 1;
        let mean_weight = weights.iter().sum::<f64>() / b as f64;
        let clamped_frac = weights.iter().filter(|&&w| w == 0.0).count() as f64 / b as f64;
        Ok(StepDiagnostics {
            step: self.step,
            v_loss,
            q_loss,
            pi_loss,
            mean_weight,
            clamped_frac,
        })
    }

    /// Run the configured number of steps, recording diagnostics every
    /// `diag_every` steps (and on the final step).
    pub fn train(&mut self) -> Result<Vec<StepDiagnostics>> {
        let mut curves = Vec::new();
        for i in 0..self.cfg.steps {
            let diag = self.train_step()?;
            if (i + 1) % self.cfg.diag_every == 0 || i + 1 == self.cfg.steps {
                curves.push(diag);
            }
        }
        Ok(curves)
    }
}

struct Batch {
    states: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    next_states: Vec<f64>,
    terminals: Vec<f64>,
}

/// Behavior cloning: unweighted likelihood regression of the policy onto the
/// dataset actions. Baseline and dataset sanity check.
pub struct BcTrainer {
    pub policy: GaussianPolicy,
    cfg: RlSettings,
    data: TrainData,
    opt_pi: AdamState,
    opt_log_std: VecAdam,
    rng: ChaCha8Rng,
}

impl BcTrainer {
    pub fn new(data: TrainData, cfg: RlSettings, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Data("cannot train on an empty dataset".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = GaussianPolicy::new(
            data.state_dim,
            data.action_dim - 1,
            cfg.hidden,
            cfg.init_log_std,
            &mut rng,
        );
        Ok(BcTrainer {
            opt_pi: AdamState::new(&policy.net, cfg.learning_rate),
            opt_log_std: VecAdam::new(data.action_dim, cfg.learning_rate),
            policy,
            cfg,
            data,
            rng,
        })
    }

    /// Package the current policy for acting against `spec`.
    pub fn policy_checkpoint(&self, spec: &IntersectionSpec, config_hash: &str) -> PolicyCheckpoint {
        PolicyCheckpoint {
            policy: self.policy.clone(),
            norm: self.data.norm.clone(),
            lane_count: spec.lane_count,
            order_count: spec.order_count,
            phase_count: spec.phase_count,
            cycle_bounds_s: spec.cycle_bounds_s,
            config_hash: config_hash.to_string(),
        }
    }

    pub fn train(&mut self) -> Result<Vec<StepDiagnostics>> {
        let (sd, ad) = (self.data.state_dim, self.data.action_dim);
        let n = self.data.len();
        let mut curves = Vec::new();
        for step in 0..self.cfg.steps {
            let b = self.cfg.batch_size.min(n);
            let idx: Vec<usize> = (0..b).map(|_| self.rng.gen_range(0..n)).collect();
            let mut states = Vec::with_capacity(b * sd);
            let mut actions = Vec::with_capacity(b * ad);
            for &i in &idx {
                states.extend_from_slice(&self.data.states[i * sd..(i + 1) * sd]);
                actions.extend_from_slice(&self.data.actions[i * ad..(i + 1) * ad]);
            }
            let weights = vec![1.0; b];
            let (loss, grads, logstd_grads) =
                pi_loss_batch(&self.policy, &states, &actions, &weights, b);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("bc loss at step {step}")));
            }
            self.opt_pi.step(&mut self.policy.net, &grads)?;
            self.opt_log_std.step(&mut self.policy.log_std, &logstd_grads)?;
            if (step + 1) % self.cfg.diag_every == 0 || step + 1 == self.cfg.steps {
                curves.push(StepDiagnostics {
                    step: step + 1,
                    v_loss: 0.0,
                    q_loss: 0.0,
                    pi_loss: loss,
                    mean_weight: 1.0,
                    clamped_frac: 0.0,
                });
            }
        }
        Ok(curves)
    }
}

// ---------------------------------------------------------------------------
// Checkpoints and acting
// ---------------------------------------------------------------------------

/// Everything needed to act with a trained policy. Serialized as JSON, which
/// round-trips f64 exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub policy: GaussianPolicy,
    pub norm: NormStats,
    pub lane_count: usize,
    pub order_count: usize,
    pub phase_count: usize,
    pub cycle_bounds_s: (f64, f64),
    pub config_hash: String,
}

impl PolicyCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("bad checkpoint: {e}")))
    }

    fn check_dims(&self, spec: &IntersectionSpec) -> Result<()> {
        if self.lane_count != spec.lane_count
            || self.order_count != spec.order_count
            || self.phase_count != spec.phase_count
        {
            return Err(Error::Shape(format!(
                "checkpoint trained for L={} K={} P={}, spec has L={} K={} P={}",
                self.lane_count,
                self.order_count,
                self.phase_count,
                spec.lane_count,
                spec.order_count,
                spec.phase_count
            )));
        }
        Ok(())
    }
}

/// Greedy action: build the augmented state, run the policy mean, and
/// denormalize into a timing plan. The plan satisfies the simplex and bound
/// invariants by construction.
pub fn act(
    ckpt: &PolicyCheckpoint,
    obs: &IntervalObservation,
    spec: &IntersectionSpec,
) -> Result<TimingPlan> {
    ckpt.check_dims(spec)?;
    let raw_state = augmented_state(obs, spec)?;
    let z = ckpt.norm.normalize_state(&raw_state);
    let mean = ckpt.policy.mean_action(&z)?;
    let raw_action = ckpt.norm.denormalize_action(&mean);
    let cycle_s = raw_action[0].clamp(ckpt.cycle_bounds_s.0, ckpt.cycle_bounds_s.1);
    TimingPlan::new(cycle_s, raw_action[1..].to_vec(), ckpt.cycle_bounds_s)
}
