//! Minimal fully-connected network substrate: rectified-linear hidden
//! layers, identity output, exact reverse-mode gradients, and a
//! bias-corrected adaptive-moment optimizer. Just enough to train the value
//! functions and the policy; no general autodiff graph.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fully connected network. `weights[l]` is `sizes[l+1] x sizes[l]`,
/// row-major, so each output row is contiguous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Mlp {
    /// Uniform fan-in initialization: U(-1/sqrt(n_in), 1/sqrt(n_in)).
    pub fn init(sizes: &[usize], rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..sizes.len() - 1 {
            let bound = 1.0 / (sizes[l] as f64).sqrt();
            weights.push(
                (0..sizes[l + 1] * sizes[l])
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect(),
            );
            biases.push((0..sizes[l + 1]).map(|_| rng.gen_range(-bound..bound)).collect());
        }
        Mlp {
            sizes: sizes.to_vec(),
            weights,
            biases,
        }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        Mlp {
            sizes: sizes.to_vec(),
            weights: (0..sizes.len() - 1)
                .map(|l| vec![0.0; sizes[l + 1] * sizes[l]])
                .collect(),
            biases: (0..sizes.len() - 1).map(|l| vec![0.0; sizes[l + 1]]).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn layer_count(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} features, network expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        let mut cache = BatchCache::default();
        self.forward_batch(input, 1, &mut cache);
        Ok(cache.output().to_vec())
    }

    /// Batched forward pass; `input` is row-major `batch x input_dim`.
    /// Activations are retained in `cache` for the backward pass.
    pub fn forward_batch(&self, input: &[f64], batch: usize, cache: &mut BatchCache) {
        assert_eq!(input.len(), batch * self.input_dim(), "input shape mismatch");
        cache.resize(&self.sizes, batch);
        cache.acts[0].copy_from_slice(input);
        for l in 0..self.layer_count() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.weights[l];
            let bias = &self.biases[l];
            let last = l + 1 == self.layer_count();
            let (src, dst) = cache.acts.split_at_mut(l + 1);
            let src = &src[l];
            let dst = &mut dst[0];
            for b in 0..batch {
                let row = &src[b * n_in..(b + 1) * n_in];
                let out = &mut dst[b * n_out..(b + 1) * n_out];
                for o in 0..n_out {
                    let wrow = &w[o * n_in..(o + 1) * n_in];
                    let mut acc = bias[o];
                    for i in 0..n_in {
                        acc += wrow[i] * row[i];
                    }
                    out[o] = if last { acc } else { acc.max(0.0) };
                }
            }
        }
    }

    /// Reverse-mode gradients. `dout` is the loss gradient at the output
    /// (row-major `batch x output_dim`); gradients accumulate into `grads`.
    /// Returns the loss gradient at the input when `want_dinput` is set.
    pub fn backward_batch(
        &self,
        cache: &BatchCache,
        dout: &[f64],
        grads: &mut Grads,
        want_dinput: bool,
    ) -> Option<Vec<f64>> {
        let batch = cache.batch;
        assert_eq!(dout.len(), batch * self.output_dim(), "dout shape mismatch");
        let mut delta = dout.to_vec();
        for l in (0..self.layer_count()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let acts_in = &cache.acts[l];
            let dw = &mut grads.weights[l];
            let db = &mut grads.biases[l];
            for b in 0..batch {
                let drow = &delta[b * n_out..(b + 1) * n_out];
                let arow = &acts_in[b * n_in..(b + 1) * n_in];
                for o in 0..n_out {
                    let d = drow[o];
                    if d == 0.0 {
                        continue;
                    }
                    db[o] += d;
                    let wrow = &mut dw[o * n_in..(o + 1) * n_in];
                    for i in 0..n_in {
                        wrow[i] += d * arow[i];
                    }
                }
            }
            if l == 0 && !want_dinput {
                return None;
            }
            // Propagate to the previous layer and gate through the
            // rectifier (the stored activation is post-rectifier).
            let mut dprev = vec![0.0; batch * n_in];
            let w = &self.weights[l];
            for b in 0..batch {
                let drow = &delta[b * n_out..(b + 1) * n_out];
                let prow = &mut dprev[b * n_in..(b + 1) * n_in];
                for o in 0..n_out {
                    let d = drow[o];
                    if d == 0.0 {
                        continue;
                    }
                    let wrow = &w[o * n_in..(o + 1) * n_in];
                    for i in 0..n_in {
                        prow[i] += d * wrow[i];
                    }
                }
            }
            if l > 0 {
                let arow = &cache.acts[l];
                for (p, &a) in dprev.iter_mut().zip(arow.iter()) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = dprev;
        }
        want_dinput.then_some(delta)
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        (0..self.layer_count())
            .map(|l| self.weights[l].len() + self.biases[l].len())
            .sum()
    }

    pub fn param(&self, mut idx: usize) -> f64 {
        for l in 0..self.layer_count() {
            if idx < self.weights[l].len() {
                return self.weights[l][idx];
            }
            idx -= self.weights[l].len();
            if idx < self.biases[l].len() {
                return self.biases[l][idx];
            }
            idx -= self.biases[l].len();
        }
        panic!("parameter index out of range");
    }

    pub fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        for l in 0..self.layer_count() {
            if idx < self.weights[l].len() {
                return &mut self.weights[l][idx];
            }
            idx -= self.weights[l].len();
            if idx < self.biases[l].len() {
                return &mut self.biases[l][idx];
            }
            idx -= self.biases[l].len();
        }
        panic!("parameter index out of range");
    }
}

/// Activation storage for one batched forward pass.
#[derive(Debug, Clone, Default)]
pub struct BatchCache {
    batch: usize,
    acts: Vec<Vec<f64>>,
}

impl BatchCache {
    fn resize(&mut self, sizes: &[usize], batch: usize) {
        self.batch = batch;
        self.acts.resize(sizes.len(), Vec::new());
        for (a, &n) in self.acts.iter_mut().zip(sizes) {
            a.resize(batch * n, 0.0);
        }
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("forward pass before output access")
    }
}

/// Parameter gradients, same shapes as the network.
#[derive(Debug, Clone)]
pub struct Grads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Grads {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn clear(&mut self) {
        for w in &mut self.weights {
            w.iter_mut().for_each(|v| *v = 0.0);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn param(&self, mut idx: usize) -> f64 {
        for l in 0..self.weights.len() {
            if idx < self.weights[l].len() {
                return self.weights[l][idx];
            }
            idx -= self.weights[l].len();
            if idx < self.biases[l].len() {
                return self.biases[l][idx];
            }
            idx -= self.biases[l].len();
        }
        panic!("gradient index out of range");
    }

    pub fn scale(&mut self, c: f64) {
        for w in &mut self.weights {
            w.iter_mut().for_each(|v| *v *= c);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|v| *v *= c);
        }
    }
}

/// Adaptive-moment optimizer state for one network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m_w: Vec<Vec<f64>>,
    v_w: Vec<Vec<f64>>,
    m_b: Vec<Vec<f64>>,
    v_b: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m_w: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            v_w: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            m_b: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            v_b: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    /// One bias-corrected update. Errors on non-finite gradients, naming the
    /// offending block.
    pub fn step(&mut self, net: &mut Mlp, grads: &Grads) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let lr_t = self.lr * (1.0 - self.beta2.powi(t)).sqrt() / (1.0 - self.beta1.powi(t));
        for l in 0..net.weights.len() {
            update_block(
                &mut net.weights[l],
                &grads.weights[l],
                &mut self.m_w[l],
                &mut self.v_w[l],
                lr_t,
                self.beta1,
                self.beta2,
                self.eps,
            )
            .map_err(|_| Error::NonFinite(format!("layer {l} weight gradients")))?;
            update_block(
                &mut net.biases[l],
                &grads.biases[l],
                &mut self.m_b[l],
                &mut self.v_b[l],
                lr_t,
                self.beta1,
                self.beta2,
                self.eps,
            )
            .map_err(|_| Error::NonFinite(format!("layer {l} bias gradients")))?;
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn update_block(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr_t: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> std::result::Result<(), ()> {
    for i in 0..params.len() {
        let g = grads[i];
        if !g.is_finite() {
            return Err(());
        }
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        params[i] -= lr_t * m[i] / (v[i].sqrt() + eps);
    }
    Ok(())
}
