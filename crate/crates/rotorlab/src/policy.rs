//! Feed-forward policy with a Gaussian action head.
//!
//! The controller is a small dense network mapping the observation to four
//! rotor command means, with a state-independent log standard deviation per
//! rotor for exploration. Everything here is plain `f64` with hand-written
//! forward and backward passes, so gradients can be checked against finite
//! differences and the weights can later be frozen into a standalone
//! inference artifact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Linear,
}

impl Activation {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the activation output.
    fn grad_from_output(&self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Linear => 1.0,
        }
    }
}

/// One dense layer: `out = act(W x + b)` with `W` stored row-major
/// (one row per output unit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn rows(&self) -> usize {
        self.w.len()
    }

    pub fn cols(&self) -> usize {
        self.w.first().map_or(0, Vec::len)
    }

    pub fn param_count(&self) -> usize {
        self.rows() * self.cols() + self.b.len()
    }
}

/// A stack of dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

/// Cached intermediate activations from a forward pass, consumed by
/// `backprop`.
#[derive(Debug, Clone)]
pub struct Trace {
    input: Vec<f64>,
    /// Post-activation output of each layer.
    post: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.post.last().expect("trace from a non-empty network")
    }
}

/// Per-layer gradient accumulator matching a `DenseLayer`'s shape.
#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub dw: Vec<Vec<f64>>,
    pub db: Vec<f64>,
}

impl Mlp {
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for layer in &self.layers {
            let mut next = Vec::with_capacity(layer.rows());
            for (row, &bias) in layer.w.iter().zip(&layer.b) {
                let mut z = bias;
                for (wij, xj) in row.iter().zip(&cur) {
                    z += wij * xj;
                }
                next.push(layer.activation.apply(z));
            }
            cur = next;
        }
        cur
    }

    pub fn forward_trace(&self, x: &[f64]) -> Trace {
        let mut post = Vec::with_capacity(self.layers.len());
        let mut cur = x.to_vec();
        for layer in &self.layers {
            let mut next = Vec::with_capacity(layer.rows());
            for (row, &bias) in layer.w.iter().zip(&layer.b) {
                let mut z = bias;
                for (wij, xj) in row.iter().zip(&cur) {
                    z += wij * xj;
                }
                next.push(layer.activation.apply(z));
            }
            post.push(next.clone());
            cur = next;
        }
        Trace {
            input: x.to_vec(),
            post,
        }
    }

    /// Fresh zeroed gradient buffers shaped like this network.
    pub fn zero_grads(&self) -> Vec<LayerGrad> {
        self.layers
            .iter()
            .map(|l| LayerGrad {
                dw: vec![vec![0.0; l.cols()]; l.rows()],
                db: vec![0.0; l.rows()],
            })
            .collect()
    }

    /// Accumulate parameter gradients for a scalar loss whose gradient with
    /// respect to the network output is `cotangent`. Returns the loss
    /// gradient with respect to the input.
    pub fn backprop(&self, trace: &Trace, cotangent: &[f64], grads: &mut [LayerGrad]) -> Vec<f64> {
        assert_eq!(grads.len(), self.layers.len());
        let mut d_out = cotangent.to_vec();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let layer_in = if idx == 0 {
                &trace.input
            } else {
                &trace.post[idx - 1]
            };
            let layer_out = &trace.post[idx];
            let mut d_pre = vec![0.0; layer.rows()];
            for i in 0..layer.rows() {
                d_pre[i] = d_out[i] * layer.activation.grad_from_output(layer_out[i]);
            }
            let g = &mut grads[idx];
            let mut d_in = vec![0.0; layer.cols()];
            for i in 0..layer.rows() {
                g.db[i] += d_pre[i];
                for j in 0..layer.cols() {
                    g.dw[i][j] += d_pre[i] * layer_in[j];
                    d_in[j] += d_pre[i] * layer.w[i][j];
                }
            }
            d_out = d_in;
        }
        d_out
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, DenseLayer::cols)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::rows)
    }

    /// All parameters flattened layer by layer, weights row-major then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            for row in &layer.w {
                out.extend_from_slice(row);
            }
            out.extend_from_slice(&layer.b);
        }
        out
    }

    /// Inverse of `flat_params`; `flat` must match exactly.
    pub fn set_flat_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "parameter count mismatch");
        let mut k = 0;
        for layer in &mut self.layers {
            for row in &mut layer.w {
                for v in row.iter_mut() {
                    *v = flat[k];
                    k += 1;
                }
            }
            for v in layer.b.iter_mut() {
                *v = flat[k];
                k += 1;
            }
        }
    }
}

/// Flatten accumulated gradients in the same order as `flat_params`.
pub fn flatten_grads(grads: &[LayerGrad]) -> Vec<f64> {
    let mut out = Vec::new();
    for g in grads {
        for row in &g.dw {
            out.extend_from_slice(row);
        }
        out.extend_from_slice(&g.db);
    }
    out
}

/// Gram-Schmidt orthonormalization of `n` random unit vectors in `dim`
/// dimensions (`n <= dim`).
fn orthonormal_set(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    assert!(n <= dim);
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(n);
    while vecs.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for u in &vecs {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= dot * ui;
            }
        }
        let norm: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue; // essentially impossible, retry the draw
        }
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        vecs.push(v);
    }
    vecs
}

/// Orthogonal-style initialization of an `rows x cols` weight matrix scaled
/// by `gain`. Whichever side is smaller gets the orthonormal set; the other
/// side indexes into it.
fn orthogonal_matrix(rows: usize, cols: usize, gain: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    if rows <= cols {
        orthonormal_set(rows, cols, rng)
            .into_iter()
            .map(|r| r.into_iter().map(|v| v * gain).collect())
            .collect()
    } else {
        let cols_set = orthonormal_set(cols, rows, rng);
        (0..rows)
            .map(|i| (0..cols).map(|j| cols_set[j][i] * gain).collect())
            .collect()
    }
}

fn dense(rows: usize, cols: usize, gain: f64, act: Activation, rng: &mut ChaCha8Rng) -> DenseLayer {
    DenseLayer {
        w: orthogonal_matrix(rows, cols, gain, rng),
        b: vec![0.0; rows],
        activation: act,
    }
}

/// `dense` with an additional per-column scale folded into the weights,
/// used on first layers whose input features live on different unit scales.
fn dense_scaled(
    rows: usize,
    cols: usize,
    gain: f64,
    col_scales: &[f64],
    act: Activation,
    rng: &mut ChaCha8Rng,
) -> DenseLayer {
    let mut layer = dense(rows, cols, gain, act, rng);
    for row in &mut layer.w {
        for (w, s) in row.iter_mut().zip(col_scales) {
            *w *= s;
        }
    }
    layer
}

/// Observations are raw angular rates in deg/s, so the first layer folds
/// unit scaling into its weights; a standard-gain first layer would pin
/// every tanh unit at +-1 and kill the gradient. The scale is per feature:
/// error channels span hundreds of deg/s, but the error's one-step
/// difference spans only tens (body-rate change per millisecond is bounded
/// by the airframe's angular acceleration), and a uniform error-sized scale
/// would crush the derivative channel to invisibility — leaving the policy
/// unable to see, and hence damp, the rate of change it must control.
/// Rotor-speed channels (error_motor mode) arrive pre-normalized to [0, 1].
const ERROR_INPUT_SCALE: f64 = 1.0 / 500.0;
const DELTA_INPUT_SCALE: f64 = 1.0 / 20.0;
const HIDDEN_GAIN: f64 = std::f64::consts::SQRT_2;
const POLICY_OUTPUT_GAIN: f64 = 0.01;

/// Per-column first-layer input scales for an observation of `obs_dim`
/// features: three error channels, then either three error-difference
/// channels (error_delta mode, 6 wide) or four normalized rotor speeds
/// (error_motor mode, 7 wide).
fn first_layer_scales(obs_dim: usize) -> Vec<f64> {
    (0..obs_dim)
        .map(|j| {
            if j < 3 {
                ERROR_INPUT_SCALE
            } else if obs_dim == 6 {
                DELTA_INPUT_SCALE
            } else {
                1.0
            }
        })
        .collect()
}

/// Initial exploration spread of the action head, in command units
/// (log 1 = 0: unit sigma).
const INITIAL_LOG_STD: f64 = 0.0;

/// Hidden layer widths shared by the policy and value networks.
pub const HIDDEN_WIDTHS: [usize; 2] = [32, 32];

/// Build a policy mean network `obs_dim -> 32 -> 32 -> act_dim` (tanh
/// hidden layers, affine output) plus per-action log standard deviations.
/// The mean is unbounded; the command range is enforced by clipping at the
/// environment boundary, not by a saturating head whose gradient would die
/// at the rails.
pub fn init_policy(obs_dim: usize, act_dim: usize, seed: u64) -> Policy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scales = first_layer_scales(obs_dim);
    let mean = Mlp {
        layers: vec![
            dense_scaled(
                HIDDEN_WIDTHS[0],
                obs_dim,
                HIDDEN_GAIN,
                &scales,
                Activation::Tanh,
                &mut rng,
            ),
            dense(
                HIDDEN_WIDTHS[1],
                HIDDEN_WIDTHS[0],
                HIDDEN_GAIN,
                Activation::Tanh,
                &mut rng,
            ),
            dense(
                act_dim,
                HIDDEN_WIDTHS[1],
                POLICY_OUTPUT_GAIN,
                Activation::Linear,
                &mut rng,
            ),
        ],
    };
    Policy {
        obs_dim,
        act_dim,
        mean,
        log_std: vec![INITIAL_LOG_STD; act_dim],
    }
}

/// Hidden widths of the value baseline. Wider than the policy: the value
/// head regresses returns from the full simulator state and its fit
/// quality directly bounds the advantage noise.
pub const VALUE_HIDDEN_WIDTHS: [usize; 2] = [64, 64];

/// Build a value network `in_dim -> 64 -> 64 -> 1` (tanh hidden, linear
/// output). Inputs are expected pre-normalized to O(1) (see
/// `Env::critic_features`), so the first layer uses the standard gain
/// rather than the policy's unit-folding scale.
pub fn init_value(in_dim: usize, seed: u64) -> Mlp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mlp {
        layers: vec![
            dense(
                VALUE_HIDDEN_WIDTHS[0],
                in_dim,
                HIDDEN_GAIN,
                Activation::Tanh,
                &mut rng,
            ),
            dense(
                VALUE_HIDDEN_WIDTHS[1],
                VALUE_HIDDEN_WIDTHS[0],
                HIDDEN_GAIN,
                Activation::Tanh,
                &mut rng,
            ),
            dense(1, VALUE_HIDDEN_WIDTHS[1], 1.0, Activation::Linear, &mut rng),
        ],
    }
}

/// The stochastic rotor-command policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub mean: Mlp,
    pub log_std: Vec<f64>,
}

/// One action draw: the raw Gaussian sample (used for likelihoods), the
/// clipped command actually sent to the rotors, and the sample's log
/// density.
#[derive(Debug, Clone)]
pub struct ActionSample {
    pub raw: Vec<f64>,
    pub clipped: Vec<f64>,
    pub log_prob: f64,
    pub mean: Vec<f64>,
}

impl Policy {
    /// Mean parameters plus log_std, in `flat_params` order.
    pub fn param_count(&self) -> usize {
        self.mean.param_count() + self.log_std.len()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut p = self.mean.flat_params();
        p.extend_from_slice(&self.log_std);
        p
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let n = self.mean.param_count();
        self.mean.set_flat_params(&flat[..n]);
        self.log_std.copy_from_slice(&flat[n..]);
    }

    /// Draw a stochastic action. The log density is that of the raw,
    /// unclipped sample.
    pub fn sample_action(&self, obs: &[f64], rng: &mut ChaCha8Rng) -> ActionSample {
        let mean = self.mean.forward(obs);
        let mut raw = Vec::with_capacity(self.act_dim);
        for (i, &m) in mean.iter().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            raw.push(m + self.log_std[i].exp() * z);
        }
        let log_prob = log_prob_of(&mean, &self.log_std, &raw);
        let clipped = raw.iter().map(|a| a.clamp(0.0, 1.0)).collect();
        ActionSample {
            raw,
            clipped,
            log_prob,
            mean,
        }
    }

    /// Log density of a raw action under the current parameters.
    pub fn log_prob(&self, obs: &[f64], raw_action: &[f64]) -> f64 {
        let mean = self.mean.forward(obs);
        log_prob_of(&mean, &self.log_std, raw_action)
    }

    /// Log density together with its gradient with respect to every policy
    /// parameter (flat order: mean network, then log_std).
    pub fn grad_log_prob(&self, obs: &[f64], raw_action: &[f64]) -> (f64, Vec<f64>) {
        let trace = self.mean.forward_trace(obs);
        let mean = trace.output();
        let logp = log_prob_of(mean, &self.log_std, raw_action);

        // d logp / d mean_i = z_i / sigma_i, chained through the network.
        let mut cot = vec![0.0; self.act_dim];
        let mut d_log_std = vec![0.0; self.act_dim];
        for i in 0..self.act_dim {
            let sigma = self.log_std[i].exp();
            let z = (raw_action[i] - mean[i]) / sigma;
            cot[i] = z / sigma;
            d_log_std[i] = z * z - 1.0;
        }
        let mut grads = self.mean.zero_grads();
        self.mean.backprop(&trace, &cot, &mut grads);
        let mut flat = flatten_grads(&grads);
        flat.extend_from_slice(&d_log_std);
        (logp, flat)
    }

    /// Differential entropy of the Gaussian head (state independent).
    pub fn entropy(&self) -> f64 {
        self.log_std
            .iter()
            .map(|ls| ls + 0.5 * (1.0 + (2.0 * PI).ln()))
            .sum()
    }

    /// Deployment action: the clipped mean, no sampling.
    pub fn act_deterministic(&self, obs: &[f64]) -> Vec<f64> {
        self.mean
            .forward(obs)
            .into_iter()
            .map(|m| m.clamp(0.0, 1.0))
            .collect()
    }
}

fn log_prob_of(mean: &[f64], log_std: &[f64], raw: &[f64]) -> f64 {
    let mut lp = 0.0;
    for i in 0..mean.len() {
        let sigma = log_std[i].exp();
        let z = (raw[i] - mean[i]) / sigma;
        lp += -0.5 * z * z - log_std[i] - 0.5 * (2.0 * PI).ln();
    }
    lp
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("failed to read checkpoint {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint {path} is not valid JSON: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Provenance stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub seed: u64,
    pub training_steps: u64,
    pub reward_config_hash: String,
}

/// On-disk policy snapshot. The value network rides along during training
/// and is dropped when the policy is frozen for deployment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub layers: Vec<DenseLayer>,
    pub log_std: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_layers: Option<Vec<DenseLayer>>,
    pub metadata: CheckpointMetadata,
}

impl Checkpoint {
    pub fn from_parts(policy: &Policy, value: Option<&Mlp>, metadata: CheckpointMetadata) -> Self {
        Self {
            obs_dim: policy.obs_dim,
            act_dim: policy.act_dim,
            layers: policy.mean.layers.clone(),
            log_std: policy.log_std.clone(),
            value_layers: value.map(|v| v.layers.clone()),
            metadata,
        }
    }

    /// Rebuild the policy, checking the layer chain is well-formed.
    pub fn policy(&self) -> Result<Policy, CheckpointError> {
        validate_chain(&self.layers, self.obs_dim, self.act_dim, "policy")?;
        if self.log_std.len() != self.act_dim {
            return Err(CheckpointError::Malformed(format!(
                "log_std has {} entries for {} actions",
                self.log_std.len(),
                self.act_dim
            )));
        }
        if let Some(v) = &self.value_layers {
            // The value baseline's input is independent of the policy
            // observation (it may read privileged simulator state), so the
            // chain is validated against its own first-layer width.
            let value_in = v.first().map(|l| l.cols()).unwrap_or(0);
            validate_chain(v, value_in, 1, "value")?;
        }
        Ok(Policy {
            obs_dim: self.obs_dim,
            act_dim: self.act_dim,
            mean: Mlp {
                layers: self.layers.clone(),
            },
            log_std: self.log_std.clone(),
        })
    }

    pub fn value(&self) -> Option<Mlp> {
        self.value_layers.as_ref().map(|l| Mlp { layers: l.clone() })
    }
}

fn validate_chain(
    layers: &[DenseLayer],
    in_dim: usize,
    out_dim: usize,
    what: &str,
) -> Result<(), CheckpointError> {
    if layers.is_empty() {
        return Err(CheckpointError::Malformed(format!(
            "{what} network has no layers"
        )));
    }
    let mut cur = in_dim;
    for (i, layer) in layers.iter().enumerate() {
        if layer.w.len() != layer.b.len() {
            return Err(CheckpointError::Malformed(format!(
                "{what} layer {i}: {} weight rows vs {} biases",
                layer.w.len(),
                layer.b.len()
            )));
        }
        for (r, row) in layer.w.iter().enumerate() {
            if row.len() != cur {
                return Err(CheckpointError::Malformed(format!(
                    "{what} layer {i} row {r}: expected {cur} inputs, found {}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(CheckpointError::Malformed(format!(
                    "{what} layer {i} row {r} contains a non-finite weight"
                )));
            }
        }
        if layer.b.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::Malformed(format!(
                "{what} layer {i} contains a non-finite bias"
            )));
        }
        cur = layer.w.len();
    }
    if cur != out_dim {
        return Err(CheckpointError::Malformed(format!(
            "{what} network ends with {cur} outputs, expected {out_dim}"
        )));
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let json = serde_json::to_string_pretty(ckpt).map_err(|source| CheckpointError::Parse {
        path: path.display().to_string(),
        source,
    })?;
    std::fs::write(path, json).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let ckpt: Checkpoint =
        serde_json::from_str(&text).map_err(|source| CheckpointError::Parse {
            path: path.display().to_string(),
            source,
        })?;
    // Surface structural problems at load time, not deep inside a run.
    ckpt.policy()?;
    Ok(ckpt)
}
