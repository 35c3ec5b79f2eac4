//! Clipped-surrogate policy optimization update.

use super::adam::Adam;
use crate::policy::{flatten_grads, Mlp, Policy};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    /// Environment steps per rollout batch.
    pub horizon: usize,
    /// Optimizer learning rate (both policy and value heads).
    pub stepsize: f64,
    /// Optimization passes over each batch.
    pub epochs: usize,
    pub minibatch_size: usize,
    /// Discount factor.
    pub gamma: f64,
    /// Advantage-estimation decay.
    pub lambda: f64,
    pub clip_epsilon: f64,
    /// Linearly anneal stepsize and clip toward zero over total_steps.
    pub anneal: bool,
    /// Environment steps for the whole run.
    pub total_steps: u64,
    /// Seeds trained when the CLI runs the multi-seed protocol.
    pub n_seeds: u32,
    /// Entropy bonus weight (default off).
    pub entropy_coef: f64,
    /// Internal scale applied to rewards before value fitting / advantage
    /// estimation, so the value head regresses O(1..100) targets instead of
    /// raw 1e7-scale episode sums. Reported reward curves stay unscaled;
    /// normalized advantages make the policy update invariant to it.
    pub reward_scale: f64,
    /// Exploration schedule: a per-coordinate ceiling on the policy's
    /// action standard deviation, annealed linearly from the initial
    /// sigma = 1 down to this value across the run. log_std stays a learned
    /// free parameter and may fall below the ceiling on its own; the
    /// ceiling only stops it from lingering high. Short runs need this:
    /// with sigma near 1 the sampled actions clip so often that the
    /// learned mean can settle outside the valid command range, which
    /// trains a good dithered controller whose noise-free replay is
    /// useless. None disables the ceiling.
    pub sigma_anneal_final: Option<f64>,
    /// Episodes in the final window scored by best-run selection.
    pub curve_window: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            horizon: 2048,
            stepsize: 3e-4,
            epochs: 10,
            minibatch_size: 64,
            gamma: 0.99,
            lambda: 0.95,
            clip_epsilon: 0.2,
            anneal: true,
            total_steps: 200_000,
            n_seeds: 3,
            entropy_coef: 0.0,
            reward_scale: 1e-6,
            sigma_anneal_final: Some(0.1),
            curve_window: 10,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(format!("gamma = {} must be in (0, 1]", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(format!("lambda = {} must be in [0, 1]", self.lambda));
        }
        if !(self.clip_epsilon > 0.0) {
            return Err(format!(
                "clip_epsilon = {} must be positive",
                self.clip_epsilon
            ));
        }
        if self.minibatch_size == 0 || self.minibatch_size > self.horizon {
            return Err(format!(
                "minibatch_size = {} must be in 1..=horizon ({})",
                self.minibatch_size, self.horizon
            ));
        }
        if self.horizon == 0 || self.epochs == 0 || self.total_steps == 0 {
            return Err("horizon, epochs, and total_steps must be positive".into());
        }
        if !(self.stepsize > 0.0) || !(self.reward_scale > 0.0) {
            return Err("stepsize and reward_scale must be positive".into());
        }
        if let Some(s) = self.sigma_anneal_final {
            if !(s > 0.0) {
                return Err(format!(
                    "sigma_anneal_final = {s} must be positive when set"
                ));
            }
        }
        Ok(())
    }
}

/// One rollout's worth of experience, aligned by index.
#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    /// Policy inputs (gyro-derived observations).
    pub observations: Vec<Vec<f64>>,
    /// Value-baseline inputs (privileged simulator state).
    pub critic_observations: Vec<Vec<f64>>,
    /// Raw (pre-clip) Gaussian actions.
    pub actions: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    /// Scaled rewards (reward_scale already applied).
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    /// Episode-boundary flags.
    pub dones: Vec<bool>,
    /// Value estimate of the episode's final state wherever `dones` is set
    /// (all endings here are truncations, so the target bootstraps rather
    /// than zeroing); 0.0 elsewhere.
    pub terminal_values: Vec<f64>,
    /// Value estimate for the state after the last step.
    pub last_value: f64,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// In-place normalization to zero mean and unit standard deviation.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-12);
    for a in adv.iter_mut() {
        *a = (*a - mean) / std;
    }
}

/// d/d(rho) of the per-sample surrogate min(rho*A, clip(rho, 1 +- eps)*A).
///
/// The derivative is A on the active unclipped branch and 0 once the
/// clipped branch has saturated (the sample no longer moves the objective).
pub fn surrogate_grad_wrt_ratio(ratio: f64, adv: f64, eps: f64) -> f64 {
    let clipped_out = (adv >= 0.0 && ratio > 1.0 + eps) || (adv < 0.0 && ratio < 1.0 - eps);
    if clipped_out {
        0.0
    } else {
        adv
    }
}

/// d/d(rho) of the clipped term clip(rho, 1 +- eps)*A alone: A strictly
/// inside the clip window, 0 outside. With eps = 0 the window is empty and
/// the derivative vanishes for every rho != 1.
pub fn clipped_term_grad_wrt_ratio(ratio: f64, adv: f64, eps: f64) -> f64 {
    if (ratio - 1.0).abs() < eps {
        adv
    } else {
        0.0
    }
}

/// Per-sample surrogate value.
pub fn surrogate_value(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at iteration {iteration}, epoch {epoch}, minibatch {minibatch}")]
    NonFiniteLoss {
        iteration: u64,
        epoch: usize,
        minibatch: usize,
    },
    #[error("bad training config: {0}")]
    Config(String),
    #[error("environment failure during rollout: {0}")]
    Env(#[from] crate::env::EnvError),
    #[error("no training runs supplied")]
    NoRuns,
}

/// Mean surrogate objective and its gradient (flat policy parameters) over
/// a batch slice at the current parameters. Exposed for gradient checks.
pub fn policy_batch_objective(
    policy: &Policy,
    observations: &[Vec<f64>],
    actions: &[Vec<f64>],
    old_log_probs: &[f64],
    advantages: &[f64],
    eps: f64,
) -> (f64, Vec<f64>) {
    let n = observations.len();
    let mut total = 0.0;
    let mut grad = vec![0.0; policy.param_count()];
    for k in 0..n {
        let (logp, glogp) = policy.grad_log_prob(&observations[k], &actions[k]);
        let ratio = (logp - old_log_probs[k]).exp();
        total += surrogate_value(ratio, advantages[k], eps);
        // d surrogate / d theta = (d surrogate / d rho) * rho * d logp / d theta
        let f = surrogate_grad_wrt_ratio(ratio, advantages[k], eps) * ratio;
        if f != 0.0 {
            for (g, gl) in grad.iter_mut().zip(&glogp) {
                *g += f * gl;
            }
        }
    }
    let inv = 1.0 / n as f64;
    for g in grad.iter_mut() {
        *g *= inv;
    }
    (total * inv, grad)
}

/// Diagnostics from one `ppo_update` call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    /// Mean clipped surrogate over the batch at the pre-update parameters.
    pub surrogate: f64,
    /// Mean squared value-regression error at the pre-update parameters.
    pub value_loss: f64,
    /// Fraction of samples whose ratio left the clip window during the
    /// final epoch.
    pub clip_fraction: f64,
    /// Mean (old - new) log-probability after the update, a cheap KL proxy.
    pub approx_kl: f64,
}

/// Run `epochs` passes of shuffled-minibatch updates on policy and value
/// networks. The policy reads `observations`; the value baseline reads
/// `critic_observations` (index-aligned). Advantages must already be
/// normalized; rewards/returns carry the trainer's internal scale. `lr`
/// and `eps` are the (possibly annealed) stepsize and clip radius for this
/// batch.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update(
    policy: &mut Policy,
    value: &mut Mlp,
    policy_opt: &mut Adam,
    value_opt: &mut Adam,
    observations: &[Vec<f64>],
    critic_observations: &[Vec<f64>],
    actions: &[Vec<f64>],
    old_log_probs: &[f64],
    advantages: &[f64],
    returns: &[f64],
    cfg: &PpoConfig,
    lr: f64,
    eps: f64,
    iteration: u64,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats, TrainError> {
    let n = observations.len();
    policy_opt.set_lr(lr);
    value_opt.set_lr(lr);

    // Pre-update diagnostics.
    let (surrogate, _) =
        policy_batch_objective(policy, observations, actions, old_log_probs, advantages, eps);
    let value_loss = {
        let mut acc = 0.0;
        for k in 0..n {
            let v = value.forward(&critic_observations[k])[0];
            acc += (v - returns[k]) * (v - returns[k]);
        }
        acc / n as f64
    };

    let mut indices: Vec<usize> = (0..n).collect();
    let mut clip_hits = 0usize;
    let mut clip_seen = 0usize;
    for epoch in 0..cfg.epochs {
        indices.shuffle(rng);
        let last_epoch = epoch + 1 == cfg.epochs;
        for (mb, chunk) in indices.chunks(cfg.minibatch_size).enumerate() {
            let m = chunk.len() as f64;
            let mut pgrad = vec![0.0; policy.param_count()];
            let mut vgrads = value.zero_grads();
            let mut batch_loss = 0.0;
            for &k in chunk {
                let (logp, glogp) = policy.grad_log_prob(&observations[k], &actions[k]);
                let ratio = (logp - old_log_probs[k]).exp();
                batch_loss -= surrogate_value(ratio, advantages[k], eps);
                if last_epoch {
                    clip_seen += 1;
                    if (ratio - 1.0).abs() > eps {
                        clip_hits += 1;
                    }
                }
                // Ascend the surrogate: accumulate its negative gradient.
                let f = surrogate_grad_wrt_ratio(ratio, advantages[k], eps) * ratio;
                if f != 0.0 {
                    for (g, gl) in pgrad.iter_mut().zip(&glogp) {
                        *g -= f * gl;
                    }
                }

                let trace = value.forward_trace(&critic_observations[k]);
                let v = trace.output()[0];
                batch_loss += (v - returns[k]) * (v - returns[k]);
                value.backprop(&trace, &[2.0 * (v - returns[k]) / m], &mut vgrads);
            }
            let inv = 1.0 / m;
            for g in pgrad.iter_mut() {
                *g *= inv;
            }
            // Entropy bonus: d entropy / d log_std_i = 1.
            if cfg.entropy_coef != 0.0 {
                let off = policy.mean.param_count();
                for g in pgrad[off..].iter_mut() {
                    *g -= cfg.entropy_coef;
                }
            }
            let vgrad = flatten_grads(&vgrads);
            if !batch_loss.is_finite()
                || pgrad.iter().any(|g| !g.is_finite())
                || vgrad.iter().any(|g| !g.is_finite())
            {
                return Err(TrainError::NonFiniteLoss {
                    iteration,
                    epoch,
                    minibatch: mb,
                });
            }

            let mut pflat = policy.flat_params();
            policy_opt.step(&mut pflat, &pgrad);
            policy.set_flat_params(&pflat);

            let mut vflat = value.flat_params();
            value_opt.step(&mut vflat, &vgrad);
            value.set_flat_params(&vflat);
        }
    }

    let approx_kl = {
        let mut acc = 0.0;
        for k in 0..n {
            acc += old_log_probs[k] - policy.log_prob(&observations[k], &actions[k]);
        }
        acc / n as f64
    };

    Ok(UpdateStats {
        surrogate,
        value_loss,
        clip_fraction: if clip_seen == 0 {
            0.0
        } else {
            clip_hits as f64 / clip_seen as f64
        },
        approx_kl,
    })
}
