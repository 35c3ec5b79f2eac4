//! Training loop: rollout collection over the rate-control environment,
//! advantage estimation, clipped-surrogate updates, and the multi-seed
//! best-run selection protocol.

pub mod adam;
pub mod gae;
pub mod ppo;

pub use adam::Adam;
pub use gae::{brute_force_gae, compute_gae, GaeResult};
pub use ppo::{
    clipped_term_grad_wrt_ratio, normalize_advantages, policy_batch_objective,
    surrogate_grad_wrt_ratio, surrogate_value, ppo_update, PpoConfig, RolloutBatch, TrainError,
    UpdateStats,
};

use crate::dynamics::AirframeModel;
use crate::env::{sample_task, Env, EnvConfig};
use crate::policy::{
    init_policy, init_value, Checkpoint, CheckpointMetadata, Mlp, Policy,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// One completed (or blown-up) episode in the reward curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    /// Sum of raw (unscaled) per-step rewards.
    pub cumulative_reward: f64,
    pub steps: u64,
    pub blown_up: bool,
    /// Episode truncated on the controllable-envelope bound.
    pub out_of_envelope: bool,
}

/// Per-iteration training diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationDiagnostics {
    pub iteration: u64,
    pub steps_collected: u64,
    /// Mean raw per-step reward in the batch.
    pub mean_step_reward: f64,
    pub surrogate: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub stepsize: f64,
    pub clip_epsilon: f64,
}

/// Everything a single seeded training run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub seed: u64,
    pub checkpoint: Checkpoint,
    pub curve: Vec<EpisodeRecord>,
    pub diagnostics: Vec<IterationDiagnostics>,
}

/// Stable fingerprint of the reward-shaping configuration, stored in
/// checkpoint metadata so a policy can be traced to the reward it was
/// trained under.
pub fn reward_config_hash(cfg: &EnvConfig) -> String {
    let json = serde_json::to_string(cfg).expect("env config serializes");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    hex::encode(hasher.finalize())
}

struct Rollout {
    batch: RolloutBatch,
    episodes: Vec<EpisodeRecord>,
    raw_reward_sum: f64,
}

/// Rollout bookkeeping that survives across batches: the live environment,
/// its current observation, and the in-progress episode accumulators.
struct RolloutState {
    env: Env,
    obs: Vec<f64>,
    episode_reward: f64,
    episode_steps: u64,
    episodes_done: u64,
    episode_rng: ChaCha8Rng,
}

impl RolloutState {
    fn new_episode(
        model: &AirframeModel,
        cfg: &EnvConfig,
        episode_rng: &mut ChaCha8Rng,
    ) -> Result<(Env, Vec<f64>), TrainError> {
        let task_seed = episode_rng.gen();
        let noise_seed = episode_rng.gen();
        let task = sample_task(task_seed, cfg);
        let mut env = Env::new(model.clone(), cfg.clone(), task, noise_seed)
            .map_err(|e| TrainError::Config(e.to_string()))?;
        let obs = env.initial_observation();
        Ok((env, obs))
    }
}

fn collect_rollout(
    state: &mut RolloutState,
    policy: &Policy,
    value: &Mlp,
    model: &AirframeModel,
    env_cfg: &EnvConfig,
    ppo_cfg: &PpoConfig,
    action_rng: &mut ChaCha8Rng,
) -> Result<Rollout, TrainError> {
    let t_max = ppo_cfg.horizon;
    let mut batch = RolloutBatch::default();
    let mut episodes = Vec::new();
    let mut raw_reward_sum = 0.0;
    for _ in 0..t_max {
        let sample = policy.sample_action(&state.obs, action_rng);
        let critic_obs = state.env.critic_features();
        let v = value.forward(&critic_obs)[0];
        let clipped: [f64; 4] = [
            sample.clipped[0],
            sample.clipped[1],
            sample.clipped[2],
            sample.clipped[3],
        ];
        let step = state.env.step(&clipped)?;

        batch.observations.push(std::mem::take(&mut state.obs));
        batch.critic_observations.push(critic_obs);
        batch.actions.push(sample.raw);
        batch.log_probs.push(sample.log_prob);
        batch.rewards.push(step.reward.total * ppo_cfg.reward_scale);
        batch.values.push(v);
        batch.dones.push(step.done);
        // Every episode ending here is a truncation (time limit, envelope
        // exit, divergence guard): the airframe still exists afterwards, so
        // the boundary target bootstraps from the final state's value
        // instead of pretending the return is zero.
        batch.terminal_values.push(if step.done {
            value.forward(&state.env.critic_features())[0]
        } else {
            0.0
        });

        raw_reward_sum += step.reward.total;
        state.episode_reward += step.reward.total;
        state.episode_steps += 1;

        if step.done {
            episodes.push(EpisodeRecord {
                episode: state.episodes_done,
                cumulative_reward: state.episode_reward,
                steps: state.episode_steps,
                blown_up: step.blown_up,
                out_of_envelope: step.out_of_envelope,
            });
            state.episodes_done += 1;
            state.episode_reward = 0.0;
            state.episode_steps = 0;
            let (env, obs) = RolloutState::new_episode(model, env_cfg, &mut state.episode_rng)?;
            state.env = env;
            state.obs = obs;
        } else {
            state.obs = step.obs;
        }
    }
    // Bootstrap from the state after the last step; zeroed by the done flag
    // in the advantage recursion when that step closed an episode.
    batch.last_value = value.forward(&state.env.critic_features())[0];
    Ok(Rollout {
        batch,
        episodes,
        raw_reward_sum,
    })
}

/// Train one seed to `total_steps`, returning the checkpoint (with value
/// head), the per-episode reward curve, and per-iteration diagnostics.
/// Fully deterministic per seed; single-threaded.
pub fn train(
    seed: u64,
    model: &AirframeModel,
    env_cfg: &EnvConfig,
    ppo_cfg: &PpoConfig,
) -> Result<TrainRun, TrainError> {
    ppo_cfg.validate().map_err(TrainError::Config)?;

    // All randomness flows from one master stream in a fixed draw order.
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let policy_seed: u64 = master.gen();
    let value_seed: u64 = master.gen();
    let mut action_rng = ChaCha8Rng::seed_from_u64(master.gen());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(master.gen());
    let mut episode_rng = ChaCha8Rng::seed_from_u64(master.gen());

    let obs_dim = env_cfg.observation_dim();
    let mut policy = init_policy(obs_dim, 4, policy_seed);
    let mut value = init_value(crate::env::CRITIC_FEATURE_DIM, value_seed);
    let mut policy_opt = Adam::new(policy.param_count(), ppo_cfg.stepsize);
    let mut value_opt = Adam::new(value.param_count(), ppo_cfg.stepsize);

    let (env, obs) = RolloutState::new_episode(model, env_cfg, &mut episode_rng)?;
    let mut state = RolloutState {
        env,
        obs,
        episode_reward: 0.0,
        episode_steps: 0,
        episodes_done: 0,
        episode_rng,
    };

    let mut curve = Vec::new();
    let mut diagnostics = Vec::new();
    let mut steps_done: u64 = 0;
    let mut iteration: u64 = 0;
    while steps_done < ppo_cfg.total_steps {
        let progress = steps_done as f64 / ppo_cfg.total_steps as f64;
        let (lr, eps) = if ppo_cfg.anneal {
            (
                ppo_cfg.stepsize * (1.0 - progress),
                ppo_cfg.clip_epsilon * (1.0 - progress),
            )
        } else {
            (ppo_cfg.stepsize, ppo_cfg.clip_epsilon)
        };
        // Exploration ceiling: clamp log_std under a bound that anneals
        // linearly from the initial sigma = 1 to the configured final
        // sigma. Applied before collection so the recorded log-probs and
        // the update epochs see one consistent distribution.
        if let Some(final_sigma) = ppo_cfg.sigma_anneal_final {
            let ceiling = progress * final_sigma.ln();
            for ls in policy.log_std.iter_mut() {
                *ls = ls.min(ceiling);
            }
        }

        let rollout = collect_rollout(
            &mut state,
            &policy,
            &value,
            model,
            env_cfg,
            ppo_cfg,
            &mut action_rng,
        )?;
        curve.extend(rollout.episodes);
        let batch = rollout.batch;
        steps_done += batch.len() as u64;

        let gae = compute_gae(
            &batch.rewards,
            &batch.values,
            &batch.dones,
            &batch.terminal_values,
            batch.last_value,
            ppo_cfg.gamma,
            ppo_cfg.lambda,
        );
        let mut advantages = gae.advantages;
        normalize_advantages(&mut advantages);

        let stats = ppo_update(
            &mut policy,
            &mut value,
            &mut policy_opt,
            &mut value_opt,
            &batch.observations,
            &batch.critic_observations,
            &batch.actions,
            &batch.log_probs,
            &advantages,
            &gae.returns,
            ppo_cfg,
            lr,
            eps,
            iteration,
            &mut shuffle_rng,
        )?;
        diagnostics.push(IterationDiagnostics {
            iteration,
            steps_collected: steps_done,
            mean_step_reward: rollout.raw_reward_sum / batch.len() as f64,
            surrogate: stats.surrogate,
            value_loss: stats.value_loss,
            clip_fraction: stats.clip_fraction,
            approx_kl: stats.approx_kl,
            stepsize: lr,
            clip_epsilon: eps,
        });
        iteration += 1;
    }

    let metadata = CheckpointMetadata {
        seed,
        training_steps: steps_done,
        reward_config_hash: reward_config_hash(env_cfg),
    };
    Ok(TrainRun {
        seed,
        checkpoint: Checkpoint::from_parts(&policy, Some(&value), metadata),
        curve,
        diagnostics,
    })
}

/// Train every seed independently. With the `parallel` feature the seeds
/// run on worker threads; each seed's run is single-threaded and
/// deterministic either way, so the feature changes wall time, not output.
pub fn train_multi(
    seeds: &[u64],
    model: &AirframeModel,
    env_cfg: &EnvConfig,
    ppo_cfg: &PpoConfig,
) -> Result<Vec<TrainRun>, TrainError> {
    #[cfg(feature = "parallel")]
    {
        seeds
            .par_iter()
            .map(|&s| train(s, model, env_cfg, ppo_cfg))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        seeds
            .iter()
            .map(|&s| train(s, model, env_cfg, ppo_cfg))
            .collect()
    }
}

/// Mean cumulative reward over a run's final `window` episodes (all of
/// them when fewer exist).
pub fn final_window_mean(run: &TrainRun, window: usize) -> f64 {
    if run.curve.is_empty() {
        return f64::NEG_INFINITY;
    }
    let w = window.max(1).min(run.curve.len());
    let tail = &run.curve[run.curve.len() - w..];
    tail.iter().map(|e| e.cumulative_reward).sum::<f64>() / w as f64
}

/// Pick the run with the best final-window mean cumulative reward; ties go
/// to the lowest seed, so the result is independent of input order.
pub fn select_best<'a>(runs: &'a [TrainRun], window: usize) -> Result<&'a TrainRun, TrainError> {
    if runs.is_empty() {
        return Err(TrainError::NoRuns);
    }
    let mut best = &runs[0];
    let mut best_score = final_window_mean(best, window);
    for run in &runs[1..] {
        let score = final_window_mean(run, window);
        if score > best_score || (score == best_score && run.seed < best.seed) {
            best = run;
            best_score = score;
        }
    }
    Ok(best)
}
