//! Training environment for the rate-control task.
//!
//! An episode follows a scripted sequence of angular-velocity setpoints
//! (random commands alternating with idle periods), observes the tracking
//! error through a noisy gyro, and scores each step with a shaped reward
//! that penalizes error magnitude and rewards low, smooth rotor output.

use crate::dynamics::{self, AirframeModel, BodyState, DynamicsError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// What the policy sees each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationMode {
    /// Tracking error and its first difference (6 inputs).
    ErrorDelta,
    /// Tracking error and normalized rotor speeds (7 inputs).
    ErrorMotor,
}

/// How setpoints are scripted over an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    /// Random commands alternating with idle periods for the whole episode.
    Continuous,
    /// A single random command issued at the start and held.
    Episodic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    /// Setpoints are drawn uniformly from +-this bound, deg/s, per axis.
    pub setpoint_bound: f64,
    /// Command segment duration range, s.
    pub command_duration: [f64; 2],
    /// Idle segment duration range, s.
    pub idle_duration: [f64; 2],
    /// Episode length, s.
    pub episode_time: f64,
    /// Gyro measurement noise, deg/s standard deviation.
    pub gyro_noise_sigma: f64,
    /// Weight of the low-output reward term.
    pub alpha: f64,
    /// Weight of the smooth-output reward term.
    pub beta: f64,
    /// Output-change budget: squared per-rotor change (scaled units) below
    /// which smoothness is rewarded.
    pub delta_y_max: f64,
    /// Scale applied to per-rotor output changes before squaring, so the
    /// budget operates in milli-units of the [0, 1] command range.
    pub delta_y_scale: f64,
    /// Smoothness reward is gated off while any |error| is at or above this
    /// band, deg/s.
    pub error_band: f64,
    /// Controllable-envelope bound, deg/s: the episode truncates when any
    /// body-rate magnitude exceeds this. Keeps training rollouts inside the
    /// regime the task ever asks for, so runaway spins never reach the
    /// divergence guard and their extreme rewards never enter a batch.
    pub envelope: f64,
    pub observation_mode: ObservationMode,
    pub task_mode: TaskMode,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            setpoint_bound: 400.0,
            command_duration: [0.1, 1.0],
            idle_duration: [0.2, 1.0],
            episode_time: 30.0,
            gyro_noise_sigma: 5.0,
            alpha: 300.0,
            beta: 0.5,
            delta_y_max: 100.0 * 100.0,
            delta_y_scale: 1000.0,
            error_band: 25.0,
            envelope: 2000.0,
            observation_mode: ObservationMode::ErrorDelta,
            task_mode: TaskMode::Continuous,
        }
    }
}

impl EnvConfig {
    /// Policy input width for this configuration.
    pub fn observation_dim(&self) -> usize {
        match self.observation_mode {
            ObservationMode::ErrorDelta => 6,
            ObservationMode::ErrorMotor => 7,
        }
    }
}

/// Width of [`Env::critic_features`]: setpoint (3), body rates (3), rotor
/// speeds (4), rotor integrator terms (4), previous commands (4).
pub const CRITIC_FEATURE_DIM: usize = 18;

/// One stretch of constant setpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub setpoint: [f64; 3],
    pub duration: f64,
}

/// A full episode's setpoint schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScript {
    pub segments: Vec<Segment>,
    pub total_time: f64,
    pub seed: u64,
}

impl TaskScript {
    /// Setpoint active at time `t`. Segment `i` covers
    /// `[start_i, start_i + duration_i)`; times beyond the script are idle.
    pub fn setpoint_at(&self, t: f64) -> [f64; 3] {
        let mut start = 0.0;
        for seg in &self.segments {
            if t < start + seg.duration {
                return seg.setpoint;
            }
            start += seg.duration;
        }
        [0.0; 3]
    }

    /// Build a script directly from segments (used for hand-written
    /// maneuvers; `seed` is zero to mark it as scripted).
    pub fn from_segments(segments: Vec<Segment>) -> Self {
        let total_time = segments.iter().map(|s| s.duration).sum();
        Self {
            segments,
            total_time,
            seed: 0,
        }
    }
}

/// Draw an episode's setpoint schedule.
///
/// Continuous mode alternates a uniformly random command (held for a random
/// command duration) with an idle hold, starting with a command, until the
/// episode is filled; the last segment is truncated to fit. Episodic mode is
/// a single command held for the whole episode.
pub fn sample_task(seed: u64, cfg: &EnvConfig) -> TaskScript {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw_setpoint = |rng: &mut ChaCha8Rng| {
        let b = cfg.setpoint_bound;
        [
            rng.gen_range(-b..=b),
            rng.gen_range(-b..=b),
            rng.gen_range(-b..=b),
        ]
    };

    let mut segments = Vec::new();
    match cfg.task_mode {
        TaskMode::Episodic => {
            segments.push(Segment {
                setpoint: draw_setpoint(&mut rng),
                duration: cfg.episode_time,
            });
        }
        TaskMode::Continuous => {
            let mut elapsed = 0.0;
            let mut idle = false;
            while elapsed < cfg.episode_time {
                let (setpoint, range) = if idle {
                    ([0.0; 3], cfg.idle_duration)
                } else {
                    (draw_setpoint(&mut rng), cfg.command_duration)
                };
                let mut duration = rng.gen_range(range[0]..=range[1]);
                if elapsed + duration > cfg.episode_time {
                    duration = cfg.episode_time - elapsed;
                }
                segments.push(Segment { setpoint, duration });
                elapsed += duration;
                idle = !idle;
            }
        }
    }
    TaskScript {
        segments,
        total_time: cfg.episode_time,
        seed,
    }
}

/// Error state fed to the policy: tracking error and its first difference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub e: [f64; 3],
    pub delta_e: [f64; 3],
}

impl Observation {
    pub fn flatten(&self) -> [f64; 6] {
        [
            self.e[0], self.e[1], self.e[2], self.delta_e[0], self.delta_e[1], self.delta_e[2],
        ]
    }
}

/// Form the observation from the previous step's error, the current
/// setpoint, and the (noisy) rate measurement. At an episode's start the
/// previous error is zero by definition.
pub fn observe(prev_error: &[f64; 3], setpoint: &[f64; 3], measured: &[f64; 3]) -> Observation {
    let mut e = [0.0; 3];
    let mut delta_e = [0.0; 3];
    for axis in 0..3 {
        e[axis] = setpoint[axis] - measured[axis];
        delta_e[axis] = e[axis] - prev_error[axis];
    }
    Observation { e, delta_e }
}

/// Additive white measurement noise on each gyro axis. A zero sigma is an
/// exact pass-through that draws nothing from the generator.
pub fn inject_gyro_noise(omega: &[f64; 3], sigma: f64, rng: &mut ChaCha8Rng) -> [f64; 3] {
    if sigma == 0.0 {
        return *omega;
    }
    let normal = Normal::new(0.0, sigma).expect("noise sigma must be finite and non-negative");
    [
        omega[0] + normal.sample(rng),
        omega[1] + normal.sample(rng),
        omega[2] + normal.sample(rng),
    ]
}

/// Per-step reward, split into its three terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    /// Negative squared tracking error.
    pub r_e: f64,
    /// Bonus for keeping the mean rotor output low.
    pub r_y: f64,
    /// Bonus for small step-to-step output changes, gated to in-band
    /// tracking.
    pub r_delta: f64,
    pub total: f64,
}

/// `-(e_roll^2 + e_pitch^2 + e_yaw^2)`.
pub fn reward_e(e: &[f64; 3]) -> f64 {
    -(e[0] * e[0] + e[1] * e[1] + e[2] * e[2])
}

/// `alpha * (1 - mean(y))`: full marks for silent rotors, zero at full
/// collective output.
pub fn reward_y(y: &[f64; 4], alpha: f64) -> f64 {
    let mean = (y[0] + y[1] + y[2] + y[3]) / 4.0;
    alpha * (1.0 - mean)
}

/// Per-rotor smoothness bonus `beta * sum_i max(0, budget - dy_i^2)`, with
/// `dy` in scaled (milli) units. Gated to zero whenever any axis error sits
/// at or outside the error band, so it only shapes behavior near the
/// setpoint.
pub fn reward_delta(y: &[f64; 4], y_prev: &[f64; 4], e: &[f64; 3], cfg: &EnvConfig) -> f64 {
    if e.iter().any(|v| v.abs() >= cfg.error_band) {
        return 0.0;
    }
    let mut sum = 0.0;
    for i in 0..4 {
        let dy = (y[i] - y_prev[i]) * cfg.delta_y_scale;
        sum += (cfg.delta_y_max - dy * dy).max(0.0);
    }
    cfg.beta * sum
}

impl RewardBreakdown {
    pub fn compute(e: &[f64; 3], y: &[f64; 4], y_prev: &[f64; 4], cfg: &EnvConfig) -> Self {
        let r_e = reward_e(e);
        let r_y = reward_y(y, cfg.alpha);
        let r_delta = reward_delta(y, y_prev, e, cfg);
        Self {
            r_e,
            r_y,
            r_delta,
            total: r_e + r_y + r_delta,
        }
    }
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("episode is over; construct a new environment")]
    EpisodeOver,
    #[error("non-finite action y[{index}] = {value}")]
    NonFiniteAction { index: usize, value: f64 },
    #[error("bad environment config: {0}")]
    Config(String),
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    /// Policy input vector (length per `EnvConfig::observation_dim`).
    pub obs: Vec<f64>,
    /// The error-space observation behind it.
    pub observation: Observation,
    pub reward: RewardBreakdown,
    pub done: bool,
    /// True when the episode ended on the dynamics divergence guard.
    pub blown_up: bool,
    /// True when the episode truncated on the controllable-envelope bound.
    pub out_of_envelope: bool,
}

/// The rate-control environment: dynamics plus task script plus reward.
#[derive(Debug, Clone)]
pub struct Env {
    model: AirframeModel,
    cfg: EnvConfig,
    task: TaskScript,
    state: BodyState,
    prev_error: [f64; 3],
    prev_y: [f64; 4],
    step_index: usize,
    n_steps: usize,
    done: bool,
    blown_up: bool,
    out_of_envelope: bool,
    noise_rng: ChaCha8Rng,
}

impl Env {
    pub fn new(
        model: AirframeModel,
        cfg: EnvConfig,
        task: TaskScript,
        noise_seed: u64,
    ) -> Result<Self, EnvError> {
        if !(cfg.gyro_noise_sigma >= 0.0) {
            return Err(EnvError::Config(format!(
                "gyro_noise_sigma = {} must be non-negative",
                cfg.gyro_noise_sigma
            )));
        }
        if cfg.episode_time <= 0.0 || model.dt <= 0.0 {
            return Err(EnvError::Config(
                "episode_time and dt must be positive".into(),
            ));
        }
        if !(cfg.envelope > 0.0) {
            return Err(EnvError::Config(format!(
                "envelope = {} must be positive",
                cfg.envelope
            )));
        }
        let n_steps = (cfg.episode_time / model.dt).round() as usize;
        Ok(Self {
            model,
            cfg,
            task,
            state: BodyState::at_rest(),
            prev_error: [0.0; 3],
            prev_y: [0.0; 4],
            step_index: 0,
            n_steps,
            done: false,
            blown_up: false,
            out_of_envelope: false,
            noise_rng: ChaCha8Rng::seed_from_u64(noise_seed),
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn model(&self) -> &AirframeModel {
        &self.model
    }

    pub fn task(&self) -> &TaskScript {
        &self.task
    }

    pub fn state(&self) -> &BodyState {
        &self.state
    }

    pub fn done(&self) -> bool {
        self.done
    }

    pub fn blown_up(&self) -> bool {
        self.blown_up
    }

    pub fn out_of_envelope(&self) -> bool {
        self.out_of_envelope
    }

    /// Setpoint the controller is currently asked to track.
    pub fn setpoint(&self) -> [f64; 3] {
        self.task.setpoint_at(self.state.t)
    }

    /// The observation for the current state, consumed before the first
    /// action. Advances the noise stream.
    pub fn initial_observation(&mut self) -> Vec<f64> {
        let sp = self.task.setpoint_at(self.state.t);
        let measured =
            inject_gyro_noise(&self.state.omega, self.cfg.gyro_noise_sigma, &mut self.noise_rng);
        let observation = observe(&self.prev_error, &sp, &measured);
        self.prev_error = observation.e;
        self.obs_vec(&observation)
    }

    fn obs_vec(&self, observation: &Observation) -> Vec<f64> {
        match self.cfg.observation_mode {
            ObservationMode::ErrorDelta => observation.flatten().to_vec(),
            ObservationMode::ErrorMotor => {
                let mut v = Vec::with_capacity(7);
                v.extend_from_slice(&observation.e);
                for w in self.state.rotor_speed {
                    v.push(w / self.model.omega_max);
                }
                v
            }
        }
    }

    /// Noise-free description of the full simulator state, for value
    /// estimation during training. The deployed controller never sees
    /// these: the policy runs on the gyro observation alone, but the value
    /// baseline may use privileged simulator state so that an action's
    /// delayed effect (rotors take tens of milliseconds to spin up) is
    /// visible to the advantage estimator immediately through the rotor
    /// command chain instead of ~100 steps later through the body rates.
    /// All features are pre-scaled to O(1).
    pub fn critic_features(&self) -> Vec<f64> {
        let sp = self.task.setpoint_at(self.state.t);
        let mut v = Vec::with_capacity(CRITIC_FEATURE_DIM);
        for axis in 0..3 {
            v.push(sp[axis] / 500.0);
        }
        for axis in 0..3 {
            v.push(self.state.omega[axis] / 500.0);
        }
        for i in 0..4 {
            v.push(self.state.rotor_speed[i] / self.model.omega_max);
        }
        // The integrator's contribution to the rotor command, in the same
        // normalized units as the speed itself.
        for i in 0..4 {
            v.push(self.model.rotor_ki * self.state.rotor_integral[i] / self.model.omega_max);
        }
        for i in 0..4 {
            v.push(self.prev_y[i]);
        }
        v
    }

    /// Apply one rotor command vector and advance the simulation a step.
    ///
    /// Actions are clipped into `[0, 1]`. The reward scores the post-step
    /// tracking error together with the commanded outputs; the episode ends
    /// at the scripted time, when a body rate leaves the controllable
    /// envelope, or when the dynamics diverge.
    pub fn step(&mut self, y_raw: &[f64; 4]) -> Result<EnvStep, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        let mut y = [0.0; 4];
        for i in 0..4 {
            if !y_raw[i].is_finite() {
                return Err(EnvError::NonFiniteAction {
                    index: i,
                    value: y_raw[i],
                });
            }
            y[i] = y_raw[i].clamp(0.0, 1.0);
        }

        match dynamics::step(&self.state, &y, &self.model) {
            Ok(next) => {
                self.state = next;
                if self.state.omega.iter().any(|w| w.abs() > self.cfg.envelope) {
                    self.out_of_envelope = true;
                    self.done = true;
                }
            }
            Err(DynamicsError::Diverged { state, .. }) => {
                self.state = *state;
                self.blown_up = true;
                self.done = true;
            }
            Err(DynamicsError::NonFiniteCommand { rotor, .. }) => {
                // Unreachable after the clip above, but keep the typed error.
                return Err(EnvError::NonFiniteAction {
                    index: rotor,
                    value: y[rotor],
                });
            }
        }

        self.step_index += 1;
        if self.step_index >= self.n_steps {
            self.done = true;
        }

        let sp = self.task.setpoint_at(self.state.t);
        let measured =
            inject_gyro_noise(&self.state.omega, self.cfg.gyro_noise_sigma, &mut self.noise_rng);
        let observation = observe(&self.prev_error, &sp, &measured);
        let reward = RewardBreakdown::compute(&observation.e, &y, &self.prev_y, &self.cfg);

        self.prev_error = observation.e;
        self.prev_y = y;

        Ok(EnvStep {
            obs: self.obs_vec(&observation),
            observation,
            reward,
            done: self.done,
            blown_up: self.blown_up,
            out_of_envelope: self.out_of_envelope,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn error_reward_is_negative_squared_magnitude() {
        assert_eq!(reward_e(&[60.0, 0.0, 0.0]), -3600.0);
        assert_eq!(reward_e(&[1.0, -2.0, 3.0]), -14.0);
        assert_eq!(reward_e(&[0.0; 3]), 0.0);
    }

    #[test]
    fn output_reward_pays_for_low_mean_output() {
        assert_eq!(reward_y(&[0.25; 4], 300.0), 225.0);
        assert_eq!(reward_y(&[1.0; 4], 300.0), 0.0);
        assert_eq!(reward_y(&[0.0; 4], 300.0), 300.0);
    }

    #[test]
    fn frozen_outputs_in_band_earn_the_full_smoothness_budget() {
        let cfg = EnvConfig::default();
        let y = [0.4, 0.3, 0.2, 0.1];
        let r = reward_delta(&y, &y, &[1.0, -2.0, 0.5], &cfg);
        assert_eq!(r, 0.5 * 4.0 * 10_000.0);
        assert_eq!(r, 20_000.0);
    }

    #[test]
    fn smoothness_reward_is_gated_off_outside_the_error_band() {
        let cfg = EnvConfig::default();
        let y = [0.4; 4];
        assert_eq!(reward_delta(&y, &y, &[25.0, 0.0, 0.0], &cfg), 0.0);
        assert_eq!(reward_delta(&y, &y, &[0.0, -30.0, 0.0], &cfg), 0.0);
        assert!(reward_delta(&y, &y, &[24.9, 0.0, 0.0], &cfg) > 0.0);
    }

    #[test]
    fn large_output_jumps_earn_nothing_for_that_rotor() {
        let cfg = EnvConfig::default();
        // 0.2 of the command range = 200 milli-units; squared, over budget.
        let prev = [0.4; 4];
        let next = [0.6, 0.4, 0.4, 0.4];
        let r = reward_delta(&next, &prev, &[0.0; 3], &cfg);
        assert_eq!(r, 0.5 * 3.0 * 10_000.0);
    }

    #[test]
    fn small_output_changes_earn_most_of_the_budget() {
        let cfg = EnvConfig::default();
        let prev = [0.40; 4];
        let next = [0.41; 4]; // 10 milli-units -> dy^2 = 100
        let r = reward_delta(&next, &prev, &[0.0; 3], &cfg);
        assert_relative_eq!(r, 0.5 * 4.0 * (10_000.0 - 100.0), max_relative = 1e-12);
    }

    #[test]
    fn breakdown_total_is_the_exact_sum_of_terms() {
        let cfg = EnvConfig::default();
        let r = RewardBreakdown::compute(&[3.0, -4.0, 5.0], &[0.2, 0.3, 0.1, 0.4], &[0.2; 4], &cfg);
        assert_eq!(r.total, r.r_e + r.r_y + r.r_delta);
        assert_eq!(r.r_e, -50.0);
    }

    #[test]
    fn observation_stacks_error_and_first_difference() {
        let obs = observe(&[10.0, 0.0, -5.0], &[100.0, 0.0, 0.0], &[40.0, 0.0, 0.0]);
        assert_eq!(obs.e, [60.0, 0.0, 0.0]);
        assert_eq!(obs.delta_e, [50.0, 0.0, 5.0]);
        assert_eq!(obs.flatten(), [60.0, 0.0, 0.0, 50.0, 0.0, 5.0]);
    }

    #[test]
    fn first_observation_treats_previous_error_as_zero() {
        let obs = observe(&[0.0; 3], &[100.0, -50.0, 0.0], &[0.0; 3]);
        assert_eq!(obs.e, obs.delta_e);
    }

    #[test]
    fn task_sampling_is_deterministic_per_seed() {
        let cfg = EnvConfig::default();
        assert_eq!(sample_task(7, &cfg), sample_task(7, &cfg));
        assert_ne!(sample_task(7, &cfg), sample_task(8, &cfg));
    }

    #[test]
    fn task_alternates_commands_with_idle_holds() {
        let cfg = EnvConfig::default();
        let script = sample_task(3, &cfg);
        assert!(script.segments.len() >= 4);
        for (i, seg) in script.segments.iter().enumerate() {
            if i % 2 == 1 {
                assert_eq!(seg.setpoint, [0.0; 3], "segment {i} should be idle");
            } else {
                assert!(
                    seg.setpoint.iter().any(|v| *v != 0.0),
                    "segment {i} should be a command"
                );
            }
            for v in seg.setpoint {
                assert!(v.abs() <= cfg.setpoint_bound);
            }
        }
    }

    #[test]
    fn task_durations_stay_in_range_and_fill_the_episode() {
        let cfg = EnvConfig::default();
        let script = sample_task(11, &cfg);
        let n = script.segments.len();
        let mut total = 0.0;
        for (i, seg) in script.segments.iter().enumerate() {
            let range = if i % 2 == 1 {
                cfg.idle_duration
            } else {
                cfg.command_duration
            };
            if i + 1 < n {
                assert!(
                    seg.duration >= range[0] && seg.duration <= range[1],
                    "segment {i} duration {}",
                    seg.duration
                );
            } else {
                // The last segment is truncated to fit the episode.
                assert!(seg.duration <= range[1]);
            }
            total += seg.duration;
        }
        assert_relative_eq!(total, cfg.episode_time, epsilon = 1e-9);
    }

    #[test]
    fn episodic_mode_holds_a_single_command() {
        let mut cfg = EnvConfig::default();
        cfg.task_mode = TaskMode::Episodic;
        let script = sample_task(5, &cfg);
        assert_eq!(script.segments.len(), 1);
        assert_eq!(script.segments[0].duration, cfg.episode_time);
        assert!(script.segments[0].setpoint.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn setpoint_lookup_walks_the_segments() {
        let script = TaskScript::from_segments(vec![
            Segment {
                setpoint: [100.0, 0.0, 0.0],
                duration: 1.0,
            },
            Segment {
                setpoint: [0.0; 3],
                duration: 0.5,
            },
            Segment {
                setpoint: [0.0, -50.0, 0.0],
                duration: 1.0,
            },
        ]);
        assert_eq!(script.setpoint_at(0.0), [100.0, 0.0, 0.0]);
        assert_eq!(script.setpoint_at(0.999), [100.0, 0.0, 0.0]);
        assert_eq!(script.setpoint_at(1.0), [0.0; 3]);
        assert_eq!(script.setpoint_at(1.7), [0.0, -50.0, 0.0]);
        assert_eq!(script.setpoint_at(99.0), [0.0; 3]);
        assert_eq!(script.total_time, 2.5);
    }

    #[test]
    fn gyro_noise_statistics_match_the_configured_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let sigma = 5.0;
        let n = 1_000_000usize;
        let mut sums = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut cross = [0.0f64; 3]; // xy, yz, xz
        for _ in 0..n {
            let s = inject_gyro_noise(&[0.0; 3], sigma, &mut rng);
            for a in 0..3 {
                sums[a] += s[a];
                sq[a] += s[a] * s[a];
            }
            cross[0] += s[0] * s[1];
            cross[1] += s[1] * s[2];
            cross[2] += s[0] * s[2];
        }
        for a in 0..3 {
            let mean = sums[a] / n as f64;
            let std = (sq[a] / n as f64 - mean * mean).sqrt();
            assert!(mean.abs() < 0.02, "axis {a} mean {mean}");
            assert!((std - sigma).abs() / sigma < 0.01, "axis {a} std {std}");
        }
        for (i, c) in cross.iter().enumerate() {
            let corr = c / n as f64 / (sigma * sigma);
            assert!(corr.abs() < 0.01, "cross correlation {i} = {corr}");
        }
    }

    #[test]
    fn zero_sigma_noise_is_an_exact_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let before = rng.clone();
        let omega = [123.456, -7.8, 0.0];
        assert_eq!(inject_gyro_noise(&omega, 0.0, &mut rng), omega);
        // The generator is untouched.
        assert_eq!(rng, before);
    }

    #[test]
    fn env_trace_is_bit_reproducible_per_seed() {
        let cfg = EnvConfig::default();
        let model = AirframeModel::default();
        let run = || {
            let task = sample_task(21, &cfg);
            let mut env = Env::new(model.clone(), cfg.clone(), task, 77).unwrap();
            let _ = env.initial_observation();
            let mut trace = Vec::new();
            for k in 0..500u64 {
                let y = [
                    0.3 + 0.1 * ((k % 7) as f64 / 7.0),
                    0.4,
                    0.35,
                    0.45 - 0.1 * ((k % 5) as f64 / 5.0),
                ];
                let step = env.step(&y).unwrap();
                trace.push((step.obs.clone(), step.reward.total));
            }
            trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn actions_are_clipped_into_the_command_range() {
        let cfg = EnvConfig {
            gyro_noise_sigma: 0.0,
            ..EnvConfig::default()
        };
        let model = AirframeModel::default();
        let task = sample_task(1, &cfg);
        let mut a = Env::new(model.clone(), cfg.clone(), task.clone(), 0).unwrap();
        let mut b = Env::new(model, cfg, task, 0).unwrap();
        let sa = a.step(&[1.5, -0.3, 0.5, 2.0]).unwrap();
        let sb = b.step(&[1.0, 0.0, 0.5, 1.0]).unwrap();
        assert_eq!(sa.obs, sb.obs);
        assert_eq!(sa.reward, sb.reward);
    }

    #[test]
    fn non_finite_actions_are_rejected() {
        let cfg = EnvConfig::default();
        let model = AirframeModel::default();
        let task = sample_task(1, &cfg);
        let mut env = Env::new(model, cfg, task, 0).unwrap();
        assert!(matches!(
            env.step(&[0.1, f64::INFINITY, 0.1, 0.1]),
            Err(EnvError::NonFiniteAction { index: 1, .. })
        ));
    }

    #[test]
    fn episode_ends_at_the_scripted_time() {
        let cfg = EnvConfig {
            episode_time: 0.05,
            gyro_noise_sigma: 0.0,
            ..EnvConfig::default()
        };
        let model = AirframeModel::default();
        let task = sample_task(2, &cfg);
        let mut env = Env::new(model, cfg, task, 0).unwrap();
        let mut steps = 0;
        loop {
            let s = env.step(&[0.2; 4]).unwrap();
            steps += 1;
            if s.done {
                assert!(!s.blown_up);
                break;
            }
        }
        assert_eq!(steps, 50);
        assert!(matches!(env.step(&[0.2; 4]), Err(EnvError::EpisodeOver)));
    }

    #[test]
    fn divergence_ends_the_episode_with_a_blow_up_flag() {
        let cfg = EnvConfig {
            gyro_noise_sigma: 0.0,
            // Out of the way so the dynamics guard is what trips.
            envelope: f64::INFINITY,
            ..EnvConfig::default()
        };
        let mut model = AirframeModel::default();
        model.k_thrust = 1.0e-3; // violent airframe
        let task = sample_task(2, &cfg);
        let mut env = Env::new(model, cfg, task, 0).unwrap();
        let mut saw_blow_up = false;
        for _ in 0..5000 {
            let s = env.step(&[0.0, 0.0, 1.0, 1.0]).unwrap();
            if s.done {
                saw_blow_up = s.blown_up;
                break;
            }
        }
        assert!(saw_blow_up, "expected the divergence guard to end the episode");
    }

    #[test]
    fn leaving_the_envelope_truncates_the_episode() {
        let cfg = EnvConfig {
            gyro_noise_sigma: 0.0,
            ..EnvConfig::default()
        };
        let model = AirframeModel::default();
        let task = sample_task(2, &cfg);
        let mut env = Env::new(model, cfg.clone(), task, 0).unwrap();
        let mut ended = None;
        for _ in 0..30_000 {
            // Full differential roll command, held: the rate runs away.
            let s = env.step(&[0.0, 0.0, 1.0, 1.0]).unwrap();
            if s.done {
                ended = Some(s);
                break;
            }
        }
        let s = ended.expect("the rate should leave the envelope well before the time limit");
        assert!(s.out_of_envelope);
        assert!(!s.blown_up, "the envelope must trip before the divergence guard");
        let peak = env.state().omega.iter().fold(0.0f64, |m, w| m.max(w.abs()));
        assert!(peak > cfg.envelope);
        // One step past the bound at most: nowhere near the guard.
        assert!(peak < cfg.envelope + 100.0);
        assert!(matches!(env.step(&[0.0; 4]), Err(EnvError::EpisodeOver)));
    }

    #[test]
    fn motor_observation_mode_appends_normalized_rotor_speeds() {
        let cfg = EnvConfig {
            observation_mode: ObservationMode::ErrorMotor,
            gyro_noise_sigma: 0.0,
            ..EnvConfig::default()
        };
        assert_eq!(cfg.observation_dim(), 7);
        let model = AirframeModel::default();
        let task = sample_task(3, &cfg);
        let mut env = Env::new(model.clone(), cfg, task, 0).unwrap();
        let s = env.step(&[0.5; 4]).unwrap();
        assert_eq!(s.obs.len(), 7);
        for i in 0..4 {
            assert_eq!(s.obs[3 + i], env.state().rotor_speed[i] / model.omega_max);
            assert!(s.obs[3 + i] >= 0.0 && s.obs[3 + i] <= 1.0);
        }
    }
}
