//! Flight-log replay, tracking-error metrics, controller comparison, and
//! the single-evaluation timing benchmark.
//!
//! Replay drives the same environment the trainer uses, so observations are
//! built by one code path everywhere; the controller under test only ever
//! sees what it would see in training or deployment. The neural controller
//! is evaluated deterministically (clipped mean) and its outputs pass
//! through the deployment throttle mixer; the PID baseline runs through the
//! classical motor mixer. Replays default to zero stick throttle, which
//! makes the neural mixer the identity and matches the training regime;
//! comparisons default to mid-stick so the PID fights from its symmetric
//! operating point.

use crate::control::{mix_throttle, pid_step, PidGains, PidState};
use crate::dynamics::AirframeModel;
use crate::env::{sample_task, Env, EnvConfig, ObservationMode, Segment, TaskScript};
use crate::policy::Policy;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metrics require at least one sample")]
    Empty,
    #[error("controller expects a {controller}-dimensional observation, environment provides {env}")]
    DimensionMismatch { controller: usize, env: usize },
    #[error("replay diverged at t = {t:.3} s: {detail}")]
    Diverged { t: f64, detail: String },
    #[error("invalid replay settings: {0}")]
    Config(String),
    #[error("flight log line {line}: {detail}")]
    BadLog { line: usize, detail: String },
}

/// Tracking-error metrics for one axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisMetrics {
    pub mae: f64,
    pub mse: f64,
    pub iae: f64,
    pub ise: f64,
    pub itae: f64,
    pub itse: f64,
}

/// Per-axis metrics plus their arithmetic mean across axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Roll, pitch, yaw.
    pub axes: [AxisMetrics; 3],
    pub average: AxisMetrics,
    pub samples: usize,
}

fn axis_metrics(e: &[f64], t: &[f64]) -> AxisMetrics {
    let n = e.len() as f64;
    let iae: f64 = e.iter().map(|v| v.abs()).sum();
    let ise: f64 = e.iter().map(|v| v * v).sum();
    let itae: f64 = e.iter().zip(t).map(|(v, tk)| tk * v.abs()).sum();
    let itse: f64 = e.iter().zip(t).map(|(v, tk)| tk * v * v).sum();
    AxisMetrics {
        mae: iae / n,
        mse: ise / n,
        iae,
        ise,
        itae,
        itse,
    }
}

/// Compute the six tracking metrics per axis and their average.
///
/// `t` holds seconds from log start; the integral metrics are plain sums
/// over samples (no step-width factor), so `IAE = n * MAE` and
/// `ISE = n * MSE` hold identically.
pub fn compute_metrics(errors: &[[f64; 3]], t: &[f64]) -> Result<MetricsReport, EvalError> {
    if errors.is_empty() || errors.len() != t.len() {
        return Err(EvalError::Empty);
    }
    let per_axis = |axis: usize| {
        let e: Vec<f64> = errors.iter().map(|row| row[axis]).collect();
        axis_metrics(&e, t)
    };
    let axes = [per_axis(0), per_axis(1), per_axis(2)];
    let avg = |f: fn(&AxisMetrics) -> f64| (f(&axes[0]) + f(&axes[1]) + f(&axes[2])) / 3.0;
    let average = AxisMetrics {
        mae: avg(|m| m.mae),
        mse: avg(|m| m.mse),
        iae: avg(|m| m.iae),
        ise: avg(|m| m.ise),
        itae: avg(|m| m.itae),
        itse: avg(|m| m.itse),
    };
    Ok(MetricsReport {
        axes,
        average,
        samples: errors.len(),
    })
}

/// One control-loop tick of a replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlightLogRecord {
    /// Seconds from log start.
    pub t: f64,
    pub setpoint: [f64; 3],
    pub gyro: [f64; 3],
    /// Controller outputs before throttle is folded in.
    pub y: [f64; 4],
    /// Final actuator commands.
    pub u: [f64; 4],
    pub throttle: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlightLog {
    pub records: Vec<FlightLogRecord>,
}

pub const FLIGHT_LOG_HEADER: &str = "t,sp_r,sp_p,sp_y,gy_r,gy_p,gy_y,y0,y1,y2,y3,u0,u1,u2,u3,thr";

impl FlightLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(FLIGHT_LOG_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.t,
                r.setpoint[0],
                r.setpoint[1],
                r.setpoint[2],
                r.gyro[0],
                r.gyro[1],
                r.gyro[2],
                r.y[0],
                r.y[1],
                r.y[2],
                r.y[3],
                r.u[0],
                r.u[1],
                r.u[2],
                r.u[3],
                r.throttle
            );
        }
        s
    }

    /// Tracking errors `setpoint - gyro` per record.
    pub fn errors(&self) -> Vec<[f64; 3]> {
        self.records
            .iter()
            .map(|r| {
                [
                    r.setpoint[0] - r.gyro[0],
                    r.setpoint[1] - r.gyro[1],
                    r.setpoint[2] - r.gyro[2],
                ]
            })
            .collect()
    }

    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.t).collect()
    }
}

/// Parse the setpoint track of a flight-log CSV back into a task script,
/// collapsing consecutive equal setpoints into segments. Accepts any CSV
/// whose first four columns are `t,sp_r,sp_p,sp_y`; extra columns (a full
/// flight log) are ignored.
pub fn setpoints_from_csv(text: &str) -> Result<TaskScript, EvalError> {
    let mut rows: Vec<(f64, [f64; 3])> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 && line.starts_with('t') {
            continue; // header
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        let mut field = |name: &str| -> Result<f64, EvalError> {
            cols.next()
                .ok_or_else(|| EvalError::BadLog {
                    line: i + 1,
                    detail: format!("missing column {name}"),
                })?
                .trim()
                .parse()
                .map_err(|e| EvalError::BadLog {
                    line: i + 1,
                    detail: format!("column {name}: {e}"),
                })
        };
        let t = field("t")?;
        let sp = [field("sp_r")?, field("sp_p")?, field("sp_y")?];
        if let Some(&(prev_t, _)) = rows.last() {
            if t <= prev_t {
                return Err(EvalError::BadLog {
                    line: i + 1,
                    detail: format!("time {t} does not increase past {prev_t}"),
                });
            }
        }
        rows.push((t, sp));
    }
    if rows.is_empty() {
        return Err(EvalError::BadLog {
            line: 0,
            detail: "no samples".into(),
        });
    }
    // Collapse the sampled track into constant segments. A sampled log
    // only brackets each transition between two adjacent rows, so the
    // segment boundary is placed at their midpoint; every sample then sits
    // at least half a sample period away from any boundary, which keeps
    // the reconstruction stable against rounding in accumulated durations.
    let last_dt = if rows.len() >= 2 {
        rows[rows.len() - 1].0 - rows[rows.len() - 2].0
    } else {
        1e-3
    };
    let mut boundaries = vec![0.0];
    let mut setpoints = vec![rows[0].1];
    for pair in rows.windows(2) {
        let (t_prev, sp_prev) = pair[0];
        let (t_next, sp_next) = pair[1];
        if sp_next != sp_prev {
            boundaries.push(0.5 * (t_prev + t_next));
            setpoints.push(sp_next);
        }
    }
    boundaries.push(rows[rows.len() - 1].0 + last_dt);
    let segments = setpoints
        .into_iter()
        .zip(boundaries.windows(2))
        .map(|(setpoint, b)| Segment {
            setpoint,
            duration: b[1] - b[0],
        })
        .collect();
    Ok(TaskScript::from_segments(segments))
}

/// A controller under evaluation. The two kinds are distinct types all the
/// way down: a checkpoint cannot be mistaken for gains or vice versa.
#[derive(Debug, Clone)]
pub enum Controller {
    /// Deterministic neural policy (clipped mean of the Gaussian head).
    Policy(Policy),
    /// Per-axis PID with classical motor mixing.
    Pid(PidGains),
}

/// Replay settings. Defaults: noise off, zero stick throttle, seed 0.
#[derive(Debug, Clone, Copy)]
pub struct ReplayOptions {
    pub throttle: f64,
    pub gyro_noise_sigma: f64,
    pub seed: u64,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        Self {
            throttle: 0.0,
            gyro_noise_sigma: 0.0,
            seed: 0,
        }
    }
}

/// Drive a fresh simulation along `script` with the given controller and
/// log every tick. Metrics are computed on `setpoint - gyro`.
pub fn replay(
    controller: &Controller,
    model: &AirframeModel,
    script: &TaskScript,
    opts: &ReplayOptions,
) -> Result<(FlightLog, MetricsReport), EvalError> {
    if !(0.0..=1.0).contains(&opts.throttle) {
        return Err(EvalError::Config(format!(
            "throttle {} outside [0, 1]",
            opts.throttle
        )));
    }
    let mut cfg = EnvConfig {
        gyro_noise_sigma: opts.gyro_noise_sigma,
        episode_time: script.total_time,
        // Replay is measurement, not curriculum: run the whole script even
        // if tracking is poor, and let the divergence guard be the only
        // hard stop.
        envelope: f64::INFINITY,
        ..EnvConfig::default()
    };
    if let Controller::Policy(p) = controller {
        cfg.observation_mode = match p.obs_dim {
            6 => ObservationMode::ErrorDelta,
            7 => ObservationMode::ErrorMotor,
            other => {
                return Err(EvalError::DimensionMismatch {
                    controller: other,
                    env: cfg.observation_dim(),
                })
            }
        };
    }
    let mut env = Env::new(model.clone(), cfg, script.clone(), opts.seed)
        .map_err(|e| EvalError::Config(e.to_string()))?;
    let mut obs = env.initial_observation();
    let mut pid_state = PidState::new();
    let mut log = FlightLog::default();

    loop {
        let t = env.state().t;
        let sp = env.setpoint();
        // The observation's error channel is e = sp - measured, so the
        // measured (possibly noisy) gyro the controller acts on is sp - e.
        let gyro = [sp[0] - obs[0], sp[1] - obs[1], sp[2] - obs[2]];
        let (y, u) = match controller {
            Controller::Policy(p) => {
                let a = p.act_deterministic(&obs);
                let y = [a[0], a[1], a[2], a[3]];
                let u = mix_throttle(&y, opts.throttle)
                    .expect("policy outputs and throttle are in range")
                    .u;
                (y, u)
            }
            Controller::Pid(gains) => {
                let out = pid_step(gains, &mut pid_state, &sp, &gyro, model.dt);
                let g = &model.geometry;
                let mut y = [0.0; 4];
                let mut u = [0.0; 4];
                for i in 0..4 {
                    y[i] = g.roll[i] * out[0] + g.pitch[i] * out[1] + g.yaw[i] * out[2];
                    u[i] = (opts.throttle + y[i]).clamp(0.0, 1.0);
                }
                (y, u)
            }
        };
        log.records.push(FlightLogRecord {
            t,
            setpoint: sp,
            gyro,
            y,
            u,
            throttle: opts.throttle,
        });
        let step = env.step(&u).map_err(|e| EvalError::Diverged {
            t,
            detail: e.to_string(),
        })?;
        if step.blown_up {
            return Err(EvalError::Diverged {
                t,
                detail: "body rates exceeded the dynamics divergence guard".into(),
            });
        }
        if step.done {
            break;
        }
        obs = step.obs;
    }
    let metrics = compute_metrics(&log.errors(), &log.times())?;
    Ok((log, metrics))
}

/// Side-by-side result of a neural-vs-PID comparison run.
#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub nn: MetricsReport,
    pub pid: MetricsReport,
}

/// Run both controllers over the identical script and airframe, noise off.
///
/// Returns the two metric reports plus a merged per-step CSV
/// (`t,sp_*,nn_gy_*,pid_gy_*`) for plotting the traces against each other.
pub fn compare(
    policy: &Policy,
    gains: &PidGains,
    model: &AirframeModel,
    script: &TaskScript,
    throttle: f64,
) -> Result<(CompareReport, String), EvalError> {
    let opts = ReplayOptions {
        throttle,
        ..ReplayOptions::default()
    };
    let (nn_log, nn_metrics) = replay(&Controller::Policy(policy.clone()), model, script, &opts)?;
    let (pid_log, pid_metrics) = replay(&Controller::Pid(gains.clone()), model, script, &opts)?;
    let mut csv = String::from("t,sp_r,sp_p,sp_y,nn_gy_r,nn_gy_p,nn_gy_y,pid_gy_r,pid_gy_p,pid_gy_y\n");
    for (a, b) in nn_log.records.iter().zip(&pid_log.records) {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            a.t,
            a.setpoint[0],
            a.setpoint[1],
            a.setpoint[2],
            a.gyro[0],
            a.gyro[1],
            a.gyro[2],
            b.gyro[0],
            b.gyro[1],
            b.gyro[2]
        );
    }
    Ok((
        CompareReport {
            nn: nn_metrics,
            pid: pid_metrics,
        },
        csv,
    ))
}

/// Execution-time statistics over repeated single evaluations.
#[derive(Debug, Clone, Serialize)]
pub struct TimingReport {
    pub wcet_us: f64,
    pub bcet_us: f64,
    pub mean_us: f64,
    /// (WCET - BCET) / WCET.
    pub variability_window: f64,
    pub n_samples: usize,
    /// Set when the clock cannot resolve better than 10% of the BCET.
    pub low_confidence: bool,
    pub timer_resolution_us: f64,
}

/// Smallest positive interval the monotonic clock can report.
fn timer_resolution_us() -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..32 {
        let t0 = Instant::now();
        let mut d = t0.elapsed();
        while d.is_zero() {
            d = t0.elapsed();
        }
        best = best.min(d.as_secs_f64() * 1e6);
    }
    best
}

/// Time `n` single evaluations of `f`, each on a fresh input drawn by
/// `next_input`, after a warm-up pass. Single-threaded by construction.
pub fn bench_inference<I, F: FnMut(&I), G: FnMut() -> I>(
    mut f: F,
    mut next_input: G,
    n: usize,
) -> TimingReport {
    for _ in 0..200.min(n) {
        let x = next_input();
        f(std::hint::black_box(&x));
    }
    let mut wcet = 0.0f64;
    let mut bcet = f64::INFINITY;
    let mut total = 0.0;
    for _ in 0..n {
        let x = next_input();
        let t0 = Instant::now();
        f(std::hint::black_box(&x));
        let dt = t0.elapsed().as_secs_f64() * 1e6;
        wcet = wcet.max(dt);
        bcet = bcet.min(dt);
        total += dt;
    }
    let resolution = timer_resolution_us();
    TimingReport {
        wcet_us: wcet,
        bcet_us: bcet,
        mean_us: total / n as f64,
        variability_window: if wcet > 0.0 { (wcet - bcet) / wcet } else { 0.0 },
        n_samples: n,
        low_confidence: resolution > 0.1 * bcet,
        timer_resolution_us: resolution,
    }
}

/// Seed pinning the bundled validation script to one fixed draw from the
/// training task distribution.
pub const VALIDATION_SCRIPT_SEED: u64 = 42;

/// Fixed validation maneuver: a 12-second draw from the same distribution
/// the trainer samples episodes from, so replay difficulty matches the
/// training regime rather than a hand-picked easy case.
pub fn validation_script() -> TaskScript {
    let cfg = EnvConfig {
        episode_time: 12.0,
        ..EnvConfig::default()
    };
    sample_task(VALIDATION_SCRIPT_SEED, &cfg)
}

/// Scripted aerobatic sequence: a full roll, a flip (pitch revolution), and
/// a half-roll-into-pull combination, with idle holds between maneuvers.
pub fn aerobatic_script() -> TaskScript {
    let seg = |setpoint: [f64; 3], duration: f64| Segment { setpoint, duration };
    TaskScript::from_segments(vec![
        seg([0.0; 3], 0.5),
        // Full roll: 360 deg/s for one second.
        seg([360.0, 0.0, 0.0], 1.0),
        seg([0.0; 3], 0.7),
        // Flip: a pitch revolution at the same rate.
        seg([0.0, 360.0, 0.0], 1.0),
        seg([0.0; 3], 0.7),
        // Half roll, then pull through: the classic descending reversal.
        seg([360.0, 0.0, 0.0], 0.5),
        seg([0.0, 180.0, 0.0], 1.0),
        seg([0.0; 3], 0.7),
        // Coordinated roll-and-yaw corkscrew to exercise the cross terms.
        seg([180.0, 0.0, 90.0], 1.2),
        seg([0.0; 3], 0.7),
    ])
}
