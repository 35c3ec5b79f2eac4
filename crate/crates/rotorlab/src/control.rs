//! Classical control path: throttle mixing, the PID rate controller used as
//! a baseline, and its Ziegler-Nichols auto-tuner.

use crate::dynamics::{self, AirframeModel, ArmGeometry, BodyState};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("rotor output y[{rotor}] = {value} outside [0, 1]")]
    OutputOutOfRange { rotor: usize, value: f64 },
    #[error("throttle {value} outside [0, 1]")]
    ThrottleOutOfRange { value: f64 },
    #[error(
        "no sustained oscillation on axis {axis}: swept proportional gain up to {max_gain}"
    )]
    NoOscillation { axis: usize, max_gain: f64 },
}

/// Result of mixing a throttle level with the controller's rotor outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct MixResult {
    /// Throttle after scaling down to leave headroom for the outputs.
    pub scaled_throttle: f64,
    /// Final rotor commands.
    pub u: [f64; 4],
}

/// Mix a throttle command with per-rotor control outputs.
///
/// The throttle is scaled by the remaining headroom, `T * (1 - max_i y_i)`,
/// and added to each output. When any output already sits at the top of the
/// range the throttle is dropped entirely and the outputs pass through
/// untouched, so control authority always wins over climb authority and no
/// rotor command can exceed 1.
pub fn mix_throttle(y: &[f64; 4], throttle: f64) -> Result<MixResult, ControlError> {
    for (i, &v) in y.iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(ControlError::OutputOutOfRange { rotor: i, value: v });
        }
    }
    if !(0.0..=1.0).contains(&throttle) {
        return Err(ControlError::ThrottleOutOfRange { value: throttle });
    }
    let max_y = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scaled_throttle = if max_y >= 1.0 {
        0.0
    } else {
        throttle * (1.0 - max_y)
    };
    let mut u = [0.0; 4];
    for i in 0..4 {
        u[i] = scaled_throttle + y[i];
    }
    Ok(MixResult { scaled_throttle, u })
}

/// Per-axis PID gains for the rate loop.
///
/// Defaults are the hand-adjusted flight gains this lab reproduces: equal
/// roll/pitch PD gains and a P-only yaw loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PidGains {
    pub kp: [f64; 3],
    pub ki: [f64; 3],
    pub kd: [f64; 3],
    /// Anti-windup bound: the integral contribution to the output is clamped
    /// to this magnitude (mix units).
    pub integral_limit: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self {
            kp: [0.032029; 3],
            ki: [0.0; 3],
            kd: [0.000396, 0.000396, 0.0],
            integral_limit: 1.0,
        }
    }
}

/// Integrator and derivative memory of the PID loop.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PidState {
    pub integral: [f64; 3],
    prev_measurement: [f64; 3],
    primed: bool,
}

impl PidState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One PID step on the three rate axes.
///
/// The derivative acts on the measurement rather than the error, so setpoint
/// steps do not kick the output. The integral accumulates before the output
/// is formed and is clamped so its contribution stays within
/// `integral_limit`.
pub fn pid_step(
    gains: &PidGains,
    state: &mut PidState,
    setpoint: &[f64; 3],
    measurement: &[f64; 3],
    dt: f64,
) -> [f64; 3] {
    let mut out = [0.0; 3];
    for axis in 0..3 {
        let e = setpoint[axis] - measurement[axis];
        state.integral[axis] += e * dt;
        if gains.ki[axis] != 0.0 {
            let cap = gains.integral_limit / gains.ki[axis].abs();
            state.integral[axis] = state.integral[axis].clamp(-cap, cap);
        }
        let d = if state.primed {
            -(measurement[axis] - state.prev_measurement[axis]) / dt
        } else {
            0.0
        };
        out[axis] =
            gains.kp[axis] * e + gains.ki[axis] * state.integral[axis] + gains.kd[axis] * d;
    }
    state.prev_measurement = *measurement;
    state.primed = true;
    out
}

/// Distribute per-axis PID outputs onto the four rotors around a throttle
/// operating point, clamping each command into `[0, 1]`.
pub fn pid_mix(outputs: &[f64; 3], throttle: f64, geometry: &ArmGeometry) -> [f64; 4] {
    let mut u = [0.0; 4];
    for i in 0..4 {
        let cmd = throttle
            + geometry.roll[i] * outputs[0]
            + geometry.pitch[i] * outputs[1]
            + geometry.yaw[i] * outputs[2];
        u[i] = cmd.clamp(0.0, 1.0);
    }
    u
}

/// Sweep settings for the Ziegler-Nichols ultimate-gain search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZnConfig {
    /// First proportional gain probed.
    pub initial_gain: f64,
    /// Multiplicative sweep step.
    pub gain_factor: f64,
    /// Give up beyond this gain.
    pub max_gain: f64,
    /// Closed-loop sim length per probe, s.
    pub sim_time: f64,
    /// Transient discarded before peak analysis, s.
    pub settle_skip: f64,
    /// Setpoint step used to excite the loop, deg/s.
    pub step_setpoint: f64,
    /// Hover operating point for the sweep.
    pub throttle: f64,
    /// Successive peak-amplitude ratios must fall in this band to count as
    /// sustained oscillation.
    pub ratio_band: [f64; 2],
    /// Number of ratio checks (periods) required.
    pub min_periods: usize,
    /// Peaks below this amplitude (deg/s) are treated as numeric dust.
    pub amplitude_floor: f64,
}

impl Default for ZnConfig {
    fn default() -> Self {
        Self {
            initial_gain: 1e-3,
            gain_factor: 1.15,
            max_gain: 10.0,
            sim_time: 8.0,
            settle_skip: 3.0,
            step_setpoint: 100.0,
            throttle: 0.5,
            ratio_band: [0.95, 1.05],
            min_periods: 4,
            amplitude_floor: 0.5,
        }
    }
}

/// Ultimate gain and period found for one axis, with the gains the classic
/// table derives from them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZnAxis {
    pub k_u: f64,
    pub t_u: f64,
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

/// Full tuning report: one entry per axis plus the assembled gain set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZnReport {
    pub axes: [ZnAxis; 3],
    pub gains: PidGains,
}

/// Classic Ziegler-Nichols table: `Kp = 0.6 Ku`, `Ki = Kp / (0.5 Tu)`,
/// `Kd = Kp * 0.125 * Tu`.
pub fn zn_classic(k_u: f64, t_u: f64) -> (f64, f64, f64) {
    let kp = 0.6 * k_u;
    let ki = kp / (0.5 * t_u);
    let kd = kp * 0.125 * t_u;
    (kp, ki, kd)
}

/// Closed-loop step response of one axis under a pure proportional gain.
/// Returns the error trace sampled every step, or `None` if the sim
/// diverges (treated as "past the ultimate gain" by the sweep).
fn p_only_response(
    model: &AirframeModel,
    axis: usize,
    gain: f64,
    cfg: &ZnConfig,
) -> Option<Vec<f64>> {
    let mut state = BodyState::at_rest();
    // Start the rotors at the hover operating point so the spin-up transient
    // does not pollute the oscillation measurement.
    state.rotor_speed = [cfg.throttle * model.omega_max; 4];

    let steps = (cfg.sim_time / model.dt).round() as usize;
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let e = cfg.step_setpoint - state.omega[axis];
        trace.push(e);
        let mut out = [0.0; 3];
        out[axis] = gain * e;
        let u = pid_mix(&out, cfg.throttle, &model.geometry);
        match dynamics::step(&state, &u, model) {
            Ok(next) => state = next,
            Err(_) => return None,
        }
    }
    Some(trace)
}

/// Successive positive peaks (amplitude, sample index) of an error trace.
fn positive_peaks(trace: &[f64], skip: usize, floor: f64) -> Vec<(f64, usize)> {
    let mut peaks = Vec::new();
    for i in (skip.max(1))..trace.len().saturating_sub(1) {
        if trace[i] > floor && trace[i] > trace[i - 1] && trace[i] >= trace[i + 1] {
            peaks.push((trace[i], i));
        }
    }
    peaks
}

/// Classify one probe: does the loop hold a steady oscillation at this gain?
/// Returns `(sustained_or_growing, period_estimate)`.
fn probe_oscillation(
    model: &AirframeModel,
    axis: usize,
    gain: f64,
    cfg: &ZnConfig,
) -> (bool, Option<f64>) {
    let Some(trace) = p_only_response(model, axis, gain, cfg) else {
        // Divergence is as unstable as it gets.
        return (true, None);
    };
    let skip = (cfg.settle_skip / model.dt).round() as usize;
    let peaks = positive_peaks(&trace, skip, cfg.amplitude_floor);
    if peaks.len() < cfg.min_periods + 1 {
        return (false, None);
    }
    let tail = &peaks[peaks.len() - (cfg.min_periods + 1)..];
    let mut ratios = Vec::with_capacity(cfg.min_periods);
    for pair in tail.windows(2) {
        ratios.push(pair[1].0 / pair[0].0);
    }
    let sustained = ratios
        .iter()
        .all(|r| *r >= cfg.ratio_band[0] && *r <= cfg.ratio_band[1]);
    let growing = ratios.iter().all(|r| *r > cfg.ratio_band[1]);
    let period = {
        let dt_steps: f64 = tail
            .windows(2)
            .map(|pair| (pair[1].1 - pair[0].1) as f64)
            .sum::<f64>()
            / cfg.min_periods as f64;
        Some(dt_steps * model.dt)
    };
    (sustained || growing, period)
}

/// Find the ultimate gain and period of one axis by sweeping a proportional
/// gain upward until the loop first holds a non-decaying oscillation, then
/// bisecting the bracket.
pub fn zn_find_ultimate(
    model: &AirframeModel,
    axis: usize,
    cfg: &ZnConfig,
) -> Result<(f64, f64), ControlError> {
    let mut prev_gain = 0.0;
    let mut gain = cfg.initial_gain;
    let mut hit: Option<f64> = None;
    while gain <= cfg.max_gain {
        let (unstable, _) = probe_oscillation(model, axis, gain, cfg);
        if unstable {
            hit = Some(gain);
            break;
        }
        prev_gain = gain;
        gain *= cfg.gain_factor;
    }
    let Some(mut hi) = hit else {
        return Err(ControlError::NoOscillation {
            axis,
            max_gain: cfg.max_gain,
        });
    };

    // If the very first probe was already unstable the ultimate gain lies
    // below the sweep start: walk downward until a stable gain is found so
    // the bracket is genuine rather than an artifact of the start point.
    if prev_gain == 0.0 {
        let mut down = hi / cfg.gain_factor;
        // ~200 downward steps spans 12 orders of magnitude at factor 1.15.
        for _ in 0..200 {
            let (unstable, _) = probe_oscillation(model, axis, down, cfg);
            if !unstable {
                prev_gain = down;
                break;
            }
            hi = down;
            down /= cfg.gain_factor;
        }
        if prev_gain == 0.0 {
            return Err(ControlError::NoOscillation {
                axis,
                max_gain: cfg.max_gain,
            });
        }
    }

    // Bisect the (stable, unstable) bracket down to a tight relative width so
    // the result does not depend on the sweep resolution.
    let mut lo = prev_gain;
    while (hi - lo) / hi > 0.005 {
        let mid = 0.5 * (lo + hi);
        let (unstable, _) = probe_oscillation(model, axis, mid, cfg);
        if unstable {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let k_u = hi;
    let (_, period) = probe_oscillation(model, axis, k_u, cfg);
    let t_u = period.ok_or(ControlError::NoOscillation {
        axis,
        max_gain: cfg.max_gain,
    })?;
    Ok((k_u, t_u))
}

/// Tune all three axes and assemble a PID gain set from the classic table.
pub fn zn_tune(model: &AirframeModel, cfg: &ZnConfig) -> Result<ZnReport, ControlError> {
    let mut axes = [ZnAxis {
        k_u: 0.0,
        t_u: 0.0,
        kp: 0.0,
        ki: 0.0,
        kd: 0.0,
    }; 3];
    let mut gains = PidGains {
        kp: [0.0; 3],
        ki: [0.0; 3],
        kd: [0.0; 3],
        integral_limit: PidGains::default().integral_limit,
    };
    for axis in 0..3 {
        let (k_u, t_u) = zn_find_ultimate(model, axis, cfg)?;
        let (kp, ki, kd) = zn_classic(k_u, t_u);
        axes[axis] = ZnAxis { k_u, t_u, kp, ki, kd };
        gains.kp[axis] = kp;
        gains.ki[axis] = ki;
        gains.kd[axis] = kd;
    }
    Ok(ZnReport { axes, gains })
}
