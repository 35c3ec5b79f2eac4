//! Rigid-body rotational dynamics of a quad-X airframe held fixed about its
//! center of mass.
//!
//! There is no translational state: the model is the body angular velocity
//! plus four rotor speeds. One step advances the rotors a tick under a
//! closed-loop velocity PI law, maps rotor speeds to body torque through the
//! quad-X geometry, and integrates Euler's rotational equation
//!
//! ```text
//! I omega_dot = tau - omega x (I omega)
//! ```
//!
//! with an explicit Euler step at a fixed control-rate dt (1 kHz default).

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Degrees-per-second to radians-per-second.
pub const DEG_TO_RAD: f64 = core::f64::consts::PI / 180.0;
/// Radians-per-second to degrees-per-second.
pub const RAD_TO_DEG: f64 = 180.0 / core::f64::consts::PI;
/// RPM to radians-per-second.
pub const RPM_TO_RAD_S: f64 = core::f64::consts::PI / 30.0;

/// Normalization of the rotor PI output into a rotor acceleration
/// (rad/s^2 per unit of PI output).
///
/// The velocity-loop gains are fixed, so this constant alone sets the
/// modelled motor response: the closed rotor loop is a second-order system
/// with natural frequency sqrt(rotor_ki / ROTOR_GAIN_TICK) and damping
/// ratio (rotor_kp / ROTOR_GAIN_TICK) / (2 omega_n). The value here puts
/// that at omega_n = 100 rad/s, zeta = 0.5 for the default gains: a
/// full-range spool-up of roughly 80 ms, representative of a small
/// racing-quad motor and propeller, and well separated from the attitude
/// loop's crossover so the motor ring does not resonate with the
/// controller. It also keeps the law a rate law, so refining `dt` refines
/// the discretization without changing the modelled loop.
const ROTOR_GAIN_TICK: f64 = 1e-4;

/// Per-rotor mixing signs for the quad-X layout.
///
/// Rotor order: 0 rear-right, 1 front-right, 2 rear-left, 3 front-left.
/// `roll` and `pitch` are position signs (which side of the axis the rotor
/// sits on); `yaw` is the propeller spin direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmGeometry {
    pub roll: [f64; 4],
    pub pitch: [f64; 4],
    pub yaw: [f64; 4],
}

impl Default for ArmGeometry {
    fn default() -> Self {
        Self {
            roll: [-1.0, -1.0, 1.0, 1.0],
            pitch: [1.0, -1.0, 1.0, -1.0],
            yaw: [-1.0, 1.0, 1.0, -1.0],
        }
    }
}

/// Physical constants of the simulated airframe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AirframeModel {
    /// Principal moments of inertia, kg m^2.
    pub inertia: [f64; 3],
    /// Moment arm per axis, m.
    pub arm_length: f64,
    /// Rotor thrust coefficient, N per (rad/s)^2.
    pub k_thrust: f64,
    /// Rotor drag-torque coefficient, N m per (rad/s)^2.
    pub k_drag: f64,
    /// Rotor speed ceiling, rad/s.
    pub omega_max: f64,
    /// Rotor velocity-loop proportional gain, per 1 kHz tick.
    pub rotor_kp: f64,
    /// Rotor velocity-loop integral gain, per 1 kHz tick.
    pub rotor_ki: f64,
    /// Simulation step, s.
    pub dt: f64,
    /// Divergence guard: any |body rate| above this (deg/s) aborts the step.
    pub rate_limit: f64,
    pub geometry: ArmGeometry,
}

impl Default for AirframeModel {
    fn default() -> Self {
        Self {
            inertia: [7.0e-3, 7.0e-3, 1.2e-2],
            arm_length: 0.11,
            k_thrust: 2.0e-8,
            k_drag: 1.2e-9,
            omega_max: 33_422.0 * RPM_TO_RAD_S,
            rotor_kp: 0.01,
            rotor_ki: 1.0,
            dt: 1e-3,
            rate_limit: 1.0e4,
            geometry: ArmGeometry::default(),
        }
    }
}

/// Rotational state of the airframe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyState {
    /// Body angular velocity [roll, pitch, yaw], deg/s.
    pub omega: [f64; 3],
    /// Rotor speeds, rad/s.
    pub rotor_speed: [f64; 4],
    /// Rotor velocity-loop integrator state, rad/s accumulated.
    pub rotor_integral: [f64; 4],
    /// Simulation time, s.
    pub t: f64,
}

impl BodyState {
    /// Airframe at rest: zero rates, rotors stopped.
    pub fn at_rest() -> Self {
        Self {
            omega: [0.0; 3],
            rotor_speed: [0.0; 4],
            rotor_integral: [0.0; 4],
            t: 0.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("non-finite rotor command u[{rotor}] = {value}")]
    NonFiniteCommand { rotor: usize, value: f64 },
    #[error(
        "dynamics blew up: |rate[{axis}]| = {rate:.1} deg/s exceeds {limit:.1} deg/s at t = {t:.3} s"
    )]
    Diverged {
        axis: usize,
        rate: f64,
        limit: f64,
        t: f64,
        /// The offending state, so callers can log or score the final step.
        state: Box<BodyState>,
    },
}

/// Advance the four rotor velocity loops by one tick.
///
/// Each rotor tracks the target speed `u_i * omega_max` under a PI law with
/// integrator anti-windup; the resulting speed is clamped to
/// `[0, omega_max]`. Commands are expected in `[0, 1]` and are clamped to
/// that range; non-finite commands are an error.
pub fn rotor_step(
    state: &mut BodyState,
    u: &[f64; 4],
    model: &AirframeModel,
) -> Result<(), DynamicsError> {
    for (i, &ui) in u.iter().enumerate() {
        if !ui.is_finite() {
            return Err(DynamicsError::NonFiniteCommand { rotor: i, value: ui });
        }
        let target = ui.clamp(0.0, 1.0) * model.omega_max;
        let err = target - state.rotor_speed[i];
        state.rotor_integral[i] += err * model.dt;
        // Anti-windup: the integral term's velocity contribution may not
        // exceed the actuator range itself.
        if model.rotor_ki != 0.0 {
            let cap = model.omega_max / model.rotor_ki;
            state.rotor_integral[i] = state.rotor_integral[i].clamp(-cap, cap);
        }
        let accel = (model.rotor_kp * err + model.rotor_ki * state.rotor_integral[i])
            / ROTOR_GAIN_TICK;
        state.rotor_speed[i] =
            (state.rotor_speed[i] + accel * model.dt).clamp(0.0, model.omega_max);
    }
    Ok(())
}

/// Body torque [roll, pitch, yaw] in N m produced by the current rotor
/// speeds.
///
/// Roll and pitch come from thrust differences across the arms; yaw comes
/// from the aerodynamic drag torque of the spinning propellers.
pub fn body_torque(state: &BodyState, model: &AirframeModel) -> [f64; 3] {
    let g = &model.geometry;
    let mut tau = [0.0; 3];
    for i in 0..4 {
        let w2 = state.rotor_speed[i] * state.rotor_speed[i];
        let thrust = model.k_thrust * w2;
        tau[0] += g.roll[i] * thrust * model.arm_length;
        tau[1] += g.pitch[i] * thrust * model.arm_length;
        tau[2] += g.yaw[i] * model.k_drag * w2;
    }
    tau
}

/// Advance the full airframe one step under rotor commands `u`.
///
/// Applies the rotor loops, computes body torque, and integrates the
/// rotational equation (including the gyroscopic cross term) with explicit
/// Euler. Fails if a command is non-finite or the resulting body rate
/// exceeds the divergence guard.
pub fn step(
    state: &BodyState,
    u: &[f64; 4],
    model: &AirframeModel,
) -> Result<BodyState, DynamicsError> {
    let mut next = state.clone();
    rotor_step(&mut next, u, model)?;

    let tau = body_torque(&next, model);
    let w = [
        next.omega[0] * DEG_TO_RAD,
        next.omega[1] * DEG_TO_RAD,
        next.omega[2] * DEG_TO_RAD,
    ];
    let h = [
        model.inertia[0] * w[0],
        model.inertia[1] * w[1],
        model.inertia[2] * w[2],
    ];
    let cross = [
        w[1] * h[2] - w[2] * h[1],
        w[2] * h[0] - w[0] * h[2],
        w[0] * h[1] - w[1] * h[0],
    ];
    for axis in 0..3 {
        let alpha = (tau[axis] - cross[axis]) / model.inertia[axis];
        next.omega[axis] += alpha * RAD_TO_DEG * model.dt;
    }
    next.t += model.dt;

    for axis in 0..3 {
        if !next.omega[axis].is_finite() || next.omega[axis].abs() > model.rate_limit {
            return Err(DynamicsError::Diverged {
                axis,
                rate: next.omega[axis],
                limit: model.rate_limit,
                t: next.t,
                state: Box::new(next.clone()),
            });
        }
    }
    Ok(next)
}
