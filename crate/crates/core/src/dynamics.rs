//! Continuous-time bikebot model.
//!
//! Planar motion of the rear contact point follows the nonholonomic
//! kinematics `x' = v cos(yaw)`, `y' = v sin(yaw)`. The yaw rate is an
//! algebraic function of speed, steering and roll; the roll axis is an
//! inverted pendulum driven by centrifugal, gravity and yaw-acceleration
//! torques plus an optional external torque (the leg impulse).
//!
//! The physical steering angle is produced by a first-order actuator with a
//! rate limit, so the yaw acceleration seen by the roll axis is computed from
//! the actual steering rate rather than commanded directly.

use nalgebra::SVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest cos(roll) for which the yaw-rate kinematics are evaluated.
pub const MIN_ROLL_COS: f64 = 1e-3;
/// Speed below which the steering kinematics cannot be inverted.
pub const MIN_STEER_SPEED: f64 = 0.05;
/// Largest admissible integration step (s).
pub const MAX_STEP: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("roll angle {0:.4} rad too close to the horizontal for yaw kinematics")]
    RollSingularity(f64),
    #[error("speed {0:.4} m/s below {MIN_STEER_SPEED} m/s")]
    LowSpeed(f64),
    #[error("balance lost: roll {0:.4} rad at t = {1:.3} s")]
    BalanceLost(f64, f64),
    #[error("integration step {0} s outside (0, {MAX_STEP}]")]
    BadStep(f64),
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
}

/// Physical constants of the bikebot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BikebotParams {
    /// Mass (kg).
    pub mass: f64,
    /// Roll inertia about the x axis at the center of mass (kg m^2).
    pub roll_inertia: f64,
    /// Yaw inertia (kg m^2).
    pub yaw_inertia: f64,
    /// Wheelbase (m).
    pub wheelbase: f64,
    /// Wheel radius (m).
    pub wheel_radius: f64,
    /// Longitudinal center-of-mass offset in the body frame (m), may be negative.
    pub com_offset: f64,
    /// Center-of-mass height in the body frame (m).
    pub com_height: f64,
    /// Steering caster angle (rad).
    pub caster: f64,
    /// Gravitational acceleration (m/s^2).
    pub gravity: f64,
}

impl Default for BikebotParams {
    fn default() -> Self {
        Self {
            mass: 24.0,
            roll_inertia: 0.25,
            yaw_inertia: 0.5,
            wheelbase: 0.87,
            wheel_radius: 0.225,
            com_offset: -0.04,
            com_height: 0.35,
            caster: 17f64.to_radians(),
            gravity: 9.81,
        }
    }
}

impl BikebotParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let positive = [
            ("mass", self.mass),
            ("roll_inertia", self.roll_inertia),
            ("yaw_inertia", self.yaw_inertia),
            ("wheelbase", self.wheelbase),
            ("wheel_radius", self.wheel_radius),
            ("com_height", self.com_height),
            ("gravity", self.gravity),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(DynamicsError::InvalidParams(format!("{name} must be > 0, got {value}")));
            }
        }
        if !self.com_offset.is_finite() {
            return Err(DynamicsError::InvalidParams("com_offset must be finite".into()));
        }
        if !(self.caster > 0.0 && self.caster < std::f64::consts::FRAC_PI_2) {
            return Err(DynamicsError::InvalidParams(format!(
                "caster must lie in (0, pi/2), got {}",
                self.caster
            )));
        }
        Ok(())
    }

    /// Roll inertia about the ground contact line, `J_b + m h_G^2`.
    pub fn total_roll_inertia(&self) -> f64 {
        self.roll_inertia + self.mass * self.com_height * self.com_height
    }

    /// Lever arm `l_G + l/2` of the yaw-acceleration roll torque.
    pub fn steer_lever(&self) -> f64 {
        self.com_offset + 0.5 * self.wheelbase
    }

    /// Gravity, centrifugal and gyroscopic roll torque `f_1` (N m).
    pub fn roll_drift(&self, roll: f64, yaw_rate: f64, speed: f64) -> f64 {
        let mh = self.mass * self.com_height;
        let (s, c) = roll.sin_cos();
        mh * yaw_rate * c * speed
            + mh * self.com_height * yaw_rate * yaw_rate * s * c
            + mh * self.gravity * s
    }

    /// Roll torque per unit yaw acceleration, `h`.
    pub fn roll_input_gain(&self, roll: f64) -> f64 {
        self.mass * self.com_height * self.steer_lever() * roll.cos()
    }
}

/// Steering servo and drive limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActuatorLimits {
    /// First-order steering lag (s).
    pub steer_time_constant: f64,
    /// Steering rate limit (rad/s).
    pub steer_rate_max: f64,
    /// Steering angle limit (rad).
    pub steer_max: f64,
    /// Speed limit (m/s).
    pub speed_max: f64,
    /// Longitudinal acceleration limit of the hub motor (m/s^2).
    pub accel_max: f64,
}

impl Default for ActuatorLimits {
    fn default() -> Self {
        Self {
            steer_time_constant: 0.05,
            steer_rate_max: 200f64.to_radians(),
            steer_max: 30f64.to_radians(),
            speed_max: 1.5,
            accel_max: 3.0,
        }
    }
}

impl ActuatorLimits {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        for (name, value) in [
            ("steer_time_constant", self.steer_time_constant),
            ("steer_rate_max", self.steer_rate_max),
            ("steer_max", self.steer_max),
            ("speed_max", self.speed_max),
            ("accel_max", self.accel_max),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(DynamicsError::InvalidParams(format!("{name} must be > 0, got {value}")));
            }
        }
        if self.steer_max >= std::f64::consts::FRAC_PI_2 {
            return Err(DynamicsError::InvalidParams("steer_max must be below pi/2".into()));
        }
        Ok(())
    }
}

/// Continuous simulation state.
///
/// `yaw_rate` and `steer_rate` are not integrated; they are refreshed from
/// the kinematics and the actuator after every step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BikebotState {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub roll: f64,
    pub steer: f64,
    pub speed: f64,
    pub accel: f64,
    pub yaw_rate: f64,
    pub roll_rate: f64,
    pub steer_rate: f64,
}

impl BikebotState {
    /// Upright straight ride along the x axis.
    pub fn riding(speed: f64) -> Self {
        Self { speed, ..Default::default() }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.t,
            self.x,
            self.y,
            self.yaw,
            self.roll,
            self.steer,
            self.speed,
            self.accel,
            self.yaw_rate,
            self.roll_rate,
            self.steer_rate,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Velocity of the rear contact point in the inertial frame.
    pub fn planar_velocity(&self) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (self.speed * c, self.speed * s)
    }
}

/// External roll torque, active on `[active_from, active_until)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RollTorquePort {
    pub torque: f64,
    pub active_from: f64,
    pub active_until: f64,
}

impl RollTorquePort {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn constant(torque: f64, from: f64, duration: f64) -> Self {
        Self { torque, active_from: from, active_until: from + duration }
    }

    pub fn at(&self, t: f64) -> f64 {
        if t >= self.active_from && t < self.active_until {
            self.torque
        } else {
            0.0
        }
    }
}

/// Actuator set-points held between controller ticks.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DriveCommand {
    /// Speed jerk `u_v` (m/s^3).
    pub jerk: f64,
    /// Steering angle set-point (rad).
    pub steer: f64,
}

/// `psi' = v cos(eps) tan(phi) / (l cos(roll))`.
pub fn yaw_rate(speed: f64, steer: f64, roll: f64, p: &BikebotParams) -> Result<f64, DynamicsError> {
    let c = roll.cos();
    if c < MIN_ROLL_COS {
        return Err(DynamicsError::RollSingularity(roll));
    }
    Ok(speed * p.caster.cos() * steer.tan() / (p.wheelbase * c))
}

/// Yaw acceleration implied by the steering, speed and roll rates.
pub fn yaw_accel(s: &BikebotState, p: &BikebotParams) -> Result<f64, DynamicsError> {
    let c = s.roll.cos();
    if c < MIN_ROLL_COS {
        return Err(DynamicsError::RollSingularity(s.roll));
    }
    let k = p.caster.cos() / (p.wheelbase * c);
    let tan_steer = s.steer.tan();
    let sec2 = 1.0 + tan_steer * tan_steer;
    Ok(k * s.accel * tan_steer
        + k * s.speed * (sec2 * s.steer_rate + tan_steer * s.roll.tan() * s.roll_rate))
}

/// Roll acceleration `(f_1 + h u_psi + tau_ext) / J_t`.
pub fn roll_accel(
    s: &BikebotState,
    yaw_accel: f64,
    ext: &RollTorquePort,
    p: &BikebotParams,
) -> Result<f64, DynamicsError> {
    if !yaw_accel.is_finite() {
        return Err(DynamicsError::NonFinite("yaw_accel"));
    }
    if !s.is_finite() {
        return Err(DynamicsError::NonFinite("state"));
    }
    let torque =
        p.roll_drift(s.roll, s.yaw_rate, s.speed) + p.roll_input_gain(s.roll) * yaw_accel + ext.at(s.t);
    Ok(torque / p.total_roll_inertia())
}

/// Steering-induced balance torque in its collected `tan(phi)` form.
///
/// Only used for analysis; the simulator integrates the full roll equation.
pub fn steering_torque(s: &BikebotState, p: &BikebotParams) -> Result<f64, DynamicsError> {
    if s.speed < MIN_STEER_SPEED {
        return Err(DynamicsError::LowSpeed(s.speed));
    }
    let l = p.wheelbase;
    let pre = p.mass * p.com_height * p.caster.cos() * s.speed / l;
    let bracket = p.steer_lever() * s.roll_rate / l * s.roll.tan() + p.com_offset * s.accel / s.speed
        - s.speed;
    Ok(pre * bracket * s.steer.tan())
}

/// Steering angle that produces `yaw_rate_des`, clamped to `steer_max`.
///
/// Returns `(clamped, unclamped)`.
pub fn steering_from_yawrate(
    yaw_rate_des: f64,
    speed: f64,
    roll: f64,
    steer_max: f64,
    p: &BikebotParams,
) -> Result<(f64, f64), DynamicsError> {
    if speed < MIN_STEER_SPEED {
        return Err(DynamicsError::LowSpeed(speed));
    }
    let raw = (yaw_rate_des * p.wheelbase * roll.cos() / (speed * p.caster.cos())).atan();
    Ok((raw.clamp(-steer_max, steer_max), raw))
}

type Vec8 = SVector<f64, 8>;

// state vector layout
const X: usize = 0;
const Y: usize = 1;
const YAW: usize = 2;
const SPEED: usize = 3;
const ACCEL: usize = 4;
const STEER: usize = 5;
const ROLL: usize = 6;
const ROLL_RATE: usize = 7;

/// Bikebot plant: physical parameters plus actuator limits.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BikeModel {
    pub params: BikebotParams,
    pub limits: ActuatorLimits,
}

impl BikeModel {
    pub fn new(params: BikebotParams, limits: ActuatorLimits) -> Self {
        Self { params, limits }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        self.params.validate()?;
        self.limits.validate()
    }

    /// Steering rate produced by the servo for a set-point.
    pub fn steer_rate(&self, steer: f64, setpoint: f64) -> f64 {
        let lim = &self.limits;
        let target = setpoint.clamp(-lim.steer_max, lim.steer_max);
        ((target - steer) / lim.steer_time_constant).clamp(-lim.steer_rate_max, lim.steer_rate_max)
    }

    fn pack(s: &BikebotState) -> Vec8 {
        Vec8::from([s.x, s.y, s.yaw, s.speed, s.accel, s.steer, s.roll, s.roll_rate])
    }

    fn unpack(&self, z: &Vec8, t: f64, cmd: &DriveCommand) -> Result<BikebotState, DynamicsError> {
        let mut s = BikebotState {
            t,
            x: z[X],
            y: z[Y],
            yaw: z[YAW],
            speed: z[SPEED],
            accel: z[ACCEL],
            steer: z[STEER],
            roll: z[ROLL],
            roll_rate: z[ROLL_RATE],
            ..Default::default()
        };
        s.yaw_rate = yaw_rate(s.speed, s.steer, s.roll, &self.params)?;
        s.steer_rate = self.steer_rate(s.steer, cmd.steer);
        Ok(s)
    }

    fn derivative(
        &self,
        z: &Vec8,
        t: f64,
        cmd: &DriveCommand,
        ext: &RollTorquePort,
    ) -> Result<Vec8, DynamicsError> {
        let s = self.unpack(z, t, cmd)?;
        let (vx, vy) = s.planar_velocity();
        let lim = &self.limits;
        let speed_rate = if (s.speed >= lim.speed_max && s.accel > 0.0) || (s.speed <= 0.0 && s.accel < 0.0) {
            0.0
        } else {
            s.accel
        };
        let jerk = if (s.accel >= lim.accel_max && cmd.jerk > 0.0)
            || (s.accel <= -lim.accel_max && cmd.jerk < 0.0)
        {
            0.0
        } else {
            cmd.jerk
        };
        let u_yaw = yaw_accel(&s, &self.params)?;
        let roll_acc = roll_accel(&s, u_yaw, ext, &self.params)?;
        Ok(Vec8::from([vx, vy, s.yaw_rate, speed_rate, jerk, s.steer_rate, s.roll_rate, roll_acc]))
    }

    /// Derivatives of the rear-contact position, for constraint checks.
    pub fn position_rates(&self, s: &BikebotState) -> (f64, f64) {
        s.planar_velocity()
    }

    /// One fixed RK4 step of the coupled kinematics, steering servo and roll
    /// dynamics.
    pub fn step(
        &self,
        s: &BikebotState,
        cmd: &DriveCommand,
        ext: &RollTorquePort,
        dt: f64,
    ) -> Result<BikebotState, DynamicsError> {
        if !(dt > 0.0 && dt <= MAX_STEP) {
            return Err(DynamicsError::BadStep(dt));
        }
        if !cmd.jerk.is_finite() || !cmd.steer.is_finite() {
            return Err(DynamicsError::NonFinite("command"));
        }
        if s.roll.abs() >= std::f64::consts::FRAC_PI_2 {
            return Err(DynamicsError::BalanceLost(s.roll, s.t));
        }
        let lost = |_| DynamicsError::BalanceLost(s.roll, s.t);
        let z0 = Self::pack(s);
        let t = s.t;
        let k1 = self.derivative(&z0, t, cmd, ext).map_err(lost)?;
        let k2 = self.derivative(&(z0 + k1 * (0.5 * dt)), t + 0.5 * dt, cmd, ext).map_err(lost)?;
        let k3 = self.derivative(&(z0 + k2 * (0.5 * dt)), t + 0.5 * dt, cmd, ext).map_err(lost)?;
        let k4 = self.derivative(&(z0 + k3 * dt), t + dt, cmd, ext).map_err(lost)?;
        let mut z = z0 + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);

        let lim = &self.limits;
        if z[SPEED] >= lim.speed_max {
            z[SPEED] = lim.speed_max;
            z[ACCEL] = z[ACCEL].min(0.0);
        } else if z[SPEED] <= 0.0 {
            z[SPEED] = 0.0;
            z[ACCEL] = z[ACCEL].max(0.0);
        }
        z[ACCEL] = z[ACCEL].clamp(-lim.accel_max, lim.accel_max);
        z[STEER] = z[STEER].clamp(-lim.steer_max, lim.steer_max);

        if !z.iter().all(|v| v.is_finite()) || z[ROLL].abs() >= std::f64::consts::FRAC_PI_2 - MIN_ROLL_COS {
            return Err(DynamicsError::BalanceLost(z[ROLL], t + dt));
        }
        self.unpack(&z, t + dt, cmd).map_err(|_| DynamicsError::BalanceLost(z[ROLL], t + dt))
    }
}
