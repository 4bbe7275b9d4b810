//! External/internal convertible control: third-order planar tracking with
//! roll regulation about the balance equilibrium manifold.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{steering_from_yawrate, BikebotParams, BikebotState, DriveCommand, DynamicsError, MIN_STEER_SPEED};
use crate::reference::{RefSample, Reference};

/// Half-width of the manifold root bracket (rad).
pub const MANIFOLD_BRACKET: f64 = std::f64::consts::FRAC_PI_4;
/// Largest yaw acceleration fed to the manifold solve (rad/s^2).
pub const MANIFOLD_INPUT_MAX: f64 = 50.0;
/// Smallest roll input gain accepted by the balance law (N m s^2).
pub const MIN_ROLL_GAIN: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EicError {
    #[error("input matrix singular at speed {0:.4} m/s")]
    SingularKpsi(f64),
    #[error("no balance equilibrium in the bracket for yaw acceleration {0:.4}")]
    NoRoot(f64),
    #[error("roll input gain {0:.3e} too small")]
    HSingular(f64),
    #[error("invalid gains: {0}")]
    InvalidGains(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Tracking (`a0..a2`) and balance (`b0, b1`) gains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerGains {
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
    pub b0: f64,
    pub b1: f64,
    /// Controller period (s).
    pub period: f64,
    /// Cutoff of the manifold derivative filter (Hz).
    pub manifold_cutoff_hz: f64,
    /// Fraction of the steering-sustainable lean the manifold may request.
    pub lean_fraction: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self { a0: 10.0, a1: 6.0, a2: 3.0, b0: 180.0, b1: 25.0, period: 0.02, manifold_cutoff_hz: 10.0, lean_fraction: 0.7 }
    }
}

impl ControllerGains {
    pub fn validate(&self) -> Result<(), EicError> {
        for (name, v) in [
            ("a0", self.a0),
            ("a1", self.a1),
            ("a2", self.a2),
            ("b0", self.b0),
            ("b1", self.b1),
            ("period", self.period),
            ("manifold_cutoff_hz", self.manifold_cutoff_hz),
            ("lean_fraction", self.lean_fraction),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(EicError::InvalidGains(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Smoothing factor of the first-order derivative filter.
    pub fn filter_alpha(&self) -> f64 {
        let rc = 1.0 / (2.0 * std::f64::consts::PI * self.manifold_cutoff_hz);
        self.period / (rc + self.period)
    }
}

/// Position, velocity and acceleration errors `r - r_d`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrackingError {
    pub pos: Vector2<f64>,
    pub vel: Vector2<f64>,
    pub acc: Vector2<f64>,
}

/// Planar velocity and acceleration of the rear contact implied by the state.
pub fn planar_motion(s: &BikebotState) -> (Vector2<f64>, Vector2<f64>) {
    let (sn, c) = s.yaw.sin_cos();
    let vel = Vector2::new(s.speed * c, s.speed * sn);
    let acc = Vector2::new(
        s.accel * c - s.speed * sn * s.yaw_rate,
        s.accel * sn + s.speed * c * s.yaw_rate,
    );
    (vel, acc)
}

pub fn tracking_errors(s: &BikebotState, r: &RefSample) -> TrackingError {
    let (vel, acc) = planar_motion(s);
    TrackingError { pos: Vector2::new(s.x, s.y) - r.pos, vel: vel - r.vel, acc: acc - r.acc }
}

/// Speed jerk and yaw acceleration that place the closed-loop third
/// derivative at `r_d''' - a2 e'' - a1 e' - a0 e`.
pub fn tracking_control(
    s: &BikebotState,
    r: &RefSample,
    g: &ControllerGains,
) -> Result<(f64, f64, TrackingError), EicError> {
    if !(s.speed >= MIN_STEER_SPEED) {
        return Err(EicError::SingularKpsi(s.speed));
    }
    let e = tracking_errors(s, r);
    let ur = r.jerk - e.acc * g.a2 - e.vel * g.a1 - e.pos * g.a0;
    let (sn, c) = s.yaw.sin_cos();
    let w = s.yaw_rate;
    // r''' = -R w + K u with K = [[c, -v s], [s, v c]]
    let rr = Vector2::new(s.speed * w * c + 2.0 * s.accel * sn, s.speed * w * sn - 2.0 * s.accel * c);
    let rhs = ur + rr * w;
    let jerk = c * rhs.x + sn * rhs.y;
    let yaw_acc = (-sn * rhs.x + c * rhs.y) / s.speed;
    Ok((jerk, yaw_acc, e))
}

/// Roll torque balance `f_1(roll) + h(roll) u_psi` at fixed speed and yaw rate.
fn manifold_residual(roll: f64, u_psi: f64, s: &BikebotState, p: &BikebotParams) -> (f64, f64) {
    let mh = p.mass * p.com_height;
    let (sn, c) = roll.sin_cos();
    let w = s.yaw_rate;
    let val = p.roll_drift(roll, w, s.speed) + p.roll_input_gain(roll) * u_psi;
    let der = mh * (-w * sn * s.speed + p.com_height * w * w * (c * c - sn * sn) + p.gravity * c)
        - mh * p.steer_lever() * sn * u_psi;
    (val, der)
}

/// Equilibrium roll angle for the yaw acceleration `u_psi`.
///
/// Safeguarded Newton inside `(-45 deg, 45 deg)`, started from `prev` when
/// given so the root is tracked continuously.
pub fn balance_manifold(
    u_psi: f64,
    s: &BikebotState,
    p: &BikebotParams,
    prev: Option<f64>,
) -> Result<f64, EicError> {
    if !u_psi.is_finite() {
        return Err(EicError::NoRoot(u_psi));
    }
    let (mut lo, mut hi) = (-MANIFOLD_BRACKET, MANIFOLD_BRACKET);
    let (f_lo, _) = manifold_residual(lo, u_psi, s, p);
    let (f_hi, _) = manifold_residual(hi, u_psi, s, p);
    if f_lo == 0.0 {
        return Ok(lo);
    }
    if f_hi == 0.0 {
        return Ok(hi);
    }
    if f_lo.signum() == f_hi.signum() {
        return Err(EicError::NoRoot(u_psi));
    }
    let lo_negative = f_lo < 0.0;
    let mut x = prev.filter(|r| r.abs() < MANIFOLD_BRACKET).unwrap_or(0.0);
    for _ in 0..100 {
        let (f, df) = manifold_residual(x, u_psi, s, p);
        if f == 0.0 {
            return Ok(x);
        }
        if (f < 0.0) == lo_negative {
            lo = x;
        } else {
            hi = x;
        }
        let newton = x - f / df;
        let next = if df != 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if (next - x).abs() < 1e-12 || hi - lo < 1e-12 {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

/// Largest lean the steering can hold at `speed`: centrifugal torque at full
/// steer against gravity, upright approximation.
pub fn sustainable_lean(speed: f64, steer_max: f64, p: &BikebotParams) -> f64 {
    let ratio = speed * speed * p.caster.cos() * steer_max.tan() / (p.gravity * p.wheelbase);
    ratio.min(1.0).asin()
}

/// Manifold root with its filtered first and second derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ManifoldState {
    pub roll: f64,
    pub rate: f64,
    pub accel: f64,
}

/// Yaw acceleration that drives the roll error `e_b = roll - roll_e`
/// along `e_b'' + b1 e_b' + b0 e_b = 0`.
pub fn balance_control(
    s: &BikebotState,
    m: &ManifoldState,
    g: &ControllerGains,
    p: &BikebotParams,
) -> Result<f64, EicError> {
    let h = p.roll_input_gain(s.roll);
    if !(h.abs() >= MIN_ROLL_GAIN) {
        return Err(EicError::HSingular(h));
    }
    let e = s.roll - m.roll;
    let de = s.roll_rate - m.rate;
    let ub = m.accel - g.b1 * de - g.b0 * e;
    let f1 = p.roll_drift(s.roll, s.yaw_rate, s.speed);
    Ok((p.total_roll_inertia() * ub - f1) / h)
}

/// Everything computed at one controller tick.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EicOutput {
    pub command: DriveCommand,
    /// Speed jerk from the tracking law.
    pub jerk: f64,
    /// Yaw acceleration requested by the tracking law.
    pub tracking_yaw_accel: f64,
    /// Yaw acceleration issued by the balance law.
    pub balance_yaw_accel: f64,
    pub manifold: ManifoldState,
    pub error: TrackingError,
    /// Roll error and its rate against the manifold.
    pub roll_error: f64,
    pub roll_error_rate: f64,
    /// Steering set-point before clamping.
    pub raw_steer: f64,
    /// True when the previous command was held after a singularity.
    pub held: bool,
}

/// Stateful controller: tracks the previous manifold root and filters its
/// derivatives across ticks.
#[derive(Debug, Clone, PartialEq)]
pub struct EicController {
    pub gains: ControllerGains,
    pub params: BikebotParams,
    pub steer_max: f64,
    pub speed_max: f64,
    /// Feed-forward horizon converting a yaw acceleration into a yaw-rate
    /// set-point so the steering lag reaches it within one period.
    pub lead: f64,
    prev_root: Option<f64>,
    rate: f64,
    accel: f64,
    last: DriveCommand,
}

impl EicController {
    pub fn new(gains: ControllerGains, params: BikebotParams, limits: &crate::dynamics::ActuatorLimits) -> Self {
        let t = gains.period;
        let lead = t / (1.0 - (-t / limits.steer_time_constant).exp());
        Self {
            gains,
            params,
            steer_max: limits.steer_max,
            speed_max: limits.speed_max,
            lead,
            prev_root: None,
            rate: 0.0,
            accel: 0.0,
            last: DriveCommand::default(),
        }
    }

    pub fn last_command(&self) -> DriveCommand {
        self.last
    }

    /// Forget manifold history, e.g. after a velocity re-initialization.
    pub fn reset_filter(&mut self) {
        self.prev_root = None;
        self.rate = 0.0;
        self.accel = 0.0;
    }

    fn update_manifold(&mut self, root: f64) -> ManifoldState {
        let t = self.gains.period;
        let alpha = self.gains.filter_alpha();
        let raw_rate = match self.prev_root {
            Some(prev) => (root - prev) / t,
            None => 0.0,
        };
        let old_rate = self.rate;
        self.rate += alpha * (raw_rate - self.rate);
        let raw_acc = if self.prev_root.is_some() { (self.rate - old_rate) / t } else { 0.0 };
        self.accel += alpha * (raw_acc - self.accel);
        self.prev_root = Some(root);
        ManifoldState { roll: root, rate: self.rate, accel: self.accel }
    }

    fn compute(&mut self, s: &BikebotState, r: &RefSample) -> Result<EicOutput, EicError> {
        let (jerk, u_psi, error) = tracking_control(s, r, &self.gains)?;
        let u_psi_sat = u_psi.clamp(-MANIFOLD_INPUT_MAX, MANIFOLD_INPUT_MAX);
        let root = balance_manifold(u_psi_sat, s, &self.params, self.prev_root)?;
        let lean_max = self.gains.lean_fraction * sustainable_lean(s.speed, self.steer_max, &self.params);
        let root = root.clamp(-lean_max, lean_max);
        let manifold = self.update_manifold(root);
        let ubar = balance_control(s, &manifold, &self.gains, &self.params)?;
        let yaw_rate_des = s.yaw_rate + ubar * self.lead;
        let (steer, raw) = steering_from_yawrate(yaw_rate_des, s.speed, s.roll, self.steer_max, &self.params)?;
        let jerk = if s.speed >= self.speed_max { jerk.min(0.0) } else { jerk };
        Ok(EicOutput {
            command: DriveCommand { jerk, steer },
            jerk,
            tracking_yaw_accel: u_psi,
            balance_yaw_accel: ubar,
            manifold,
            error,
            roll_error: s.roll - manifold.roll,
            roll_error_rate: s.roll_rate - manifold.rate,
            raw_steer: raw,
            held: false,
        })
    }

    /// One controller tick. On any singularity the previous command is held
    /// and the error is returned alongside.
    pub fn step(&mut self, s: &BikebotState, reference: &Reference) -> (EicOutput, Option<EicError>) {
        let r = reference.sample(s.t);
        match self.compute(s, &r) {
            Ok(out) => {
                self.last = out.command;
                (out, None)
            }
            Err(e) => {
                let out = EicOutput {
                    command: self.last,
                    error: tracking_errors(s, &r),
                    raw_steer: self.last.steer,
                    held: true,
                    ..Default::default()
                };
                (out, Some(e))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{roll_accel, ActuatorLimits, RollTorquePort};
    use approx::assert_relative_eq;

    fn straight(t: f64, v: f64) -> RefSample {
        Reference::straight(v).sample(t)
    }

    #[test]
    fn zero_error_ride_needs_no_input() {
        let s = BikebotState { t: 2.0, x: 2.0, ..BikebotState::riding(1.0) };
        let (jerk, u, e) = tracking_control(&s, &straight(2.0, 1.0), &ControllerGains::default()).unwrap();
        assert_eq!((jerk, u), (0.0, 0.0));
        assert_eq!(e.pos, Vector2::zeros());
    }

    #[test]
    fn lateral_offset_hand_value() {
        let s = BikebotState { y: 0.1, ..BikebotState::riding(1.0) };
        let (jerk, u, _) = tracking_control(&s, &straight(0.0, 1.0), &ControllerGains::default()).unwrap();
        assert_relative_eq!(jerk, 0.0, epsilon = 1e-15);
        assert_relative_eq!(u, -1.0, epsilon = 1e-12);
        let s2 = BikebotState { speed: 0.5, ..s };
        let r = Reference::straight(0.5).sample(0.0);
        let (_, u2, _) = tracking_control(&s2, &r, &ControllerGains::default()).unwrap();
        assert_relative_eq!(u2, -2.0, epsilon = 1e-12);
    }

    #[test]
    fn low_speed_is_singular() {
        let s = BikebotState::riding(0.01);
        assert!(matches!(
            tracking_control(&s, &straight(0.0, 1.0), &ControllerGains::default()),
            Err(EicError::SingularKpsi(_))
        ));
    }

    #[test]
    fn closed_loop_third_derivative_matches_design() {
        // r''' = -R w + K u must equal u_r for any state
        let s = BikebotState {
            x: 0.3,
            y: -0.2,
            yaw: 0.4,
            speed: 1.1,
            accel: 0.3,
            yaw_rate: 0.25,
            ..Default::default()
        };
        let r = Reference::straight(1.0).sample(0.5);
        let g = ControllerGains::default();
        let (jerk, u, e) = tracking_control(&s, &r, &g).unwrap();
        let (sn, c) = s.yaw.sin_cos();
        let w = s.yaw_rate;
        let rr = Vector2::new(s.speed * w * c + 2.0 * s.accel * sn, s.speed * w * sn - 2.0 * s.accel * c);
        let ku = Vector2::new(c * jerk - s.speed * sn * u, sn * jerk + s.speed * c * u);
        let r3 = -rr * w + ku;
        let ur = r.jerk - e.acc * g.a2 - e.vel * g.a1 - e.pos * g.a0;
        assert_relative_eq!(r3, ur, epsilon = 1e-12);
    }

    #[test]
    fn manifold_examples() {
        let p = BikebotParams::default();
        let s = BikebotState::riding(1.0);
        assert_eq!(balance_manifold(0.0, &s, &p, None).unwrap(), 0.0);
        let root = balance_manifold(0.5, &s, &p, None).unwrap();
        let (res, _) = manifold_residual(root, 0.5, &s, &p);
        assert!(res.abs() < 1e-9, "{res}");
        assert_relative_eq!(root.to_degrees(), -1.153, epsilon = 2e-3);
        // the same root from a distant warm start
        let again = balance_manifold(0.5, &s, &p, Some(0.5)).unwrap();
        assert_relative_eq!(root, again, epsilon = 1e-10);
        assert!(matches!(balance_manifold(200.0, &s, &p, None), Err(EicError::NoRoot(_))));
    }

    #[test]
    fn balance_law_cancels_roll_dynamics() {
        let p = BikebotParams::default();
        let g = ControllerGains::default();
        let s = BikebotState {
            roll: 2f64.to_radians(),
            roll_rate: 0.1,
            yaw_rate: 0.3,
            ..BikebotState::riding(1.0)
        };
        let m = ManifoldState { roll: 0.01, rate: -0.02, accel: 0.3 };
        let ubar = balance_control(&s, &m, &g, &p).unwrap();
        let acc = roll_accel(&s, ubar, &RollTorquePort::none(), &p).unwrap();
        let e = s.roll - m.roll;
        let de = s.roll_rate - m.rate;
        let closed = (acc - m.accel) + g.b1 * de + g.b0 * e;
        assert!(closed.abs() < 1e-12, "{closed}");

        let zero = balance_control(&BikebotState::riding(1.0), &ManifoldState::default(), &g, &p).unwrap();
        assert_eq!(zero, 0.0);
        let tipped = BikebotState { roll: 89.9f64.to_radians(), ..BikebotState::riding(1.0) };
        assert!(matches!(
            balance_control(&tipped, &ManifoldState::default(), &g, &p),
            Err(EicError::HSingular(_))
        ));
    }

    #[test]
    fn controller_holds_previous_command_on_fault() {
        let limits = ActuatorLimits::default();
        let mut c = EicController::new(ControllerGains::default(), BikebotParams::default(), &limits);
        let reference = Reference::straight(1.0);
        let s = BikebotState { y: 0.05, ..BikebotState::riding(1.0) };
        let (ok, err) = c.step(&s, &reference);
        assert!(err.is_none());
        let slow = BikebotState { speed: 0.0, ..s };
        let (held, err) = c.step(&slow, &reference);
        assert!(matches!(err, Some(EicError::SingularKpsi(_))));
        assert!(held.held);
        assert_eq!(held.command, ok.command);
    }

    #[test]
    fn filter_alpha_for_default_rate() {
        assert_relative_eq!(ControllerGains::default().filter_alpha(), 0.5568, epsilon = 1e-4);
    }
}
