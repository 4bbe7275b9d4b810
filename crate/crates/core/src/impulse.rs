//! Impulsive balance torque: choosing the re-initialized roll rate and
//! speed, mapping them to a constant roll torque and a leg command, and
//! the closed-form feasibility bounds.

use std::sync::Arc;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{BikeModel, BikebotParams, BikebotState, DynamicsError, RollTorquePort, MIN_STEER_SPEED};
use crate::eic::EicController;
use crate::leg::{self, IkConfig, LegError, LegGeometry, Side};
use crate::reference::Reference;
use crate::sim::ClosedLoop;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ImpulseError {
    #[error("no candidate re-initialization satisfies the constraints")]
    Infeasible,
    #[error("reference is degenerate at t = {0}")]
    DegenerateReference(f64),
    #[error("contact force {0:.1} N exceeds the limit")]
    ForceLimit(f64),
    #[error("impulse torque must be nonzero")]
    ZeroTorque,
    #[error("roll rate is zero, sign undefined")]
    ZeroRate,
    #[error("invalid impulse config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Leg(#[from] LegError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImpulseConfig {
    /// Torque window (s).
    pub kappa: f64,
    /// Rollout horizon for the cost (s).
    pub horizon: f64,
    pub torque_max: f64,
    pub force_max: f64,
    pub speed_max: f64,
    pub steer_max_deg: f64,
    /// Lateral offset of the foot contact (m).
    pub lateral: f64,
    /// Diagonal state weights on position error (2), velocity error (2),
    /// roll error and roll-error rate.
    pub state_weights: [f64; 6],
    /// Diagonal weights on speed jerk and balance yaw acceleration.
    pub input_weights: [f64; 2],
    /// Grid points per decision axis.
    pub grid: usize,
    /// Speed change available over the window is `kappa * accel_max`.
    pub accel_max: f64,
    /// Rollouts whose roll passes this are rejected (deg).
    pub roll_limit_deg: f64,
    /// Local refinement passes after the grid.
    pub refine_iters: usize,
}

impl Default for ImpulseConfig {
    fn default() -> Self {
        Self {
            kappa: 0.05,
            horizon: 1.0,
            torque_max: 30.0,
            force_max: 190.0,
            speed_max: 1.5,
            steer_max_deg: 30.0,
            lateral: 0.3,
            state_weights: [1.0, 1.0, 1.0, 1.0, 10.0, 10.0],
            input_weights: [10.0, 10.0],
            grid: 21,
            accel_max: 3.0,
            roll_limit_deg: 45.0,
            refine_iters: 24,
        }
    }
}

impl ImpulseConfig {
    pub fn validate(&self) -> Result<(), ImpulseError> {
        let pos = [
            ("kappa", self.kappa),
            ("horizon", self.horizon),
            ("torque_max", self.torque_max),
            ("force_max", self.force_max),
            ("speed_max", self.speed_max),
            ("steer_max_deg", self.steer_max_deg),
            ("lateral", self.lateral),
            ("roll_limit_deg", self.roll_limit_deg),
        ];
        for (name, v) in pos {
            if !(v.is_finite() && v > 0.0) {
                return Err(ImpulseError::InvalidConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.accel_max.is_finite() && self.accel_max >= 0.0) {
            return Err(ImpulseError::InvalidConfig(format!("accel_max must be >= 0, got {}", self.accel_max)));
        }
        if self.state_weights.iter().chain(&self.input_weights).any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(ImpulseError::InvalidConfig("weights must be positive".into()));
        }
        if self.grid < 2 {
            return Err(ImpulseError::InvalidConfig(format!("grid needs >= 2 points, got {}", self.grid)));
        }
        Ok(())
    }

    pub fn steer_max(&self) -> f64 {
        self.steer_max_deg.to_radians()
    }

    /// Largest roll torque usable: actuator cap or force cap at the contact.
    pub fn torque_cap(&self) -> f64 {
        self.torque_max.min(self.force_max * self.lateral)
    }
}

/// Roll torque for a requested roll-rate change over the window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpulseTorque {
    pub torque: f64,
    /// True when the request exceeded the cap and was saturated.
    pub clamped: bool,
}

/// Constant torque `J_t (target - current) / kappa`, saturated at the cap.
pub fn impulse_torque(target_rate: f64, rate: f64, cfg: &ImpulseConfig, p: &BikebotParams) -> ImpulseTorque {
    let raw = p.total_roll_inertia() * (target_rate - rate) / cfg.kappa;
    let cap = cfg.torque_max;
    if raw.abs() > cap {
        ImpulseTorque { torque: cap.copysign(raw), clamped: true }
    } else {
        ImpulseTorque { torque: raw, clamped: false }
    }
}

/// Roll angle and rate after a constant torque over `kappa` with every other
/// roll term frozen.
pub fn ideal_jump(roll: f64, rate: f64, torque: f64, kappa: f64, p: &BikebotParams) -> (f64, f64) {
    let jt = p.total_roll_inertia();
    (roll + rate * kappa + torque * kappa * kappa / (2.0 * jt), rate + torque * kappa / jt)
}

/// Constants of the roll motion linearized about upright at fixed steer:
/// `roll'' - k1^2 roll + k2 tan(steer) = 0`.
pub fn linearized_gains(speed: f64, p: &BikebotParams) -> (f64, f64) {
    let jt = p.total_roll_inertia();
    let k1 = (p.mass * p.com_height * p.gravity / jt).sqrt();
    let k2 = p.mass * p.com_height * speed * speed / (jt * p.wheelbase);
    (k1, k2)
}

/// Closed-form roll angle and rate of the linearized motion after `t`.
pub fn linearized_roll(roll: f64, rate: f64, steer: f64, speed: f64, t: f64, p: &BikebotParams) -> (f64, f64) {
    let (k1, k2) = linearized_gains(speed, p);
    let (c, s) = ((k1 * t).cosh(), (k1 * t).sinh());
    let drift = k2 * steer.tan() / (k1 * k1);
    let phi = c * roll + s * rate / k1 - drift * (c - 1.0);
    let dphi = k1 * s * roll + c * rate - drift * k1 * s;
    (phi, dphi)
}

/// Lower bound on the impulse torque magnitude, as the closed-form
/// analysis states it.
pub fn min_impulse(roll: f64, rate: f64, speed: f64, cfg: &ImpulseConfig, p: &BikebotParams) -> f64 {
    let (k1, k2) = linearized_gains(speed, p);
    let k3 = k2 / k1;
    (roll + rate + k3 * cfg.steer_max().tan()).abs() / (cfg.kappa * p.total_roll_inertia())
}

/// Sign test an impulse must pass to bring the roll back, as stated in
/// the closed-form analysis.
pub fn check_necessary_condition(
    roll: f64,
    rate: f64,
    torque: f64,
    speed: f64,
    cfg: &ImpulseConfig,
    p: &BikebotParams,
) -> Result<bool, ImpulseError> {
    if rate == 0.0 {
        return Err(ImpulseError::ZeroRate);
    }
    let (k1, k2) = linearized_gains(speed, p);
    let k3 = k2 / k1;
    let v = roll + rate + k3 * cfg.steer_max().tan() + cfg.kappa * p.total_roll_inertia() * torque;
    Ok(rate.signum() * v < 0.0)
}

/// Leg side that produces a roll torque of this sign.
pub fn side_for(torque: f64) -> Side {
    if torque < 0.0 {
        Side::Right
    } else {
        Side::Left
    }
}

/// Everything the plant and the leg need to deliver one impulse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpulseCommand {
    pub torque: f64,
    pub t_start: f64,
    pub t_end: f64,
    pub side: Side,
    /// Vertical ground force (N).
    pub force: f64,
    pub theta: [f64; 3],
    pub joint_torque: [f64; 3],
    pub clamped: bool,
}

impl ImpulseCommand {
    pub fn port(&self) -> RollTorquePort {
        RollTorquePort { torque: self.torque, active_from: self.t_start, active_until: self.t_end }
    }
}

/// Vertical force for `torque` at the configured lateral contact.
pub fn contact_force(torque: f64, cfg: &ImpulseConfig) -> Result<f64, ImpulseError> {
    if torque == 0.0 {
        return Err(ImpulseError::ZeroTorque);
    }
    let f = leg::vertical_force(torque.abs(), cfg.lateral);
    if f > cfg.force_max {
        return Err(ImpulseError::ForceLimit(f));
    }
    Ok(f)
}

/// Leg pose, ground force and joint torques for a roll impulse starting at
/// `t`. The foot is placed straight beside the rear contact.
pub fn leg_command(
    torque: f64,
    t: f64,
    roll: f64,
    cfg: &ImpulseConfig,
    geometry: &LegGeometry,
) -> Result<ImpulseCommand, ImpulseError> {
    let force = contact_force(torque, cfg)?;
    let side = side_for(torque);
    let y = if side == Side::Left { cfg.lateral } else { -cfg.lateral };
    let target = Vector3::new(0.0, y, 0.0);
    let joints = leg::inverse_kinematics(geometry, &target, roll, side, &IkConfig::default())?;
    let tau = leg::torques_from_force(geometry, &Vector3::new(0.0, 0.0, force), &joints, roll)?;
    let delivered = leg::applied_torque(&target, &Vector3::new(0.0, 0.0, force)).x;
    Ok(ImpulseCommand {
        torque: delivered,
        t_start: t,
        t_end: t + cfg.kappa,
        side,
        force,
        theta: joints.theta,
        joint_torque: tau.into(),
        clamped: false,
    })
}

/// Decision box around the pre-impulse state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecisionBox {
    pub rate: (f64, f64),
    pub speed: (f64, f64),
}

impl DecisionBox {
    /// Reachable roll rates follow the sign rule (the torque opposes the
    /// current roll rate); speed moves at most `kappa * accel_max`.
    pub fn around(s: &BikebotState, cfg: &ImpulseConfig, p: &BikebotParams) -> Self {
        let reach = cfg.torque_cap() * cfg.kappa / p.total_roll_inertia();
        let rate = if s.roll_rate > 0.0 {
            (s.roll_rate - reach, s.roll_rate)
        } else if s.roll_rate < 0.0 {
            (s.roll_rate, s.roll_rate + reach)
        } else {
            (-reach, reach)
        };
        let dv = cfg.kappa * cfg.accel_max;
        let lo = (s.speed - dv).max(MIN_STEER_SPEED);
        let hi = (s.speed + dv).min(cfg.speed_max);
        Self { rate, speed: (lo.min(hi), hi) }
    }

    pub fn contains(&self, rate: f64, speed: f64) -> bool {
        let tol = 1e-12;
        rate >= self.rate.0 - tol && rate <= self.rate.1 + tol && speed >= self.speed.0 - tol && speed <= self.speed.1 + tol
    }

    fn width(&self) -> (f64, f64) {
        (self.rate.1 - self.rate.0, self.speed.1 - self.speed.0)
    }

    fn clamp(&self, rate: f64, speed: f64) -> (f64, f64) {
        (rate.clamp(self.rate.0, self.rate.1), speed.clamp(self.speed.0, self.speed.1))
    }
}

/// Result of the re-initialization search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReinitDecision {
    pub roll_rate: f64,
    pub speed: f64,
    pub cost: f64,
    /// Cost of leaving the state alone; infinite if that rollout fails.
    pub baseline_cost: f64,
    /// Best cost on the grid before refinement.
    pub grid_cost: f64,
    pub rollouts: usize,
    pub rate_in_box: bool,
    pub speed_in_box: bool,
}

impl ReinitDecision {
    pub fn rate_change(&self, s: &BikebotState) -> f64 {
        self.roll_rate - s.roll_rate
    }
}

/// Closed loop rolled forward from re-initialized states.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub model: BikeModel,
    pub controller: EicController,
    pub reference: Arc<Reference>,
    pub state: BikebotState,
}

impl Rollout {
    /// `controller` is cloned and its manifold history dropped, matching
    /// what happens at a real re-initialization.
    pub fn new(model: BikeModel, controller: &EicController, reference: Arc<Reference>, state: BikebotState) -> Self {
        let mut controller = controller.clone();
        controller.reset_filter();
        Self { model, controller, reference, state }
    }

    /// Horizon cost from the state with roll rate and speed replaced, or
    /// `None` if the rollout leaves the admissible set.
    pub fn cost(&self, rate: f64, speed: f64, cfg: &ImpulseConfig) -> Option<f64> {
        let start = BikebotState { roll_rate: rate, speed, ..self.state };
        let mut cl = ClosedLoop::with_controller(self.model, self.controller.clone(), self.reference.clone(), start);
        let period = cl.controller.gains.period;
        let roll_limit = cfg.roll_limit_deg.to_radians();
        let steer_max = cfg.steer_max();
        let n = (cfg.horizon / cl.dt).round() as usize;
        let w = &cfg.state_weights;
        let q = &cfg.input_weights;
        let mut total = 0.0;
        for _ in 0..n {
            let rep = cl.step(&RollTorquePort::none()).ok()?;
            if let Some(out) = rep.tick {
                let e = &out.error;
                let x = w[0] * e.pos.x.powi(2)
                    + w[1] * e.pos.y.powi(2)
                    + w[2] * e.vel.x.powi(2)
                    + w[3] * e.vel.y.powi(2)
                    + w[4] * out.roll_error.powi(2)
                    + w[5] * out.roll_error_rate.powi(2);
                let u = q[0] * out.jerk.powi(2) + q[1] * out.balance_yaw_accel.powi(2);
                let excess = (out.raw_steer.abs() - steer_max).max(0.0);
                total += (x + u + 1e3 * excess * excess) * period;
            }
            if cl.state.roll.abs() > roll_limit || cl.state.speed > cfg.speed_max + 1e-9 {
                return None;
            }
        }
        total.is_finite().then_some(total)
    }
}

fn axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if hi <= lo {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Roll rate and speed after the impulse that minimize the horizon cost.
///
/// A grid over the decision box seeds a compass search; grid rollouts run
/// in parallel and are reduced in grid order.
pub fn optimize_reinit(rollout: &Rollout, cfg: &ImpulseConfig) -> Result<ReinitDecision, ImpulseError> {
    cfg.validate()?;
    let s = rollout.state;
    if !s.is_finite() {
        return Err(ImpulseError::Dynamics(DynamicsError::NonFinite("state")));
    }
    if !rollout.reference.sample(s.t).vel.norm().is_finite() {
        return Err(ImpulseError::DegenerateReference(s.t));
    }
    let p = rollout.model.params;
    let bx = DecisionBox::around(&s, cfg, &p);
    let (wr, wv) = bx.width();
    if wr <= 0.0 && wv <= 0.0 {
        return Err(ImpulseError::Infeasible);
    }
    let rates = axis(bx.rate.0, bx.rate.1, cfg.grid);
    let speeds = axis(bx.speed.0, bx.speed.1, cfg.grid);
    let mut cands: Vec<(f64, f64)> = rates.iter().flat_map(|&r| speeds.iter().map(move |&v| (r, v))).collect();
    let (r0, v0) = bx.clamp(s.roll_rate, s.speed);
    cands.push((r0, v0));
    let costs: Vec<Option<f64>> = cands.par_iter().map(|&(r, v)| rollout.cost(r, v, cfg)).collect();
    let mut rollouts = costs.len();
    let baseline_cost = costs.last().copied().flatten().unwrap_or(f64::INFINITY);
    let (best_i, grid_cost) = costs
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.map(|c| (i, c)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .ok_or(ImpulseError::Infeasible)?;
    let (mut br, mut bv) = cands[best_i];
    let mut best = grid_cost;

    let span = |n: usize, w: f64| if n > 1 { w / (n - 1) as f64 } else { 0.0 };
    let mut step = (span(rates.len(), wr) * 0.5, span(speeds.len(), wv) * 0.5);
    for _ in 0..cfg.refine_iters {
        if step.0 < 1e-5 && step.1 < 1e-5 {
            break;
        }
        let trials = [(step.0, 0.0), (-step.0, 0.0), (0.0, step.1), (0.0, -step.1)]
            .map(|(dr, dv)| bx.clamp(br + dr, bv + dv));
        let found: Vec<Option<f64>> = trials.par_iter().map(|&(r, v)| rollout.cost(r, v, cfg)).collect();
        rollouts += trials.len();
        let better = found
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.filter(|c| *c < best).map(|c| (i, c)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        match better {
            Some((i, c)) => {
                (br, bv) = trials[i];
                best = c;
            }
            None => step = (step.0 * 0.5, step.1 * 0.5),
        }
    }
    Ok(ReinitDecision {
        roll_rate: br,
        speed: bv,
        cost: best,
        baseline_cost,
        grid_cost,
        rollouts,
        rate_in_box: bx.rate.0 - 1e-12 <= br && br <= bx.rate.1 + 1e-12,
        speed_in_box: bx.speed.0 - 1e-12 <= bv && bv <= bx.speed.1 + 1e-12,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ActuatorLimits;
    use crate::eic::ControllerGains;
    use approx::assert_relative_eq;

    fn p() -> BikebotParams {
        BikebotParams::default()
    }

    #[test]
    fn torque_from_rate_change() {
        let cfg = ImpulseConfig::default();
        assert_eq!(impulse_torque(0.4, 0.4, &cfg, &p()).torque, 0.0);
        let t = impulse_torque(0.0, 0.3, &cfg, &p());
        assert_relative_eq!(t.torque, -19.14, epsilon = 1e-9);
        assert!(!t.clamped);
        let t = impulse_torque(0.0, 60f64.to_radians(), &cfg, &p());
        assert_eq!((t.torque, t.clamped), (-30.0, true));
    }

    #[test]
    fn force_division_and_limits() {
        let cfg = ImpulseConfig { lateral: 0.12, ..Default::default() };
        assert_relative_eq!(contact_force(19.14, &cfg).unwrap(), 159.5, epsilon = 1e-9);
        assert_eq!(side_for(19.14), Side::Left);
        assert!(matches!(contact_force(30.0, &cfg), Err(ImpulseError::ForceLimit(f)) if (f - 250.0).abs() < 1e-9));
        assert_eq!(contact_force(0.0, &cfg), Err(ImpulseError::ZeroTorque));
    }

    #[test]
    fn leg_command_sides_and_torque() {
        let cfg = ImpulseConfig::default();
        let g = LegGeometry::default();
        for torque in [-30.0, -19.14, 12.0, 30.0] {
            let c = leg_command(torque, 1.0, 0.03, &cfg, &g).unwrap();
            assert_relative_eq!(c.torque, torque, epsilon = 1e-12);
            assert_eq!(c.side, side_for(torque));
            assert!(c.force <= cfg.force_max);
            assert!(c.joint_torque.iter().all(|t| t.abs() <= g.torque_max));
            assert_relative_eq!(c.t_end - c.t_start, cfg.kappa, epsilon = 1e-12);
        }
    }

    #[test]
    fn bound_constants() {
        let cfg = ImpulseConfig::default();
        let (k1, k2) = linearized_gains(1.0, &p());
        assert_relative_eq!(k1, 5.0825, epsilon = 1e-4);
        assert_relative_eq!(k2, 3.0267, epsilon = 1e-4);
        assert_relative_eq!(min_impulse(0.0, 0.0, 1.0, &cfg, &p()), 2.156, epsilon = 1e-3);
        let v0 = min_impulse(0.02, 0.1, 0.0, &cfg, &p());
        assert_relative_eq!(v0, 0.12 / (0.05 * 3.19), epsilon = 1e-12);
    }

    #[test]
    fn necessary_condition_signs() {
        let cfg = ImpulseConfig::default();
        assert!(check_necessary_condition(0.05, 0.3, -30.0, 1.0, &cfg, &p()).unwrap());
        assert!(!check_necessary_condition(0.05, 0.3, 0.0, 1.0, &cfg, &p()).unwrap());
        assert_eq!(check_necessary_condition(0.05, 0.0, -30.0, 1.0, &cfg, &p()), Err(ImpulseError::ZeroRate));
    }

    #[test]
    fn linearized_closed_form_matches_integration() {
        let p = p();
        let (k1, k2) = linearized_gains(1.2, &p);
        let (roll0, rate0, steer) = (0.02, -0.1, 0.05);
        let (mut x, mut dx) = (roll0, rate0);
        let dt = 1e-4;
        let f = |x: f64| k1 * k1 * x - k2 * f64::tan(steer);
        for _ in 0..10000 {
            let (a1, b1) = (dx, f(x));
            let (a2, b2) = (dx + 0.5 * dt * b1, f(x + 0.5 * dt * a1));
            let (a3, b3) = (dx + 0.5 * dt * b2, f(x + 0.5 * dt * a2));
            let (a4, b4) = (dx + dt * b3, f(x + dt * a3));
            x += dt / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
            dx += dt / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4);
        }
        let (phi, dphi) = linearized_roll(roll0, rate0, steer, 1.2, 1.0, &p);
        assert!((phi - x).abs() < 1e-6 * phi.abs().max(1.0), "{phi} {x}");
        assert!((dphi - dx).abs() < 1e-6 * dphi.abs().max(1.0));
    }

    fn rollout(state: BikebotState) -> Rollout {
        let model = BikeModel::default();
        let ctrl = EicController::new(ControllerGains::default(), model.params, &ActuatorLimits::default());
        Rollout::new(model, &ctrl, Arc::new(Reference::straight(state.speed)), state)
    }

    #[test]
    fn balanced_state_needs_no_impulse() {
        let s = BikebotState { t: 1.0, x: 1.0, ..BikebotState::riding(1.0) };
        let cfg = ImpulseConfig { grid: 7, ..Default::default() };
        let d = optimize_reinit(&rollout(s), &cfg).unwrap();
        assert!(d.cost <= d.baseline_cost * 1.01 + 1e-12, "{d:?}");
        assert!(d.cost <= d.grid_cost);
        let reach = cfg.torque_cap() * cfg.kappa / p().total_roll_inertia();
        assert!(d.roll_rate.abs() <= reach);
    }

    #[test]
    fn zero_width_box_is_infeasible() {
        let s = BikebotState { t: 1.0, x: 1.0, roll_rate: 0.2, ..BikebotState::riding(1.5) };
        let cfg = ImpulseConfig { torque_max: 1e-300, accel_max: 0.0, ..Default::default() };
        let r = rollout(s);
        assert_eq!(optimize_reinit(&r, &cfg), Err(ImpulseError::Infeasible));
    }
}
