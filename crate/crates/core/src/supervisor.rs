//! Hybrid supervisor: impact detection, roll prediction, impulse triggering
//! and the region of attraction of the balance controller.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{BikeModel, BikebotState, DynamicsError, RollTorquePort};
use crate::eic::{ControllerGains, EicController};
use crate::impulse::{self, ImpulseCommand, ImpulseConfig, ImpulseError, ReinitDecision, Rollout};
use crate::leg::LegGeometry;
use crate::reference::Reference;
use crate::sim::ClosedLoop;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SupervisorError {
    #[error("illegal transition {from:?} -> {to:?}")]
    IllegalTransition { from: Mode, to: Mode },
    #[error("invalid supervisor config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Impulse(#[from] ImpulseError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for SupervisorError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detection {
    /// Longitudinal acceleration threshold only.
    #[default]
    Sensor,
    /// Front wheel reaching an obstacle face only.
    Geometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisorConfig {
    /// Impact detection threshold on |a_x| (m/s^2).
    pub accel_threshold: f64,
    /// Largest roll the balance controller is trusted with (deg).
    pub roll_max_deg: f64,
    /// Roll prediction horizon (s).
    pub horizon: f64,
    /// Detections closer than this merge into one (s).
    pub debounce: f64,
    /// How long after an impact the trigger stays armed (s).
    pub watch: f64,
    /// Time spent in recovery after an impulse (s).
    pub recovery: f64,
    pub detection: Detection,
}

impl Default for SupervisorConfig {
    fn default() -> Self {
        Self {
            accel_threshold: 5.0,
            roll_max_deg: 5.0,
            horizon: 0.2,
            debounce: 0.1,
            watch: 1.0,
            recovery: 0.5,
            detection: Detection::Sensor,
        }
    }
}

impl SupervisorConfig {
    pub fn validate(&self) -> Result<(), SupervisorError> {
        for (name, v) in [
            ("accel_threshold", self.accel_threshold),
            ("roll_max_deg", self.roll_max_deg),
            ("horizon", self.horizon),
            ("debounce", self.debounce),
            ("watch", self.watch),
            ("recovery", self.recovery),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(SupervisorError::InvalidConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Mode {
    #[default]
    Tracking,
    ImpactDetected,
    ImpulseActive,
    Recovery,
    Failed,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Tracking => "tracking",
            Mode::ImpactDetected => "impact_detected",
            Mode::ImpulseActive => "impulse_active",
            Mode::Recovery => "recovery",
            Mode::Failed => "failed",
        }
    }

    pub fn can_enter(self, to: Mode) -> bool {
        use Mode::*;
        matches!(
            (self, to),
            (Tracking, ImpactDetected)
                | (ImpactDetected, Tracking)
                | (ImpactDetected, ImpulseActive)
                | (ImpulseActive, Recovery)
                | (Recovery, Tracking)
                | (Tracking | ImpactDetected | ImpulseActive | Recovery, Failed)
        )
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub t: f64,
    pub from: Mode,
    pub to: Mode,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Fsm {
    mode: Mode,
    since: f64,
    pub transitions: Vec<Transition>,
}

impl Fsm {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Time the current mode was entered.
    pub fn since(&self) -> f64 {
        self.since
    }

    /// Moves to `to` if the transition is legal; otherwise the state is
    /// left untouched.
    pub fn request(&mut self, to: Mode, t: f64) -> Result<(), SupervisorError> {
        if !self.mode.can_enter(to) {
            return Err(SupervisorError::IllegalTransition { from: self.mode, to });
        }
        self.transitions.push(Transition { t, from: self.mode, to });
        self.mode = to;
        self.since = t;
        Ok(())
    }
}

/// Threshold test without memory.
pub fn detect_impact(accel_x: f64, geometric: bool, cfg: &SupervisorConfig) -> bool {
    match cfg.detection {
        Detection::Sensor => accel_x.abs() > cfg.accel_threshold,
        Detection::Geometric => geometric,
    }
}

/// Debounced impact detector.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ImpactDetector {
    last: Option<f64>,
}

impl ImpactDetector {
    pub fn update(&mut self, t: f64, accel_x: f64, geometric: bool, cfg: &SupervisorConfig) -> bool {
        if !detect_impact(accel_x, geometric, cfg) {
            return false;
        }
        if self.last.is_some_and(|t0| t - t0 < cfg.debounce) {
            return false;
        }
        self.last = Some(t);
        true
    }
}

/// Largest |roll| over `horizon` seconds of closed-loop riding from `s`.
/// The controller is cloned, so the caller's copy is untouched.
pub fn predict_roll(
    s: &BikebotState,
    controller: &EicController,
    model: &BikeModel,
    reference: &Arc<Reference>,
    horizon: f64,
) -> Result<f64, DynamicsError> {
    if !s.is_finite() {
        return Err(DynamicsError::NonFinite("state"));
    }
    let mut cl = ClosedLoop::with_controller(*model, controller.clone(), reference.clone(), *s);
    let mut peak = s.roll.abs();
    cl.run_for(horizon, &RollTorquePort::none(), |st, _| peak = peak.max(st.roll.abs()))?;
    Ok(peak)
}

/// Cells and duration of a region-of-attraction estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoaSpec {
    /// Half-widths of the roll (deg) and roll-rate (deg/s) axes.
    pub roll_span_deg: f64,
    pub rate_span_deg: f64,
    /// Points per axis; odd so the origin is a cell centre.
    pub roll_cells: usize,
    pub rate_cells: usize,
    pub duration: f64,
    /// Member iff |roll| ends below this (deg).
    pub settle_deg: f64,
    /// Runs whose roll passes this count as falls (deg).
    pub fall_deg: f64,
}

impl Default for RoaSpec {
    fn default() -> Self {
        Self {
            roll_span_deg: 12.0,
            rate_span_deg: 60.0,
            roll_cells: 25,
            rate_cells: 25,
            duration: 5.0,
            settle_deg: 1.0,
            fall_deg: 45.0,
        }
    }
}

impl RoaSpec {
    pub fn validate(&self) -> Result<(), SupervisorError> {
        if !(self.roll_span_deg > 0.0 && self.rate_span_deg > 0.0 && self.duration > 0.0 && self.settle_deg > 0.0) {
            return Err(SupervisorError::InvalidConfig("ROA spans, duration and settle angle must be > 0".into()));
        }
        if self.roll_cells < 3 || self.rate_cells < 3 || self.roll_cells * self.rate_cells > 10_000 {
            return Err(SupervisorError::InvalidConfig(format!(
                "ROA grid {}x{} must have 3..=10000 cells with >= 3 per axis",
                self.roll_cells, self.rate_cells
            )));
        }
        Ok(())
    }
}

/// Membership of (roll, roll rate) cells for straight riding at one speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoaGrid {
    pub speed: f64,
    pub spec: RoaSpec,
    /// Row-major over roll, then rate.
    pub member: Vec<bool>,
}

fn axis_value(span: f64, n: usize, i: usize) -> f64 {
    -span + 2.0 * span * i as f64 / (n - 1) as f64
}

impl RoaGrid {
    pub fn roll_deg(&self, i: usize) -> f64 {
        axis_value(self.spec.roll_span_deg, self.spec.roll_cells, i)
    }

    pub fn rate_deg(&self, j: usize) -> f64 {
        axis_value(self.spec.rate_span_deg, self.spec.rate_cells, j)
    }

    pub fn cell(&self, i: usize, j: usize) -> bool {
        self.member[i * self.spec.rate_cells + j]
    }

    fn index(&self, roll: f64, rate: f64) -> Option<(usize, usize)> {
        let locate = |v: f64, span: f64, n: usize| {
            let u = (v + span) / (2.0 * span) * (n - 1) as f64;
            let k = u.round();
            (k >= 0.0 && k <= (n - 1) as f64 && u.is_finite()).then_some(k as usize)
        };
        Some((
            locate(roll.to_degrees(), self.spec.roll_span_deg, self.spec.roll_cells)?,
            locate(rate.to_degrees(), self.spec.rate_span_deg, self.spec.rate_cells)?,
        ))
    }

    /// Conservative lookup of the nearest cell (angles in rad): outside
    /// the grid, on a non-member, or next to one reports false.
    pub fn contains(&self, roll: f64, rate: f64) -> bool {
        let Some((i, j)) = self.index(roll, rate) else {
            return false;
        };
        let (ni, nj) = (self.spec.roll_cells as isize, self.spec.rate_cells as isize);
        for (di, dj) in [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)] {
            let (a, b) = (i as isize + di, j as isize + dj);
            if a < 0 || b < 0 || a >= ni || b >= nj || !self.cell(a as usize, b as usize) {
                return false;
            }
        }
        true
    }

    pub fn members(&self) -> usize {
        self.member.iter().filter(|m| **m).count()
    }

    /// `varphi_b_deg,dot_varphi_b_deg_s,member` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SupervisorError> {
        let mut out = csv::Writer::from_writer(w);
        let err = |e: csv::Error| SupervisorError::Io(e.to_string());
        out.write_record(["varphi_b_deg", "dot_varphi_b_deg_s", "member"]).map_err(err)?;
        for i in 0..self.spec.roll_cells {
            for j in 0..self.spec.rate_cells {
                out.write_record([
                    format!("{:.6}", self.roll_deg(i)),
                    format!("{:.6}", self.rate_deg(j)),
                    (self.cell(i, j) as u8).to_string(),
                ])
                .map_err(err)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Whether straight riding at `speed` recovers from the given roll state.
pub fn recovers(
    model: &BikeModel,
    gains: &ControllerGains,
    speed: f64,
    roll: f64,
    rate: f64,
    spec: &RoaSpec,
) -> bool {
    let start = BikebotState { roll, roll_rate: rate, ..BikebotState::riding(speed) };
    let mut cl = ClosedLoop::new(*model, *gains, Arc::new(Reference::straight(speed)), start);
    let fall = spec.fall_deg.to_radians();
    let n = (spec.duration / cl.dt).round() as usize;
    for _ in 0..n {
        if cl.step(&RollTorquePort::none()).is_err() || cl.state.roll.abs() > fall {
            return false;
        }
    }
    cl.state.roll.abs() < spec.settle_deg.to_radians()
}

/// Region of attraction of straight-line riding at `speed`.
pub fn estimate_roa(model: &BikeModel, gains: &ControllerGains, speed: f64, spec: &RoaSpec) -> Result<RoaGrid, SupervisorError> {
    spec.validate()?;
    let cells: Vec<(usize, usize)> =
        (0..spec.roll_cells).flat_map(|i| (0..spec.rate_cells).map(move |j| (i, j))).collect();
    let member = cells
        .par_iter()
        .map(|&(i, j)| {
            let roll = axis_value(spec.roll_span_deg, spec.roll_cells, i).to_radians();
            let rate = axis_value(spec.rate_span_deg, spec.rate_cells, j).to_radians();
            recovers(model, gains, speed, roll, rate, spec)
        })
        .collect();
    Ok(RoaGrid { speed, spec: *spec, member })
}

/// Grids at several speeds; queries use the nearest speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoaAtlas {
    pub grids: Vec<RoaGrid>,
}

impl RoaAtlas {
    pub fn estimate(
        model: &BikeModel,
        gains: &ControllerGains,
        speeds: &[f64],
        spec: &RoaSpec,
    ) -> Result<Self, SupervisorError> {
        if speeds.is_empty() {
            return Err(SupervisorError::InvalidConfig("ROA atlas needs at least one speed".into()));
        }
        let grids = speeds.iter().map(|&v| estimate_roa(model, gains, v, spec)).collect::<Result<_, _>>()?;
        Ok(Self { grids })
    }

    pub fn nearest(&self, speed: f64) -> &RoaGrid {
        self.grids
            .iter()
            .min_by(|a, b| (a.speed - speed).abs().total_cmp(&(b.speed - speed).abs()))
            .expect("atlas is non-empty")
    }

    pub fn contains(&self, speed: f64, roll: f64, rate: f64) -> bool {
        self.nearest(speed).contains(roll, rate)
    }
}

/// Conservative membership test.
pub fn in_roa(grid: &RoaGrid, roll: f64, rate: f64) -> bool {
    grid.contains(roll, rate)
}

/// Record of one fired impulse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiredImpulse {
    pub command: ImpulseCommand,
    pub decision: ReinitDecision,
    /// State the decision was made from.
    pub roll: f64,
    pub roll_rate: f64,
    pub speed: f64,
    pub predicted_roll: f64,
    /// Lower bound from the closed-form analysis.
    pub bound: f64,
}

/// Everything the supervisor looks at in one plant step.
pub struct StepInput<'a> {
    pub state: &'a BikebotState,
    /// Post-impact estimate, supplied on the step an impact is detected.
    pub estimate: Option<&'a BikebotState>,
    pub accel_x: f64,
    pub geometric: bool,
    pub tick: bool,
    pub controller: &'a EicController,
    pub model: &'a BikeModel,
    pub reference: &'a Arc<Reference>,
}

/// What the supervisor decided this step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepOutput {
    pub detected: bool,
    pub fired: Option<FiredImpulse>,
    pub failure: Option<SupervisorError>,
}

#[derive(Debug, Clone)]
pub struct Supervisor {
    pub config: SupervisorConfig,
    pub impulse: ImpulseConfig,
    pub leg: LegGeometry,
    pub roa: Option<Arc<RoaAtlas>>,
    /// When false the supervisor only detects and logs.
    pub impulses_enabled: bool,
    pub fsm: Fsm,
    detector: ImpactDetector,
    active: Option<ImpulseCommand>,
}

impl Supervisor {
    pub fn new(config: SupervisorConfig, impulse: ImpulseConfig, leg: LegGeometry, roa: Option<Arc<RoaAtlas>>) -> Self {
        Self {
            config,
            impulse,
            leg,
            roa,
            impulses_enabled: true,
            fsm: Fsm::default(),
            detector: ImpactDetector::default(),
            active: None,
        }
    }

    pub fn mode(&self) -> Mode {
        self.fsm.mode()
    }

    /// Impulse currently being delivered, if any.
    pub fn active(&self) -> Option<&ImpulseCommand> {
        self.active.as_ref()
    }

    fn fail(&mut self, t: f64, e: SupervisorError) -> StepOutput {
        let _ = self.fsm.request(Mode::Failed, t);
        self.active = None;
        StepOutput { failure: Some(e), ..Default::default() }
    }

    fn outside_roa(&self, s: &BikebotState) -> bool {
        self.roa.as_ref().is_none_or(|a| !a.contains(s.speed, s.roll, s.roll_rate))
    }

    fn evaluate(&self, s: &BikebotState, input: &StepInput) -> Result<Option<FiredImpulse>, SupervisorError> {
        let peak = predict_roll(s, input.controller, input.model, input.reference, self.config.horizon)?;
        if peak <= self.config.roll_max_deg.to_radians() || !self.outside_roa(s) {
            return Ok(None);
        }
        let rollout = Rollout::new(*input.model, input.controller, input.reference.clone(), *s);
        let decision = impulse::optimize_reinit(&rollout, &self.impulse)?;
        let p = input.model.params;
        let torque = impulse::impulse_torque(decision.roll_rate, s.roll_rate, &self.impulse, &p);
        if torque.torque == 0.0 {
            return Ok(None);
        }
        let mut command = impulse::leg_command(torque.torque, s.t, s.roll, &self.impulse, &self.leg)?;
        command.clamped = torque.clamped;
        Ok(Some(FiredImpulse {
            command,
            decision,
            roll: s.roll,
            roll_rate: s.roll_rate,
            speed: s.speed,
            predicted_roll: peak,
            bound: impulse::min_impulse(s.roll, s.roll_rate, s.speed, &self.impulse, &p),
        }))
    }

    /// Advances the state machine by one plant step.
    pub fn step(&mut self, input: &StepInput) -> StepOutput {
        let t = input.state.t;
        let mut out = StepOutput::default();
        if self.mode() == Mode::Failed {
            return out;
        }
        let detected = self.detector.update(t, input.accel_x, input.geometric, &self.config);
        out.detected = detected;
        match self.mode() {
            Mode::Tracking => {
                if detected {
                    if let Err(e) = self.fsm.request(Mode::ImpactDetected, t) {
                        return self.fail(t, e);
                    }
                }
            }
            Mode::ImpulseActive => {
                if self.active.is_none_or(|c| t >= c.t_end) {
                    self.active = None;
                    if let Err(e) = self.fsm.request(Mode::Recovery, t) {
                        return self.fail(t, e);
                    }
                }
                return out;
            }
            Mode::Recovery => {
                if t - self.fsm.since() >= self.config.recovery {
                    if let Err(e) = self.fsm.request(Mode::Tracking, t) {
                        return self.fail(t, e);
                    }
                }
                return out;
            }
            Mode::ImpactDetected | Mode::Failed => {}
        }
        if self.mode() != Mode::ImpactDetected {
            return out;
        }
        if t - self.fsm.since() > self.config.watch {
            if let Err(e) = self.fsm.request(Mode::Tracking, t) {
                return self.fail(t, e);
            }
            return out;
        }
        if !(detected || input.tick) || !self.impulses_enabled {
            return out;
        }
        let s = if detected { input.estimate.unwrap_or(input.state) } else { input.state };
        match self.evaluate(s, input) {
            Ok(Some(fired)) => {
                if let Err(e) = self.fsm.request(Mode::ImpulseActive, t) {
                    return self.fail(t, e);
                }
                self.active = Some(fired.command);
                out.fired = Some(fired);
                out
            }
            Ok(None) => out,
            Err(e) => {
                let det = out.detected;
                StepOutput { detected: det, ..self.fail(t, e) }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transitions() {
        let mut f = Fsm::default();
        assert!(f.request(Mode::ImpulseActive, 0.0).is_err());
        assert_eq!(f.mode(), Mode::Tracking);
        assert!(f.transitions.is_empty());
        f.request(Mode::ImpactDetected, 1.0).unwrap();
        f.request(Mode::ImpulseActive, 1.1).unwrap();
        assert!(f.request(Mode::Tracking, 1.2).is_err());
        f.request(Mode::Recovery, 1.15).unwrap();
        f.request(Mode::Tracking, 1.6).unwrap();
        f.request(Mode::Failed, 2.0).unwrap();
        assert!(f.request(Mode::Tracking, 2.1).is_err());
        assert_eq!(f.transitions.len(), 5);
    }

    #[test]
    fn detection_threshold_and_debounce() {
        let cfg = SupervisorConfig::default();
        assert!(!detect_impact(0.0, false, &cfg));
        assert!(detect_impact(5.1, false, &cfg));
        assert!(detect_impact(-5.1, false, &cfg));
        let mut d = ImpactDetector::default();
        assert!(d.update(1.0, 6.0, false, &cfg));
        assert!(!d.update(1.02, 6.0, false, &cfg));
        assert!(d.update(1.2, 6.0, false, &cfg));
        let geo = SupervisorConfig { detection: Detection::Geometric, ..cfg };
        assert!(detect_impact(0.0, true, &geo));
        assert!(!detect_impact(50.0, false, &geo));
    }

    fn ctx(speed: f64) -> (BikeModel, EicController, Arc<Reference>) {
        let m = BikeModel::default();
        let c = EicController::new(ControllerGains::default(), m.params, &m.limits);
        (m, c, Arc::new(Reference::straight(speed)))
    }

    #[test]
    fn prediction_examples() {
        let (m, c, r) = ctx(1.0);
        let s = BikebotState::riding(1.0);
        assert!(predict_roll(&s, &c, &m, &r, 0.2).unwrap() < 0.1f64.to_radians());
        let s = BikebotState { roll: 0.03, ..s };
        assert_eq!(predict_roll(&s, &c, &m, &r, 0.0).unwrap(), 0.03);
        let (m, c, r) = ctx(0.4);
        let s = BikebotState { roll_rate: 40f64.to_radians(), ..BikebotState::riding(0.4) };
        let a = predict_roll(&s, &c, &m, &r, 0.2).unwrap();
        assert!(a > 5f64.to_radians(), "{}", a.to_degrees());
        assert_eq!(a, predict_roll(&s, &c, &m, &r, 0.2).unwrap());
    }

    #[test]
    fn roa_lookup_policy() {
        let spec = RoaSpec { roll_cells: 5, rate_cells: 5, ..Default::default() };
        let mut member = vec![false; 25];
        for i in 1..4 {
            for j in 1..4 {
                member[i * 5 + j] = true;
            }
        }
        let g = RoaGrid { speed: 1.0, spec, member };
        assert!(in_roa(&g, 0.0, 0.0));
        // member cell whose neighbour is outside
        assert!(g.cell(1, 2));
        assert!(!in_roa(&g, (-6f64).to_radians(), 0.0));
        assert!(!in_roa(&g, 12f64.to_radians(), 60f64.to_radians()));
        assert!(!in_roa(&g, 1.0, 0.0));
    }
}
