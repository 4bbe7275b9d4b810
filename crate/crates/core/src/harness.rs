//! Scenario engine: declarative experiments, the full closed loop with
//! obstacles, logging, metrics and CSV export.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{Vector2, Vector5};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{ActuatorLimits, BikeModel, BikebotParams, BikebotState, DynamicsError, RollTorquePort};
use crate::eic::{ControllerGains, EicController};
use crate::impact::{self, ImpactCoordinates, ImpactError, Obstacle, RestitutionModel};
use crate::impulse::{ImpulseCommand, ImpulseConfig, ReinitDecision};
use crate::leg::{LegGeometry, Side};
use crate::reference::{Reference, ReferenceSpec};
use crate::residual::{self, ImuNoise, Kinematics, ResidualModel, Sample};
use crate::sim::ClosedLoop;
use crate::supervisor::{
    Detection, Mode, RoaAtlas, RoaSpec, StepInput, Supervisor, SupervisorConfig, SupervisorError, Transition,
};

pub const SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("io: {0}")]
    Io(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Validation(String),
    #[error(transparent)]
    Residual(#[from] residual::ResidualError),
    #[error(transparent)]
    Supervisor(#[from] SupervisorError),
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        Self::Io(e.to_string())
    }
}

/// Initial riding state; angles in degrees. Speed defaults to the
/// reference speed.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialState {
    pub x: f64,
    pub y: f64,
    pub yaw_deg: f64,
    pub roll_deg: f64,
    pub roll_rate_deg: f64,
    pub steer_deg: f64,
    pub speed: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Modes {
    pub impulse: bool,
    pub residual: bool,
    pub detection: Detection,
}

impl Default for Modes {
    fn default() -> Self {
        Self { impulse: true, residual: true, detection: Detection::Sensor }
    }
}

/// How the simulated "true" robot differs from the controller's model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantConfig {
    pub mass_scale: f64,
    pub com_height_scale: f64,
    /// True restitution; the nominal one when absent.
    pub restitution: Option<RestitutionModel>,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self { mass_scale: 1.0, com_height_scale: 1.0, restitution: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResidualSection {
    /// Trained model file, relative to the scenario file.
    pub model: Option<PathBuf>,
    pub noise: ImuNoise,
    /// IMU window length and sample period (s).
    pub window: usize,
    pub period: f64,
}

impl Default for ResidualSection {
    fn default() -> Self {
        Self { model: None, noise: ImuNoise::default(), window: 10, period: 0.02 }
    }
}

/// A complete experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_duration")]
    pub duration: f64,
    #[serde(default)]
    pub seed: u64,
    /// Runs whose |roll| passes this are lost (deg).
    #[serde(default = "default_fall")]
    pub fall_deg: f64,
    pub reference: ReferenceSpec,
    #[serde(default)]
    pub initial: InitialState,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    #[serde(default)]
    pub modes: Modes,
    #[serde(default)]
    pub params: BikebotParams,
    #[serde(default)]
    pub limits: ActuatorLimits,
    #[serde(default)]
    pub gains: ControllerGains,
    #[serde(default)]
    pub impulse: ImpulseConfig,
    #[serde(default)]
    pub supervisor: SupervisorConfig,
    #[serde(default)]
    pub restitution: RestitutionModel,
    #[serde(default)]
    pub leg: LegGeometry,
    #[serde(default)]
    pub roa: RoaSpec,
    #[serde(default)]
    pub plant: PlantConfig,
    #[serde(default)]
    pub residual: ResidualSection,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn default_duration() -> f64 {
    8.0
}

fn default_fall() -> f64 {
    45.0
}

fn invalid<E: std::fmt::Display>(e: E) -> HarnessError {
    HarnessError::Validation(e.to_string())
}

impl Scenario {
    /// Straight line along +x at `speed` with every default.
    pub fn straight(speed: f64) -> Self {
        Self {
            schema: SCHEMA,
            name: String::new(),
            duration: default_duration(),
            seed: 0,
            fall_deg: default_fall(),
            reference: ReferenceSpec::Line { start: [0.0, 0.0], heading_deg: 0.0, speed },
            initial: InitialState::default(),
            obstacles: Vec::new(),
            modes: Modes::default(),
            params: BikebotParams::default(),
            limits: ActuatorLimits::default(),
            gains: ControllerGains::default(),
            impulse: ImpulseConfig::default(),
            supervisor: SupervisorConfig::default(),
            restitution: RestitutionModel::default(),
            leg: LegGeometry::default(),
            roa: RoaSpec::default(),
            plant: PlantConfig::default(),
            residual: ResidualSection::default(),
            base_dir: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let value: toml::Value = toml::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
        Self::from_value(value)
    }

    pub fn from_value(value: toml::Value) -> Result<Self, HarnessError> {
        let mut sc: Scenario = value.try_into().map_err(|e: toml::de::Error| HarnessError::Parse(e.to_string()))?;
        sc.normalize()?;
        Ok(sc)
    }

    /// Sorts obstacles and checks every section.
    pub fn normalize(&mut self) -> Result<(), HarnessError> {
        if self.schema != SCHEMA {
            return Err(invalid(format!("schema must be {SCHEMA}, got {}", self.schema)));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(invalid(format!("duration must be > 0, got {}", self.duration)));
        }
        if !(self.fall_deg > 0.0 && self.fall_deg < 90.0) {
            return Err(invalid(format!("fall_deg must lie in (0, 90), got {}", self.fall_deg)));
        }
        self.params.validate().map_err(invalid)?;
        self.limits.validate().map_err(invalid)?;
        self.gains.validate().map_err(invalid)?;
        self.impulse.validate().map_err(invalid)?;
        self.supervisor.validate()?;
        self.roa.validate()?;
        self.restitution.validate().map_err(invalid)?;
        self.leg.validate().map_err(invalid)?;
        if let Some(r) = &self.plant.restitution {
            r.validate().map_err(invalid)?;
        }
        if !(self.plant.mass_scale > 0.0 && self.plant.com_height_scale > 0.0) {
            return Err(invalid("plant scales must be > 0"));
        }
        if self.residual.window < 2 || !(self.residual.period > 0.0) {
            return Err(invalid("residual window must be >= 2 and period > 0"));
        }
        self.reference.build(self.limits.speed_max).map_err(invalid)?;
        if let Some(v) = self.initial.speed {
            if !(v >= 0.0 && v <= self.limits.speed_max) {
                return Err(invalid(format!("initial speed {v} outside [0, {}]", self.limits.speed_max)));
            }
        }
        for o in &self.obstacles {
            o.validate(&self.params).map_err(invalid)?;
        }
        self.obstacles.sort_by(|a, b| a.s_o.total_cmp(&b.s_o));
        for w in self.obstacles.windows(2) {
            if w[0].s_o + w[0].width > w[1].s_o {
                return Err(invalid(format!("obstacles at s = {} and s = {} overlap", w[0].s_o, w[1].s_o)));
            }
        }
        Ok(())
    }

    fn model(&self) -> BikeModel {
        BikeModel::new(self.params, self.limits)
    }

    fn plant_model(&self) -> BikeModel {
        let params = BikebotParams {
            mass: self.params.mass * self.plant.mass_scale,
            com_height: self.params.com_height * self.plant.com_height_scale,
            ..self.params
        };
        BikeModel::new(params, self.limits)
    }

    fn initial_state(&self) -> BikebotState {
        let i = &self.initial;
        let speed = i.speed.unwrap_or(self.reference.speed());
        let mut s = BikebotState {
            x: i.x,
            y: i.y,
            yaw: i.yaw_deg.to_radians(),
            roll: i.roll_deg.to_radians(),
            roll_rate: i.roll_rate_deg.to_radians(),
            steer: i.steer_deg.to_radians(),
            ..BikebotState::riding(speed)
        };
        s.yaw_rate = crate::dynamics::yaw_rate(s.speed, s.steer, s.roll, &self.params).unwrap_or(0.0);
        s
    }

    fn residual_path(&self) -> Option<PathBuf> {
        let p = self.residual.model.as_ref()?;
        Some(match &self.base_dir {
            Some(d) if p.is_relative() => d.join(p),
            _ => p.clone(),
        })
    }
}

/// Reads and validates a scenario file.
pub fn load_scenario(path: &Path) -> Result<Scenario, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    let mut sc = Scenario::from_toml_str(&text)?;
    sc.base_dir = path.parent().map(Path::to_path_buf);
    Ok(sc)
}

fn roa_cache() -> &'static Mutex<HashMap<String, Arc<RoaAtlas>>> {
    static CACHE: OnceLock<Mutex<HashMap<String, Arc<RoaAtlas>>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// Region of attraction at the scenario's nominal speed, memoized per
/// process on everything it depends on.
pub fn scenario_roa(sc: &Scenario) -> Result<Arc<RoaAtlas>, HarnessError> {
    let speed = sc.reference.speed();
    let key = serde_json::to_string(&(&sc.params, &sc.limits, &sc.gains, speed, &sc.roa))
        .map_err(|e| HarnessError::Io(e.to_string()))?;
    if let Some(a) = roa_cache().lock().expect("roa cache").get(&key) {
        return Ok(a.clone());
    }
    let atlas = Arc::new(RoaAtlas::estimate(&sc.model(), &sc.gains, &[speed], &sc.roa)?);
    roa_cache().lock().expect("roa cache").insert(key, atlas.clone());
    Ok(atlas)
}

/// One 1 kHz log row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogSample {
    pub state: BikebotState,
    pub steer_command: f64,
    pub jerk_command: f64,
    pub mode: Mode,
    /// Leg in contact, if any.
    pub leg: Option<LegSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LegSample {
    pub side: Side,
    pub theta: [f64; 3],
    pub joint_torque: [f64; 3],
    pub torque: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateSource {
    /// Not detected; no estimate formed.
    None,
    Nominal,
    Enhanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ImpactRecord {
    pub t: f64,
    pub obstacle: usize,
    pub h_o: f64,
    pub speed_before: f64,
    pub speed_after: f64,
    pub roll_rate_before: f64,
    pub roll_rate_after: f64,
    /// Supervisor's estimate of the post-impact speed and roll rate.
    pub speed_estimate: f64,
    pub roll_rate_estimate: f64,
    pub accel_x: f64,
    pub detected: bool,
    pub source: EstimateSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ImpulseRecord {
    pub command: ImpulseCommand,
    pub decision: ReinitDecision,
    pub pre_roll: f64,
    pub pre_roll_rate: f64,
    /// State when the leg leaves the ground.
    pub post_roll: f64,
    pub post_roll_rate: f64,
    pub speed: f64,
    pub predicted_roll: f64,
    pub bound: f64,
    pub pre_in_roa: bool,
    pub post_in_roa: bool,
    pub obstacle: Option<usize>,
}

impl ImpulseRecord {
    pub fn rate_change(&self) -> f64 {
        self.post_roll_rate - self.pre_roll_rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Balanced,
    BalanceLost,
    /// A component reported an error; the run stopped.
    Failed,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Balanced => "balanced",
            Verdict::BalanceLost => "balance_lost",
            Verdict::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryLog {
    pub name: String,
    pub seed: u64,
    pub samples: Vec<LogSample>,
    /// Reference position at each sample.
    pub reference: Vec<[f64; 2]>,
    pub impacts: Vec<ImpactRecord>,
    pub impulses: Vec<ImpulseRecord>,
    pub transitions: Vec<Transition>,
    pub obstacles: usize,
    pub verdict: Verdict,
    pub failure: Option<String>,
}

/// Delivered impulse still waiting for its post state.
struct Pending {
    index: usize,
    dv: f64,
}

/// Features sampled at every controller tick, for the IMU window.
struct ImuHistory {
    period: f64,
    last_t: Option<f64>,
    kin: Vec<Kinematics>,
    cap: usize,
}

impl ImuHistory {
    fn new(window: usize, period: f64) -> Self {
        Self { period, last_t: None, kin: Vec::new(), cap: window }
    }

    fn record(&mut self, s: &BikebotState) {
        if self.last_t.is_some_and(|t| s.t - t < self.period - 1e-9) {
            return;
        }
        self.last_t = Some(s.t);
        self.kin.push(Kinematics::from_state(s));
        if self.kin.len() > self.cap {
            self.kin.remove(0);
        }
    }

    /// Window ending with the reading straight after the impact.
    fn window(
        &self,
        pre: &BikebotState,
        post: &BikebotState,
        noise: &ImuNoise,
        rng: &mut ChaCha8Rng,
    ) -> Vec<Sample> {
        let n = self.cap;
        let mut kin: Vec<Kinematics> = self.kin.iter().rev().skip(1).take(n - 1).rev().copied().collect();
        while kin.len() < n - 1 {
            let first = kin.first().copied().unwrap_or_else(|| Kinematics::from_state(pre));
            kin.insert(0, first);
        }
        kin.push(Kinematics::from_state(pre));
        kin.push(Kinematics::from_state(post));
        (1..=n).map(|j| residual::imu_sample(&kin[j - 1], &kin[j], self.period, noise, rng)).collect()
    }
}

/// Applies an impact velocity to a riding state.
fn after_impact(s: &BikebotState, qdot: &Vector5<f64>, p: &BikebotParams) -> BikebotState {
    let pv = impact::project_to_planar(qdot, s.yaw);
    BikebotState {
        speed: pv.speed.max(0.0),
        accel: 0.0,
        roll_rate: pv.roll_rate + p.roll_input_gain(s.roll) * (pv.yaw_rate - s.yaw_rate) / p.total_roll_inertia(),
        ..*s
    }
}

fn front_arc(s: &BikebotState, reference: &Reference, p: &BikebotParams) -> f64 {
    let front = Vector2::new(s.x + p.wheelbase * s.yaw.cos(), s.y + p.wheelbase * s.yaw.sin());
    reference.project(&front)
}

/// Runs a scenario to completion. Setup problems are errors; anything that
/// goes wrong during the run ends it with a `Failed` verdict.
pub fn run(sc: &Scenario) -> Result<TrajectoryLog, HarnessError> {
    let model = sc.model();
    let plant = sc.plant_model();
    let reference = Arc::new(sc.reference.build(sc.limits.speed_max).map_err(invalid)?);
    let roa = if sc.modes.impulse { Some(scenario_roa(sc)?) } else { None };
    let residual_model = match (sc.modes.residual, sc.residual_path()) {
        (true, Some(path)) => {
            let f = fs::File::open(&path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
            let m = ResidualModel::read(std::io::BufReader::new(f))?;
            if m.shape.window != sc.residual.window {
                return Err(invalid(format!(
                    "residual model window {} differs from scenario window {}",
                    m.shape.window, sc.residual.window
                )));
            }
            Some(m)
        }
        _ => None,
    };
    let true_restitution = sc.plant.restitution.unwrap_or(sc.restitution);

    let controller = EicController::new(sc.gains, model.params, &model.limits);
    let mut cl = ClosedLoop::with_controller(plant, controller, reference.clone(), sc.initial_state());
    let mut sup = Supervisor::new(sc.supervisor, sc.impulse, sc.leg, roa.clone());
    sup.impulses_enabled = sc.modes.impulse;
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let mut imu = ImuHistory::new(sc.residual.window, sc.residual.period);

    let steps = (sc.duration / cl.dt).round() as usize;
    let fall = sc.fall_deg.to_radians();
    let mut log = TrajectoryLog {
        name: sc.name.clone(),
        seed: sc.seed,
        samples: Vec::with_capacity(steps),
        reference: Vec::with_capacity(steps),
        impacts: Vec::new(),
        impulses: Vec::new(),
        transitions: Vec::new(),
        obstacles: sc.obstacles.len(),
        verdict: Verdict::Balanced,
        failure: None,
    };
    let mut next_obstacle = 0;
    let mut port = RollTorquePort::none();
    let mut pending: Option<Pending> = None;

    for _ in 0..steps {
        imu.record(&cl.state);
        let pre = cl.state;
        let mut geometric = false;
        let mut accel_x = pre.accel;
        let mut estimate = None;
        if let Some(ob) = sc.obstacles.get(next_obstacle) {
            let reach = impact::contact_offset(ob.h_o, &plant.params).map_err(invalid)?;
            if front_arc(&pre, &reference, &plant.params) + reach >= ob.s_o {
                geometric = true;
                let tangent = reference.tangent_at(ob.s_o);
                let face = tangent.y.atan2(tangent.x);
                match impact_step(sc, &plant, &model, &true_restitution, ob, face, &pre) {
                    Ok((truth, nominal)) => {
                        let post = after_impact(&pre, &truth, &plant.params);
                        let window = imu.window(&pre, &post, &sc.residual.noise, &mut rng);
                        accel_x = window.last().map_or(0.0, |w| w[0]);
                        let (qdot_star, source) = match &residual_model {
                            Some(m) => match m.predict(&window) {
                                Ok(c) => (impact::enhance(&nominal, &c), EstimateSource::Enhanced),
                                Err(e) => {
                                    log.failure = Some(e.to_string());
                                    log.verdict = Verdict::Failed;
                                    break;
                                }
                            },
                            None => (nominal, EstimateSource::Nominal),
                        };
                        let est = after_impact(&pre, &qdot_star, &model.params);
                        cl.state = post;
                        cl.controller.reset_filter();
                        log.impacts.push(ImpactRecord {
                            t: pre.t,
                            obstacle: next_obstacle,
                            h_o: ob.h_o,
                            speed_before: pre.speed,
                            speed_after: post.speed,
                            roll_rate_before: pre.roll_rate,
                            roll_rate_after: post.roll_rate,
                            speed_estimate: est.speed,
                            roll_rate_estimate: est.roll_rate,
                            accel_x,
                            detected: false,
                            source,
                        });
                        estimate = Some(est);
                    }
                    Err(e) => {
                        log.failure = Some(e.to_string());
                        log.verdict = Verdict::Failed;
                        break;
                    }
                }
                next_obstacle += 1;
            }
        }

        let out = sup.step(&StepInput {
            state: &cl.state,
            estimate: estimate.as_ref(),
            accel_x,
            geometric,
            tick: cl.tick_due(),
            controller: &cl.controller,
            model: &model,
            reference: &reference,
        });
        if out.detected {
            if let Some(last) = log.impacts.last_mut().filter(|r| r.t == pre.t) {
                last.detected = true;
            }
        }
        if let Some(e) = out.failure {
            log.failure = Some(e.to_string());
            log.verdict = Verdict::Failed;
            break;
        }
        if let Some(f) = out.fired {
            port = f.command.port();
            let atlas = roa.as_ref();
            let obstacle = log.impacts.last().map(|r| r.obstacle);
            pending = Some(Pending { index: log.impulses.len(), dv: f.decision.speed - f.speed });
            log.impulses.push(ImpulseRecord {
                command: f.command,
                decision: f.decision,
                pre_roll: cl.state.roll,
                pre_roll_rate: cl.state.roll_rate,
                post_roll: f64::NAN,
                post_roll_rate: f64::NAN,
                speed: f.speed,
                predicted_roll: f.predicted_roll,
                bound: f.bound,
                pre_in_roa: atlas.is_some_and(|a| a.contains(f.speed, cl.state.roll, cl.state.roll_rate)),
                post_in_roa: false,
                obstacle,
            });
        }

        let commanded = cl.command();
        let step = cl.step(&port);
        if let Err(e) = step {
            log.verdict = match e {
                DynamicsError::BalanceLost(..) => Verdict::BalanceLost,
                other => {
                    log.failure = Some(other.to_string());
                    Verdict::Failed
                }
            };
            break;
        }
        if let Some(pd) = &pending {
            let rec = &log.impulses[pd.index];
            let kappa = rec.command.t_end - rec.command.t_start;
            if cl.state.t <= rec.command.t_end + 1e-9 && kappa > 0.0 {
                let lim = &plant.limits;
                cl.state.speed = (cl.state.speed + pd.dv * cl.dt / kappa).clamp(0.0, lim.speed_max);
            }
            if cl.state.t >= rec.command.t_end - 1e-9 {
                let s = cl.state;
                let rec = &mut log.impulses[pd.index];
                rec.post_roll = s.roll;
                rec.post_roll_rate = s.roll_rate;
                rec.post_in_roa = roa.as_ref().is_some_and(|a| a.contains(s.speed, s.roll, s.roll_rate));
                pending = None;
            }
        }
        let s = cl.state;
        let leg = sup.active().filter(|c| s.t <= c.t_end + 1e-9).map(|c| LegSample {
            side: c.side,
            theta: c.theta,
            joint_torque: c.joint_torque,
            torque: c.torque,
        });
        log.samples.push(LogSample {
            state: s,
            steer_command: commanded.steer,
            jerk_command: cl.command().jerk,
            mode: sup.mode(),
            leg,
        });
        let r = reference.sample(s.t).pos;
        log.reference.push([r.x, r.y]);
        if s.roll.abs() > fall {
            log.verdict = Verdict::BalanceLost;
            break;
        }
    }
    log.transitions = sup.fsm.transitions.clone();
    Ok(log)
}

/// True and nominal post-impact generalized velocities.
fn impact_step(
    sc: &Scenario,
    plant: &BikeModel,
    model: &BikeModel,
    true_restitution: &RestitutionModel,
    ob: &Obstacle,
    face: f64,
    pre: &BikebotState,
) -> Result<(Vector5<f64>, Vector5<f64>), ImpactError> {
    let coords = ImpactCoordinates::from_state(pre);
    let e_true = true_restitution.effective(ob.h_o, &plant.params)?;
    let truth = impact::post_impact(&coords, ob.h_o, e_true, face, &plant.params)?.qdot_plus;
    let e_nom = sc.restitution.effective(ob.h_o, &model.params)?;
    let nominal = impact::post_impact(&coords, ob.h_o, e_nom, face, &model.params)?.qdot_plus;
    Ok((truth, nominal))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ImpulseSummary {
    pub t: f64,
    pub rate_change: f64,
    pub torque: f64,
    pub force: f64,
    pub side: Side,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub max_roll_deg: f64,
    pub tracking_rmse: f64,
    pub crossings_attempted: usize,
    pub crossings_succeeded: usize,
    pub impulses_fired: usize,
    pub impulses: Vec<ImpulseSummary>,
    pub verdict: Verdict,
    pub duration: f64,
    pub failure: Option<String>,
}

/// Summary figures of a run.
pub fn metrics(log: &TrajectoryLog) -> RunMetrics {
    let max_roll = log.samples.iter().map(|s| s.state.roll.abs()).fold(0.0, f64::max);
    let n = log.samples.len();
    let sq: f64 = log
        .samples
        .iter()
        .zip(&log.reference)
        .map(|(s, r)| (s.state.x - r[0]).powi(2) + (s.state.y - r[1]).powi(2))
        .sum();
    let rmse = if n > 0 { (sq / n as f64).sqrt() } else { 0.0 };
    let attempted = log.impacts.len();
    let succeeded = if log.verdict == Verdict::Balanced { attempted } else { attempted.saturating_sub(1) };
    RunMetrics {
        max_roll_deg: max_roll.to_degrees(),
        tracking_rmse: rmse,
        crossings_attempted: attempted,
        crossings_succeeded: succeeded,
        impulses_fired: log.impulses.len(),
        impulses: log
            .impulses
            .iter()
            .map(|i| ImpulseSummary {
                t: i.command.t_start,
                rate_change: i.rate_change(),
                torque: i.command.torque,
                force: i.command.force,
                side: i.command.side,
            })
            .collect(),
        verdict: log.verdict,
        duration: log.samples.last().map_or(0.0, |s| s.state.t),
        failure: log.failure.clone(),
    }
}

fn num(v: f64) -> String {
    format!("{v:.9}")
}

pub const STATE_HEADER: [&str; 9] = ["t", "x", "y", "psi", "varphi_b", "phi", "v", "dot_varphi_b", "mode"];
pub const EVENTS_HEADER: [&str; 16] = [
    "t",
    "kind",
    "obstacle",
    "h_o",
    "source",
    "detected",
    "speed_before",
    "speed_after",
    "roll_rate_before",
    "roll_rate_after",
    "speed_estimate",
    "roll_rate_estimate",
    "side",
    "torque",
    "force",
    "bound",
];

/// `state.csv` content.
pub fn state_csv(log: &TrajectoryLog) -> Result<Vec<u8>, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(STATE_HEADER)?;
    for s in &log.samples {
        let st = &s.state;
        w.write_record([
            num(st.t),
            num(st.x),
            num(st.y),
            num(st.yaw),
            num(st.roll),
            num(st.steer),
            num(st.speed),
            num(st.roll_rate),
            s.mode.as_str().to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| HarnessError::Io(e.to_string()))
}

/// `events.csv` content: impacts and impulses in time order.
pub fn events_csv(log: &TrajectoryLog) -> Result<Vec<u8>, HarnessError> {
    let mut rows: Vec<(f64, u8, Vec<String>)> = Vec::new();
    for i in &log.impacts {
        let source = match i.source {
            EstimateSource::None => "none",
            EstimateSource::Nominal => "nominal",
            EstimateSource::Enhanced => "enhanced",
        };
        rows.push((
            i.t,
            0,
            vec![
                num(i.t),
                "impact".into(),
                i.obstacle.to_string(),
                num(i.h_o),
                source.into(),
                (i.detected as u8).to_string(),
                num(i.speed_before),
                num(i.speed_after),
                num(i.roll_rate_before),
                num(i.roll_rate_after),
                num(i.speed_estimate),
                num(i.roll_rate_estimate),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ],
        ));
    }
    for p in &log.impulses {
        let c = &p.command;
        rows.push((
            c.t_start,
            1,
            vec![
                num(c.t_start),
                "impulse".into(),
                p.obstacle.map(|o| o.to_string()).unwrap_or_default(),
                String::new(),
                "supervisor".into(),
                String::new(),
                num(p.speed),
                num(p.decision.speed),
                num(p.pre_roll_rate),
                num(p.post_roll_rate),
                String::new(),
                String::new(),
                c.side.to_string(),
                num(c.torque),
                num(c.force),
                num(p.bound),
            ],
        ));
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(EVENTS_HEADER)?;
    for (_, _, r) in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| HarnessError::Io(e.to_string()))
}

/// `legs.csv` content: one row per step with a leg on the ground.
pub fn legs_csv(log: &TrajectoryLog) -> Result<Vec<u8>, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["t", "side", "theta0", "theta1", "theta2", "tau0", "tau1", "tau2", "torque"])?;
    for s in &log.samples {
        if let Some(l) = &s.leg {
            let mut row = vec![num(s.state.t), l.side.to_string()];
            row.extend(l.theta.iter().chain(&l.joint_torque).map(|v| num(*v)));
            row.push(num(l.torque));
            w.write_record(row)?;
        }
    }
    w.into_inner().map_err(|e| HarnessError::Io(e.to_string()))
}

pub fn metrics_json(m: &RunMetrics) -> String {
    let mut s = serde_json::to_string_pretty(m).expect("metrics serialize");
    s.push('\n');
    s
}

/// Writes `state.csv`, `events.csv`, `legs.csv` and `metrics.json`, plus
/// `roa.csv` when a grid is given.
pub fn export(log: &TrajectoryLog, dir: &Path, roa: Option<&RoaAtlas>) -> Result<RunMetrics, HarnessError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("state.csv"), state_csv(log)?)?;
    fs::write(dir.join("events.csv"), events_csv(log)?)?;
    fs::write(dir.join("legs.csv"), legs_csv(log)?)?;
    let m = metrics(log);
    fs::write(dir.join("metrics.json"), metrics_json(&m))?;
    if let Some(a) = roa {
        let f = fs::File::create(dir.join("roa.csv"))?;
        a.grids[0].write_csv(std::io::BufWriter::new(f))?;
    }
    Ok(m)
}

/// `n` evenly spaced values from `a` to `b` given as `a:b:n`.
pub fn parse_range(spec: &str) -> Result<Vec<f64>, HarnessError> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || HarnessError::Parse(format!("range {spec:?} must look like a:b:n"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let a: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let b: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
    match n {
        0 => Err(bad()),
        1 => Ok(vec![a]),
        _ => Ok((0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect()),
    }
}

/// Sets a dotted path such as `obstacles.0.h_o` in a parsed scenario.
pub fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<(), HarnessError> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (k, part) in parts.iter().enumerate() {
        let last = k + 1 == parts.len();
        let missing = || HarnessError::Parse(format!("no key {part:?} in {key:?}"));
        cur = match cur {
            toml::Value::Table(t) => {
                if last {
                    t.insert(part.to_string(), value);
                    return Ok(());
                }
                t.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()))
            }
            toml::Value::Array(a) => {
                let i: usize = part.parse().map_err(|_| missing())?;
                let slot = a.get_mut(i).ok_or_else(missing)?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(missing()),
        };
    }
    Err(HarnessError::Parse(format!("empty key {key:?}")))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub value: f64,
    pub metrics: RunMetrics,
}

/// Runs the scenario once per value of `key`, concurrently.
pub fn sweep(base: &toml::Value, base_dir: Option<&Path>, key: &str, values: &[f64]) -> Result<Vec<SweepPoint>, HarnessError> {
    let scenarios = values
        .iter()
        .map(|&v| {
            let mut doc = base.clone();
            set_path(&mut doc, key, toml::Value::Float(v))?;
            let mut sc = Scenario::from_value(doc)?;
            sc.base_dir = base_dir.map(Path::to_path_buf);
            Ok(sc)
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    if let Some(sc) = scenarios.iter().find(|s| s.modes.impulse) {
        scenario_roa(sc)?;
    }
    scenarios
        .par_iter()
        .zip(values)
        .map(|(sc, &value)| Ok(SweepPoint { value, metrics: metrics(&run(sc)?) }))
        .collect()
}

pub fn sweep_csv(key: &str, points: &[SweepPoint]) -> String {
    let mut out = format!("{key},verdict,max_roll_deg,impulses,tracking_rmse,crossings_attempted,crossings_succeeded\n");
    for p in points {
        let m = &p.metrics;
        let _ = writeln!(
            out,
            "{},{},{:.6},{},{:.6},{},{}",
            p.value,
            m.verdict.as_str(),
            m.max_roll_deg,
            m.impulses_fired,
            m.tracking_rmse,
            m.crossings_attempted,
            m.crossings_succeeded
        );
    }
    out
}
