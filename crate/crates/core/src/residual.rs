//! Learned correction of the post-impact velocity estimate.
//!
//! A gated recurrent network reads a short window of IMU and riding
//! signals ending just after the impact and predicts the difference between
//! the true post-impact generalized velocity and the rigid impact model's.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{self, BikebotParams, BikebotState};
use crate::impact::{post_impact, ImpactCoordinates, ImpactError, RestitutionModel, Vector5};

/// Signals per window sample.
pub const FEATURES: usize = 10;
/// Components of the generalized velocity correction.
pub const OUTPUTS: usize = 5;
pub const FEATURE_NAMES: [&str; FEATURES] = ["ax", "ay", "az", "wx", "wy", "wz", "v", "varphi_b", "phi", "psi"];
pub const LABEL_NAMES: [&str; OUTPUTS] = ["dq_x", "dq_y", "dq_z", "dq_psi", "dq_varphi_b"];

const MAGIC: &[u8; 4] = b"BKRS";
const FORMAT_VERSION: u32 = 1;
const TENSORS: usize = 14;

#[derive(Debug, Error)]
pub enum ResidualError {
    #[error("invalid residual config: {0}")]
    InvalidConfig(String),
    #[error("dataset needs at least 100 examples, got {0}")]
    TooFew(usize),
    #[error("window has {got} samples, model expects {want}")]
    IncompleteWindow { got: usize, want: usize },
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Impact(#[from] ImpactError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One window sample.
pub type Sample = [f64; FEATURES];

/// Velocity-level snapshot used to synthesize IMU readings.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Kinematics {
    /// Inertial velocity of the rear contact, including the vertical rate.
    pub vel: [f64; 3],
    pub yaw_rate: f64,
    pub roll_rate: f64,
    pub speed: f64,
    pub roll: f64,
    pub steer: f64,
    pub yaw: f64,
}

impl Kinematics {
    pub fn from_state(s: &BikebotState) -> Self {
        let (vx, vy) = s.planar_velocity();
        Self {
            vel: [vx, vy, 0.0],
            yaw_rate: s.yaw_rate,
            roll_rate: s.roll_rate,
            speed: s.speed,
            roll: s.roll,
            steer: s.steer,
            yaw: s.yaw,
        }
    }
}

/// IMU noise levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImuNoise {
    pub accel: f64,
    pub gyro: f64,
}

impl Default for ImuNoise {
    fn default() -> Self {
        Self { accel: 0.2, gyro: 0.01 }
    }
}

/// Accelerometer from the velocity change over `dt` (heading frame),
/// gyro from the body rates, plus white noise.
pub fn imu_sample<R: Rng>(prev: &Kinematics, cur: &Kinematics, dt: f64, noise: &ImuNoise, rng: &mut R) -> Sample {
    let mut a = [0.0; 3];
    for k in 0..3 {
        a[k] = (cur.vel[k] - prev.vel[k]) / dt;
    }
    let (s, c) = cur.yaw.sin_cos();
    let (ax, ay) = (c * a[0] + s * a[1], -s * a[0] + c * a[1]);
    let mut out = [ax, ay, a[2], cur.roll_rate, 0.0, cur.yaw_rate, cur.speed, cur.roll, cur.steer, cur.yaw];
    let na = Normal::new(0.0, noise.accel.max(0.0)).expect("finite sigma");
    let ng = Normal::new(0.0, noise.gyro.max(0.0)).expect("finite sigma");
    for v in &mut out[0..3] {
        *v += na.sample(rng);
    }
    for v in &mut out[3..6] {
        *v += ng.sample(rng);
    }
    out
}

/// Ranges of the synthetic benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MismatchConfig {
    /// Relative spread of the true mass and CoM height.
    pub mass_frac: f64,
    pub com_height_frac: f64,
    /// Absolute spread of the true restitution coefficients.
    pub restitution: f64,
    pub noise: ImuNoise,
    pub speed: [f64; 2],
    pub roll_deg: f64,
    pub roll_rate_deg: f64,
    pub steer_deg: f64,
    pub yaw_deg: f64,
    pub height: [f64; 2],
    pub window: usize,
    /// Sample period of the window (s).
    pub period: f64,
    /// Share of examples held out.
    pub holdout: f64,
    pub nominal: RestitutionModel,
}

impl Default for MismatchConfig {
    fn default() -> Self {
        Self {
            mass_frac: 0.1,
            com_height_frac: 0.1,
            restitution: 0.15,
            noise: ImuNoise::default(),
            speed: [0.6, 1.5],
            roll_deg: 5.0,
            roll_rate_deg: 20.0,
            steer_deg: 10.0,
            yaw_deg: 15.0,
            height: [0.078, 0.078],
            window: 10,
            period: 0.02,
            holdout: 0.1,
            nominal: RestitutionModel::default(),
        }
    }
}

impl MismatchConfig {
    /// No parameter mismatch and no sensor noise.
    pub fn exact() -> Self {
        Self {
            mass_frac: 0.0,
            com_height_frac: 0.0,
            restitution: 0.0,
            noise: ImuNoise { accel: 0.0, gyro: 0.0 },
            ..Default::default()
        }
    }

    pub fn validate(&self, p: &BikebotParams) -> Result<(), ResidualError> {
        let bad = |m: String| Err(ResidualError::InvalidConfig(m));
        for (name, v) in [
            ("mass_frac", self.mass_frac),
            ("com_height_frac", self.com_height_frac),
            ("restitution", self.restitution),
            ("noise.accel", self.noise.accel),
            ("noise.gyro", self.noise.gyro),
            ("roll_deg", self.roll_deg),
            ("roll_rate_deg", self.roll_rate_deg),
            ("steer_deg", self.steer_deg),
            ("yaw_deg", self.yaw_deg),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.mass_frac >= 1.0 || self.com_height_frac >= 1.0 {
            return bad("relative spreads must be < 1".into());
        }
        if !(self.speed[0] >= dynamics::MIN_STEER_SPEED && self.speed[0] <= self.speed[1]) {
            return bad(format!("speed range {:?} invalid", self.speed));
        }
        if !(self.height[0] > 0.0 && self.height[0] <= self.height[1] && self.height[1] < p.wheel_radius) {
            return bad(format!("height range {:?} must lie in (0, R_w)", self.height));
        }
        if self.window < 2 {
            return bad(format!("window must be >= 2, got {}", self.window));
        }
        if !(self.period > 0.0) || !(0.0..1.0).contains(&self.holdout) {
            return bad("period must be > 0 and holdout in [0, 1)".into());
        }
        self.nominal.validate()?;
        Ok(())
    }
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub window: Vec<Sample>,
    pub label: [f64; OUTPUTS],
    pub holdout: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualDataset {
    pub window: usize,
    pub examples: Vec<Example>,
}

impl ResidualDataset {
    pub fn train(&self) -> impl Iterator<Item = &Example> {
        self.examples.iter().filter(|e| !e.holdout)
    }

    pub fn held_out(&self) -> impl Iterator<Item = &Example> {
        self.examples.iter().filter(|e| e.holdout)
    }

    pub fn header(window: usize) -> Vec<String> {
        let mut h: Vec<String> =
            (0..window).flat_map(|j| FEATURE_NAMES.iter().map(move |n| format!("{n}_{j}"))).collect();
        h.extend(LABEL_NAMES.iter().map(|s| s.to_string()));
        h.push("holdout".into());
        h
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), ResidualError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(Self::header(self.window))?;
        for e in &self.examples {
            let mut row: Vec<String> = e.window.iter().flatten().map(|v| format!("{v:e}")).collect();
            row.extend(e.label.iter().map(|v| format!("{v:e}")));
            row.push((e.holdout as u8).to_string());
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, ResidualError> {
        let mut rd = csv::Reader::from_reader(r);
        let cols = rd.headers()?.len();
        let n = cols.checked_sub(OUTPUTS + 1).filter(|n| n % FEATURES == 0 && *n > 0);
        let window = n.ok_or_else(|| ResidualError::Format(format!("dataset has {cols} columns")))? / FEATURES;
        if rd.headers()?.iter().ne(Self::header(window).iter().map(|s| s.as_str())) {
            return Err(ResidualError::Format("dataset header does not match".into()));
        }
        let mut examples = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| ResidualError::Format(format!("bad number {s:?}: {e}"))))
                .collect::<Result<_, _>>()?;
            let window_vals = &vals[..window * FEATURES];
            let mut label = [0.0; OUTPUTS];
            label.copy_from_slice(&vals[window * FEATURES..window * FEATURES + OUTPUTS]);
            examples.push(Example {
                window: window_vals.chunks(FEATURES).map(|c| c.try_into().expect("chunk size")).collect(),
                label,
                holdout: vals[cols - 1] != 0.0,
            });
        }
        Ok(Self { window, examples })
    }
}

fn planar_after(qdot: &Vector5, base: &Kinematics, p: &BikebotParams) -> Kinematics {
    let (s, c) = base.yaw.sin_cos();
    let speed = qdot[0] * c + qdot[1] * s;
    let roll_rate = qdot[4] + p.roll_input_gain(base.roll) * (qdot[3] - base.yaw_rate) / p.total_roll_inertia();
    Kinematics { vel: [qdot[0], qdot[1], qdot[2]], yaw_rate: qdot[3], roll_rate, speed, ..*base }
}

/// Samples one impact with a perturbed "true" plant and the nominal model.
fn draw_example<R: Rng>(cfg: &MismatchConfig, p: &BikebotParams, rng: &mut R) -> Result<(Vec<Sample>, [f64; 5]), ResidualError> {
    let sym = |rng: &mut R, a: f64| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
    let range = |rng: &mut R, r: [f64; 2]| if r[1] > r[0] { rng.random_range(r[0]..=r[1]) } else { r[0] };
    let speed = range(rng, cfg.speed);
    let roll = sym(rng, cfg.roll_deg).to_radians();
    let roll_rate = sym(rng, cfg.roll_rate_deg).to_radians();
    let steer = sym(rng, cfg.steer_deg).to_radians();
    let yaw = sym(rng, cfg.yaw_deg).to_radians();
    let h_o = range(rng, cfg.height);
    let true_p = BikebotParams {
        mass: p.mass * (1.0 + sym(rng, cfg.mass_frac)),
        com_height: p.com_height * (1.0 + sym(rng, cfg.com_height_frac)),
        ..*p
    };
    let mut true_e = cfg.nominal.e;
    for e in &mut true_e {
        *e = (*e + sym(rng, cfg.restitution)).clamp(0.0, 1.0);
    }
    let true_rest = RestitutionModel { e: true_e, ..cfg.nominal };

    let yaw_rate = dynamics::yaw_rate(speed, steer, roll, p).unwrap_or(0.0);
    let at = |k: f64| {
        let s = BikebotState {
            yaw: yaw - yaw_rate * k * cfg.period,
            roll: roll - roll_rate * k * cfg.period,
            steer,
            speed,
            yaw_rate,
            roll_rate,
            ..Default::default()
        };
        Kinematics::from_state(&s)
    };
    let pre = BikebotState { yaw, roll, steer, speed, yaw_rate, roll_rate, ..Default::default() };
    let coords = ImpactCoordinates::from_state(&pre);
    let nominal = post_impact(&coords, h_o, cfg.nominal.effective(h_o, p)?, 0.0, p)?.qdot_plus;
    let truth = post_impact(&coords, h_o, true_rest.effective(h_o, &true_p)?, 0.0, &true_p)?.qdot_plus;

    let n = cfg.window;
    // n - 1 samples before the impact plus the one straight after it
    let mut kin: Vec<Kinematics> = (0..n).rev().map(|k| at(k as f64)).collect();
    let after = planar_after(&truth, kin.last().expect("window >= 2"), p);
    kin.push(after);
    let window = (1..=n).map(|j| imu_sample(&kin[j - 1], &kin[j], cfg.period, &cfg.noise, rng)).collect();
    let d = truth - nominal;
    Ok((window, [d[0], d[1], d[2], d[3], d[4]]))
}

/// Synthetic benchmark of `m` impacts; deterministic in `seed`.
pub fn generate_synthetic_dataset(
    cfg: &MismatchConfig,
    p: &BikebotParams,
    m: usize,
    seed: u64,
) -> Result<ResidualDataset, ResidualError> {
    if m < 100 {
        return Err(ResidualError::TooFew(m));
    }
    cfg.validate(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(m);
    for _ in 0..m {
        let (window, label) = draw_example(cfg, p, &mut rng)?;
        examples.push(Example { window, label, holdout: false });
    }
    let held = ((m as f64) * cfg.holdout).round() as usize;
    let mut idx: Vec<usize> = (0..m).collect();
    for i in (1..m).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    for &i in &idx[..held] {
        examples[i].holdout = true;
    }
    Ok(ResidualDataset { window: cfg.window, examples })
}

/// Network sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub input: usize,
    pub hidden: usize,
    pub head: usize,
    pub output: usize,
    pub window: usize,
}

impl Default for Shape {
    fn default() -> Self {
        Self { input: FEATURES, hidden: 32, head: 32, output: OUTPUTS, window: 10 }
    }
}

impl Shape {
    /// Rows and columns of every tensor in storage order: update, reset and
    /// candidate gates (input weights, recurrent weights, bias; the
    /// candidate has a second recurrent bias), then the two head layers.
    fn tensor_shapes(&self) -> [(usize, usize); TENSORS] {
        let (i, h, f, o) = (self.input, self.hidden, self.head, self.output);
        [(h, i), (h, h), (h, 1), (h, i), (h, h), (h, 1), (h, i), (h, h), (h, 1), (h, 1), (f, h), (f, 1), (o, f), (o, 1)]
    }
}

const WZ: usize = 0;
const UZ: usize = 1;
const BZ: usize = 2;
const WR: usize = 3;
const UR: usize = 4;
const BR: usize = 5;
const WN: usize = 6;
const UN: usize = 7;
const BN: usize = 8;
const BHN: usize = 9;
const W1: usize = 10;
const B1: usize = 11;
const W2: usize = 12;
const B2: usize = 13;

type Params = Vec<DMatrix<f64>>;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct StepCache {
    x: DVector<f64>,
    h_prev: DVector<f64>,
    z: DVector<f64>,
    r: DVector<f64>,
    n: DVector<f64>,
    hn: DVector<f64>,
}

struct Forward {
    steps: Vec<StepCache>,
    h: DVector<f64>,
    y1: DVector<f64>,
    out: DVector<f64>,
}

fn forward(t: &Params, xs: &[DVector<f64>], hidden: usize) -> Forward {
    let mut h = DVector::zeros(hidden);
    let mut steps = Vec::with_capacity(xs.len());
    for x in xs {
        let z = (&t[WZ] * x + &t[UZ] * &h + t[BZ].column(0)).map(sigmoid);
        let r = (&t[WR] * x + &t[UR] * &h + t[BR].column(0)).map(sigmoid);
        let hn = &t[UN] * &h + t[BHN].column(0);
        let n = (&t[WN] * x + t[BN].column(0) + r.component_mul(&hn)).map(f64::tanh);
        let h_new = (z.map(|v| 1.0 - v)).component_mul(&n) + z.component_mul(&h);
        steps.push(StepCache { x: x.clone(), h_prev: h, z, r, n, hn });
        h = h_new;
    }
    let y1 = (&t[W1] * &h + t[B1].column(0)).map(f64::tanh);
    let out = &t[W2] * &y1 + t[B2].column(0);
    Forward { steps, h, y1, out }
}

/// Accumulates the gradient of `0.5 |out - y|^2` into `g`.
fn backward(t: &Params, f: &Forward, y: &DVector<f64>, g: &mut Params) {
    let dout = &f.out - y;
    g[W2] += &dout * f.y1.transpose();
    g[B2] += &dout;
    let dy1 = (t[W2].transpose() * &dout).component_mul(&f.y1.map(|v| 1.0 - v * v));
    g[W1] += &dy1 * f.h.transpose();
    g[B1] += &dy1;
    let mut dh = t[W1].transpose() * dy1;
    for c in f.steps.iter().rev() {
        let dn = dh.component_mul(&c.z.map(|v| 1.0 - v));
        let dz = dh.component_mul(&(&c.h_prev - &c.n));
        let mut dh_prev = dh.component_mul(&c.z);
        let dan = dn.component_mul(&c.n.map(|v| 1.0 - v * v));
        g[WN] += &dan * c.x.transpose();
        g[BN] += &dan;
        let dhn = dan.component_mul(&c.r);
        g[UN] += &dhn * c.h_prev.transpose();
        g[BHN] += &dhn;
        dh_prev += t[UN].transpose() * &dhn;
        let dar = dan.component_mul(&c.hn).component_mul(&c.r.map(|v| v * (1.0 - v)));
        g[WR] += &dar * c.x.transpose();
        g[UR] += &dar * c.h_prev.transpose();
        g[BR] += &dar;
        dh_prev += t[UR].transpose() * &dar;
        let daz = dz.component_mul(&c.z.map(|v| v * (1.0 - v)));
        g[WZ] += &daz * c.x.transpose();
        g[UZ] += &daz * c.h_prev.transpose();
        g[BZ] += &daz;
        dh_prev += t[UZ].transpose() * &daz;
        dh = dh_prev;
    }
}

/// Trained network with its normalization statistics. Weights are stored
/// in single precision, exactly as in the model file.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualModel {
    pub shape: Shape,
    tensors: Vec<Vec<f32>>,
    pub input_mean: Vec<f32>,
    pub input_std: Vec<f32>,
    pub output_mean: Vec<f32>,
    pub output_std: Vec<f32>,
}

impl ResidualModel {
    /// All weights and statistics zero except unit scales; predicts 0.
    pub fn zeros(shape: Shape) -> Self {
        let tensors = shape.tensor_shapes().iter().map(|(r, c)| vec![0.0; r * c]).collect();
        Self {
            shape,
            tensors,
            input_mean: vec![0.0; shape.input],
            input_std: vec![1.0; shape.input],
            output_mean: vec![0.0; shape.output],
            output_std: vec![1.0; shape.output],
        }
    }

    fn params(&self) -> Params {
        self.shape
            .tensor_shapes()
            .iter()
            .zip(&self.tensors)
            .map(|(&(r, c), d)| DMatrix::from_row_iterator(r, c, d.iter().map(|v| *v as f64)))
            .collect()
    }

    fn set_params(&mut self, p: &Params) {
        self.tensors = p.iter().map(|m| m.transpose().iter().map(|v| *v as f32).collect()).collect();
    }

    fn normalize(&self, w: &[Sample]) -> Vec<DVector<f64>> {
        w.iter()
            .map(|s| {
                DVector::from_iterator(
                    FEATURES,
                    s.iter().enumerate().map(|(k, v)| (v - self.input_mean[k] as f64) / self.input_std[k] as f64),
                )
            })
            .collect()
    }

    fn check_window(&self, w: &[Sample]) -> Result<(), ResidualError> {
        if w.len() != self.shape.window {
            return Err(ResidualError::IncompleteWindow { got: w.len(), want: self.shape.window });
        }
        Ok(())
    }

    /// Correction to add to the model's post-impact velocity.
    pub fn predict(&self, w: &[Sample]) -> Result<Vector5, ResidualError> {
        self.check_window(w)?;
        let f = forward(&self.params(), &self.normalize(w), self.shape.hidden);
        Ok(Vector5::from_fn(|k, _| f.out[k] * self.output_std[k] as f64 + self.output_mean[k] as f64))
    }

    /// Writes the versioned binary container.
    pub fn write<W: Write>(&self, mut w: W) -> Result<(), ResidualError> {
        w.write_all(MAGIC)?;
        let s = self.shape;
        for v in [FORMAT_VERSION, s.input as u32, s.hidden as u32, s.head as u32, s.output as u32, s.window as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(TENSORS as u32).to_le_bytes())?;
        for ((r, c), d) in s.tensor_shapes().iter().zip(&self.tensors) {
            w.write_all(&(*r as u32).to_le_bytes())?;
            w.write_all(&(*c as u32).to_le_bytes())?;
            for v in d {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for stats in [&self.input_mean, &self.input_std, &self.output_mean, &self.output_std] {
            for v in stats {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, ResidualError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ResidualError::Format("bad magic bytes".into()));
        }
        let mut u32_at = || -> Result<u32, ResidualError> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        };
        let version = u32_at()?;
        if version != FORMAT_VERSION {
            return Err(ResidualError::Format(format!("unsupported version {version}")));
        }
        let dims: Vec<usize> = (0..5).map(|_| u32_at().map(|v| v as usize)).collect::<Result<_, _>>()?;
        let shape = Shape { input: dims[0], hidden: dims[1], head: dims[2], output: dims[3], window: dims[4] };
        if shape.input != FEATURES || shape.output != OUTPUTS || shape.hidden == 0 || shape.head == 0 || shape.window == 0 {
            return Err(ResidualError::Format(format!("unsupported shape {shape:?}")));
        }
        if u32_at()? as usize != TENSORS {
            return Err(ResidualError::Format("unexpected tensor count".into()));
        }
        let mut tensors = Vec::with_capacity(TENSORS);
        for (rows, cols) in shape.tensor_shapes() {
            let (fr, fc) = (u32_at()? as usize, u32_at()? as usize);
            if (fr, fc) != (rows, cols) {
                return Err(ResidualError::Format(format!("tensor {fr}x{fc}, expected {rows}x{cols}")));
            }
            tensors.push((0..rows * cols).map(|_| u32_at().map(f32::from_bits)).collect::<Result<Vec<_>, _>>()?);
        }
        let mut stats = |n: usize| (0..n).map(|_| u32_at().map(f32::from_bits)).collect::<Result<Vec<_>, _>>();
        let input_mean = stats(shape.input)?;
        let input_std = stats(shape.input)?;
        let output_mean = stats(shape.output)?;
        let output_std = stats(shape.output)?;
        Ok(Self { shape, tensors, input_mean, input_std, output_mean, output_std })
    }
}

/// Optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub hidden: usize,
    pub head: usize,
    /// Global gradient-norm clip.
    pub clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 4, batch: 32, learning_rate: 3e-3, hidden: 32, head: 32, clip: 5.0 }
    }
}

/// Losses recorded while training (mean squared error in label units).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub held_out_loss: Vec<f64>,
}

/// Per-column mean and standard deviation; a constant column gets scale
/// `floor`, or 1 when `floor` is zero.
fn stats<'a, I: Iterator<Item = &'a [f64]>>(rows: I, n: usize, floor: f64) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; n];
    let mut sq = vec![0.0; n];
    let mut count = 0.0f64;
    for r in rows {
        for k in 0..n {
            sum[k] += r[k];
            sq[k] += r[k] * r[k];
        }
        count += 1.0;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count.max(1.0)).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| {
            let sd = (q / count.max(1.0) - m * m).max(0.0).sqrt();
            if floor > 0.0 {
                sd.max(floor)
            } else if sd > 1e-9 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

fn mse<'a, I: Iterator<Item = &'a Example>>(model: &ResidualModel, it: I) -> Result<f64, ResidualError> {
    let (mut total, mut n) = (0.0, 0usize);
    for e in it {
        let d = model.predict(&e.window)?;
        total += (0..OUTPUTS).map(|k| (d[k] - e.label[k]).powi(2)).sum::<f64>();
        n += OUTPUTS;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// Trains by mini-batch Adam on back-propagation through time.
pub fn train(
    data: &ResidualDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ResidualModel, TrainReport), ResidualError> {
    if cfg.batch == 0 || cfg.hidden == 0 || cfg.head == 0 || !(cfg.learning_rate > 0.0) || !(cfg.clip > 0.0) {
        return Err(ResidualError::InvalidConfig(format!("bad training config {cfg:?}")));
    }
    let train_idx: Vec<usize> = (0..data.examples.len()).filter(|&i| !data.examples[i].holdout).collect();
    if train_idx.is_empty() {
        return Err(ResidualError::InvalidConfig("no training examples".into()));
    }
    let shape = Shape { hidden: cfg.hidden, head: cfg.head, window: data.window, ..Default::default() };
    let mut model = ResidualModel::zeros(shape);
    let (im, is) = stats(train_idx.iter().flat_map(|&i| data.examples[i].window.iter().map(|s| s.as_slice())), FEATURES, 0.0);
    let (om, os) = stats(train_idx.iter().map(|&i| data.examples[i].label.as_slice()), OUTPUTS, 1e-6);
    model.input_mean = im.iter().map(|v| *v as f32).collect();
    model.input_std = is.iter().map(|v| *v as f32).collect();
    model.output_mean = om.iter().map(|v| *v as f32).collect();
    model.output_std = os.iter().map(|v| *v as f32).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: Params = shape
        .tensor_shapes()
        .iter()
        .map(|&(r, c)| {
            if c == 1 {
                DMatrix::zeros(r, c)
            } else {
                let a = (6.0 / (r + c) as f64).sqrt();
                DMatrix::from_fn(r, c, |_, _| rng.random_range(-a..a))
            }
        })
        .collect();
    let inputs: Vec<Vec<DVector<f64>>> = data.examples.iter().map(|e| model.normalize(&e.window)).collect();
    let targets: Vec<DVector<f64>> = data
        .examples
        .iter()
        .map(|e| DVector::from_fn(OUTPUTS, |k, _| (e.label[k] - om[k]) / os[k]))
        .collect();

    let mut report = TrainReport::default();
    let zero_like = |p: &Params| -> Params { p.iter().map(|m| DMatrix::zeros(m.nrows(), m.ncols())).collect() };
    let mut m1 = zero_like(&params);
    let mut m2 = zero_like(&params);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut step = 0i32;
    let mut order = train_idx.clone();
    model.set_params(&params);
    for epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for batch in order.chunks(cfg.batch) {
            let mut g = zero_like(&params);
            for &i in batch {
                let f = forward(&params, &inputs[i], shape.hidden);
                backward(&params, &f, &targets[i], &mut g);
            }
            let scale = 1.0 / batch.len() as f64;
            let norm = g.iter().map(|m| m.norm_squared()).sum::<f64>().sqrt() * scale;
            if !norm.is_finite() {
                return Err(ResidualError::Diverged { epoch, loss: norm });
            }
            let clip = if norm > cfg.clip { cfg.clip / norm } else { 1.0 };
            step += 1;
            let c1 = 1.0 - b1.powi(step);
            let c2 = 1.0 - b2.powi(step);
            for k in 0..TENSORS {
                let gk = &g[k] * (scale * clip);
                m1[k] = &m1[k] * b1 + &gk * (1.0 - b1);
                m2[k] = &m2[k] * b2 + gk.map(|v| v * v) * (1.0 - b2);
                let upd = m1[k].zip_map(&m2[k], |a, b| (a / c1) / ((b / c2).sqrt() + eps));
                params[k] -= upd * cfg.learning_rate;
            }
        }
        model.set_params(&params);
        let tl = mse(&model, data.train())?;
        let hl = mse(&model, data.held_out())?;
        if !tl.is_finite() {
            return Err(ResidualError::Diverged { epoch, loss: tl });
        }
        report.train_loss.push(tl);
        report.held_out_loss.push(hl);
    }
    Ok((model, report))
}

/// Held-out comparison of the model alone against model plus correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub rows: usize,
    /// RMSE of the rigid model's estimate, i.e. of the labels.
    pub nominal_rmse: f64,
    pub enhanced_rmse: f64,
    /// Share of rows whose correction shrinks the error.
    pub improved_fraction: f64,
}

pub fn evaluate(model: &ResidualModel, data: &ResidualDataset) -> Result<Evaluation, ResidualError> {
    let (mut nom, mut enh, mut better, mut rows) = (0.0, 0.0, 0usize, 0usize);
    for e in data.held_out() {
        let d = model.predict(&e.window)?;
        let a: f64 = e.label.iter().map(|v| v * v).sum();
        let b: f64 = (0..OUTPUTS).map(|k| (e.label[k] - d[k]).powi(2)).sum();
        nom += a;
        enh += b;
        better += (b < a) as usize;
        rows += 1;
    }
    let n = (rows * OUTPUTS).max(1) as f64;
    Ok(Evaluation {
        rows,
        nominal_rmse: (nom / n).sqrt(),
        enhanced_rmse: (enh / n).sqrt(),
        improved_fraction: better as f64 / rows.max(1) as f64,
    })
}

/// Dataset, mismatch and optimizer settings of one training run, as read
/// from a config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    /// Number of synthetic impacts.
    pub examples: usize,
    pub seed: u64,
    pub params: BikebotParams,
    pub mismatch: MismatchConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema: 1,
            examples: 10_000,
            seed: 1,
            params: BikebotParams::default(),
            mismatch: MismatchConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ResidualError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ResidualError::InvalidConfig(e.to_string()))?;
        if cfg.schema != 1 {
            return Err(ResidualError::InvalidConfig(format!("schema must be 1, got {}", cfg.schema)));
        }
        Ok(cfg)
    }
}

/// Outcome of [`run_experiment`].
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub model: ResidualModel,
    pub report: TrainReport,
    pub evaluation: Evaluation,
}

/// Generates the benchmark, trains on it and scores the held-out rows.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Experiment, ResidualError> {
    let data = generate_synthetic_dataset(&cfg.mismatch, &cfg.params, cfg.examples, cfg.seed)?;
    let (model, report) = train(&data, &cfg.train, cfg.seed)?;
    let evaluation = evaluate(&model, &data)?;
    Ok(Experiment { model, report, evaluation })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> BikebotParams {
        BikebotParams::default()
    }

    #[test]
    fn dataset_guards_and_determinism() {
        let cfg = MismatchConfig::default();
        assert!(matches!(generate_synthetic_dataset(&cfg, &p(), 0, 1), Err(ResidualError::TooFew(0))));
        let a = generate_synthetic_dataset(&cfg, &p(), 200, 7).unwrap();
        let b = generate_synthetic_dataset(&cfg, &p(), 200, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.held_out().count(), 20);
        assert!(a.examples.iter().all(|e| e.window.len() == 10 && e.label.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn exact_plant_gives_zero_labels() {
        let d = generate_synthetic_dataset(&MismatchConfig::exact(), &p(), 100, 3).unwrap();
        assert!(d.examples.iter().all(|e| e.label == [0.0; 5]));
    }

    #[test]
    fn zero_model_predicts_zero() {
        let m = ResidualModel::zeros(Shape::default());
        let w = vec![[0.3; FEATURES]; 10];
        assert_eq!(m.predict(&w).unwrap(), Vector5::zeros());
        assert!(matches!(m.predict(&w[..4]), Err(ResidualError::IncompleteWindow { got: 4, want: 10 })));
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let shape = Shape { hidden: 4, head: 3, window: 3, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params: Params = shape
            .tensor_shapes()
            .iter()
            .map(|&(r, c)| DMatrix::from_fn(r, c, |_, _| rng.random_range(-0.8..0.8)))
            .collect();
        let xs: Vec<DVector<f64>> = (0..3).map(|_| DVector::from_fn(FEATURES, |_, _| rng.random_range(-1.0..1.0))).collect();
        let y = DVector::from_fn(OUTPUTS, |_, _| rng.random_range(-1.0..1.0));
        let loss = |p: &Params| 0.5 * (forward(p, &xs, shape.hidden).out - &y).norm_squared();
        let mut g: Params = params.iter().map(|m| DMatrix::zeros(m.nrows(), m.ncols())).collect();
        backward(&params, &forward(&params, &xs, shape.hidden), &y, &mut g);
        let h = 1e-6;
        for k in 0..TENSORS {
            for idx in 0..params[k].len() {
                let mut a = params.clone();
                let mut b = params.clone();
                a[k][idx] -= h;
                b[k][idx] += h;
                let fd = (loss(&b) - loss(&a)) / (2.0 * h);
                assert!((fd - g[k][idx]).abs() < 1e-7, "tensor {k} entry {idx}: {fd} vs {}", g[k][idx]);
            }
        }
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let d = generate_synthetic_dataset(&MismatchConfig::default(), &p(), 100, 11).unwrap();
        let (m, _) = train(&d, &TrainConfig { epochs: 1, ..Default::default() }, 2).unwrap();
        let mut buf = Vec::new();
        m.write(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"BKRS");
        let back = ResidualModel::read(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        let w = &d.examples[0].window;
        assert_eq!(back.predict(w).unwrap(), m.predict(w).unwrap());
        buf[0] = b'X';
        assert!(matches!(ResidualModel::read(buf.as_slice()), Err(ResidualError::Format(_))));
    }

    #[test]
    fn zero_epochs_keeps_initial_loss() {
        let d = generate_synthetic_dataset(&MismatchConfig::default(), &p(), 100, 4).unwrap();
        let (m, r) = train(&d, &TrainConfig { epochs: 0, ..Default::default() }, 1).unwrap();
        assert!(r.train_loss.is_empty());
        let (m2, _) = train(&d, &TrainConfig { epochs: 0, ..Default::default() }, 1).unwrap();
        assert_eq!(m, m2);
    }

    #[test]
    fn csv_round_trip() {
        let d = generate_synthetic_dataset(&MismatchConfig::default(), &p(), 100, 9).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = ResidualDataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.examples.len(), 100);
        assert_eq!(back.examples[3].holdout, d.examples[3].holdout);
        assert_eq!(back.examples, d.examples);
    }
}
