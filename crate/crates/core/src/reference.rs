//! Planar reference trajectories with analytic derivatives up to jerk.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReferenceError {
    #[error("reference speed {0} m/s outside [0.1, {1}]")]
    Speed(f64, f64),
    #[error("arc radius must be positive, got {0}")]
    Radius(f64),
    #[error("waypoint path needs at least two distinct points")]
    Waypoints,
}

/// Position and derivatives of the reference at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefSample {
    pub pos: Vector2<f64>,
    pub vel: Vector2<f64>,
    pub acc: Vector2<f64>,
    pub jerk: Vector2<f64>,
}

/// Declarative description of a reference, as found in scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceSpec {
    /// Straight line from `start` with heading `heading_deg`.
    Line {
        #[serde(default)]
        start: [f64; 2],
        #[serde(default)]
        heading_deg: f64,
        speed: f64,
    },
    /// Circular arc starting at `start` with initial heading `heading_deg`.
    /// Positive `radius` turns left.
    Arc {
        #[serde(default)]
        start: [f64; 2],
        #[serde(default)]
        heading_deg: f64,
        radius: f64,
        speed: f64,
    },
    /// Natural cubic spline through the points at roughly constant speed.
    Waypoints { points: Vec<[f64; 2]>, speed: f64 },
}

impl ReferenceSpec {
    pub fn speed(&self) -> f64 {
        match self {
            Self::Line { speed, .. } | Self::Arc { speed, .. } | Self::Waypoints { speed, .. } => *speed,
        }
    }

    pub fn build(&self, speed_max: f64) -> Result<Reference, ReferenceError> {
        let speed = self.speed();
        if !(speed >= 0.1 && speed <= speed_max) {
            return Err(ReferenceError::Speed(speed, speed_max));
        }
        Ok(match self {
            Self::Line { start, heading_deg, speed } => {
                let h = heading_deg.to_radians();
                Reference::Line(LineRef {
                    start: Vector2::from(*start),
                    dir: Vector2::new(h.cos(), h.sin()),
                    speed: *speed,
                })
            }
            Self::Arc { start, heading_deg, radius, speed } => {
                if *radius == 0.0 || !radius.is_finite() {
                    return Err(ReferenceError::Radius(*radius));
                }
                let h = heading_deg.to_radians();
                let left = Vector2::new(-h.sin(), h.cos());
                let center = Vector2::from(*start) + left * *radius;
                let start_angle = (start[1] - center.y).atan2(start[0] - center.x);
                Reference::Arc(ArcRef {
                    center,
                    radius: radius.abs(),
                    start_angle,
                    rate: speed / radius,
                })
            }
            Self::Waypoints { points, speed } => Reference::Spline(SplineRef::new(points, *speed)?),
        })
    }
}

/// A reference trajectory `r_d(t)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Reference {
    Line(LineRef),
    Arc(ArcRef),
    Spline(SplineRef),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineRef {
    pub start: Vector2<f64>,
    pub dir: Vector2<f64>,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArcRef {
    pub center: Vector2<f64>,
    pub radius: f64,
    pub start_angle: f64,
    /// Signed angular rate (rad/s); positive is counter-clockwise.
    pub rate: f64,
}

impl Reference {
    /// Straight reference along +x through the origin.
    pub fn straight(speed: f64) -> Self {
        Self::Line(LineRef { start: Vector2::zeros(), dir: Vector2::x(), speed })
    }

    pub fn nominal_speed(&self) -> f64 {
        match self {
            Self::Line(l) => l.speed,
            Self::Arc(a) => a.rate.abs() * a.radius,
            Self::Spline(s) => s.speed,
        }
    }

    pub fn sample(&self, t: f64) -> RefSample {
        match self {
            Self::Line(l) => RefSample {
                pos: l.start + l.dir * (l.speed * t),
                vel: l.dir * l.speed,
                acc: Vector2::zeros(),
                jerk: Vector2::zeros(),
            },
            Self::Arc(a) => {
                let th = a.start_angle + a.rate * t;
                let (s, c) = th.sin_cos();
                let w = a.rate;
                let r = a.radius;
                RefSample {
                    pos: a.center + Vector2::new(c, s) * r,
                    vel: Vector2::new(-s, c) * (r * w),
                    acc: Vector2::new(-c, -s) * (r * w * w),
                    jerk: Vector2::new(s, -c) * (r * w * w * w),
                }
            }
            Self::Spline(sp) => sp.sample(t),
        }
    }

    /// Arc-length coordinate of the point of the path closest to `p`.
    pub fn project(&self, p: &Vector2<f64>) -> f64 {
        match self {
            Self::Line(l) => (p - l.start).dot(&l.dir),
            Self::Arc(a) => {
                let d = p - a.center;
                let ang = d.y.atan2(d.x);
                let mut rel = (ang - a.start_angle) * a.rate.signum();
                // keep a small backwards margin so points just behind the start stay negative
                let two_pi = std::f64::consts::TAU;
                rel = rel.rem_euclid(two_pi);
                if rel > two_pi - 0.5 {
                    rel -= two_pi;
                }
                rel * a.radius
            }
            Self::Spline(sp) => sp.project(p),
        }
    }

    /// Unit tangent of the path at arc length `s`.
    pub fn tangent_at(&self, s: f64) -> Vector2<f64> {
        match self {
            Self::Line(l) => l.dir,
            Self::Arc(a) => {
                let th = a.start_angle + a.rate.signum() * s / a.radius;
                Vector2::new(-th.sin(), th.cos()) * a.rate.signum()
            }
            Self::Spline(sp) => {
                let v = sp.sample(s / sp.speed).vel;
                v / v.norm().max(1e-12)
            }
        }
    }
}

/// Natural cubic spline in x(t), y(t) with chord-length timing.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineRef {
    pub speed: f64,
    knots: Vec<f64>,
    x: Cubic,
    y: Cubic,
    table: Vec<(f64, Vector2<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
struct Cubic {
    // per segment: a + b dt + c dt^2 + d dt^3
    coef: Vec<[f64; 4]>,
}

impl Cubic {
    fn natural(t: &[f64], y: &[f64]) -> Self {
        let n = t.len();
        let h: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
        // second derivatives m_i by the tridiagonal system, m_0 = m_{n-1} = 0
        let mut m = vec![0.0; n];
        if n > 2 {
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut upper = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 0..k {
                diag[i] = 2.0 * (h[i] + h[i + 1]);
                upper[i] = h[i + 1];
                rhs[i] = 6.0 * ((y[i + 2] - y[i + 1]) / h[i + 1] - (y[i + 1] - y[i]) / h[i]);
            }
            for i in 1..k {
                let w = h[i] / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - upper[i] * m[i + 2]) / diag[i];
            }
        }
        let coef = (0..n - 1)
            .map(|i| {
                let hi = h[i];
                [
                    y[i],
                    (y[i + 1] - y[i]) / hi - hi * (2.0 * m[i] + m[i + 1]) / 6.0,
                    m[i] / 2.0,
                    (m[i + 1] - m[i]) / (6.0 * hi),
                ]
            })
            .collect();
        Self { coef }
    }

    fn eval(&self, seg: usize, dt: f64) -> [f64; 4] {
        let [a, b, c, d] = self.coef[seg];
        [
            a + dt * (b + dt * (c + dt * d)),
            b + dt * (2.0 * c + 3.0 * d * dt),
            2.0 * c + 6.0 * d * dt,
            6.0 * d,
        ]
    }
}

impl SplineRef {
    pub fn new(points: &[[f64; 2]], speed: f64) -> Result<Self, ReferenceError> {
        let mut pts: Vec<[f64; 2]> = Vec::with_capacity(points.len());
        for p in points {
            if pts.last().is_none_or(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() > 1e-6) {
                pts.push(*p);
            }
        }
        if pts.len() < 2 {
            return Err(ReferenceError::Waypoints);
        }
        let mut knots = vec![0.0];
        for w in pts.windows(2) {
            let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            knots.push(knots.last().unwrap() + d / speed);
        }
        let xs: Vec<f64> = pts.iter().map(|p| p[0]).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p[1]).collect();
        let mut sp = Self {
            speed,
            x: Cubic::natural(&knots, &xs),
            y: Cubic::natural(&knots, &ys),
            knots,
            table: Vec::new(),
        };
        // cumulative arc length table for projection
        let end = *sp.knots.last().unwrap();
        let n = ((end / 0.005).ceil() as usize).max(2);
        let mut s = 0.0;
        let mut prev = sp.sample(0.0).pos;
        sp.table.push((0.0, prev));
        for i in 1..=n {
            let p = sp.sample(end * i as f64 / n as f64).pos;
            s += (p - prev).norm();
            sp.table.push((s, p));
            prev = p;
        }
        Ok(sp)
    }

    fn sample(&self, t: f64) -> RefSample {
        let end = *self.knots.last().unwrap();
        let tc = t.clamp(0.0, end);
        let seg = match self.knots.binary_search_by(|k| k.partial_cmp(&tc).unwrap()) {
            Ok(i) => i.min(self.knots.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.knots.len() - 2),
        };
        let dt = tc - self.knots[seg];
        let xs = self.x.eval(seg, dt);
        let ys = self.y.eval(seg, dt);
        let mut out = RefSample {
            pos: Vector2::new(xs[0], ys[0]),
            vel: Vector2::new(xs[1], ys[1]),
            acc: Vector2::new(xs[2], ys[2]),
            jerk: Vector2::new(xs[3], ys[3]),
        };
        // continue straight at the end velocity outside the knot span
        if t < 0.0 || t > end {
            out.pos += out.vel * (t - tc);
            out.acc = Vector2::zeros();
            out.jerk = Vector2::zeros();
        }
        out
    }

    fn project(&self, p: &Vector2<f64>) -> f64 {
        let (mut best, mut best_d) = (0usize, f64::INFINITY);
        for (i, (_, q)) in self.table.iter().enumerate() {
            let d = (q - p).norm_squared();
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        let (s0, q0) = self.table[best];
        // extend past the ends along the end tangents
        if best + 1 == self.table.len() {
            let (_, qp) = self.table[best - 1];
            let dir = (q0 - qp).normalize();
            return s0 + (p - q0).dot(&dir).max(0.0);
        }
        if best == 0 {
            let (_, qn) = self.table[1];
            let dir = (qn - q0).normalize();
            return s0 + (p - q0).dot(&dir).min(0.0);
        }
        s0
    }

    /// Minimum and maximum speed along the spline.
    pub fn speed_range(&self) -> (f64, f64) {
        let end = *self.knots.last().unwrap();
        let n = 400;
        (0..=n)
            .map(|i| self.sample(end * i as f64 / n as f64).vel.norm())
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)))
    }
}
