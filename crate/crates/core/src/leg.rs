//! Assistive-leg kinematics: forward kinematics, Jacobian, damped
//! least-squares inverse kinematics and the force/torque maps.
//!
//! Positions are expressed in the heading frame, whose x axis is the
//! direction of travel; the body frame differs from it by the roll angle.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LegError {
    #[error("joint {joint} at {angle_deg:.1} deg outside +/-{limit_deg:.1} deg")]
    JointLimit { joint: usize, angle_deg: f64, limit_deg: f64 },
    #[error("target at distance {0:.3} m from the first joint cannot be reached")]
    Unreachable(f64),
    #[error("leg pose singular (det {0:.3e})")]
    SingularPose(f64),
    #[error("joint {joint} torque {torque:.2} N m exceeds {limit:.1} N m")]
    TorqueLimit { joint: usize, torque: f64, limit: f64 },
    #[error("invalid leg geometry: {0}")]
    InvalidGeometry(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    fn mirror(self) -> f64 {
        match self {
            Side::Left => 1.0,
            Side::Right => -1.0,
        }
    }
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Side::Left => "left",
            Side::Right => "right",
        })
    }
}

/// Link lengths, mounting offsets and actuator limits of one leg.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LegGeometry {
    pub l0: f64,
    pub l1: f64,
    pub l2: f64,
    /// First-joint offset from the mount point (m).
    pub offset_x: f64,
    pub offset_y: f64,
    /// Mount point position in the body frame (m).
    pub mount_x: f64,
    pub mount_height: f64,
    /// Symmetric joint limit (rad).
    pub joint_limit: f64,
    /// Per-joint torque limit (N m).
    pub torque_max: f64,
}

impl Default for LegGeometry {
    fn default() -> Self {
        Self {
            l0: 0.075,
            l1: 0.212,
            l2: 0.207,
            offset_x: 0.1,
            offset_y: 0.13,
            mount_x: -0.14,
            mount_height: 0.26,
            joint_limit: 150f64.to_radians(),
            torque_max: 25.0,
        }
    }
}

impl LegGeometry {
    pub fn validate(&self) -> Result<(), LegError> {
        for (name, v) in [
            ("l0", self.l0),
            ("l1", self.l1),
            ("l2", self.l2),
            ("joint_limit", self.joint_limit),
            ("torque_max", self.torque_max),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(LegError::InvalidGeometry(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Largest distance between the first joint and the foot.
    pub fn reach(&self) -> f64 {
        (self.l0 * self.l0 + (self.l1 + self.l2).powi(2)).sqrt()
    }

    /// First-joint position in the body frame.
    pub fn hip(&self, side: Side) -> Vector3<f64> {
        Vector3::new(self.offset_x - self.mount_x, side.mirror() * self.offset_y, -self.mount_height)
    }

    pub fn check_limits(&self, theta: &Vector3<f64>) -> Result<(), LegError> {
        for (j, a) in theta.iter().enumerate() {
            if !(a.abs() <= self.joint_limit + 1e-12) {
                return Err(LegError::JointLimit {
                    joint: j,
                    angle_deg: a.to_degrees(),
                    limit_deg: self.joint_limit.to_degrees(),
                });
            }
        }
        Ok(())
    }

    /// Left-leg foot position in the body frame.
    fn left_body(&self, t: &Vector3<f64>) -> Vector3<f64> {
        let (s0, c0) = t[0].sin_cos();
        let (s1, c1) = t[1].sin_cos();
        let (s12, c12) = (t[1] + t[2]).sin_cos();
        let a = self.l1 * c1 + self.l2 * c12;
        Vector3::new(
            self.offset_x - self.mount_x + self.l1 * s1 + self.l2 * s12,
            self.offset_y + self.l0 * c0 - s0 * a,
            -(self.mount_height + self.l0 * s0 + c0 * a),
        )
    }

    fn left_jacobian(&self, t: &Vector3<f64>) -> Matrix3<f64> {
        let (s0, c0) = t[0].sin_cos();
        let (s1, c1) = t[1].sin_cos();
        let (s12, c12) = (t[1] + t[2]).sin_cos();
        let a = self.l1 * c1 + self.l2 * c12;
        let a1 = -self.l1 * s1 - self.l2 * s12;
        let a2 = -self.l2 * s12;
        Matrix3::new(
            0.0,
            self.l1 * c1 + self.l2 * c12,
            self.l2 * c12,
            -self.l0 * s0 - c0 * a,
            -s0 * a1,
            -s0 * a2,
            -(self.l0 * c0 - s0 * a),
            -c0 * a1,
            -c0 * a2,
        )
    }

    /// Foot position in the body frame; the right leg mirrors the left
    /// across the x-z plane with the first joint reversed.
    pub fn foot_body(&self, side: Side, theta: &Vector3<f64>) -> Vector3<f64> {
        match side {
            Side::Left => self.left_body(theta),
            Side::Right => {
                let p = self.left_body(&Vector3::new(-theta[0], theta[1], theta[2]));
                Vector3::new(p.x, -p.y, p.z)
            }
        }
    }

    /// Analytic `d foot_body / d theta`.
    pub fn jacobian(&self, side: Side, theta: &Vector3<f64>) -> Matrix3<f64> {
        match side {
            Side::Left => self.left_jacobian(theta),
            Side::Right => {
                let mut j = self.left_jacobian(&Vector3::new(-theta[0], theta[1], theta[2]));
                j.column_mut(0).neg_mut();
                j.row_mut(1).neg_mut();
                j
            }
        }
    }
}

/// Rotation taking body-frame vectors to the heading frame.
pub fn body_to_heading(roll: f64) -> Matrix3<f64> {
    let (s, c) = roll.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, s, 0.0, -s, c)
}

/// Side, joint angles and joint torques of one leg.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub side: Side,
    pub theta: [f64; 3],
    pub tau: [f64; 3],
}

impl JointState {
    pub fn new(side: Side, theta: [f64; 3]) -> Self {
        Self { side, theta, tau: [0.0; 3] }
    }

    fn angles(&self) -> Vector3<f64> {
        Vector3::from(self.theta)
    }
}

/// Foot position in the heading frame.
pub fn forward_kinematics(g: &LegGeometry, j: &JointState, roll: f64) -> Result<Vector3<f64>, LegError> {
    let t = j.angles();
    g.check_limits(&t)?;
    Ok(body_to_heading(roll) * g.foot_body(j.side, &t))
}

/// Foot Jacobian in the body frame.
pub fn jacobian(g: &LegGeometry, j: &JointState) -> Matrix3<f64> {
    g.jacobian(j.side, &j.angles())
}

/// Damped least-squares settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IkConfig {
    pub damping: f64,
    pub max_iter: usize,
    pub tolerance: f64,
}

impl Default for IkConfig {
    fn default() -> Self {
        Self { damping: 1e-3, max_iter: 200, tolerance: 1e-9 }
    }
}

// start poses tried in order: a 5x5x5 grid over the joint box
fn seeds(limit: f64) -> impl Iterator<Item = Vector3<f64>> {
    const FR: [f64; 5] = [0.0, -0.5, 0.5, -0.9, 0.9];
    FR.into_iter().flat_map(move |a| {
        FR.into_iter()
            .flat_map(move |b| FR.into_iter().map(move |c| Vector3::new(a, b, c) * limit))
    })
}

fn solve_from(
    g: &LegGeometry,
    side: Side,
    target: &Vector3<f64>,
    seed: Vector3<f64>,
    cfg: &IkConfig,
) -> (Vector3<f64>, f64) {
    let mut t = seed;
    let lim = g.joint_limit;
    let lambda2 = cfg.damping * cfg.damping;
    let mut err = target - g.foot_body(side, &t);
    for _ in 0..cfg.max_iter {
        if err.norm() < cfg.tolerance {
            break;
        }
        let j = g.jacobian(side, &t);
        let jt = j.transpose();
        let Some(inv) = (j * jt + Matrix3::identity() * lambda2).try_inverse() else {
            break;
        };
        let step = jt * inv * err;
        t = (t + step).map(|a| a.clamp(-lim, lim));
        err = target - g.foot_body(side, &t);
    }
    (t, err.norm())
}

/// Joint angles placing the foot at `target` (heading frame).
pub fn inverse_kinematics(
    g: &LegGeometry,
    target: &Vector3<f64>,
    roll: f64,
    side: Side,
    cfg: &IkConfig,
) -> Result<JointState, LegError> {
    let body = body_to_heading(roll).transpose() * target;
    let dist = (body - g.hip(side)).norm();
    if dist > g.reach() + 1e-9 {
        return Err(LegError::Unreachable(dist));
    }
    let mut best: Option<(Vector3<f64>, f64)> = None;
    for seed in seeds(g.joint_limit) {
        let (t, r) = solve_from(g, side, &body, seed, cfg);
        if r < 1e-6 {
            return Ok(JointState::new(side, [t[0], t[1], t[2]]));
        }
        if best.is_none_or(|(_, b)| r < b) {
            best = Some((t, r));
        }
    }
    // reachable by length but not inside the joint box
    let (t, _) = best.expect("seed grid is non-empty");
    let (joint, angle) = t
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, a)| (i, *a))
        .unwrap();
    Err(LegError::JointLimit { joint, angle_deg: angle.to_degrees(), limit_deg: g.joint_limit.to_degrees() })
}

/// Joint torques `J^T R^T F` for a heading-frame foot force.
pub fn torques_from_force(
    g: &LegGeometry,
    force: &Vector3<f64>,
    j: &JointState,
    roll: f64,
) -> Result<Vector3<f64>, LegError> {
    let t = j.angles();
    g.check_limits(&t)?;
    let tau = g.jacobian(j.side, &t).transpose() * body_to_heading(roll).transpose() * force;
    for (k, v) in tau.iter().enumerate() {
        if v.abs() > g.torque_max {
            return Err(LegError::TorqueLimit { joint: k, torque: *v, limit: g.torque_max });
        }
    }
    Ok(tau)
}

/// Foot force produced by joint torques, inverse of [`torques_from_force`].
pub fn force_from_torques(g: &LegGeometry, j: &JointState, roll: f64) -> Result<Vector3<f64>, LegError> {
    let m = g.jacobian(j.side, &j.angles()).transpose() * body_to_heading(roll).transpose();
    let det = m.determinant();
    if det.abs() <= 1e-6 {
        return Err(LegError::SingularPose(det));
    }
    let inv = m.try_inverse().ok_or(LegError::SingularPose(det))?;
    Ok(inv * Vector3::from(j.tau))
}

/// Torque `r x F` exerted on the body by a foot force.
pub fn applied_torque(r: &Vector3<f64>, force: &Vector3<f64>) -> Vector3<f64> {
    r.cross(force)
}

/// Vertical ground force producing roll torque `roll_torque` at lateral
/// offset `lateral`.
pub fn vertical_force(roll_torque: f64, lateral: f64) -> f64 {
    roll_torque / lateral
}

/// Largest vertical force the leg can push with at a ground contact
/// `(0, +/-lateral, 0)`, limited by the joint torques.
pub fn torque_limited_force(
    g: &LegGeometry,
    lateral: f64,
    roll: f64,
    side: Side,
    cfg: &IkConfig,
) -> Result<f64, LegError> {
    let target = Vector3::new(0.0, side.mirror() * lateral, 0.0);
    let js = inverse_kinematics(g, &target, roll, side, cfg)?;
    let per_newton = g.jacobian(side, &js.angles()).transpose() * body_to_heading(roll).transpose() * Vector3::z();
    let worst = per_newton.amax();
    if worst <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(g.torque_max / worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn g() -> LegGeometry {
        LegGeometry::default()
    }

    #[test]
    fn zero_pose_position() {
        let r = forward_kinematics(&g(), &JointState::new(Side::Left, [0.0; 3]), 0.0).unwrap();
        assert_relative_eq!(r, Vector3::new(0.24, 0.205, -0.679), epsilon = 1e-12);
        let r = forward_kinematics(&g(), &JointState::new(Side::Right, [0.0; 3]), 0.0).unwrap();
        assert_relative_eq!(r, Vector3::new(0.24, -0.205, -0.679), epsilon = 1e-12);
    }

    #[test]
    fn component_formulas_match_rotated_body_position() {
        // the component formulas, written out term by term
        let g = g();
        let (t0, t1, t2, phi) = (0.3f64, -1.1f64, 0.7f64, 0.2f64);
        let (s0, c0, s1, c1) = (t0.sin(), t0.cos(), t1.sin(), t1.cos());
        let (s12, c12) = ((t1 + t2).sin(), (t1 + t2).cos());
        let (sp, cp) = (phi.sin(), phi.cos());
        let rx = g.offset_x - g.mount_x + g.l2 * s12 + g.l1 * s1;
        let ry = cp * (g.offset_y + g.l0 * c0 - g.l1 * s0 * c1 - g.l2 * s0 * c12)
            - sp * (g.mount_height + g.l0 * s0 + g.l1 * c0 * c1 + g.l2 * c0 * c12);
        let rz = -cp * (g.mount_height + g.l0 * s0 + g.l1 * c0 * c1 + g.l2 * c0 * c12)
            - sp * (g.offset_y + g.l0 * c0 - g.l1 * c1 * s0 - g.l2 * s0 * c12);
        let r = forward_kinematics(&g, &JointState::new(Side::Left, [t0, t1, t2]), phi).unwrap();
        assert_relative_eq!(r, Vector3::new(rx, ry, rz), epsilon = 1e-14);
    }

    #[test]
    fn joint_limit_guard() {
        let j = JointState::new(Side::Left, [0.0, 160f64.to_radians(), 0.0]);
        assert!(matches!(forward_kinematics(&g(), &j, 0.0), Err(LegError::JointLimit { joint: 1, .. })));
    }

    #[test]
    fn jacobian_against_finite_differences() {
        let g = g();
        for side in [Side::Left, Side::Right] {
            let t = Vector3::new(0.2, -1.9, 0.8);
            let j = g.jacobian(side, &t);
            let h = 1e-6;
            for k in 0..3 {
                let mut a = t;
                let mut b = t;
                a[k] -= h;
                b[k] += h;
                let fd = (g.foot_body(side, &b) - g.foot_body(side, &a)) / (2.0 * h);
                for r in 0..3 {
                    assert_relative_eq!(j[(r, k)], fd[r], epsilon = 1e-8);
                }
            }
        }
    }

    #[test]
    fn last_column_depends_on_link_sum() {
        let g = g();
        let a = g.jacobian(Side::Left, &Vector3::new(0.1, -1.0, 0.4));
        let b = g.jacobian(Side::Left, &Vector3::new(0.1, -0.5, -0.1));
        assert_relative_eq!(a.column(2), b.column(2), epsilon = 1e-14);
    }

    #[test]
    fn stretched_pose_is_singular() {
        let g = g();
        let j = JointState { side: Side::Left, theta: [0.0, 0.3, 0.0], tau: [1.0, 0.0, 0.0] };
        let det = g.jacobian(Side::Left, &Vector3::new(0.0, 0.3, 0.0)).determinant();
        assert!(det.abs() < 1e-12);
        assert!(matches!(force_from_torques(&g, &j, 0.0), Err(LegError::SingularPose(_))));
    }

    #[test]
    fn ik_ground_contacts() {
        let g = g();
        let cfg = IkConfig::default();
        for lateral in [0.08, 0.12, 0.2, 0.3] {
            for side in [Side::Left, Side::Right] {
                let y = if side == Side::Left { lateral } else { -lateral };
                let target = Vector3::new(0.0, y, 0.0);
                let js = inverse_kinematics(&g, &target, 0.0, side, &cfg).unwrap();
                let r = forward_kinematics(&g, &js, 0.0).unwrap();
                assert!((r - target).norm() < 1e-6, "{lateral} {side:?}");
            }
        }
        let far = Vector3::new(0.0, 0.2, 1.5);
        assert!(matches!(inverse_kinematics(&g, &far, 0.0, Side::Left, &cfg), Err(LegError::Unreachable(_))));
    }

    #[test]
    fn force_torque_round_trip() {
        let g = g();
        let js = inverse_kinematics(&g, &Vector3::new(0.0, 0.2, 0.0), 0.05, Side::Left, &IkConfig::default()).unwrap();
        assert_eq!(torques_from_force(&g, &Vector3::zeros(), &js, 0.05).unwrap(), Vector3::zeros());
        let f = Vector3::new(3.0, -2.0, 60.0);
        let tau = torques_from_force(&g, &f, &js, 0.05).unwrap();
        let back = force_from_torques(&g, &JointState { tau: tau.into(), ..js }, 0.05).unwrap();
        assert_relative_eq!(back, f, epsilon = 1e-9);
        assert!(matches!(
            torques_from_force(&g, &Vector3::new(0.0, 0.0, 1000.0), &js, 0.05),
            Err(LegError::TorqueLimit { .. })
        ));
    }

    #[test]
    fn cross_product_examples() {
        let t = applied_torque(&Vector3::new(0.0, 0.12, 0.0), &Vector3::new(0.0, 0.0, 159.5));
        assert_relative_eq!(t, Vector3::new(19.14, 0.0, 0.0), epsilon = 1e-12);
        let r = Vector3::new(0.3, 0.1, -0.2);
        assert_eq!(applied_torque(&r, &(r * 4.0)), Vector3::zeros());
        let t = applied_torque(&Vector3::new(0.05, 0.12, 0.0), &Vector3::new(0.0, 0.0, 100.0));
        assert_relative_eq!(t.y, -5.0, epsilon = 1e-12);
        assert_relative_eq!(vertical_force(19.14, 0.12), 159.5, epsilon = 1e-12);
    }

    #[test]
    fn torque_limited_force_by_offset() {
        let g = g();
        let cfg = IkConfig::default();
        let near = torque_limited_force(&g, 0.12, 0.0, Side::Left, &cfg).unwrap();
        assert!(near < 159.5, "{near}");
        let wide = torque_limited_force(&g, 0.3, 0.0, Side::Right, &cfg).unwrap();
        assert!(wide * 0.3 >= 30.0, "{wide}");
    }
}
