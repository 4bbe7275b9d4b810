//! Front wheel striking a step edge: contact geometry, contact Jacobian and
//! the momentum-balance solve for post-impact velocities.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{BikebotParams, BikebotState};

pub type Vector5 = SVector<f64, 5>;
pub type ContactJacobian = SMatrix<f64, 3, 5>;
type Matrix8 = SMatrix<f64, 8, 8>;
type Vector8 = SVector<f64, 8>;

/// Reciprocal condition number below which the block system is rejected.
const MIN_RCOND: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ImpactError {
    #[error("obstacle height {0} m outside [0, 2 R_w]")]
    BadHeight(f64),
    #[error("impact system singular (rcond {0:.3e})")]
    SingularSystem(f64),
    #[error("restitution coefficient {0} outside [0, 1]")]
    BadRestitution(f64),
    #[error("obstacle list invalid: {0}")]
    BadObstacle(String),
}

/// Step obstacle placed on the reference path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    /// Arc-length position of the face along the path (m).
    pub s_o: f64,
    /// Step height (m).
    pub h_o: f64,
    /// Extent along the path (m).
    #[serde(default = "default_width")]
    pub width: f64,
}

fn default_width() -> f64 {
    0.3
}

impl Obstacle {
    pub fn validate(&self, p: &BikebotParams) -> Result<(), ImpactError> {
        if !(self.h_o > 0.0 && self.h_o < p.wheel_radius) {
            return Err(ImpactError::BadObstacle(format!(
                "height {} must lie in (0, {})",
                self.h_o, p.wheel_radius
            )));
        }
        if !(self.width > 0.0 && self.s_o.is_finite()) {
            return Err(ImpactError::BadObstacle("width must be > 0 and s_o finite".into()));
        }
        Ok(())
    }
}

/// Per-axis coefficients mapping the pre-impact contact velocity to the
/// prescribed post-impact contact velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestitutionModel {
    /// Along the face normal, across it, and vertical.
    pub e: [f64; 3],
    /// Scale the normal and vertical loss with the contact offset, so a low
    /// step that meets the wheel near its bottom costs little speed.
    pub height_scaled: bool,
}

impl Default for RestitutionModel {
    fn default() -> Self {
        Self { e: [0.2, 1.0, 0.1], height_scaled: true }
    }
}

impl RestitutionModel {
    pub fn new(e: [f64; 3]) -> Self {
        Self { e, height_scaled: false }
    }

    pub fn validate(&self) -> Result<(), ImpactError> {
        for v in self.e {
            if !(0.0..=1.0).contains(&v) {
                return Err(ImpactError::BadRestitution(v));
            }
        }
        Ok(())
    }

    /// Coefficients actually applied for a step of height `h_o`.
    ///
    /// With scaling on, each loss `1 - e` shrinks by `(L / R_w)^2`, the
    /// squared horizontal share of the edge-to-hub direction.
    pub fn effective(&self, h_o: f64, p: &BikebotParams) -> Result<[f64; 3], ImpactError> {
        if !self.height_scaled {
            return Ok(self.e);
        }
        let ratio = contact_offset(h_o, p)? / p.wheel_radius;
        let w = ratio * ratio;
        Ok(self.e.map(|e| 1.0 - (1.0 - e) * w))
    }
}

/// Generalized impact coordinates `(x, y, z, yaw, roll)`, their rates and the
/// steering angle that fixes the wheel plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpactCoordinates {
    pub q: Vector5,
    pub qdot: Vector5,
    pub steer: f64,
}

impl ImpactCoordinates {
    /// Coordinates of a riding state; translational rates follow the
    /// rolling constraint at the rear contact.
    pub fn from_state(s: &BikebotState) -> Self {
        let (vx, vy) = s.planar_velocity();
        Self {
            q: Vector5::new(s.x, s.y, 0.0, s.yaw, s.roll),
            qdot: Vector5::new(vx, vy, 0.0, s.yaw_rate, s.roll_rate),
            steer: s.steer,
        }
    }
}

/// Horizontal offset between the wheel's ground point and the edge contact,
/// `sqrt(2 R_w h_o - h_o^2)`.
pub fn contact_offset(h_o: f64, p: &BikebotParams) -> Result<f64, ImpactError> {
    if !(h_o >= 0.0 && h_o <= 2.0 * p.wheel_radius) {
        return Err(ImpactError::BadHeight(h_o));
    }
    Ok((2.0 * p.wheel_radius * h_o - h_o * h_o).max(0.0).sqrt())
}

/// Steering angle projected onto the ground plane.
pub fn projected_steer(steer: f64, roll: f64, p: &BikebotParams) -> f64 {
    (p.caster.cos() / roll.cos() * steer.tan()).atan()
}

/// Contact offset and impact angle (projected steer plus yaw).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactGeometry {
    pub offset: f64,
    pub angle: f64,
}

pub fn contact_geometry(
    h_o: f64,
    yaw: f64,
    steer: f64,
    roll: f64,
    p: &BikebotParams,
) -> Result<ContactGeometry, ImpactError> {
    Ok(ContactGeometry { offset: contact_offset(h_o, p)?, angle: projected_steer(steer, roll, p) + yaw })
}

/// Contact point position in the inertial frame.
pub fn contact_point(c: &ImpactCoordinates, h_o: f64, p: &BikebotParams) -> Result<Vector3<f64>, ImpactError> {
    let q = &c.q;
    let g = contact_geometry(h_o, q[3], c.steer, q[4], p)?;
    let l = p.wheelbase;
    Ok(Vector3::new(
        q[0] + l * q[3].cos() + g.offset * g.angle.cos(),
        q[1] + l * q[3].sin() + g.offset * g.angle.sin(),
        q[2] + h_o,
    ))
}

/// Analytic `d r_C / d q`.
pub fn impact_jacobian(c: &ImpactCoordinates, h_o: f64, p: &BikebotParams) -> Result<ContactJacobian, ImpactError> {
    let (psi, roll) = (c.q[3], c.q[4]);
    let g = contact_geometry(h_o, psi, c.steer, roll, p)?;
    let l = p.wheelbase;
    let u = p.caster.cos() * c.steer.tan() / roll.cos();
    let du = p.caster.cos() * c.steer.tan() * roll.sin() / (roll.cos() * roll.cos());
    let dgamma = du / (1.0 + u * u);
    let (sa, ca) = g.angle.sin_cos();
    let (sp, cp) = psi.sin_cos();
    #[rustfmt::skip]
    let j = ContactJacobian::new(
        1.0, 0.0, 0.0, -l * sp - g.offset * sa, -g.offset * sa * dgamma,
        0.0, 1.0, 0.0,  l * cp + g.offset * ca,  g.offset * ca * dgamma,
        0.0, 0.0, 1.0, 0.0, 0.0,
    );
    Ok(j)
}

/// Generalized inertia `diag(m, m, m, J_z, J_t)`.
pub fn inertia_matrix(p: &BikebotParams) -> SMatrix<f64, 5, 5> {
    SMatrix::<f64, 5, 5>::from_diagonal(&Vector5::new(
        p.mass,
        p.mass,
        p.mass,
        p.yaw_inertia,
        p.total_roll_inertia(),
    ))
}

/// Kinetic energy `q'^T D q' / 2`.
pub fn kinetic_energy(qdot: &Vector5, p: &BikebotParams) -> f64 {
    0.5 * qdot.dot(&(inertia_matrix(p) * qdot))
}

/// Post-impact velocities with the contact impulse and solve diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpactSolution {
    pub qdot_plus: Vector5,
    /// Impulse at the contact (N s).
    pub impulse: Vector3<f64>,
    /// Infinity-norm residual of the block system.
    pub residual: f64,
    /// 2-norm condition number of the block matrix.
    pub condition: f64,
}

/// Solves `[[D, -J^T], [J, 0]] [q'+; f] = [D q'-; eps]`.
pub(crate) fn solve_block(
    d: &SMatrix<f64, 5, 5>,
    j: &ContactJacobian,
    qdot_minus: &Vector5,
    target: &Vector3<f64>,
) -> Result<ImpactSolution, ImpactError> {
    let mut a = Matrix8::zeros();
    a.fixed_view_mut::<5, 5>(0, 0).copy_from(d);
    a.fixed_view_mut::<5, 3>(0, 5).copy_from(&(-j.transpose()));
    a.fixed_view_mut::<3, 5>(5, 0).copy_from(j);
    let mut b = Vector8::zeros();
    b.fixed_rows_mut::<5>(0).copy_from(&(d * qdot_minus));
    b.fixed_rows_mut::<3>(5).copy_from(target);

    let sv = a.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    let rcond = if smax > 0.0 { smin / smax } else { 0.0 };
    if !(rcond > MIN_RCOND) {
        return Err(ImpactError::SingularSystem(rcond));
    }
    let x = a.lu().solve(&b).ok_or(ImpactError::SingularSystem(rcond))?;
    let residual = (a * x - b).amax();
    Ok(ImpactSolution {
        qdot_plus: x.fixed_rows::<5>(0).into_owned(),
        impulse: x.fixed_rows::<3>(5).into_owned(),
        residual,
        condition: 1.0 / rcond,
    })
}

/// Post-impact velocity with the contact velocity set to `diag(e) J q'-`,
/// scaled down when that would raise the kinetic energy.
///
/// `face_yaw` orients the restitution axes: the first along the face normal
/// (the direction of travel into the step), the second along the face.
pub fn post_impact(
    c: &ImpactCoordinates,
    h_o: f64,
    e: [f64; 3],
    face_yaw: f64,
    p: &BikebotParams,
) -> Result<ImpactSolution, ImpactError> {
    for v in e {
        if !(0.0..=1.0).contains(&v) {
            return Err(ImpactError::BadRestitution(v));
        }
    }
    let j = impact_jacobian(c, h_o, p)?;
    let (s, co) = face_yaw.sin_cos();
    let r = Matrix3::new(co, -s, 0.0, s, co, 0.0, 0.0, 0.0, 1.0);
    let e_mat = r * Matrix3::from_diagonal(&Vector3::from(e)) * r.transpose();
    let d = inertia_matrix(p);
    let v_minus = j * c.qdot;
    let mut target = e_mat * v_minus;
    // Unequal axes can pump energy into the contact directions when the
    // contact-space inertia couples them; cap the result at energy-neutral.
    if let Some(d_inv) = d.try_inverse() {
        let w = j * d_inv * j.transpose();
        if let Some(lu) = Some(w.lu()).filter(|lu| lu.is_invertible()) {
            let energy = |v: &Vector3<f64>| lu.solve(v).map_or(0.0, |x| v.dot(&x));
            let (before, after) = (energy(&v_minus), energy(&target));
            if after > before && after > 0.0 {
                target *= (before / after).sqrt();
            }
        }
    }
    solve_block(&d, &j, &c.qdot, &target)
}

/// Planar quantities the riding model keeps after an impact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarVelocity {
    pub speed: f64,
    pub yaw_rate: f64,
    pub roll_rate: f64,
}

/// Speed along the heading, yaw rate and roll rate; the vertical component
/// is dropped.
pub fn project_to_planar(qdot: &Vector5, yaw: f64) -> PlanarVelocity {
    let (s, c) = yaw.sin_cos();
    PlanarVelocity { speed: qdot[0] * c + qdot[1] * s, yaw_rate: qdot[3], roll_rate: qdot[4] }
}

/// Componentwise sum of the model estimate and the learned correction.
pub fn enhance(qdot_plus: &Vector5, correction: &Vector5) -> Vector5 {
    qdot_plus + correction
}

/// Record of one wheel-obstacle impact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpactEvent {
    pub t: f64,
    pub coords: ImpactCoordinates,
    pub qdot_minus: Vector5,
    pub qdot_plus: Vector5,
    /// Estimate after the learned correction.
    pub qdot_star: Vector5,
    pub impulse: Vector3<f64>,
    pub h_o: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn p() -> BikebotParams {
        BikebotParams::default()
    }

    fn coords(yaw: f64, roll: f64, steer: f64, qdot: [f64; 5]) -> ImpactCoordinates {
        ImpactCoordinates { q: Vector5::new(0.3, -0.2, 0.0, yaw, roll), qdot: Vector5::from(qdot), steer }
    }

    #[test]
    fn contact_offset_examples() {
        let p = p();
        assert_eq!(contact_offset(0.0, &p).unwrap(), 0.0);
        assert_relative_eq!(contact_offset(p.wheel_radius, &p).unwrap(), p.wheel_radius, epsilon = 1e-15);
        assert_relative_eq!(contact_offset(0.078, &p).unwrap(), 0.17034, epsilon = 5e-6);
        assert!(matches!(contact_offset(0.5, &p), Err(ImpactError::BadHeight(_))));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let p = p();
        let c = coords(0.7, 0.2, 0.3, [0.0; 5]);
        let j = impact_jacobian(&c, 0.06, &p).unwrap();
        let h = 1e-6;
        for k in 0..5 {
            let mut a = c;
            let mut b = c;
            a.q[k] -= h;
            b.q[k] += h;
            let fd = (contact_point(&b, 0.06, &p).unwrap() - contact_point(&a, 0.06, &p).unwrap()) / (2.0 * h);
            for r in 0..3 {
                assert_relative_eq!(j[(r, k)], fd[r], epsilon = 1e-8);
            }
        }
        assert_eq!(j.row(2).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        let straight = impact_jacobian(&coords(0.7, 0.2, 0.0, [0.0; 5]), 0.06, &p).unwrap();
        assert_eq!(straight.column(4).amax(), 0.0);
    }

    #[test]
    fn trivial_solves() {
        let p = p();
        let c = coords(0.0, 0.0, 0.0, [0.0; 5]);
        let sol = post_impact(&c, 0.078, [0.2, 1.0, 0.1], 0.0, &p).unwrap();
        assert_eq!(sol.qdot_plus, Vector5::zeros());
        assert_eq!(sol.impulse, Vector3::zeros());

        let c = coords(0.4, 0.1, 0.2, [1.0, 0.3, 0.0, 0.2, -0.1]);
        let sol = post_impact(&c, 0.078, [1.0; 3], 0.0, &p).unwrap();
        assert_relative_eq!(sol.qdot_plus, c.qdot, epsilon = 1e-12);
        assert!(sol.impulse.amax() < 1e-12);
    }

    #[test]
    fn straight_hit_against_schur_complement() {
        let p = p();
        let c = coords(0.0, 0.0, 0.0, [1.2, 0.0, 0.0, 0.0, 0.0]);
        let e = [0.2, 1.0, 0.1];
        let sol = post_impact(&c, 0.078, e, 0.0, &p).unwrap();
        // closed form q'+ = q'- + D^-1 J^T (J D^-1 J^T)^-1 (eps - J q'-)
        let d = inertia_matrix(&p);
        let j = impact_jacobian(&c, 0.078, &p).unwrap();
        let dinv = d.try_inverse().unwrap();
        let target = Matrix3::from_diagonal(&Vector3::from(e)) * (j * c.qdot);
        let f = (j * dinv * j.transpose()).try_inverse().unwrap() * (target - j * c.qdot);
        let expect = c.qdot + dinv * j.transpose() * f;
        assert_relative_eq!(sol.qdot_plus, expect, epsilon = 1e-12);
        assert_relative_eq!(sol.impulse, f, epsilon = 1e-9);
        assert_relative_eq!(sol.qdot_plus[0], 0.24, epsilon = 1e-12);
        assert!(kinetic_energy(&sol.qdot_plus, &p) <= kinetic_energy(&c.qdot, &p));
        assert!(sol.residual < 1e-9);
    }

    #[test]
    fn duplicate_rows_are_singular() {
        let p = p();
        let mut j = ContactJacobian::zeros();
        j[(0, 0)] = 1.0;
        j[(1, 0)] = 1.0;
        j[(2, 2)] = 1.0;
        let r = solve_block(&inertia_matrix(&p), &j, &Vector5::repeat(0.1), &Vector3::zeros());
        assert!(matches!(r, Err(ImpactError::SingularSystem(_))));
    }

    #[test]
    fn planar_projection() {
        let q = Vector5::new(0.9, 0.0, 0.3, 0.0, -0.2);
        let pv = project_to_planar(&q, 0.0);
        assert_eq!((pv.speed, pv.yaw_rate, pv.roll_rate), (0.9, 0.0, -0.2));
        let q = Vector5::new(0.1, 0.8, 0.0, 0.0, 0.0);
        assert_relative_eq!(project_to_planar(&q, std::f64::consts::FRAC_PI_2).speed, 0.8, epsilon = 1e-12);
    }

    #[test]
    fn height_scaled_restitution() {
        let p = p();
        let r = RestitutionModel::default();
        let low = r.effective(0.02, &p).unwrap();
        let high = r.effective(0.078, &p).unwrap();
        assert!(low[0] > high[0]);
        assert_relative_eq!(r.effective(p.wheel_radius, &p).unwrap()[0], 0.2, epsilon = 1e-12);
        assert_eq!(RestitutionModel::new([0.2, 1.0, 0.1]).effective(0.02, &p).unwrap(), [0.2, 1.0, 0.1]);
    }

    #[test]
    fn enhance_is_additive() {
        let q = Vector5::new(1.0, 2.0, 3.0, 4.0, 5.0);
        let a = Vector5::repeat(0.1);
        let b = Vector5::repeat(-0.3);
        assert_eq!(enhance(&q, &Vector5::zeros()), q);
        assert_eq!(enhance(&Vector5::zeros(), &a), a);
        assert_relative_eq!(enhance(&enhance(&q, &a), &b), enhance(&q, &(a + b)), epsilon = 1e-15);
    }
}
