use std::sync::Arc;

use bikecross_core::dynamics::{
    roll_accel, steering_from_yawrate, yaw_rate, BikeModel, BikebotParams, BikebotState, DriveCommand, RollTorquePort,
};
use bikecross_core::eic::{balance_control, ControllerGains, ManifoldState};
use bikecross_core::reference::Reference;
use bikecross_core::sim::ClosedLoop;
use proptest::prelude::*;

fn coast(model: &BikeModel, mut s: BikebotState, cmd: &DriveCommand, port: &RollTorquePort, dt: f64, t: f64) -> BikebotState {
    let n = (t / dt).round() as usize;
    for _ in 0..n {
        s = model.step(&s, cmd, port, dt).unwrap();
    }
    s
}

fn energy(s: &BikebotState, p: &BikebotParams) -> f64 {
    0.5 * p.total_roll_inertia() * s.roll_rate * s.roll_rate
        + p.mass * p.gravity * p.com_height * (s.roll.cos() - 1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn steering_round_trip(steer in -0.5f64..0.5, speed in 0.2f64..1.5, roll in -0.6f64..0.6) {
        let p = BikebotParams::default();
        let w = yaw_rate(speed, steer, roll, &p).unwrap();
        let (back, raw) = steering_from_yawrate(w, speed, roll, 0.6, &p).unwrap();
        prop_assert!((back - steer).abs() < 1e-9);
        prop_assert_eq!(back, raw);
    }

    #[test]
    fn rear_contact_never_slides(y in -0.2f64..0.2, roll in -3.0f64..3.0, speed in 0.6f64..1.4) {
        let model = BikeModel::default();
        let s = BikebotState { y, roll: roll.to_radians(), ..BikebotState::riding(speed) };
        let mut cl = ClosedLoop::new(model, ControllerGains::default(), Arc::new(Reference::straight(speed)), s);
        let mut worst = 0.0f64;
        cl.run_for(2.0, &RollTorquePort::none(), |s, _| {
            let (vx, vy) = model.position_rates(s);
            worst = worst.max((vx * s.yaw.sin() - vy * s.yaw.cos()).abs());
        }).unwrap();
        prop_assert!(worst < 1e-9, "{worst}");
    }

    #[test]
    fn upright_is_an_equilibrium(speed in 0.0f64..1.5, x in -3.0f64..3.0, yaw in -3.0f64..3.0) {
        let model = BikeModel::default();
        let s = BikebotState { x, yaw, ..BikebotState::riding(speed) };
        let mut cur = s;
        for _ in 0..2000 {
            cur = model.step(&cur, &DriveCommand::default(), &RollTorquePort::none(), 1e-3).unwrap();
            prop_assert_eq!(cur.roll, 0.0);
            prop_assert_eq!(cur.roll_rate, 0.0);
        }
    }

    #[test]
    fn standing_roll_conserves_energy(roll in -0.005f64..0.005, rate in -0.02f64..0.02) {
        let model = BikeModel::default();
        let s = BikebotState { roll, roll_rate: rate, ..BikebotState::riding(0.0) };
        let end = coast(&model, s, &DriveCommand::default(), &RollTorquePort::none(), 1e-3, 1.0);
        let drift = (energy(&end, &model.params) - energy(&s, &model.params)).abs();
        prop_assert!(drift < 1e-6, "{drift}");
    }

    #[test]
    fn balance_law_cancels_the_plant(
        roll in -0.4f64..0.4,
        rate in -1.0f64..1.0,
        yaw_rate in -0.8f64..0.8,
        speed in 0.3f64..1.5,
        target in -0.2f64..0.2,
        target_rate in -0.5f64..0.5,
        target_accel in -2.0f64..2.0,
    ) {
        let p = BikebotParams::default();
        let g = ControllerGains::default();
        let s = BikebotState { roll, roll_rate: rate, yaw_rate, ..BikebotState::riding(speed) };
        let m = ManifoldState { roll: target, rate: target_rate, accel: target_accel };
        let u = balance_control(&s, &m, &g, &p).unwrap();
        let acc = roll_accel(&s, u, &RollTorquePort::none(), &p).unwrap();
        let residual = (acc - target_accel) + g.b1 * (rate - target_rate) + g.b0 * (roll - target);
        prop_assert!(residual.abs() < 1e-10 * (1.0 + acc.abs()), "{residual}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn commands_stay_clamped_and_manifold_is_continuous(
        y in -0.2f64..0.2,
        yaw in -0.2f64..0.2,
        speed in 0.8f64..1.4,
    ) {
        let model = BikeModel::default();
        let s = BikebotState { y, yaw, ..BikebotState::riding(speed) };
        let mut cl = ClosedLoop::new(model, ControllerGains::default(), Arc::new(Reference::straight(speed)), s);
        let (mut prev, mut jump, mut steer, mut fastest) = (None::<f64>, 0.0f64, 0.0f64, 0.0f64);
        cl.run_for(6.0, &RollTorquePort::none(), |s, rep| {
            fastest = fastest.max(s.speed);
            if let Some(out) = &rep.tick {
                steer = steer.max(out.command.steer.abs());
                if let Some(r) = prev {
                    jump = jump.max((out.manifold.roll - r).abs());
                }
                prev = Some(out.manifold.roll);
            }
        }).unwrap();
        prop_assert!(steer <= 30f64.to_radians() + 1e-12, "{steer}");
        prop_assert!(fastest <= model.limits.speed_max + 1e-9, "{fastest}");
        prop_assert!(jump.to_degrees() < 5.0, "{}", jump.to_degrees());
    }

    #[test]
    fn tracking_error_decays(y in -0.15f64..0.15, dx in -0.1f64..0.1) {
        prop_assume!(y.hypot(dx) > 0.05);
        let g = ControllerGains::default();
        let s = BikebotState { x: dx, y, ..BikebotState::riding(1.2) };
        let mut cl = ClosedLoop::new(BikeModel::default(), g, Arc::new(Reference::straight(1.2)), s);
        let (mut early, mut late) = (0.0f64, 0.0f64);
        cl.run_for(8.0, &RollTorquePort::none(), |s, _| {
            let e = (s.x - 1.2 * s.t).hypot(s.y);
            if s.t <= 2.0 {
                early = early.max(e);
            } else if s.t >= 6.0 {
                late = late.max(e);
            }
        }).unwrap();
        // slowest pole of s^3 + a2 s^2 + a1 s + a0
        let slowest = slowest_pole(g.a2, g.a1, g.a0);
        let fitted = (early / late).ln() / 6.0;
        prop_assert!(fitted >= 0.8 * slowest, "fitted {fitted}, design {slowest}");
    }
}

fn slowest_pole(a2: f64, a1: f64, a0: f64) -> f64 {
    let poly = |s: f64| ((s + a2) * s + a1) * s + a0;
    let (mut lo, mut hi) = (-100.0, 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if poly(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let real = 0.5 * (lo + hi);
    // remaining quadratic s^2 + (a2 + real) s + ...; its real part is -(a2 + real)/2
    let pair = -(a2 + real) / 2.0;
    (-real).min(-pair)
}

#[test]
fn rk4_is_fourth_order() {
    let model = BikeModel::default();
    let s = BikebotState { roll: 0.002, roll_rate: -0.004, steer: 0.02, ..BikebotState::riding(1.0) };
    let cmd = DriveCommand { jerk: 0.2, steer: 0.02 };
    let port = RollTorquePort::constant(0.05, -1.0, 5.0);
    let truth = coast(&model, s, &cmd, &port, 1e-4, 1.0);
    let err = |dt| {
        let e = coast(&model, s, &cmd, &port, dt, 1.0);
        (e.roll - truth.roll).abs() + (e.roll_rate - truth.roll_rate).abs() + (e.x - truth.x).abs() + (e.y - truth.y).abs()
    };
    let (coarse, fine) = (err(0.02), err(0.01));
    assert!(coarse / fine >= 8.0, "{coarse:e} / {fine:e}");
}
