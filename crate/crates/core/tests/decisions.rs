use std::sync::Arc;

use bikecross_core::dynamics::{BikeModel, BikebotParams, BikebotState, RollTorquePort};
use bikecross_core::eic::{ControllerGains, EicController};
use bikecross_core::impulse::{self, ImpulseConfig, ImpulseError, Rollout};
use bikecross_core::leg::{LegGeometry, Side};
use bikecross_core::reference::Reference;
use bikecross_core::residual::{self, MismatchConfig, ResidualModel, TrainConfig};
use bikecross_core::sim::ClosedLoop;
use bikecross_core::supervisor::predict_roll;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn jump_closed_form(roll in -0.2f64..0.2, rate in -1.0f64..1.0, torque in -30.0f64..30.0, kappa in 0.01f64..0.1) {
        let p = BikebotParams::default();
        let jt = p.total_roll_inertia();
        let (r, w) = impulse::ideal_jump(roll, rate, torque, kappa, &p);
        prop_assert!((w - rate - torque * kappa / jt).abs() < 1e-14);
        prop_assert!((r - roll - rate * kappa - torque * kappa * kappa / (2.0 * jt)).abs() < 1e-14);
    }

    #[test]
    fn bound_grows_with_lean(roll in 0.0f64..0.3, extra in 0.0f64..0.2, rate in -1.0f64..1.0, speed in 0.0f64..1.5) {
        // holds once the lean dominates the rest of the bracket
        let p = BikebotParams::default();
        let cfg = ImpulseConfig::default();
        let (k1, k2) = impulse::linearized_gains(speed, &p);
        let offset = rate + k2 / k1 * cfg.steer_max().tan();
        prop_assume!(roll + offset >= 0.0);
        let a = impulse::min_impulse(roll, rate, speed, &cfg, &p);
        let b = impulse::min_impulse(roll + extra, rate, speed, &cfg, &p);
        prop_assert!(b >= a);
    }

    #[test]
    fn standing_bound_is_the_bracket(roll in -0.3f64..0.3, rate in -1.0f64..1.0) {
        let p = BikebotParams::default();
        let cfg = ImpulseConfig::default();
        let b = impulse::min_impulse(roll, rate, 0.0, &cfg, &p);
        prop_assert!((b - (roll + rate).abs() / (cfg.kappa * p.total_roll_inertia())).abs() < 1e-12);
    }

    #[test]
    fn leg_pushes_on_the_side_it_should(torque in prop_oneof![-30.0f64..-1.0, 1.0f64..30.0], roll in -0.15f64..0.15) {
        let cfg = ImpulseConfig::default();
        let cmd = impulse::leg_command(torque, 1.0, roll, &cfg, &LegGeometry::default()).unwrap();
        prop_assert_eq!(cmd.side, impulse::side_for(torque));
        prop_assert_eq!(cmd.side == Side::Left, torque > 0.0);
        prop_assert!((cmd.torque - torque).abs() < 1e-9);
        prop_assert!((cmd.t_end - cmd.t_start - cfg.kappa).abs() < 1e-12);
    }
}

#[test]
fn necessary_condition_needs_a_rate() {
    let p = BikebotParams::default();
    let cfg = ImpulseConfig::default();
    assert!(matches!(impulse::check_necessary_condition(0.0, 0.0, 5.0, 1.0, &cfg, &p), Err(ImpulseError::ZeroRate)));
    assert!(impulse::check_necessary_condition(0.0, 0.5, -10.0, 1.0, &cfg, &p).unwrap());
    assert!(!impulse::check_necessary_condition(0.0, 0.5, 0.0, 1.0, &cfg, &p).unwrap());
}

fn perturbed(roll_deg: f64, rate_deg: f64) -> (BikeModel, EicController, Arc<Reference>, BikebotState) {
    let model = BikeModel::default();
    let reference = Arc::new(Reference::straight(1.2));
    let mut cl = ClosedLoop::new(model, ControllerGains::default(), reference.clone(), BikebotState::riding(1.2));
    cl.run_for(1.0, &RollTorquePort::none(), |_, _| {}).unwrap();
    let s = BikebotState { roll: roll_deg.to_radians(), roll_rate: rate_deg.to_radians(), ..cl.state };
    (model, cl.controller, reference, s)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn reinit_never_loses_to_its_alternatives(roll in -4.0f64..4.0, rate in -40.0f64..40.0) {
        let (model, controller, reference, s) = perturbed(roll, rate);
        let cfg = ImpulseConfig { grid: 7, refine_iters: 6, ..ImpulseConfig::default() };
        let d = impulse::optimize_reinit(&Rollout::new(model, &controller, reference, s), &cfg).unwrap();
        prop_assert!(d.cost <= d.baseline_cost);
        prop_assert!(d.cost <= d.grid_cost);
        prop_assert!(d.rate_in_box && d.speed_in_box);
    }

    #[test]
    fn roll_prediction_has_no_side_effects(roll in -4.0f64..4.0, rate in -40.0f64..40.0) {
        let (model, controller, reference, s) = perturbed(roll, rate);
        let before = controller.clone();
        let a = predict_roll(&s, &controller, &model, &reference, 0.5).unwrap();
        let b = predict_roll(&s, &controller, &model, &reference, 0.5).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(controller, before);
        prop_assert!(a >= s.roll.abs());
    }
}

#[test]
fn training_is_reproducible() {
    let p = BikebotParams::default();
    let data = residual::generate_synthetic_dataset(&MismatchConfig::default(), &p, 400, 5).unwrap();
    assert_eq!(data, residual::generate_synthetic_dataset(&MismatchConfig::default(), &p, 400, 5).unwrap());
    let cfg = TrainConfig { epochs: 2, hidden: 8, head: 8, ..TrainConfig::default() };
    let (a, ra) = residual::train(&data, &cfg, 9).unwrap();
    let (b, rb) = residual::train(&data, &cfg, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    let w = &data.examples[0].window;
    assert_eq!(a.predict(w).unwrap(), b.predict(w).unwrap());

    let mut bytes = Vec::new();
    a.write(&mut bytes).unwrap();
    let back = ResidualModel::read(bytes.as_slice()).unwrap();
    assert_eq!(back, a);
}
