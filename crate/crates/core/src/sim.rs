//! Closed-loop simulation: 1 kHz plant integration with the EIC controller
//! sampled at its own period.

use std::sync::Arc;

use crate::dynamics::{BikeModel, BikebotState, DriveCommand, DynamicsError, RollTorquePort};
use crate::eic::{ControllerGains, EicController, EicError, EicOutput};
use crate::reference::Reference;

/// Plant integration step (s).
pub const PLANT_DT: f64 = 1e-3;

/// Plant, controller and reference advanced together.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub model: BikeModel,
    pub controller: EicController,
    pub reference: Arc<Reference>,
    pub state: BikebotState,
    pub dt: f64,
    command: DriveCommand,
    steps_per_tick: u64,
    step_index: u64,
}

/// Result of one plant step.
#[derive(Debug, Clone)]
pub struct StepReport {
    /// Controller output when a tick fell on this step.
    pub tick: Option<EicOutput>,
    pub fault: Option<EicError>,
}

impl ClosedLoop {
    pub fn new(model: BikeModel, gains: ControllerGains, reference: Arc<Reference>, state: BikebotState) -> Self {
        let controller = EicController::new(gains, model.params, &model.limits);
        Self::with_controller(model, controller, reference, state)
    }

    /// Closed loop around an existing controller, e.g. a clone of a live one.
    pub fn with_controller(
        model: BikeModel,
        controller: EicController,
        reference: Arc<Reference>,
        state: BikebotState,
    ) -> Self {
        let steps_per_tick = ((controller.gains.period / PLANT_DT).round() as u64).max(1);
        Self {
            model,
            controller,
            reference,
            state,
            dt: PLANT_DT,
            command: DriveCommand::default(),
            steps_per_tick,
            step_index: 0,
        }
    }

    pub fn command(&self) -> DriveCommand {
        self.command
    }

    pub fn tick_due(&self) -> bool {
        self.step_index.is_multiple_of(self.steps_per_tick)
    }

    /// Number of plant steps per controller tick.
    pub fn steps_per_tick(&self) -> u64 {
        self.steps_per_tick
    }

    /// Runs the controller if a tick is due, then integrates one plant step.
    pub fn step(&mut self, ext: &RollTorquePort) -> Result<StepReport, DynamicsError> {
        let mut report = StepReport { tick: None, fault: None };
        if self.tick_due() {
            let (out, fault) = self.controller.step(&self.state, &self.reference);
            self.command = out.command;
            report = StepReport { tick: Some(out), fault };
        }
        self.state = self.model.step(&self.state, &self.command, ext, self.dt)?;
        self.step_index += 1;
        Ok(report)
    }

    /// Integrates for `duration` seconds, calling `on_step` after every step.
    pub fn run_for<F>(&mut self, duration: f64, ext: &RollTorquePort, mut on_step: F) -> Result<(), DynamicsError>
    where
        F: FnMut(&BikebotState, &StepReport),
    {
        let n = (duration / self.dt).round() as u64;
        for _ in 0..n {
            let rep = self.step(ext)?;
            on_step(&self.state, &rep);
        }
        Ok(())
    }
}
