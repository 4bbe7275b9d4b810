//! Bikebot obstacle-crossing simulation and control.

pub mod dynamics;
pub mod eic;
pub mod reference;
pub mod sim;
pub mod impact;
pub mod leg;
pub mod impulse;
pub mod supervisor;
pub mod residual;
pub mod harness;

pub use dynamics::{ActuatorLimits, BikeModel, BikebotParams, BikebotState, DynamicsError, RollTorquePort};
pub use eic::{ControllerGains, EicController};
pub use harness::{
    export, load_scenario, metrics, run, HarnessError, RunMetrics, Scenario, TrajectoryLog, Verdict,
};
pub use impact::{Obstacle, RestitutionModel};
pub use impulse::{ImpulseCommand, ImpulseConfig, ReinitDecision};
pub use leg::{LegGeometry, Side};
pub use reference::{Reference, ReferenceSpec};
pub use residual::{ExperimentConfig, ResidualModel};
pub use supervisor::{Mode, RoaAtlas, RoaGrid, RoaSpec, SupervisorConfig};
