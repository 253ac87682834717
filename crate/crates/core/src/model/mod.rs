//! Problem definition: drift, stepsizes, noise and random streams.

mod drift;
mod noise;
mod rng;
mod schedule;

pub use drift::{make_drift, DriftFunction, Matrix, PolyTerm, ScenarioSpec, Vector};
pub use noise::{NoiseModel, NoiseSpec};
pub use rng::RngStream;
pub use schedule::{ScheduleSpec, StepSchedule};
