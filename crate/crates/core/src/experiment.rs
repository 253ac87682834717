//! Shared setup chain: drift, equilibrium, spectral data, region geometry, fitted envelopes and bound constants.

use serde::{Deserialize, Serialize};

use crate::bound::{waiting_time, BoundParams, ConstantSource};
use crate::conc::{fitted_constants, FittedConstants};
use crate::error::Result;
use crate::model::{make_drift, DriftFunction, NoiseModel, NoiseSpec, RngStream, ScenarioSpec, ScheduleSpec, StepSchedule, Vector};
use crate::montecarlo::Scenario;
use crate::ode::{
    build_region_geometry_with, find_equilibrium, fit_envelopes, fitted_k, sample_pairs, spectral_package, EnvelopeFit,
    GeometryOptions, RegionGeometry, SpectralData,
};

/// Declarative description of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setup {
    pub scenario: ScenarioSpec,
    /// Starting point of the Newton search for `x*`.
    pub x_star_guess: Vec<f64>,
    pub schedule: ScheduleSpec,
    pub noise: NoiseSpec,
    pub eps: f64,
    pub kappa: f64,
    pub lambda_prime_fraction: f64,
    pub envelope_pairs: usize,
    pub envelope_grid: usize,
    pub ode_tol: f64,
    pub seed: u64,
    pub geometry: GeometryOptions,
}

impl Setup {
    pub fn new(scenario: ScenarioSpec, x_star_guess: &[f64], schedule: ScheduleSpec, noise: NoiseSpec, eps: f64) -> Self {
        Setup {
            scenario,
            x_star_guess: x_star_guess.to_vec(),
            schedule,
            noise,
            eps,
            kappa: 0.5,
            lambda_prime_fraction: 0.9,
            envelope_pairs: 50,
            envelope_grid: 41,
            ode_tol: 1e-10,
            seed: 0,
            geometry: GeometryOptions::default(),
        }
    }
}

/// Everything derived from a [`Setup`].
#[derive(Debug, Clone)]
pub struct Prepared {
    pub setup: Setup,
    pub drift: DriftFunction,
    pub schedule: StepSchedule,
    pub noise: NoiseModel,
    pub spectral: SpectralData,
    pub geometry: RegionGeometry,
    pub envelope: EnvelopeFit,
    /// `max(1, K_tilde, K1, K3, K4)`.
    pub k: f64,
}

pub fn prepare(setup: &Setup) -> Result<Prepared> {
    let drift = make_drift(&setup.scenario)?;
    let schedule = StepSchedule::new(setup.schedule.clone())?;
    let noise = NoiseModel::new(setup.noise.clone(), drift.dim())?;
    let x_star = find_equilibrium(&drift, &Vector::from_column_slice(&setup.x_star_guess))?;
    let spectral = spectral_package(&drift, &x_star, setup.kappa, setup.lambda_prime_fraction)?;
    let geometry = build_region_geometry_with(&drift, &spectral, setup.eps, &setup.geometry)?;
    let pairs = sample_pairs(&geometry, setup.envelope_pairs, &mut RngStream::new(setup.seed, u64::MAX));
    let envelope = fit_envelopes(&drift, spectral.lambda, &pairs, setup.envelope_grid, setup.ode_tol)?;
    let k = fitted_k(&spectral, &envelope);
    Ok(Prepared { setup: setup.clone(), drift, schedule, noise, spectral, geometry, envelope, k })
}

impl Prepared {
    pub fn scenario(&self) -> Scenario<'_> {
        Scenario {
            drift: &self.drift,
            schedule: &self.schedule,
            noise: &self.noise,
            geometry: &self.geometry,
            spectral: &self.spectral,
        }
    }

    /// `T = ln(4K/eps)/lambda` with the fitted `K`.
    pub fn waiting_time(&self, eps: f64) -> f64 {
        waiting_time(eps, self.k, self.spectral.lambda)
    }

    /// Bound parameters with `C1`, `C2` chained from the noise tails and the fitted envelopes.
    pub fn fitted_bound_params(&self, eps: f64, n0: usize, horizon: usize) -> Result<(BoundParams, FittedConstants)> {
        let fc = fitted_constants(&self.noise, self.k, self.envelope.k3.max(1.0), self.spectral.lambda)?;
        let params = BoundParams {
            epsilon: eps,
            c1: fc.c1,
            c2: fc.c2,
            k: self.k,
            lambda: self.spectral.lambda,
            n0,
            horizon,
            source: ConstantSource::Fitted,
        };
        Ok((params, fc))
    }
}
