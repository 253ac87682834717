//! Limiting ODE, variational equation, spectral data and the Lyapunov geometry around a stable equilibrium.

mod envelope;
mod flow;
mod geometry;
pub mod integrator;
mod lyapunov;
mod spectral;

pub use envelope::{
    envelope_grid, fit_envelopes, fitted_k, replay_envelopes, sample_pairs, EnvelopeFit, EnvelopeReplay,
    WINDOW_RATES,
};
pub use flow::{fundamental_matrix, sample_flow, sample_flow_with_variation, solve_ode, DEFAULT_TOL};
pub use geometry::{build_region_geometry, build_region_geometry_with, random_direction, GeometryOptions, RegionGeometry};
pub use lyapunov::{lyapunov_residual, solve_lyapunov};
pub use spectral::{
    decay_envelope, find_equilibrium, spectral_abscissa, spectral_norm, spectral_package, SpectralData,
    ENVELOPE_GRID, ENVELOPE_SAFETY,
};
