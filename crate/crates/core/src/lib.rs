//! Numerical laboratory for lock-in probabilities of stochastic approximation near a stable equilibrium.
//!
//! The crate simulates `x_{n+1} = x_n + a_n (h(x_n) + M_{n+1})`, decomposes the interpolated path
//! against the limiting ODE, evaluates the lock-in lower bound and its concentration ingredients,
//! and checks them by Monte Carlo.

pub mod alekseev;
pub mod bound;
pub mod conc;
pub mod error;
pub mod experiment;
pub mod io;
pub mod model;
pub mod montecarlo;
pub mod ode;
pub mod quadrature;
pub mod sa;
pub mod stats;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
