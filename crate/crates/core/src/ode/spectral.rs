use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::model::{DriftFunction, Matrix, Vector};

/// Points on the `t`-grid used to bound the decay envelope of `exp(Dh t)`.
pub const ENVELOPE_GRID: usize = 4000;
/// Multiplier applied to the sampled envelope maximum.
pub const ENVELOPE_SAFETY: f64 = 1.05;

/// Linearisation data at a stable equilibrium.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralData {
    #[serde(with = "io::vector")]
    pub x_star: Vector,
    #[serde(with = "io::matrix_rows")]
    pub jacobian_at_star: Matrix,
    pub lambda_min: f64,
    pub lambda_prime: f64,
    pub kappa: f64,
    pub k_tilde: f64,
    pub lambda: f64,
}

/// Largest singular value.
pub fn spectral_norm(m: &Matrix) -> f64 {
    if m.nrows() == 1 && m.ncols() == 1 {
        return m[(0, 0)].abs();
    }
    m.clone().svd(false, false).singular_values.max()
}

/// Largest real part over the eigenvalues.
pub fn spectral_abscissa(a: &Matrix) -> f64 {
    a.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
}

fn require_hurwitz(a: &Matrix) -> Result<()> {
    let alpha = spectral_abscissa(a);
    if alpha < 0.0 {
        Ok(())
    } else {
        Err(Error::NotHurwitz(alpha))
    }
}

fn residual_small(drift: &DriftFunction, x: &Vector, rel: f64) -> bool {
    drift.eval(x).norm() <= rel * (1.0 + x.norm())
}

/// Newton's method for `h(x) = 0`, rejecting equilibria whose Jacobian is not Hurwitz.
pub fn find_equilibrium(drift: &DriftFunction, guess: &Vector) -> Result<Vector> {
    const MAX_ITER: usize = 50;
    if guess.len() != drift.dim() {
        return Err(Error::DimensionMismatch { expected: drift.dim(), got: guess.len() });
    }
    let mut x = guess.clone();
    let mut converged = residual_small(drift, &x, 1e-12);
    for _ in 0..MAX_ITER {
        if converged {
            break;
        }
        let step = drift
            .jacobian(&x)
            .lu()
            .solve(&drift.eval(&x))
            .ok_or(Error::NewtonNonConvergence(MAX_ITER))?;
        x -= step;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NewtonNonConvergence(MAX_ITER));
        }
        converged = residual_small(drift, &x, 1e-12);
    }
    if !converged {
        return Err(Error::NewtonNonConvergence(MAX_ITER));
    }
    require_hurwitz(&drift.jacobian(&x))?;
    Ok(x)
}

/// `sup_t ||exp(A t)|| exp(lambda' t)` on the grid, inflated by the safety factor; at least 1.
///
/// When the logarithmic norm of `A` is at most `-lambda'` the envelope is bounded by 1 exactly.
pub fn decay_envelope(a: &Matrix, lambda_prime: f64) -> f64 {
    let sym = (a + a.transpose()) * 0.5;
    let log_norm = sym.symmetric_eigenvalues().max();
    if log_norm <= -lambda_prime {
        return 1.0;
    }
    let horizon = 40.0 / lambda_prime;
    let sup = (0..ENVELOPE_GRID)
        .map(|i| {
            let t = horizon * i as f64 / (ENVELOPE_GRID - 1) as f64;
            spectral_norm(&(a * t).exp()) * (lambda_prime * t).exp()
        })
        .fold(0.0, f64::max);
    (ENVELOPE_SAFETY * sup).max(1.0)
}

/// Decay rates and envelope constant at `x_star`.
pub fn spectral_package(
    drift: &DriftFunction,
    x_star: &Vector,
    kappa: f64,
    lambda_prime_fraction: f64,
) -> Result<SpectralData> {
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(Error::InvalidParameter(format!("kappa must lie in (0,1), got {kappa}")));
    }
    if !(lambda_prime_fraction > 0.0 && lambda_prime_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "lambda_prime_fraction must lie in (0,1), got {lambda_prime_fraction}"
        )));
    }
    if !residual_small(drift, x_star, 1e-10) {
        return Err(Error::InvalidParameter("x_star is not an equilibrium".into()));
    }
    let a = drift.jacobian(x_star);
    require_hurwitz(&a)?;
    let lambda_min = -spectral_abscissa(&a);
    let lambda_prime = lambda_prime_fraction * lambda_min;
    let k_tilde = decay_envelope(&a, lambda_prime);
    let lambda = (1.0 - kappa) / (k_tilde * k_tilde) * lambda_prime;
    Ok(SpectralData {
        x_star: x_star.clone(),
        jacobian_at_star: a,
        lambda_min,
        lambda_prime,
        kappa,
        k_tilde,
        lambda,
    })
}
