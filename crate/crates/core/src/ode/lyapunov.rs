use super::spectral::spectral_abscissa;
use crate::error::{Error, Result};
use crate::model::Matrix;

/// Solve `A^T P + P A = -I` through the vectorised (Kronecker) linear system.
pub fn solve_lyapunov(a: &Matrix) -> Result<Matrix> {
    let d = a.nrows();
    if a.ncols() != d {
        return Err(Error::DimensionMismatch { expected: d, got: a.ncols() });
    }
    let alpha = spectral_abscissa(a);
    if alpha >= 0.0 {
        return Err(Error::NotHurwitz(alpha));
    }
    let eye = Matrix::identity(d, d);
    let at = a.transpose();
    // vec(A^T P) = (I ⊗ A^T) vec(P), vec(P A) = (A^T ⊗ I) vec(P).
    let k = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = -Matrix::identity(d, d).reshape_generic(nalgebra::Dyn(d * d), nalgebra::Dyn(1));
    let sol = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::InvalidParameter("singular Lyapunov system".into()))?;
    let p = sol.reshape_generic(nalgebra::Dyn(d), nalgebra::Dyn(d));
    let p = (&p + p.transpose()) * 0.5;
    if p.clone().cholesky().is_none() {
        return Err(Error::InvalidParameter("Lyapunov solution is not positive definite".into()));
    }
    Ok(p)
}

/// Frobenius norm of `A^T P + P A + I`.
pub fn lyapunov_residual(a: &Matrix, p: &Matrix) -> f64 {
    (a.transpose() * p + p * a + Matrix::identity(a.nrows(), a.nrows())).norm()
}
