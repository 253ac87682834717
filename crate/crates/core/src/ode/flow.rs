use super::integrator::integrate;
use crate::error::{Error, Result};
use crate::model::{DriftFunction, Matrix, Vector};

/// Default integration tolerance.
pub const DEFAULT_TOL: f64 = 1e-9;

fn check(drift: &DriftFunction, s: f64, u0: &Vector, times: &[f64]) -> Result<()> {
    if u0.len() != drift.dim() {
        return Err(Error::DimensionMismatch { expected: drift.dim(), got: u0.len() });
    }
    if times.iter().any(|t| *t < s) {
        return Err(Error::InvalidParameter("final time precedes start time".into()));
    }
    Ok(())
}

/// `x(t, s, u0)` for each `t` in `times` (sorted).
pub fn sample_flow(drift: &DriftFunction, s: f64, u0: &Vector, times: &[f64], tol: f64) -> Result<Vec<Vector>> {
    check(drift, s, u0, times)?;
    let rhs = |_: f64, y: &[f64], dy: &mut [f64]| {
        let h = drift.eval(&Vector::from_column_slice(y));
        dy.copy_from_slice(h.as_slice());
    };
    let out = integrate(rhs, s, u0.as_slice(), times, tol)?;
    Ok(out.into_iter().map(Vector::from_vec).collect())
}

/// Solution of `x' = h(x)` with `x(s) = u0`, evaluated at `t`.
pub fn solve_ode(drift: &DriftFunction, s: f64, u0: &Vector, t: f64, tol: f64) -> Result<Vector> {
    if t == s {
        check(drift, s, u0, &[t])?;
        return Ok(u0.clone());
    }
    Ok(sample_flow(drift, s, u0, &[t], tol)?.remove(0))
}

/// `(x(t, s, u0), Phi(t, s, u0))` for each `t` in `times`, from the augmented variational system.
pub fn sample_flow_with_variation(
    drift: &DriftFunction,
    s: f64,
    u0: &Vector,
    times: &[f64],
    tol: f64,
) -> Result<Vec<(Vector, Matrix)>> {
    check(drift, s, u0, times)?;
    let d = drift.dim();
    let mut y0 = u0.as_slice().to_vec();
    y0.extend(Matrix::identity(d, d).as_slice());
    let rhs = |_: f64, y: &[f64], dy: &mut [f64]| {
        let x = Vector::from_column_slice(&y[..d]);
        dy[..d].copy_from_slice(drift.eval(&x).as_slice());
        let phi = Matrix::from_column_slice(d, d, &y[d..]);
        let dphi = drift.jacobian(&x) * phi;
        dy[d..].copy_from_slice(dphi.as_slice());
    };
    let out = integrate(rhs, s, &y0, times, tol)?;
    Ok(out
        .into_iter()
        .map(|y| (Vector::from_column_slice(&y[..d]), Matrix::from_column_slice(d, d, &y[d..])))
        .collect())
}

/// `Phi(t, s, u0)`, the fundamental matrix of the linearisation along `x(., s, u0)`.
pub fn fundamental_matrix(drift: &DriftFunction, s: f64, u0: &Vector, t: f64, tol: f64) -> Result<Matrix> {
    if t == s {
        check(drift, s, u0, &[t])?;
        return Ok(Matrix::identity(drift.dim(), drift.dim()));
    }
    Ok(sample_flow_with_variation(drift, s, u0, &[t], tol)?.remove(0).1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_drift, ScenarioSpec};
    use proptest::prelude::*;

    fn v(x: f64) -> Vector {
        Vector::from_element(1, x)
    }

    /// Classical RK4 with a fixed step, used as an independent reference.
    fn rk4(f: impl Fn(f64) -> f64, x0: f64, t: f64, h: f64) -> Vec<f64> {
        let n = (t / h).round() as usize;
        let mut xs = Vec::with_capacity(n + 1);
        let mut x = x0;
        xs.push(x);
        for _ in 0..n {
            let k1 = f(x);
            let k2 = f(x + 0.5 * h * k1);
            let k3 = f(x + 0.5 * h * k2);
            let k4 = f(x + h * k3);
            x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            xs.push(x);
        }
        xs
    }

    #[test]
    fn linear_closed_form() {
        let d = make_drift(&ScenarioSpec::Linear1d { rate: 1.0 }).unwrap();
        let x = solve_ode(&d, 0.0, &v(1.0), 1.0, 1e-9).unwrap();
        assert!((x[0] - (-1f64).exp()).abs() < 1e-8);
        assert_eq!(solve_ode(&d, 2.0, &v(0.3), 2.0, 1e-9).unwrap()[0], 0.3);
        for u0 in [-2.0, 0.1, 5.0] {
            let phi = fundamental_matrix(&d, 0.5, &v(u0), 2.0, 1e-10).unwrap();
            assert!((phi[(0, 0)] - (-1.5f64).exp()).abs() < 1e-9);
        }
        assert_eq!(fundamental_matrix(&d, 1.0, &v(1.0), 1.0, 1e-9).unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn double_well_against_rk4() {
        let d = make_drift(&ScenarioSpec::DoubleWell1d).unwrap();
        let x = solve_ode(&d, 0.0, &v(0.5), 5.0, 1e-9).unwrap()[0];
        let reference = *rk4(|x| x - x * x * x, 0.5, 5.0, 1e-5).last().unwrap();
        assert!((x - reference).abs() < 1e-6, "{x} vs {reference}");
    }

    #[test]
    fn double_well_variation_against_quadrature() {
        let d = make_drift(&ScenarioSpec::DoubleWell1d).unwrap();
        let phi = fundamental_matrix(&d, 0.0, &v(0.8), 2.0, 1e-10).unwrap()[(0, 0)];
        let h = 1e-4;
        let path = rk4(|x| x - x * x * x, 0.8, 2.0, h);
        // Trapezoid rule of 1 - 3x^2 along the reference path.
        let g: Vec<f64> = path.iter().map(|x| 1.0 - 3.0 * x * x).collect();
        let integral: f64 = g.windows(2).map(|w| 0.5 * h * (w[0] + w[1])).sum();
        assert!((phi - integral.exp()).abs() < 1e-6, "{phi} vs {}", integral.exp());
    }

    #[test]
    fn spiral_variation_is_matrix_exponential() {
        let d = make_drift(&ScenarioSpec::Spiral2d { sigma: 1.0, omega: 2.0 }).unwrap();
        let u0 = Vector::from_column_slice(&[0.3, -0.4]);
        let phi = fundamental_matrix(&d, 0.0, &u0, 1.7, 1e-11).unwrap();
        let a = Matrix::from_row_slice(2, 2, &[-1.0, 2.0, -2.0, -1.0]);
        let exact = (a * 1.7).exp();
        assert!((phi - exact).norm() < 1e-9);
    }

    #[test]
    fn rejects_backward_time() {
        let d = make_drift(&ScenarioSpec::DoubleWell1d).unwrap();
        assert!(solve_ode(&d, 1.0, &v(0.5), 0.5, 1e-9).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn group_property(u0 in 0.1f64..1.9, m in 0.0f64..3.0, extra in 0.0f64..3.0) {
            let d = make_drift(&ScenarioSpec::DoubleWell1d).unwrap();
            let tol = 1e-9;
            let t = m + extra;
            let direct = solve_ode(&d, 0.0, &v(u0), t, tol).unwrap()[0];
            let mid = solve_ode(&d, 0.0, &v(u0), m, tol).unwrap();
            let composed = solve_ode(&d, m, &mid, t, tol).unwrap()[0];
            prop_assert!((direct - composed).abs() <= 2.0 * tol, "{}", (direct - composed).abs());
        }

        #[test]
        fn cocycle_property(u0 in 0.1f64..1.9, m in 0.0f64..2.0, extra in 0.0f64..2.0) {
            let d = make_drift(&ScenarioSpec::DoubleWell1d).unwrap();
            let tol = 1e-9;
            let t = m + extra;
            let direct = fundamental_matrix(&d, 0.0, &v(u0), t, tol).unwrap()[(0, 0)];
            let mid = solve_ode(&d, 0.0, &v(u0), m, tol).unwrap();
            let first = fundamental_matrix(&d, 0.0, &v(u0), m, tol).unwrap()[(0, 0)];
            let second = fundamental_matrix(&d, m, &mid, t, tol).unwrap()[(0, 0)];
            prop_assert!((direct - second * first).abs() <= 5.0 * tol);
        }
    }
}
