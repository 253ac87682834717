//! Alekseev (nonlinear variation of constants) decomposition of an interpolated SA path.
//!
//! For `n0 < n`,
//! `x_bar(t_n) = x(t_n, t_n0, x_bar(t_n0)) + W_n + S_tilde_n`, with
//! `W_n = sum_k int_{t_k}^{t_{k+1}} Phi(t_n, s, x_bar(s)) [h(x_bar(t_k)) - h(x_bar(s))] ds`,
//! `S_tilde_n = sum_k int Phi(t_n, s, x_bar(s)) ds M_{k+1}` and the martingale part
//! `S_n = sum_k alpha_{k+1,n} M_{k+1}` where `alpha_{k+1,n} = int Phi(t_n, s, x_bar(t_k)) ds`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::model::{DriftFunction, Matrix, Vector};
use crate::ode::{fundamental_matrix, solve_ode, spectral_norm};
use crate::quadrature::GaussLegendre;
use crate::sa::Trajectory;

/// Largest supported `n - n0`.
pub const MAX_SPAN: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub n0: usize,
    pub n: usize,
    pub quad_order: usize,
    pub tol: f64,
    #[serde(with = "io::vector")]
    pub x_bar_n: Vector,
    #[serde(with = "io::vector")]
    pub ode_ref: Vector,
    #[serde(with = "io::vector")]
    pub w_n: Vector,
    #[serde(with = "io::vector")]
    pub s_tilde_n: Vector,
    #[serde(with = "io::vector")]
    pub s_n: Vector,
    /// `alpha_{k+1,n}` for `k = n0..n`.
    #[serde(with = "io::matrix_list")]
    pub alpha_weights: Vec<Matrix>,
    pub residual: f64,
}

struct Interval {
    w: Vector,
    s_tilde: Vector,
    alpha: Matrix,
}

fn interval_terms(
    traj: &Trajectory,
    drift: &DriftFunction,
    rule: &GaussLegendre,
    k: usize,
    t_n: f64,
    tol: f64,
) -> Result<Interval> {
    let d = traj.dim();
    let t_k = traj.time(k);
    let a_k = traj.step(k);
    let x_k = traj.state(k);
    let h_k = drift.eval(x_k);
    let m = traj.noise_after(k)?;
    let mut out = Interval { w: Vector::zeros(d), s_tilde: Vector::zeros(d), alpha: Matrix::zeros(d, d) };
    for (xi, wt) in rule.nodes.iter().zip(&rule.weights) {
        let theta = 0.5 * (1.0 + xi);
        let s = t_k + theta * a_k;
        let weight = 0.5 * a_k * wt;
        let x_s = traj.interpolate_in(k, theta);
        let phi_path = fundamental_matrix(drift, s, &x_s, t_n, tol)?;
        let phi_frozen = fundamental_matrix(drift, s, x_k, t_n, tol)?;
        out.w += &phi_path * (&h_k - drift.eval(&x_s)) * weight;
        out.s_tilde += &phi_path * m * weight;
        out.alpha += phi_frozen * weight;
    }
    Ok(out)
}

/// Evaluate every term of the decomposition between `n0` and `n` by Gauss–Legendre quadrature.
pub fn decompose(
    traj: &Trajectory,
    drift: &DriftFunction,
    n0: usize,
    n: usize,
    quad_order: usize,
    tol: f64,
) -> Result<DecompositionReport> {
    if !(n0 < n && n0 >= traj.n_start && n <= traj.n_end()) {
        return Err(Error::InvalidParameter(format!(
            "need n_start <= n0 < n <= n_end, got n0={n0}, n={n} for range [{}, {}]",
            traj.n_start,
            traj.n_end()
        )));
    }
    if n - n0 > MAX_SPAN {
        return Err(Error::InvalidParameter(format!("n - n0 = {} exceeds {MAX_SPAN}", n - n0)));
    }
    if traj.dim() != drift.dim() {
        return Err(Error::DimensionMismatch { expected: drift.dim(), got: traj.dim() });
    }
    for k in n0..n {
        traj.noise_after(k)?;
    }
    let rule = GaussLegendre::new(quad_order)?;
    let t_n = traj.time(n);
    let parts: Vec<Interval> = (n0..n)
        .into_par_iter()
        .map(|k| interval_terms(traj, drift, &rule, k, t_n, tol))
        .collect::<Result<_>>()?;

    let d = traj.dim();
    let mut w_n = Vector::zeros(d);
    let mut s_tilde_n = Vector::zeros(d);
    let mut s_n = Vector::zeros(d);
    let mut alpha_weights = Vec::with_capacity(parts.len());
    for (k, part) in (n0..n).zip(parts) {
        w_n += part.w;
        s_tilde_n += part.s_tilde;
        s_n += &part.alpha * traj.noise_after(k)?;
        alpha_weights.push(part.alpha);
    }
    let x_bar_n = traj.state(n).clone();
    let ode_ref = solve_ode(drift, traj.time(n0), traj.state(n0), t_n, tol)?;
    let residual = (&x_bar_n - &ode_ref - &w_n - &s_tilde_n).norm();
    Ok(DecompositionReport {
        n0,
        n,
        quad_order,
        tol,
        x_bar_n,
        ode_ref,
        w_n,
        s_tilde_n,
        s_n,
        alpha_weights,
        residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub pass: bool,
    pub residual: f64,
    pub tol_accept: f64,
}

/// Recompute the identity residual from the stored terms and compare with `tol_accept`.
pub fn verify_identity(report: &DecompositionReport, tol_accept: f64) -> IdentityCheck {
    let residual = (&report.x_bar_n - &report.ode_ref - &report.w_n - &report.s_tilde_n).norm();
    IdentityCheck { pass: residual <= tol_accept, residual, tol_accept }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightNorms {
    pub norms: Vec<f64>,
    pub sum: f64,
    pub max: f64,
}

/// Spectral norms of `alpha_{k+1,n}` in `k` order.
pub fn alpha_weight_norms(report: &DecompositionReport) -> WeightNorms {
    let norms: Vec<f64> = report.alpha_weights.iter().map(spectral_norm).collect();
    WeightNorms { sum: norms.iter().sum(), max: norms.iter().copied().fold(0.0, f64::max), norms }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_drift, NoiseModel, NoiseSpec, RngStream, ScenarioSpec, StepSchedule};
    use crate::sa::run_sa;

    fn trajectory(spec: ScenarioSpec, noise: NoiseSpec, x0: f64, seed: u64, steps: usize) -> (DriftFunction, Trajectory) {
        let d = make_drift(&spec).unwrap();
        let s = StepSchedule::power(1.0).unwrap();
        let m = NoiseModel::new(noise, 1).unwrap();
        let tr = run_sa(&d, &s, &m, &Vector::from_element(1, x0), 0, steps, &mut RngStream::new(seed, 0)).unwrap();
        (d, tr)
    }

    #[test]
    fn zero_noise_has_no_martingale_terms() {
        let (d, tr) = trajectory(ScenarioSpec::DoubleWell1d, NoiseSpec::Zero, 0.6, 0, 40);
        let r = decompose(&tr, &d, 10, 40, 4, 1e-10).unwrap();
        assert_eq!(r.s_n[0], 0.0);
        assert_eq!(r.s_tilde_n[0], 0.0);
        assert!(r.residual <= 1e-9, "{}", r.residual);
        assert!(verify_identity(&r, 1e-5).pass);
    }

    #[test]
    fn single_interval() {
        let (d, tr) = trajectory(ScenarioSpec::DoubleWell1d, NoiseSpec::Laplace { scale: 0.1 }, 0.9, 5, 30);
        let r = decompose(&tr, &d, 20, 21, 4, 1e-10).unwrap();
        assert_eq!(r.alpha_weights.len(), 1);
        assert!(r.residual <= 1e-9, "{}", r.residual);
        let a = tr.step(20);
        let norms = alpha_weight_norms(&r);
        // ||Phi|| <= 1 here because the interval stays where 1 - 3x^2 < 0.
        assert!(norms.max <= a);
    }

    #[test]
    fn linear_weights_match_closed_form() {
        let (d, tr) = trajectory(ScenarioSpec::Linear1d { rate: 1.0 }, NoiseSpec::Laplace { scale: 0.1 }, 1.0, 7, 60);
        let r = decompose(&tr, &d, 10, 60, 4, 1e-10).unwrap();
        let t_n = tr.time(60);
        for (i, alpha) in r.alpha_weights.iter().enumerate() {
            let k = 10 + i;
            let exact = (-(t_n - tr.time(k + 1))).exp() * (1.0 - (-tr.step(k)).exp());
            assert!((alpha[(0, 0)] - exact).abs() < 1e-10);
        }
        let s_replay: f64 = r.alpha_weights.iter().enumerate().map(|(i, a)| a[(0, 0)] * tr.noise_after(10 + i).unwrap()[0]).sum();
        assert!((s_replay - r.s_n[0]).abs() < 1e-15);
    }

    #[test]
    fn seed_seven_against_high_resolution() {
        let (d, tr) = trajectory(ScenarioSpec::Linear1d { rate: 1.0 }, NoiseSpec::Laplace { scale: 0.1 }, 1.0, 7, 60);
        let r = decompose(&tr, &d, 10, 60, 4, 1e-10).unwrap();
        assert!(r.residual <= 1e-6);
        assert!(verify_identity(&r, 1e-5).pass);
        let fine = decompose(&tr, &d, 10, 60, 8, 1e-12).unwrap();
        assert!((r.w_n[0] - fine.w_n[0]).abs() < 1e-7);
        assert!((r.s_n[0] - fine.s_n[0]).abs() < 1e-7);
        assert!((r.s_tilde_n[0] - fine.s_tilde_n[0]).abs() < 1e-7);
        assert!(fine.residual <= r.residual + 1e-12);
    }

    #[test]
    fn corrupted_term_is_detected() {
        let (d, tr) = trajectory(ScenarioSpec::Linear1d { rate: 1.0 }, NoiseSpec::Zero, 1.0, 0, 20);
        let mut r = decompose(&tr, &d, 5, 20, 4, 1e-10).unwrap();
        assert!(verify_identity(&r, 1e-5).pass);
        r.w_n[0] += 1e-3;
        assert!(!verify_identity(&r, 1e-5).pass);
    }

    #[test]
    fn rejects_bad_ranges() {
        let (d, tr) = trajectory(ScenarioSpec::Linear1d { rate: 1.0 }, NoiseSpec::Zero, 1.0, 0, 20);
        assert!(decompose(&tr, &d, 5, 5, 4, 1e-10).is_err());
        assert!(decompose(&tr, &d, 5, 21, 4, 1e-10).is_err());
    }
}
