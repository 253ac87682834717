//! Empirical constants for the exponential envelopes of the flow and its linearisation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::flow::sample_flow_with_variation;
use super::geometry::{random_direction, RegionGeometry};
use super::spectral::{spectral_norm, SpectralData};
use crate::error::Result;
use crate::model::{DriftFunction, RngStream, Vector};
use rand::Rng;

/// Length of the `t - s` window in units of `1/lambda`.
pub const WINDOW_RATES: f64 = 20.0;

/// Fitted envelope constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeFit {
    /// Contraction of nearby solutions.
    pub k1: f64,
    /// Decay of the fundamental matrix.
    pub k3: f64,
    /// Lipschitz dependence of the fundamental matrix on the initial point.
    pub k4: f64,
    pub lambda: f64,
    pub pairs: usize,
    pub grid_points: usize,
}

/// Outcome of checking fitted constants on fresh samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReplay {
    pub checked: usize,
    pub passed: usize,
    pub inflation: f64,
    /// Ratio constants observed on the replay sample.
    pub observed: EnvelopeFit,
}

impl EnvelopeReplay {
    pub fn pass_rate(&self) -> f64 {
        self.passed as f64 / self.checked.max(1) as f64
    }
}

/// Absolute slack for quantities that vanish up to integration error.
fn floor(tol: f64) -> f64 {
    100.0 * tol
}

/// Pairs in `V^r`: half of the first points on the boundary, partners at log-uniform distances.
pub fn sample_pairs(geom: &RegionGeometry, count: usize, rng: &mut RngStream) -> Vec<(Vector, Vector)> {
    let d = geom.x_star.len();
    (0..count)
        .map(|i| {
            let u0 = if i % 2 == 0 {
                geom.point_on_level(geom.r, &random_direction(d, rng))
            } else {
                geom.sample_sublevel(geom.r, rng)
            };
            let dir = random_direction(d, rng);
            let mut dist = geom.big_r * 10f64.powf(rng.random_range(-3.0..0.3));
            loop {
                let fwd = &u0 + &dir * dist;
                if geom.v(&fwd) <= geom.r {
                    break (u0, fwd);
                }
                let back = &u0 - &dir * dist;
                if geom.v(&back) <= geom.r {
                    break (u0, back);
                }
                dist *= 0.5;
            }
        })
        .collect()
}

pub fn envelope_grid(lambda: f64, points: usize) -> Vec<f64> {
    let span = WINDOW_RATES / lambda;
    (0..points).map(|i| span * i as f64 / (points - 1).max(1) as f64).collect()
}

/// (numerator, denominator) samples for the three envelopes.
struct Samples {
    k1: Vec<(f64, f64)>,
    k3: Vec<(f64, f64)>,
    k4: Vec<(f64, f64)>,
}

fn pair_samples(drift: &DriftFunction, lambda: f64, grid: &[f64], u0: &Vector, u1: &Vector, tol: f64) -> Result<Samples> {
    let a = sample_flow_with_variation(drift, 0.0, u0, grid, tol)?;
    let b = sample_flow_with_variation(drift, 0.0, u1, grid, tol)?;
    let gap = (u0 - u1).norm();
    let mut s = Samples { k1: vec![], k3: vec![], k4: vec![] };
    for ((tau, (xa, pa)), (xb, pb)) in grid.iter().zip(&a).zip(&b) {
        let decay = (-lambda * tau).exp();
        s.k1.push(((xa - xb).norm(), gap * decay));
        s.k3.push((spectral_norm(pa), decay));
        s.k3.push((spectral_norm(pb), decay));
        s.k4.push((spectral_norm(&(pa - pb)), gap * decay));
    }
    Ok(s)
}

fn collect(drift: &DriftFunction, lambda: f64, pairs: &[(Vector, Vector)], grid_points: usize, tol: f64) -> Result<Vec<Samples>> {
    let grid = envelope_grid(lambda, grid_points);
    pairs
        .par_iter()
        .map(|(u0, u1)| pair_samples(drift, lambda, &grid, u0, u1, tol))
        .collect()
}

fn max_ratio(items: &[(f64, f64)], tol: f64) -> f64 {
    items
        .iter()
        .filter(|(num, _)| *num > floor(tol))
        .map(|(num, den)| num / den)
        .fold(0.0, f64::max)
}

fn fit_from(samples: &[Samples], lambda: f64, pairs: usize, grid_points: usize, tol: f64) -> EnvelopeFit {
    let all = |f: fn(&Samples) -> &Vec<(f64, f64)>| -> Vec<(f64, f64)> {
        samples.iter().flat_map(|s| f(s).iter().copied()).collect()
    };
    EnvelopeFit {
        k1: max_ratio(&all(|s| &s.k1), tol),
        k3: max_ratio(&all(|s| &s.k3), tol),
        k4: max_ratio(&all(|s| &s.k4), tol),
        lambda,
        pairs,
        grid_points,
    }
}

/// Largest observed envelope ratios over the pairs and the `[0, 20/lambda]` grid.
pub fn fit_envelopes(
    drift: &DriftFunction,
    lambda: f64,
    pairs: &[(Vector, Vector)],
    grid_points: usize,
    tol: f64,
) -> Result<EnvelopeFit> {
    let samples = collect(drift, lambda, pairs, grid_points, tol)?;
    Ok(fit_from(&samples, lambda, pairs.len(), grid_points, tol))
}

/// Check `num <= inflation * K * den` (plus an integration-noise floor) at every sampled point.
pub fn replay_envelopes(
    drift: &DriftFunction,
    fit: &EnvelopeFit,
    pairs: &[(Vector, Vector)],
    inflation: f64,
    tol: f64,
) -> Result<EnvelopeReplay> {
    let samples = collect(drift, fit.lambda, pairs, fit.grid_points, tol)?;
    let mut checked = 0;
    let mut passed = 0;
    for s in &samples {
        for (items, k) in [(&s.k1, fit.k1), (&s.k3, fit.k3), (&s.k4, fit.k4)] {
            for (num, den) in items {
                checked += 1;
                if *num <= inflation * k * den + floor(tol) {
                    passed += 1;
                }
            }
        }
    }
    Ok(EnvelopeReplay {
        checked,
        passed,
        inflation,
        observed: fit_from(&samples, fit.lambda, pairs.len(), fit.grid_points, tol),
    })
}

/// Constant `K` fed to the waiting time and stepsize threshold.
pub fn fitted_k(spectral: &SpectralData, fit: &EnvelopeFit) -> f64 {
    [1.0, spectral.k_tilde, fit.k1, fit.k3, fit.k4].into_iter().fold(0.0, f64::max)
}
