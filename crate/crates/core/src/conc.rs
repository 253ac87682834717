//! Concentration inequality for weighted sums of martingale differences and a Monte Carlo
//! harness that checks it.

use std::f64::consts::SQRT_2;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::model::{Matrix, NoiseModel, NoiseSpec, RngStream, Vector};
use crate::stats::{wilson_interval, z99};

/// `(1 + sqrt 2)^2`.
const FACTOR: f64 = (1.0 + SQRT_2) * (1.0 + SQRT_2);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationParams {
    pub delta: f64,
    /// Bound on the conditional exponential moment `E[e^{delta |X|}]`.
    pub c: f64,
    /// Bound on `sum_k A_{k,n}`.
    pub gamma1: f64,
    /// Bound on `max_k A_{k,n} / beta_n`.
    pub gamma2: f64,
    pub beta_n: f64,
    pub dim: usize,
}

impl ConcentrationParams {
    pub fn new(delta: f64, c: f64, gamma1: f64, gamma2: f64, beta_n: f64, dim: usize) -> Result<Self> {
        for (name, v) in [("delta", delta), ("gamma1", gamma1), ("gamma2", gamma2), ("beta_n", beta_n)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !(c >= 1.0 && c.is_finite()) {
            return Err(Error::InvalidParameter(format!("moment bound C must be at least 1, got {c}")));
        }
        if dim == 0 {
            return Err(Error::InvalidParameter("dimension must be positive".into()));
        }
        Ok(ConcentrationParams { delta, c, gamma1, gamma2, beta_n, dim })
    }

    fn d(&self) -> f64 {
        self.dim as f64
    }

    /// End of the quadratic branch.
    pub fn threshold(&self) -> f64 {
        self.c * self.gamma1 * self.d() * self.d().sqrt() / self.delta
    }

    /// `c` of the quadratic branch.
    pub fn quadratic_constant(&self) -> f64 {
        self.delta * self.delta / (self.c * self.gamma1 * self.gamma2 * FACTOR)
    }

    /// `c` of the linear branch.
    pub fn linear_constant(&self) -> f64 {
        self.delta / (self.gamma2 * FACTOR)
    }

    fn prefactor(&self) -> f64 {
        2.0 * self.d() * self.d()
    }
}

/// Logarithm of the unclamped bound on `P(||S_n|| > xi)`.
pub fn ln_concentration_bound(xi: f64, p: &ConcentrationParams) -> f64 {
    let d = p.d();
    let exponent = if xi <= p.threshold() {
        p.quadratic_constant() * xi * xi / (d * d * d * p.beta_n)
    } else {
        p.linear_constant() * xi / (d * d.sqrt() * p.beta_n)
    };
    p.prefactor().ln() - exponent
}

/// Bound on `P(||S_n|| > xi)`, clamped to `[0, 1]`.
pub fn concentration_bound(xi: f64, p: &ConcentrationParams) -> f64 {
    ln_concentration_bound(xi, p).exp().min(1.0)
}

/// Fixed-dimension form `c1 exp(-c2 xi^2 / beta_n)` for `xi <= 1`, `c1 exp(-c2 xi / beta_n)` beyond.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemarkForm {
    pub c1: f64,
    pub c2: f64,
}

impl RemarkForm {
    pub fn ln_bound(&self, xi: f64, beta_n: f64) -> f64 {
        let power = if xi <= 1.0 { xi * xi } else { xi };
        self.c1.ln() - self.c2 * power / beta_n
    }

    pub fn bound(&self, xi: f64, beta_n: f64) -> f64 {
        self.ln_bound(xi, beta_n).exp().min(1.0)
    }
}

/// Constants for which the fixed-dimension form dominates the two-branch bound at every `xi`:
/// `c1 = 2 d^2` and `c2` the smaller of the two per-branch rates.
pub fn remark_form(p: &ConcentrationParams) -> RemarkForm {
    let d = p.d();
    let quad = p.quadratic_constant() / (d * d * d);
    let lin = p.linear_constant() / (d * d.sqrt());
    RemarkForm { c1: p.prefactor(), c2: quad.min(lin) }
}

type WeightRule = dyn Fn(usize, &[Vector]) -> Matrix + Send + Sync;

/// Weights `alpha_{k,n}` of `S_n = sum_k alpha_{k,n} X_k`.
#[derive(Clone)]
pub enum Weights {
    Fixed(Vec<Matrix>),
    /// `alpha_k` computed from `X_1, ..., X_{k-1}` only.
    Previsible { len: usize, dim: usize, rule: Arc<WeightRule> },
}

impl std::fmt::Debug for Weights {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Weights::Fixed(ws) => f.debug_tuple("Fixed").field(&ws.len()).finish(),
            Weights::Previsible { len, dim, .. } => f.debug_struct("Previsible").field("len", len).field("dim", dim).finish(),
        }
    }
}

impl Weights {
    /// `alpha_k = w_k I_d`.
    pub fn scalar(values: &[f64], dim: usize) -> Self {
        Weights::Fixed(values.iter().map(|w| Matrix::identity(dim, dim) * *w).collect())
    }

    /// `alpha_k = e^{-lambda (t_n - t_{k+1})} a_k` for steps `a_{n0}, ..., a_{n-1}`.
    pub fn geometric(steps: &[f64], lambda: f64, dim: usize) -> Self {
        let mut out = vec![0.0; steps.len()];
        let mut after = 0.0;
        for (k, a) in steps.iter().enumerate().rev() {
            out[k] = (-lambda * after).exp() * a;
            after += a;
        }
        Self::scalar(&out, dim)
    }

    pub fn len(&self) -> usize {
        match self {
            Weights::Fixed(ws) => ws.len(),
            Weights::Previsible { len, .. } => *len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            Weights::Fixed(ws) => ws.first().map(Matrix::nrows),
            Weights::Previsible { dim, .. } => Some(*dim),
        }
    }

    /// `(sum_k ||alpha_k||, max_k ||alpha_k||)` for fixed weights.
    pub fn norm_profile(&self) -> Option<(f64, f64)> {
        match self {
            Weights::Fixed(ws) => {
                let norms: Vec<f64> = ws.iter().map(crate::ode::spectral_norm).collect();
                Some((norms.iter().sum(), norms.iter().copied().fold(0.0, f64::max)))
            }
            Weights::Previsible { .. } => None,
        }
    }
}

fn check_dims(weights: &Weights, noise: &NoiseModel) -> Result<()> {
    if let Weights::Fixed(ws) = weights {
        if let Some(bad) = ws.iter().find(|w| w.nrows() != noise.dim || w.ncols() != noise.dim) {
            return Err(Error::DimensionMismatch { expected: noise.dim, got: bad.ncols() });
        }
    }
    match weights.dim() {
        Some(d) if d != noise.dim => Err(Error::DimensionMismatch { expected: noise.dim, got: d }),
        _ => Ok(()),
    }
}

/// One draw of `S_n`.
pub fn weighted_sum_sampler(weights: &Weights, noise: &NoiseModel, rng: &mut RngStream) -> Result<Vector> {
    check_dims(weights, noise)?;
    Ok(draw(weights, noise, rng))
}

fn draw(weights: &Weights, noise: &NoiseModel, rng: &mut RngStream) -> Vector {
    let d = noise.dim;
    let mut sum = Vector::zeros(d);
    let mut x = Vector::zeros(d);
    match weights {
        Weights::Fixed(ws) => {
            for w in ws {
                noise.sample_into(x.as_mut_slice(), rng);
                sum += w * &x;
            }
        }
        Weights::Previsible { len, rule, .. } => {
            let mut past = Vec::with_capacity(*len);
            for k in 0..*len {
                let w = rule(k, &past);
                noise.sample_into(x.as_mut_slice(), rng);
                sum += w * &x;
                past.push(x.clone());
            }
        }
    }
    sum
}

/// Empirical exceedance frequency with its 99% Wilson interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    pub xi: f64,
    pub exceed: u64,
    pub trials: u64,
    pub p_hat: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
}

impl TailEstimate {
    fn new(xi: f64, exceed: u64, trials: u64) -> Self {
        let (wilson_lo, wilson_hi) = wilson_interval(exceed, trials);
        TailEstimate { xi, exceed, trials, p_hat: exceed as f64 / trials as f64, wilson_lo, wilson_hi }
    }
}

pub const MIN_TAIL_TRIALS: u64 = 1000;

/// Run `f` on a pool of `workers` threads (0 means the global pool).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Exceedance counts of `||S_n|| > xi` over a grid, trial `i` drawing from stream `(seed, i)`.
pub fn empirical_tail_grid(
    weights: &Weights,
    noise: &NoiseModel,
    xis: &[f64],
    trials: u64,
    seed: u64,
    workers: usize,
) -> Result<Vec<TailEstimate>> {
    check_dims(weights, noise)?;
    if trials < MIN_TAIL_TRIALS {
        return Err(Error::InvalidParameter(format!("need at least {MIN_TAIL_TRIALS} trials, got {trials}")));
    }
    let counts = with_workers(workers, || {
        (0..trials)
            .into_par_iter()
            .fold(
                || vec![0u64; xis.len()],
                |mut acc, i| {
                    let s = draw(weights, noise, &mut RngStream::new(seed, i)).norm();
                    for (c, xi) in acc.iter_mut().zip(xis) {
                        *c += u64::from(s > *xi);
                    }
                    acc
                },
            )
            .reduce(|| vec![0u64; xis.len()], |a, b| a.iter().zip(&b).map(|(x, y)| x + y).collect())
    })?;
    Ok(xis.iter().zip(counts).map(|(&xi, k)| TailEstimate::new(xi, k, trials)).collect())
}

pub fn empirical_tail(
    weights: &Weights,
    noise: &NoiseModel,
    xi: f64,
    trials: u64,
    seed: u64,
    workers: usize,
) -> Result<TailEstimate> {
    Ok(empirical_tail_grid(weights, noise, &[xi], trials, seed, workers)?[0])
}

/// `points` values of `xi` spread evenly between the bound levels `hi_level` and `lo_level`.
pub fn bound_grid(p: &ConcentrationParams, points: usize, hi_level: f64, lo_level: f64) -> Vec<f64> {
    let solve = |level: f64| {
        let (mut lo, mut hi) = (0.0, 1.0);
        while concentration_bound(hi, p) > level {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if concentration_bound(mid, p) > level {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    };
    let (a, b) = (solve(hi_level), solve(lo_level));
    (0..points).map(|i| a + (b - a) * i as f64 / (points - 1).max(1) as f64).collect()
}

/// One row of a domination check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DominationRow {
    pub xi: f64,
    pub bound: f64,
    pub empirical: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
    /// Whether the row takes part in the check (`bound < 1`).
    pub active: bool,
    pub dominated: bool,
}

impl DominationRow {
    pub const CSV_HEADER: &'static str = "xi,bound,empirical,wilson_lo,wilson_hi";

    pub fn csv_row(&self) -> String {
        [self.xi, self.bound, self.empirical, self.wilson_lo, self.wilson_hi].map(fmt_f64).join(",")
    }
}

/// Compare the upper Wilson limit with the bound at each `xi`.
pub fn domination_check(
    weights: &Weights,
    noise: &NoiseModel,
    params: &ConcentrationParams,
    xis: &[f64],
    trials: u64,
    seed: u64,
    workers: usize,
) -> Result<Vec<DominationRow>> {
    let tails = empirical_tail_grid(weights, noise, xis, trials, seed, workers)?;
    Ok(tails
        .iter()
        .map(|t| {
            let bound = concentration_bound(t.xi, params);
            let active = bound < 1.0;
            DominationRow {
                xi: t.xi,
                bound,
                empirical: t.p_hat,
                wilson_lo: t.wilson_lo,
                wilson_hi: t.wilson_hi,
                active,
                dominated: !active || t.wilson_hi <= bound,
            }
        })
        .collect())
}

/// Monte Carlo estimate of `E[e^{delta ||X||}]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub delta: f64,
    pub mean: f64,
    pub std_err: f64,
    pub lo: f64,
    pub hi: f64,
    pub trials: u64,
    /// Closed form where one is known.
    pub exact: Option<f64>,
}

/// Estimate the exponential moment, refusing `delta` at or beyond the tail rate `c2`.
pub fn verify_moment_condition(noise: &NoiseModel, delta: f64, trials: u64, seed: u64, workers: usize) -> Result<MomentEstimate> {
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter(format!("delta must be positive, got {delta}")));
    }
    if trials < 2 {
        return Err(Error::InvalidParameter("need at least two trials".into()));
    }
    let (_, c2) = noise.tail_constants(&Vector::zeros(noise.dim));
    if delta >= c2 {
        return Err(Error::DivergentMoment { delta, c2 });
    }
    let exact = match (noise.dim, &noise.spec) {
        (_, NoiseSpec::Zero) => Some(1.0),
        (1, NoiseSpec::Laplace { scale }) => Some(1.0 / (1.0 - delta * scale)),
        (1, NoiseSpec::BoundedUniform { half_width }) => Some((delta * half_width).exp_m1() / (delta * half_width)),
        _ => None,
    };
    if noise.is_zero() {
        return Ok(MomentEstimate { delta, mean: 1.0, std_err: 0.0, lo: 1.0, hi: 1.0, trials, exact });
    }
    let (sum, sum_sq) = with_workers(workers, || {
        (0..trials)
            .into_par_iter()
            .map(|i| {
                let mut x = Vector::zeros(noise.dim);
                noise.sample_into(x.as_mut_slice(), &mut RngStream::new(seed, i));
                let v = (delta * x.norm()).exp();
                (v, v * v)
            })
            .collect::<Vec<_>>()
            .into_iter()
            .fold((0.0, 0.0), |(a, b), (v, v2)| (a + v, b + v2))
    })?;
    let n = trials as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    let std_err = (var / n).sqrt();
    let half = z99() * std_err;
    Ok(MomentEstimate { delta, mean, std_err, lo: mean - half, hi: mean + half, trials, exact })
}

/// Closed-form bound on `E[e^{delta ||X||}]` via `||x|| <= sum_i |x_i|` and independent coordinates.
pub fn moment_bound(noise: &NoiseModel, delta: f64) -> Option<f64> {
    let per = match noise.spec {
        NoiseSpec::Zero => return Some(1.0),
        NoiseSpec::Laplace { scale } if delta * scale < 1.0 => 1.0 / (1.0 - delta * scale),
        NoiseSpec::BoundedUniform { half_width } => (delta * half_width).exp_m1() / (delta * half_width),
        _ => return None,
    };
    Some(per.powi(noise.dim as i32))
}

/// Geometric weight profile `alpha_k = e^{-lambda (t_n - t_{k+1})} a_k` over `a_{n0}, ..., a_{n-1}` of a
/// power schedule, checked against the bound on a grid of `points` values of `xi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometricExperiment {
    pub mu: f64,
    pub lambda: f64,
    pub n0: usize,
    pub n: usize,
    /// `delta` as a fraction of the noise tail rate `c2`.
    pub delta_fraction: f64,
    pub points: usize,
}

impl Default for GeometricExperiment {
    fn default() -> Self {
        GeometricExperiment { mu: 1.0, lambda: 0.5, n0: 5, n: 40, delta_fraction: 0.5, points: 20 }
    }
}

/// Parameters of the bound for a geometric profile: `gamma1 = sum ||alpha_k||`, `beta_n = max ||alpha_k||`,
/// `gamma2 = 1`, `C` from [`moment_bound`].
pub fn geometric_params(noise: &NoiseModel, exp: &GeometricExperiment) -> Result<(Weights, ConcentrationParams)> {
    if noise.is_zero() {
        return Err(Error::InvalidParameter("zero noise has no tail to check".into()));
    }
    if !(exp.delta_fraction > 0.0 && exp.delta_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!("delta_fraction must lie in (0,1), got {}", exp.delta_fraction)));
    }
    if exp.n <= exp.n0 {
        return Err(Error::InvalidParameter(format!("need n > n0, got n0={}, n={}", exp.n0, exp.n)));
    }
    let schedule = crate::model::StepSchedule::power(exp.mu)?;
    let (steps, _) = schedule.timeline(exp.n0, exp.n);
    let weights = Weights::geometric(&steps, exp.lambda, noise.dim);
    let (gamma1, beta_n) = weights.norm_profile().expect("fixed weights");
    let (_, c2) = noise.tail_constants(&Vector::zeros(noise.dim));
    let delta = exp.delta_fraction * c2;
    let c = moment_bound(noise, delta)
        .ok_or_else(|| Error::InvalidParameter("no closed-form moment bound for this noise".into()))?;
    let params = ConcentrationParams::new(delta, c, gamma1, 1.0, beta_n, noise.dim)?;
    Ok((weights, params))
}

/// Domination check of a geometric profile on `points` values of `xi` where the bound runs from 0.99 down to 1e-3.
pub fn geometric_domination(
    noise: &NoiseModel,
    exp: &GeometricExperiment,
    trials: u64,
    seed: u64,
    workers: usize,
) -> Result<(ConcentrationParams, Vec<DominationRow>)> {
    let (weights, params) = geometric_params(noise, exp)?;
    let grid = bound_grid(&params, exp.points, 0.99, 1e-3);
    let rows = domination_check(&weights, noise, &params, &grid, trials, seed, workers)?;
    Ok((params, rows))
}

/// `C1`, `C2` assembled from the noise tail constants and the fitted envelopes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedConstants {
    /// `sup c1(x)` over the region.
    pub k12: f64,
    /// `inf c2(x) / (2 sqrt K)`.
    pub k13: f64,
    pub delta: f64,
    pub moment: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub remark: RemarkForm,
    pub c1: f64,
    pub c2: f64,
    pub note: String,
}

/// Chain the tail constants of the noise through the concentration bound for `S_n`:
/// `delta = K13/2`, `C = u_bar + K12/u_bar + 1`, `gamma1 = K3 e^lambda / lambda`, `gamma2 = K3`,
/// then `C1 = max(K12, c1)` and `C2 = min(K13, c2 / (16 K^2))`.
pub fn fitted_constants(noise: &NoiseModel, k: f64, k3: f64, lambda: f64) -> Result<FittedConstants> {
    for (name, v) in [("K", k), ("K3", k3), ("lambda", lambda)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
        }
    }
    let (k12, tail_rate) = noise.tail_constants(&Vector::zeros(noise.dim));
    if noise.is_zero() {
        return Ok(FittedConstants {
            k12: 0.0,
            k13: f64::MAX,
            delta: 0.0,
            moment: 1.0,
            gamma1: k3 * lambda.exp() / lambda,
            gamma2: k3,
            remark: RemarkForm { c1: 0.0, c2: 1.0 },
            c1: 0.0,
            c2: 1.0,
            note: "zero noise: both series vanish".into(),
        });
    }
    let k13 = tail_rate / (2.0 * k.sqrt());
    let delta = 0.5 * k13;
    let moment = noise.u_bar + k12 / noise.u_bar + 1.0;
    let gamma1 = k3 * lambda.exp() / lambda;
    let gamma2 = k3;
    // beta_n only scales the exponent, so any positive placeholder gives the same constants.
    let params = ConcentrationParams::new(delta, moment, gamma1, gamma2, 1.0, noise.dim)?;
    let remark = remark_form(&params);
    Ok(FittedConstants {
        k12,
        k13,
        delta,
        moment,
        gamma1,
        gamma2,
        remark,
        c1: k12.max(remark.c1),
        c2: k13.min(remark.c2 / (16.0 * k * k)),
        note: "fitted heuristic instantiation; not a proved constant".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(beta: f64, dim: usize) -> ConcentrationParams {
        ConcentrationParams::new(1.0, 1.0, 1.0, 1.0, beta, dim).unwrap()
    }

    fn laplace(scale: f64, dim: usize) -> NoiseModel {
        NoiseModel::new(NoiseSpec::Laplace { scale }, dim).unwrap()
    }

    #[test]
    fn worked_examples() {
        let p = unit(1.0, 1);
        assert_eq!(concentration_bound(1e-9, &p), 1.0);
        let raw = 2.0 * (-1.0 / FACTOR).exp();
        assert!((raw - 1.684_68).abs() < 1e-5);
        assert_eq!(concentration_bound(1.0, &p), 1.0);
        let b = concentration_bound(20.0, &p);
        assert!((b - 2.0 * (-20.0 / FACTOR).exp()).abs() < 1e-15);
        assert!((b - 0.0646).abs() < 1e-4);
    }

    #[test]
    fn branches_meet_at_threshold() {
        for dim in [1, 2, 3] {
            let p = ConcentrationParams::new(0.4, 2.5, 3.0, 1.5, 0.01, dim).unwrap();
            let d = dim as f64;
            let t = p.threshold();
            let quad = p.quadratic_constant() * t * t / (d * d * d);
            let lin = p.linear_constant() * t / (d * d.sqrt());
            assert!((quad - lin).abs() <= 1e-12 * quad);
        }
    }

    #[test]
    fn multivariate_scalings() {
        let p = ConcentrationParams::new(1.0, 1.0, 1.0, 1.0, 0.5, 2).unwrap();
        let xi = 30.0;
        assert!(xi > p.threshold());
        let expected = 8.0 * (-xi / (FACTOR * 2.0 * 2f64.sqrt() * 0.5)).exp();
        assert!((concentration_bound(xi, &p) - expected).abs() < 1e-15);
    }

    #[test]
    fn sampler_edge_cases() {
        let noise = laplace(1.0, 1);
        let zero = Weights::scalar(&[0.0; 5], 1);
        assert_eq!(weighted_sum_sampler(&zero, &noise, &mut RngStream::new(1, 0)).unwrap()[0], 0.0);
        let one = Weights::scalar(&[1.0], 1);
        let s = weighted_sum_sampler(&one, &noise, &mut RngStream::new(3, 0)).unwrap();
        let x = noise.sample(&Vector::zeros(1), &mut RngStream::new(3, 0));
        assert_eq!(s, x);
        let again = weighted_sum_sampler(&one, &noise, &mut RngStream::new(3, 0)).unwrap();
        assert_eq!(s, again);
        assert!(matches!(
            weighted_sum_sampler(&Weights::scalar(&[1.0], 2), &noise, &mut RngStream::new(0, 0)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn previsible_rule_sees_only_the_past() {
        let noise = laplace(1.0, 1);
        let rule: Arc<WeightRule> = Arc::new(|k, past: &[Vector]| {
            assert_eq!(past.len(), k);
            let sign = past.last().map_or(1.0, |x| x[0].signum());
            Matrix::from_element(1, 1, 0.1 * sign)
        });
        let w = Weights::Previsible { len: 20, dim: 1, rule };
        let a = weighted_sum_sampler(&w, &noise, &mut RngStream::new(8, 0)).unwrap();
        let b = weighted_sum_sampler(&w, &noise, &mut RngStream::new(8, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_noise_tail_is_zero() {
        let noise = NoiseModel::new(NoiseSpec::Zero, 1).unwrap();
        let t = empirical_tail(&Weights::scalar(&[1.0, 0.5], 1), &noise, 1e-6, 1000, 0, 1).unwrap();
        assert_eq!(t.exceed, 0);
    }

    #[test]
    fn laplace_single_term_tail() {
        let xi = 50f64.ln();
        let t = empirical_tail(&Weights::scalar(&[1.0], 1), &laplace(1.0, 1), xi, 100_000, 17, 0).unwrap();
        assert!(t.wilson_lo <= 0.02 && 0.02 <= t.wilson_hi, "{t:?}");
        assert!((0.0156..=0.0244).contains(&t.p_hat));
    }

    #[test]
    fn tails_do_not_depend_on_worker_count() {
        let w = Weights::geometric(&[0.5, 0.4, 0.3, 0.2], 0.5, 1);
        let xs = [0.1, 0.5, 1.0];
        let a = empirical_tail_grid(&w, &laplace(1.0, 1), &xs, 5000, 9, 1).unwrap();
        let b = empirical_tail_grid(&w, &laplace(1.0, 1), &xs, 5000, 9, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn geometric_profile_matches_beta() {
        let s = crate::model::StepSchedule::power(1.0).unwrap();
        let (steps, _) = s.timeline(10, 60);
        let w = Weights::geometric(&steps, 0.5, 1);
        let (_, max) = w.norm_profile().unwrap();
        let beta = crate::bound::beta_sequence(&s, 0.5, 10, 60).unwrap()[49];
        assert!((max - beta).abs() < 1e-14);
    }

    #[test]
    fn two_dimensional_domination() {
        let noise = laplace(1.0, 2);
        let rot = |th: f64| Matrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]);
        let s = crate::model::StepSchedule::power(1.0).unwrap();
        let (steps, _) = s.timeline(5, 40);
        let Weights::Fixed(scal) = Weights::geometric(&steps, 0.5, 2) else { unreachable!() };
        let ws: Vec<Matrix> = scal.iter().enumerate().map(|(k, w)| rot(0.3 * k as f64) * w).collect();
        let w = Weights::Fixed(ws);
        let (g1, g2max) = w.norm_profile().unwrap();
        let beta = g2max;
        let p = ConcentrationParams::new(0.25, (1.0f64 / 0.75).powi(2), g1, 1.0, beta, 2).unwrap();
        let grid = bound_grid(&p, 10, 0.99, 1e-3);
        let rows = domination_check(&w, &noise, &p, &grid, 20_000, 4, 0).unwrap();
        assert!(rows.iter().all(|r| r.active && r.dominated), "{rows:?}");
    }

    #[test]
    fn moment_bounds_match_closed_forms() {
        assert_eq!(moment_bound(&laplace(1.0, 1), 0.5), Some(2.0));
        assert_eq!(moment_bound(&laplace(1.0, 2), 0.5), Some(4.0));
        assert_eq!(moment_bound(&laplace(1.0, 1), 1.0), None);
        let u = NoiseModel::new(NoiseSpec::BoundedUniform { half_width: 2.0 }, 1).unwrap();
        assert!((moment_bound(&u, 0.5).unwrap() - (1f64.exp() - 1.0)).abs() < 1e-15);
        let m = verify_moment_condition(&u, 0.25, 100_000, 3, 0).unwrap();
        assert!((moment_bound(&u, 0.25).unwrap() - m.exact.unwrap()).abs() < 1e-15);
        assert!(m.lo <= m.exact.unwrap() && m.exact.unwrap() <= m.hi);
    }

    #[test]
    fn geometric_experiment_dominates() {
        for noise in [laplace(1.0, 1), NoiseModel::new(NoiseSpec::BoundedUniform { half_width: 1.0 }, 1).unwrap()] {
            let (p, rows) = geometric_domination(&noise, &GeometricExperiment::default(), 20_000, 5, 0).unwrap();
            assert_eq!(rows.len(), 20);
            assert!(rows.iter().all(|r| r.active && r.dominated), "{p:?} {rows:?}");
        }
    }

    #[test]
    fn moment_examples() {
        let zero = NoiseModel::new(NoiseSpec::Zero, 1).unwrap();
        assert_eq!(verify_moment_condition(&zero, 3.0, 10, 0, 1).unwrap().mean, 1.0);
        let m = verify_moment_condition(&laplace(1.0, 1), 0.5, 200_000, 2, 0).unwrap();
        assert_eq!(m.exact, Some(2.0));
        assert!(m.lo <= 2.0 && 2.0 <= m.hi, "{m:?}");
        assert!(matches!(
            verify_moment_condition(&laplace(1.0, 1), 1.0, 100, 0, 1),
            Err(Error::DivergentMoment { .. })
        ));
        let u = NoiseModel::new(NoiseSpec::BoundedUniform { half_width: 1.0 }, 1).unwrap();
        let m = verify_moment_condition(&u, 0.5, 200_000, 2, 0).unwrap();
        let exact = m.exact.unwrap();
        assert!(m.lo <= exact && exact <= m.hi);
    }

    #[test]
    fn fitted_constants_chain() {
        let f = fitted_constants(&laplace(0.05, 1), 1.0, 1.0, 0.45).unwrap();
        assert_eq!(f.k12, 1.0);
        assert!((f.k13 - 10.0).abs() < 1e-12);
        assert_eq!(f.c1, 2.0);
        assert!(f.c2 <= f.k13 && f.c2 > 0.0);
        let z = fitted_constants(&NoiseModel::new(NoiseSpec::Zero, 1).unwrap(), 1.0, 1.0, 0.45).unwrap();
        assert_eq!(z.c1, 0.0);
    }

    proptest! {
        #[test]
        fn monotone_in_xi_and_beta(
            delta in 0.05f64..2.0, c in 1.0f64..5.0, g1 in 0.1f64..5.0, g2 in 0.1f64..5.0,
            beta in 1e-3f64..1.0, dim in 1usize..4, xi in 1e-3f64..50.0, dx in 0.0f64..10.0, db in 0.0f64..1.0,
        ) {
            let p = ConcentrationParams::new(delta, c, g1, g2, beta, dim).unwrap();
            let q = ConcentrationParams { beta_n: beta + db, ..p };
            let b = concentration_bound(xi, &p);
            prop_assert!((0.0..=1.0).contains(&b));
            prop_assert!(concentration_bound(xi + dx, &p) <= b * (1.0 + 1e-12));
            prop_assert!(concentration_bound(xi, &q) >= b * (1.0 - 1e-12));
        }

        #[test]
        fn remark_form_dominates(
            delta in 0.05f64..2.0, c in 1.0f64..5.0, g1 in 0.1f64..5.0, g2 in 0.1f64..5.0,
            beta in 1e-3f64..1.0, dim in 1usize..4, xi in 1e-3f64..50.0,
        ) {
            let p = ConcentrationParams::new(delta, c, g1, g2, beta, dim).unwrap();
            let r = remark_form(&p);
            prop_assert!(r.ln_bound(xi, beta) >= ln_concentration_bound(xi, &p) - 1e-9);
        }
    }
}
