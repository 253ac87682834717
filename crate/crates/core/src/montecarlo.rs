//! Monte Carlo estimates of the conditional lock-in probability and the events used in its proof.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bound::BoundReport;
use crate::conc::with_workers;
use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::model::{DriftFunction, NoiseModel, RngStream, ScheduleSpec, StepSchedule, Vector};
use crate::ode::{sample_flow, RegionGeometry, SpectralData};
use crate::sa::{Trajectory, DIVERGENCE_NORM};
use crate::stats::wilson_interval;

pub const DEFAULT_SAMPLES_PER_INTERVAL: usize = 8;
/// Default horizon reaches `t_n0 + T + 1 + HORIZON_RATES / lambda`.
pub const HORIZON_RATES: f64 = 30.0;
/// Step count the default horizon may use past `n0` before it is capped.
pub const DEFAULT_MAX_SPAN: usize = 1 << 17;
pub const MIN_TRIALS: usize = 100;
/// Scan limit for `n1` and the horizon search.
const SCAN_CAP: usize = 1 << 34;

/// Smallest `n1 >= n0` with `T <= sum_{n0..=n1} a_n <= T + 1`.
pub fn pick_n1(schedule: &StepSchedule, n0: usize, t_wait: f64) -> Result<usize> {
    if !(t_wait >= 0.0 && t_wait.is_finite()) {
        return Err(Error::InvalidParameter(format!("T must be finite and nonnegative, got {t_wait}")));
    }
    let mut acc = 0.0;
    let mut n = n0;
    loop {
        if n - n0 >= SCAN_CAP {
            return Err(Error::HorizonExhausted(n));
        }
        acc += schedule.step_at(n);
        if acc >= t_wait {
            debug_assert!(acc <= t_wait + 1.0);
            return Ok(n);
        }
        n += 1;
    }
}

fn lerp(x0: &Vector, x1: &Vector, theta: f64) -> Vector {
    x0 + (x1 - x0) * theta
}

fn dist(x: &Vector, x_star: &Vector) -> f64 {
    x.iter().zip(x_star.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Per-run record of the deviation sequences and the good events `G_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub n0: usize,
    pub n1: usize,
    #[serde(rename = "started_in_B")]
    pub started_in_b: bool,
    /// `rho[i]` is `rho_{n0+i+1}`, the sup distance to the ODE solution from `x_bar(t_n0)`, for `n0+i <= n1`.
    pub rho: Vec<f64>,
    /// `rho_star[i]` is `rho*_{n0+i+1}`, the sup distance to `x*` on `[t_{n0+i}, t_{n0+i+1}]`.
    pub rho_star: Vec<f64>,
    /// `g_flags[i]` is `G_{n0+i}`.
    #[serde(rename = "G_flags")]
    pub g_flags: Vec<bool>,
    pub first_exit_index: Option<usize>,
    pub locked_in: bool,
    pub horizon_t: f64,
}

impl EventRecord {
    pub const CSV_HEADER: &'static str = "n,rho,rho_star,G";

    /// One row per interval `[t_n, t_{n+1}]`; `rho` is empty past `n1`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for (i, rs) in self.rho_star.iter().enumerate() {
            let rho = self.rho.get(i).map(|r| fmt_f64(*r)).unwrap_or_default();
            writeln!(w, "{},{},{},{}", self.n0 + i, rho, fmt_f64(*rs), self.g_flags[i + 1])?;
        }
        Ok(())
    }
}

/// Lock-in test for one segment `[t_n, t_n + a]` given the lock start `t_lock`.
/// Distance to `x*` is convex, so the segment's sup is at its checked ends.
fn segment_leaves_ball(x_n: &Vector, x_next: &Vector, t_n: f64, a: f64, t_lock: f64, x_star: &Vector, eps: f64) -> bool {
    let t_next = t_n + a;
    if t_next < t_lock {
        return false;
    }
    if t_n >= t_lock && dist(x_n, x_star) > eps {
        return true;
    }
    if t_n < t_lock && dist(&lerp(x_n, x_next, (t_lock - t_n) / a), x_star) > eps {
        return true;
    }
    dist(x_next, x_star) > eps
}

/// Events of one stored run: `rho` against the ODE solution started at `x_bar(t_n0)` up to `t_{n1+1}`,
/// `rho*` and `G_n` over the whole stored range, and lock-in on `[t_n0 + T + 1, t_end]`.
#[allow(clippy::too_many_arguments)]
pub fn track_events(
    traj: &Trajectory,
    drift: &DriftFunction,
    geometry: &RegionGeometry,
    _spectral: &SpectralData,
    eps: f64,
    n0: usize,
    t_wait: f64,
    samples_per_interval: usize,
    ode_tol: f64,
) -> Result<EventRecord> {
    if !(n0 >= traj.n_start && n0 < traj.n_end()) {
        return Err(Error::InvalidParameter(format!(
            "n0 = {n0} outside the stored range [{}, {})",
            traj.n_start,
            traj.n_end()
        )));
    }
    let n1 = pick_n1(&traj.schedule, n0, t_wait)?;
    let n_end = traj.n_end();
    let t_lock = traj.time(n0) + t_wait + 1.0;
    let x_star = &geometry.x_star;
    let thetas: Vec<f64> = (0..=samples_per_interval + 1)
        .map(|j| j as f64 / (samples_per_interval + 1) as f64)
        .collect();
    let point = |n: usize, j: usize| -> Vector {
        if j == thetas.len() - 1 {
            traj.state(n + 1).clone()
        } else {
            traj.interpolate_in(n, thetas[j])
        }
    };
    let time = |n: usize, j: usize| -> f64 {
        if j == thetas.len() - 1 {
            traj.time(n + 1)
        } else {
            traj.time(n) + thetas[j] * traj.step(n)
        }
    };

    let rho_last = n1.min(n_end - 1);
    let mut times = Vec::new();
    for n in n0..=rho_last {
        times.extend((0..thetas.len() - 1).map(|j| time(n, j)));
    }
    times.push(traj.time(rho_last + 1));
    let flow = sample_flow(drift, traj.time(n0), traj.state(n0), &times, ode_tol)?;
    let per = thetas.len() - 1;
    let rho = (n0..=rho_last)
        .map(|n| {
            let base = (n - n0) * per;
            (0..thetas.len()).map(|j| dist(&point(n, j), &flow[base + j])).fold(0.0, f64::max)
        })
        .collect();

    let mut rho_star = Vec::with_capacity(n_end - n0);
    let mut g_flags = Vec::with_capacity(n_end - n0 + 1);
    let mut g = geometry.v(traj.state(n0)) <= geometry.r;
    g_flags.push(g);
    let mut locked_in = traj.diverged_at.is_none() && traj.time(n_end) >= t_lock;
    for n in n0..n_end {
        let mut sup = 0.0f64;
        for j in 0..thetas.len() {
            let x = point(n, j);
            sup = sup.max(dist(&x, x_star));
            g = g && geometry.v(&x) <= geometry.r;
        }
        rho_star.push(sup);
        g_flags.push(g);
        if locked_in
            && segment_leaves_ball(traj.state(n), traj.state(n + 1), traj.time(n), traj.step(n), t_lock, x_star, eps)
        {
            locked_in = false;
        }
    }
    let first_exit_index = g_flags.iter().position(|f| !f).map(|i| n0 + i);
    Ok(EventRecord {
        n0,
        n1,
        started_in_b: geometry.in_start_set(traj.state(n0)),
        rho,
        rho_star,
        g_flags,
        first_exit_index,
        locked_in,
        horizon_t: traj.time(n_end),
    })
}

/// Law of `x_{n0}` for the conditioned trials.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitSampler {
    /// Uniform on the start set `B`.
    #[default]
    UniformB,
    /// Uniform on a box; draws outside `B` are counted but not conditioned on.
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl InitSampler {
    fn validate(&self, dim: usize) -> Result<()> {
        if let InitSampler::Box { lo, hi } = self {
            if lo.len() != dim || hi.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: lo.len().min(hi.len()) });
            }
            if lo.iter().zip(hi).any(|(l, h)| !(l < h && l.is_finite() && h.is_finite())) {
                return Err(Error::InvalidParameter("init box needs finite lo < hi in every coordinate".into()));
            }
        }
        Ok(())
    }

    pub fn sample(&self, geometry: &RegionGeometry, rng: &mut RngStream) -> Vector {
        use rand::Rng;
        match self {
            InitSampler::UniformB => geometry.sample_sublevel(geometry.b_radius_v, rng),
            InitSampler::Box { lo, hi } => Vector::from_iterator(lo.len(), lo.iter().zip(hi).map(|(l, h)| rng.random_range(*l..*h))),
        }
    }

    pub fn label(&self) -> String {
        match self {
            InitSampler::UniformB => "uniform-B".into(),
            InitSampler::Box { lo, hi } => format!("box{lo:?}..{hi:?}"),
        }
    }
}

/// Everything a lock-in simulation needs about the model.
#[derive(Debug, Clone, Copy)]
pub struct Scenario<'a> {
    pub drift: &'a DriftFunction,
    pub schedule: &'a StepSchedule,
    pub noise: &'a NoiseModel,
    pub geometry: &'a RegionGeometry,
    pub spectral: &'a SpectralData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LockinParams {
    pub eps: f64,
    pub n0: usize,
    #[serde(rename = "T")]
    pub t_wait: f64,
    pub trials: usize,
    /// Last simulated index; `None` selects the default horizon.
    pub horizon_n: Option<usize>,
    pub init: InitSampler,
    pub seed: u64,
    /// Worker threads; 0 uses the global pool.
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LockinEstimate {
    pub eps: f64,
    pub n0: usize,
    #[serde(rename = "T")]
    pub t_wait: f64,
    pub schedule: ScheduleSpec,
    pub init_sampler: String,
    pub trials_total: usize,
    pub trials_conditioned: usize,
    pub trials_locked: usize,
    pub trials_diverged: usize,
    /// Conditioned trials within `eps` of `x*` at the horizon.
    pub trials_near_at_horizon: usize,
    /// Locked trials ending within `eps/2` of `x*`.
    pub trials_locked_with_margin: usize,
    pub p_hat: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
    pub p_at_horizon: f64,
    pub horizon_n: usize,
    pub horizon_t: f64,
    /// Whether the default horizon was shortened to `DEFAULT_MAX_SPAN` steps.
    pub horizon_capped: bool,
    pub theoretical_lower: Option<f64>,
}

impl LockinEstimate {
    pub fn half_width(&self) -> f64 {
        0.5 * (self.wilson_hi - self.wilson_lo)
    }
}

/// Default last index: `t_n >= t_n0 + T + 1 + 30/lambda`, capped at `max(DEFAULT_MAX_SPAN, 5 (n_lock - n0) / 4)`
/// steps past `n0`, where `t_{n_lock}` first reaches the lock-in window.
pub fn default_horizon(schedule: &StepSchedule, lambda: f64, n0: usize, t_wait: f64) -> Result<(usize, bool)> {
    let n_lock = schedule.index_after(n0, t_wait + 1.0, n0 + SCAN_CAP)?;
    let cap = n0 + DEFAULT_MAX_SPAN.max(5 * (n_lock - n0) / 4);
    match schedule.index_after(n0, t_wait + 1.0 + HORIZON_RATES / lambda, cap) {
        Ok(n) => Ok((n, false)),
        Err(Error::HorizonExhausted(_)) => Ok((cap, true)),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct TrialOutcome {
    conditioned: bool,
    locked: bool,
    near: bool,
    margin: bool,
    diverged: bool,
}

struct Plan<'a> {
    sc: Scenario<'a>,
    p: &'a LockinParams,
    steps: Vec<f64>,
    t_n0: f64,
    t_lock: f64,
}

/// One trial from stream `(seed, trial)`: draw `x_n0`, then iterate with that stream's noises.
fn run_trial(plan: &Plan, trial: usize) -> TrialOutcome {
    let sc = plan.sc;
    let mut rng = RngStream::new(plan.p.seed, trial as u64);
    let mut x = plan.p.init.sample(sc.geometry, &mut rng);
    if !sc.geometry.in_start_set(&x) {
        return TrialOutcome::default();
    }
    let x_star = &sc.geometry.x_star;
    let eps = plan.p.eps;
    let d = x.len();
    let mut h = Vector::zeros(d);
    let mut m = Vector::zeros(d);
    let mut prev = x.clone();
    let mut t = plan.t_n0;
    let mut locked = true;
    // Same decisions as `segment_leaves_ball`: the left end of a segment past `t_lock`
    // was the right end of the previous one.
    for &a in &plan.steps {
        sc.drift.eval_into(&x, &mut h);
        sc.noise.sample_into(m.as_mut_slice(), &mut rng);
        prev.copy_from(&x);
        for i in 0..d {
            x[i] += (h[i] + m[i]) * a;
        }
        if x.iter().any(|v| !v.is_finite()) || x.norm() > DIVERGENCE_NORM {
            return TrialOutcome { conditioned: true, diverged: true, ..Default::default() };
        }
        let t_next = t + a;
        if locked && t_next >= plan.t_lock {
            if t < plan.t_lock && dist(&lerp(&prev, &x, (plan.t_lock - t) / a), x_star) > eps {
                locked = false;
            }
            if dist(&x, x_star) > eps {
                locked = false;
            }
        }
        t = t_next;
    }
    let final_dist = dist(&x, x_star);
    TrialOutcome {
        conditioned: true,
        locked,
        near: final_dist <= eps,
        margin: locked && final_dist <= 0.5 * eps,
        diverged: false,
    }
}

/// Fraction of trials started in `B` whose interpolated path stays within `eps` of `x*` on `[t_n0 + T + 1, t_horizon]`.
pub fn estimate_lockin(sc: &Scenario, p: &LockinParams) -> Result<LockinEstimate> {
    if p.trials < MIN_TRIALS {
        return Err(Error::InvalidParameter(format!("need at least {MIN_TRIALS} trials, got {}", p.trials)));
    }
    if !(p.eps > 0.0 && p.eps.is_finite()) {
        return Err(Error::InvalidParameter(format!("eps must be positive, got {}", p.eps)));
    }
    let d = sc.drift.dim();
    if sc.noise.dim != d || sc.geometry.x_star.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: sc.noise.dim });
    }
    p.init.validate(d)?;
    let (horizon_n, horizon_capped) = match p.horizon_n {
        Some(h) => (h, false),
        None => default_horizon(sc.schedule, sc.spectral.lambda, p.n0, p.t_wait)?,
    };
    let t_n0 = sc.schedule.time_of(p.n0);
    if horizon_n <= p.n0 {
        return Err(Error::InvalidParameter(format!("horizon {horizon_n} must exceed n0 = {}", p.n0)));
    }
    let (steps, times) = sc.schedule.timeline(p.n0, horizon_n);
    let horizon_t = *times.last().unwrap();
    let t_lock = t_n0 + p.t_wait + 1.0;
    if horizon_t < t_lock {
        return Err(Error::InvalidParameter(format!(
            "horizon t = {horizon_t} ends before the lock-in window starts at {t_lock}"
        )));
    }
    let plan = Plan { sc: *sc, p, steps, t_n0, t_lock };
    let outcomes: Vec<TrialOutcome> =
        with_workers(p.workers, || (0..p.trials).into_par_iter().map(|i| run_trial(&plan, i)).collect())?;

    let count = |f: fn(&TrialOutcome) -> bool| outcomes.iter().filter(|o| f(o)).count();
    let conditioned = count(|o| o.conditioned);
    if conditioned == 0 {
        return Err(Error::NoConditionedTrials);
    }
    let locked = count(|o| o.locked);
    let near = count(|o| o.near);
    let (wilson_lo, wilson_hi) = wilson_interval(locked as u64, conditioned as u64);
    Ok(LockinEstimate {
        eps: p.eps,
        n0: p.n0,
        t_wait: p.t_wait,
        schedule: sc.schedule.spec().clone(),
        init_sampler: p.init.label(),
        trials_total: p.trials,
        trials_conditioned: conditioned,
        trials_locked: locked,
        trials_diverged: count(|o| o.diverged),
        trials_near_at_horizon: near,
        trials_locked_with_margin: count(|o| o.margin),
        p_hat: locked as f64 / conditioned as f64,
        wilson_lo,
        wilson_hi,
        p_at_horizon: near as f64 / conditioned as f64,
        horizon_n,
        horizon_t,
        horizon_capped,
        theoretical_lower: None,
    })
}

/// Same trials with the horizon index doubled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonSensitivity {
    pub base: LockinEstimate,
    pub doubled: LockinEstimate,
    pub change: f64,
    pub half_width: f64,
    /// Every locked trial ended within `eps/2` of `x*`.
    pub margin_holds: bool,
    /// Margin held but `p_hat` moved by at least the half-width.
    pub flagged: bool,
}

pub fn horizon_sensitivity(sc: &Scenario, p: &LockinParams) -> Result<HorizonSensitivity> {
    let base = estimate_lockin(sc, p)?;
    let doubled = estimate_lockin(sc, &LockinParams { horizon_n: Some(2 * base.horizon_n), ..p.clone() })?;
    let change = (doubled.p_hat - base.p_hat).abs();
    let half_width = base.half_width();
    let margin_holds = base.trials_locked_with_margin == base.trials_locked;
    Ok(HorizonSensitivity { flagged: margin_holds && change >= half_width, change, half_width, margin_holds, base, doubled })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub pass: bool,
    /// The theoretical bound is 0.
    pub vacuous: bool,
    pub theoretical_lower: f64,
    pub wilson_lo: f64,
    /// `wilson_lo - theoretical_lower`.
    pub margin: f64,
}

impl Verdict {
    pub fn label(&self) -> &'static str {
        if self.pass {
            "PASS"
        } else {
            "FAIL"
        }
    }
}

fn same(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

/// One-sided check that the empirical lock-in frequency dominates the bound.
pub fn compare_bound(est: &LockinEstimate, report: &BoundReport) -> Result<Verdict> {
    if !same(est.eps, report.epsilon) || est.n0 != report.n0 || !same(est.t_wait, report.t) {
        return Err(Error::ParameterMismatch(format!(
            "estimate (eps={}, n0={}, T={}) vs bound (eps={}, n0={}, T={})",
            est.eps, est.n0, est.t_wait, report.epsilon, report.n0, report.t
        )));
    }
    let lower = report.lower_bound;
    let vacuous = lower <= 0.0;
    Ok(Verdict {
        pass: vacuous || est.p_hat == 1.0 || est.wilson_lo >= lower,
        vacuous,
        theoretical_lower: lower,
        wilson_lo: est.wilson_lo,
        margin: est.wilson_lo - lower,
    })
}

/// One line of a lock-in sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scenario: String,
    pub mu: Option<f64>,
    pub eps: f64,
    pub n0: usize,
    #[serde(rename = "T")]
    pub t_wait: f64,
    pub trials: usize,
    pub p_hat: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
    pub theoretical_lower: Option<f64>,
    pub verdict: Option<String>,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str =
        "scenario,mu,eps,n0,T,trials,p_hat,wilson_lo,wilson_hi,theoretical_lower,verdict";

    pub fn new(scenario: &str, est: &LockinEstimate, verdict: Option<&Verdict>) -> Self {
        let mu = match est.schedule {
            ScheduleSpec::Power { mu } | ScheduleSpec::ConstantThenPower { mu, .. } => Some(mu),
            ScheduleSpec::ExplicitList { .. } => None,
        };
        SweepRow {
            scenario: scenario.to_string(),
            mu,
            eps: est.eps,
            n0: est.n0,
            t_wait: est.t_wait,
            trials: est.trials_total,
            p_hat: est.p_hat,
            wilson_lo: est.wilson_lo,
            wilson_hi: est.wilson_hi,
            theoretical_lower: verdict.map(|v| v.theoretical_lower).or(est.theoretical_lower),
            verdict: verdict.map(|v| v.label().to_string()),
        }
    }

    pub fn csv_row(&self) -> String {
        let opt = |x: Option<f64>| x.map(fmt_f64).unwrap_or_default();
        [
            self.scenario.clone(),
            opt(self.mu),
            fmt_f64(self.eps),
            self.n0.to_string(),
            fmt_f64(self.t_wait),
            self.trials.to_string(),
            fmt_f64(self.p_hat),
            fmt_f64(self.wilson_lo),
            fmt_f64(self.wilson_hi),
            opt(self.theoretical_lower),
            self.verdict.clone().unwrap_or_default(),
        ]
        .join(",")
    }
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut w: W) -> Result<()> {
    writeln!(w, "{}", SweepRow::CSV_HEADER)?;
    for r in rows {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}
