//! Lock-in lower bound, its waiting time and stepsize threshold, the `beta_n` sequence and the
//! order estimates for the two tail series.
//!
//! Infinite series are summed explicitly in the log domain up to a truncation index and closed
//! with an analytic remainder that never understates the discarded tail.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_ur, ln_gamma};

use crate::error::{Error, Result};
use crate::io::{self, fmt_f64};
use crate::model::StepSchedule;
use crate::stats::{ln_add, LogSum};

/// Number of `beta_n` values kept in a report.
pub const BETA_HEAD: usize = 1000;
/// Largest number of terms summed explicitly.
pub const MAX_EXPLICIT_TERMS: usize = 200_000_000;
/// Relative inflation applied to recurrence values entering a remainder bound.
const ROUNDING_SLACK: f64 = 1e-12;
/// Largest index searched for the onset of the `beta_n = a_{n-1}` regime.
const MONOTONE_SEARCH_CAP: f64 = 1e12;

/// `beta_n` for `n = n0+1, n0+2, ...` by `beta_{n+1} = max(a_n, beta_n e^{-lambda a_n})`.
#[derive(Debug, Clone)]
pub struct BetaIter<'a> {
    schedule: &'a StepSchedule,
    lambda: f64,
    n0: usize,
    next_n: usize,
    beta: f64,
}

impl<'a> BetaIter<'a> {
    pub fn new(schedule: &'a StepSchedule, lambda: f64, n0: usize) -> Self {
        BetaIter { schedule, lambda, n0, next_n: n0 + 1, beta: 0.0 }
    }
}

impl Iterator for BetaIter<'_> {
    type Item = (usize, f64);

    fn next(&mut self) -> Option<(usize, f64)> {
        let n = self.next_n;
        let a = self.schedule.step_at(n - 1);
        self.beta = if n == self.n0 + 1 { a } else { beta_step(self.beta, a, self.lambda) };
        self.next_n += 1;
        Some((n, self.beta))
    }
}

fn beta_step(beta: f64, a: f64, lambda: f64) -> f64 {
    a.max(beta * (-lambda * a).exp())
}

/// `beta_n` for `n` in `(n0, n_max]`.
pub fn beta_sequence(schedule: &StepSchedule, lambda: f64, n0: usize, n_max: usize) -> Result<Vec<f64>> {
    if n_max <= n0 {
        return Err(Error::InvalidParameter(format!("n_max = {n_max} must exceed n0 = {n0}")));
    }
    Ok(BetaIter::new(schedule, lambda, n0).take(n_max - n0).map(|(_, b)| b).collect())
}

/// `max_{n0 <= k < n} exp(-lambda sum_{i=k+1}^{n-1} a_i) a_k` by direct enumeration.
pub fn beta_direct(schedule: &StepSchedule, lambda: f64, n0: usize, n: usize) -> f64 {
    let mut best: f64 = 0.0;
    let mut sum = 0.0;
    for k in (n0..n).rev() {
        let a = schedule.step_at(k);
        best = best.max((-lambda * sum).exp() * a);
        sum += a;
    }
    best
}

/// Value used for the `n = n0` term of the beta series, where the defining max is empty.
pub fn beta_at_start(schedule: &StepSchedule, n0: usize) -> f64 {
    schedule.step_at(n0.saturating_sub(1))
}

/// Smallest `N0 <= k_max` such that the recurrence returns `beta_n = a_{n-1}` for every
/// `n > n0 >= N0` up to `k_max + 1`.
///
/// The recurrence keeps `beta_{k+2} = a_{k+1}` exactly when `a_k e^{-lambda a_{k+1}} <= a_{k+1}`
/// in floating point; the scan evaluates that predicate with the same operations.
pub fn beta_closed_form_start(schedule: &StepSchedule, lambda: f64, k_max: usize) -> usize {
    let mut start = 0;
    let mut a_k = schedule.step_at(0);
    for k in 0..k_max {
        let a_next = schedule.step_at(k + 1);
        if beta_step(a_k, a_next, lambda) != a_next {
            start = k + 1;
        }
        a_k = a_next;
    }
    start
}

/// First `k` with `lambda (k+1) >= mu (k+2)^mu`, beyond which `a_k e^{lambda t_{k+1}}` is
/// nondecreasing for power steps. `None` if it does not exist or lies beyond the search cap.
fn monotone_onset(mu: f64, lambda: f64) -> Option<usize> {
    let holds = |k: f64| lambda * (k + 1.0) >= mu * (k + 2.0).powf(mu);
    if holds(0.0) {
        return Some(0);
    }
    let mut hi = 1.0;
    while !holds(hi) {
        hi *= 2.0;
        if hi > MONOTONE_SEARCH_CAP {
            return None;
        }
    }
    let mut lo = hi / 2.0;
    while hi - lo > 1.0 {
        let mid = (0.5 * (lo + hi)).floor();
        if holds(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi as usize)
}

/// `T = max(0, ln(4K/eps)/lambda)`.
pub fn waiting_time(epsilon: f64, k: f64, lambda: f64) -> f64 {
    ((4.0 * k / epsilon).ln() / lambda).max(0.0)
}

/// Smallest `N` with `a_n <= eps/(4K)` for every `n >= N`.
pub fn stepsize_threshold(epsilon: f64, k: f64, schedule: &StepSchedule) -> Result<usize> {
    let threshold = epsilon / (4.0 * k);
    match schedule.tail_exponent() {
        None => {
            let values: Vec<f64> = match schedule.spec() {
                crate::model::ScheduleSpec::ExplicitList { values } => values.clone(),
                _ => unreachable!(),
            };
            if values[values.len() - 1] > threshold {
                return Err(Error::ThresholdNotReached { threshold, horizon: usize::MAX });
            }
            let last_bad = values.iter().rposition(|&a| a > threshold);
            Ok(last_bad.map_or(0, |i| i + 1))
        }
        Some(_) => {
            // Nonincreasing, so binary search on the first crossing.
            let cap = 1usize << 53;
            if schedule.step_at(cap) > threshold {
                return Err(Error::ThresholdNotReached { threshold, horizon: cap });
            }
            let (mut lo, mut hi) = (0usize, cap);
            if schedule.step_at(0) <= threshold {
                return Ok(0);
            }
            while hi - lo > 1 {
                let mid = lo + (hi - lo) / 2;
                if schedule.step_at(mid) <= threshold {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            Ok(hi)
        }
    }
}

/// Upper bound on `ln Gamma(s, x)`.
fn ln_upper_gamma_bound(s: f64, x: f64) -> f64 {
    if x.is_infinite() {
        return f64::NEG_INFINITY;
    }
    if s <= 1.0 {
        // t^{s-1} <= x^{s-1} on [x, inf).
        return (s - 1.0) * x.ln() - x;
    }
    if x >= 2.0 * (s - 1.0) {
        // t^{s-1} e^{-t} <= x^{s-1} e^{-x} e^{-(1 - (s-1)/x)(t-x)}.
        return (s - 1.0) * x.ln() - x - (1.0 - (s - 1.0) / x).ln();
    }
    let q = gamma_ur(s, x);
    (q.ln() + ln_gamma(s)) + 1e-10
}

/// Upper bound on `ln int_y^inf exp(-A s^p) ds`, given `ln A`.
fn ln_stretched_exp_integral(ln_a: f64, p: f64, y: f64) -> f64 {
    let x = (ln_a + p * y.ln()).exp();
    ln_upper_gamma_bound(1.0 / p, x) - p.ln() - ln_a / p
}

/// A series truncated at `truncation_index` and closed with a remainder bound, both in logs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailSum {
    #[serde(with = "io::extended_f64")]
    pub ln_partial: f64,
    #[serde(with = "io::extended_f64")]
    pub ln_remainder: f64,
    pub truncation_index: usize,
}

impl TailSum {
    pub fn partial(&self) -> f64 {
        self.ln_partial.exp()
    }

    pub fn remainder(&self) -> f64 {
        self.ln_remainder.exp()
    }

    pub fn ln_total(&self) -> f64 {
        ln_add(self.ln_partial, self.ln_remainder)
    }

    pub fn total(&self) -> f64 {
        self.ln_total().exp()
    }
}

fn check_tail_args(c: f64, n0: usize, horizon: usize) -> Result<()> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidParameter(format!("tail constant must be positive, got {c}")));
    }
    if horizon < n0 {
        return Err(Error::InvalidParameter(format!("horizon {horizon} below n0 {n0}")));
    }
    Ok(())
}

fn explicit_end(n0: usize, wanted: usize) -> Result<usize> {
    if wanted - n0 > MAX_EXPLICIT_TERMS {
        return Err(Error::InvalidParameter(format!(
            "summing from {n0} to {wanted} exceeds {MAX_EXPLICIT_TERMS} terms"
        )));
    }
    Ok(wanted)
}

/// `sum_{n >= n0} exp(-C / sqrt(a_n))`.
pub fn tail_sum_sqrt(schedule: &StepSchedule, c: f64, n0: usize, horizon: usize) -> Result<TailSum> {
    check_tail_args(c, n0, horizon)?;
    let (end, ln_remainder) = match (schedule.tail_exponent(), schedule.power_tail_start()) {
        (Some(mu), Some(start)) => {
            let end = explicit_end(n0, horizon.max(start))?;
            // Terms are exp(-C (n+1)^{mu/2}), decreasing beyond `end`.
            (end, ln_stretched_exp_integral(c.ln(), 0.5 * mu, end as f64 + 1.0))
        }
        // A held final stepsize makes the series diverge.
        _ => (horizon, f64::INFINITY),
    };
    let mut acc = LogSum::default();
    for n in n0..=end {
        acc.add(-c / schedule.step_at(n).sqrt());
    }
    Ok(TailSum { ln_partial: acc.ln(), ln_remainder, truncation_index: end })
}

/// `sum_{n >= n0} exp(-C / beta_n)`, with `beta_{n0}` taken as `a_{n0-1}`.
pub fn tail_sum_beta(schedule: &StepSchedule, lambda: f64, c: f64, n0: usize, horizon: usize) -> Result<TailSum> {
    check_tail_args(c, n0, horizon)?;
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter(format!("lambda must be positive, got {lambda}")));
    }
    let (mu, start) = match (schedule.tail_exponent(), schedule.power_tail_start()) {
        (Some(mu), Some(start)) => (mu, start),
        _ => {
            let mut acc = LogSum::default();
            acc.add(-c / beta_at_start(schedule, n0));
            for (_, b) in BetaIter::new(schedule, lambda, n0).take(horizon - n0) {
                acc.add(-c / b);
            }
            return Ok(TailSum { ln_partial: acc.ln(), ln_remainder: f64::INFINITY, truncation_index: horizon });
        }
    };
    let onset = if mu == 1.0 && lambda <= 1.0 { Some(0) } else { monotone_onset(mu, lambda) };
    let Some(onset) = onset else {
        return Err(Error::InvalidParameter(format!(
            "no computable remainder for mu = {mu}, lambda = {lambda}"
        )));
    };
    let end = explicit_end(n0, horizon.max(start).max(onset))?;

    let mut acc = LogSum::default();
    acc.add(-c / beta_at_start(schedule, n0));
    let mut beta_m = 0.0;
    for (n, b) in BetaIter::new(schedule, lambda, n0) {
        if n > end {
            beta_m = b * (1.0 + ROUNDING_SLACK);
            break;
        }
        acc.add(-c / b);
    }
    let m = end as f64 + 1.0;

    let ln_remainder = if mu == 1.0 && lambda <= 1.0 {
        // beta_n <= D (n+1)^{-lambda} for n >= m by induction, using e^{-x} <= 1/(1+x).
        let d = (beta_m * (m + 1.0).powf(lambda)).max((m + 2.0).powf(lambda) / (m + 1.0));
        ln_stretched_exp_integral(c.ln() - d.ln(), lambda, m)
    } else {
        // For n > m, beta_n <= max(a_{n-1}, beta_m e^{-lambda (t_n - t_m)}).
        let head = -c / beta_m;
        let steps = ln_stretched_exp_integral(c.ln(), mu, m);
        let decay = if mu == 1.0 {
            // t_n - t_m >= ln((n+1)/(m+1)).
            ln_stretched_exp_integral(c.ln() - beta_m.ln() - lambda * (m + 1.0).ln(), lambda, m + 1.0)
        } else {
            // t_n - t_m >= ((n+1)^{1-mu} - (m+1)^{1-mu})/(1-mu) and e^x >= 1 + x.
            let q = 1.0 - mu;
            let shift = (c / beta_m) * (lambda * (m + 1.0).powf(q) / q - 1.0);
            shift + ln_stretched_exp_integral((c * lambda / q).ln() - beta_m.ln(), q, m + 1.0)
        };
        ln_add(head, ln_add(steps, decay))
    };
    Ok(TailSum { ln_partial: acc.ln(), ln_remainder, truncation_index: end })
}

/// Where `C1`, `C2` and `K` came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstantSource {
    User,
    Fitted,
}

impl std::fmt::Display for ConstantSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ConstantSource::User => "user",
            ConstantSource::Fitted => "fitted",
        })
    }
}

/// Inputs to [`lockin_bound`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub epsilon: f64,
    pub c1: f64,
    pub c2: f64,
    pub k: f64,
    pub lambda: f64,
    pub n0: usize,
    pub horizon: usize,
    pub source: ConstantSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub epsilon: f64,
    pub n0: usize,
    #[serde(rename = "T")]
    pub t: f64,
    /// Stepsize threshold, absent when the schedule never drops below `eps/(4K)`.
    #[serde(rename = "N")]
    pub n: Option<usize>,
    #[serde(rename = "K")]
    pub k: f64,
    pub lambda: f64,
    #[serde(rename = "C1")]
    pub c1: f64,
    #[serde(rename = "C2")]
    pub c2: f64,
    pub source: ConstantSource,
    /// Exponent of `eps` in the beta series.
    pub eps_power: u32,
    /// `beta_n` for the first indices after `n0`.
    pub beta: Vec<f64>,
    pub beta_len: usize,
    #[serde(with = "io::extended_f64")]
    pub tail_sqrt: f64,
    #[serde(with = "io::extended_f64")]
    pub tail_beta: f64,
    pub lower_bound: f64,
    pub truncation_index: usize,
    #[serde(with = "io::extended_f64")]
    pub truncation_remainder_bound: f64,
    pub warnings: Vec<String>,
}

impl BoundReport {
    pub const CSV_HEADER: &'static str =
        "epsilon,n0,T,N,K,lambda,C1,C2,source,tail_sqrt,tail_beta,remainder,lower_bound,truncation_index";

    pub fn csv_row(&self) -> String {
        [
            fmt_f64(self.epsilon),
            self.n0.to_string(),
            fmt_f64(self.t),
            self.n.map_or(String::new(), |n| n.to_string()),
            fmt_f64(self.k),
            fmt_f64(self.lambda),
            fmt_f64(self.c1),
            fmt_f64(self.c2),
            self.source.to_string(),
            fmt_f64(self.tail_sqrt),
            fmt_f64(self.tail_beta),
            fmt_f64(self.truncation_remainder_bound),
            fmt_f64(self.lower_bound),
            self.truncation_index.to_string(),
        ]
        .join(",")
    }
}

/// `max(0, 1 - sum C1 e^{-C2 sqrt(eps)/sqrt(a_n)} - sum C1 e^{-C2 eps^p/beta_n})` with `p = 2` for
/// `eps <= 1` and `p = 1` otherwise.
pub fn lockin_bound(params: &BoundParams, schedule: &StepSchedule) -> Result<BoundReport> {
    let BoundParams { epsilon, c1, c2, k, lambda, n0, horizon, source } = *params;
    for (name, v) in [("epsilon", epsilon), ("K", k), ("lambda", lambda)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
        }
    }
    if !(c1 >= 0.0 && c2 > 0.0) {
        return Err(Error::InvalidParameter(format!("need C1 >= 0 and C2 > 0, got {c1}, {c2}")));
    }
    if horizon < n0 {
        return Err(Error::InvalidParameter(format!("horizon {horizon} below n0 {n0}")));
    }
    let eps_power = if epsilon <= 1.0 { 2 } else { 1 };
    let mut warnings = Vec::new();
    let n = stepsize_threshold(epsilon, k, schedule).ok();
    match n {
        Some(n) if n0 < n => warnings.push(format!("n0 = {n0} is below the stepsize threshold N = {n}")),
        None => warnings.push("stepsizes never drop below eps/(4K)".into()),
        _ => {}
    }

    let beta: Vec<f64> = BetaIter::new(schedule, lambda, n0).take(BETA_HEAD).map(|(_, b)| b).collect();
    let (tail_sqrt, tail_beta, remainder, truncation_index) = if c1 == 0.0 {
        (0.0, 0.0, 0.0, horizon)
    } else {
        let s = tail_sum_sqrt(schedule, c2 * epsilon.sqrt(), n0, horizon)?;
        let b = tail_sum_beta(schedule, lambda, c2 * epsilon.powi(eps_power as i32), n0, horizon)?;
        let partial = c1 * (s.partial() + b.partial());
        let remainder = c1 * (s.remainder() + b.remainder());
        if remainder.is_infinite() {
            warnings.push("a held final stepsize makes both series diverge".into());
        } else if remainder > 1.0 && partial < 1.0 {
            return Err(Error::HorizonTooSmall { horizon, remainder });
        }
        (c1 * s.total(), c1 * b.total(), remainder, s.truncation_index.max(b.truncation_index))
    };
    let lower_bound = (1.0 - tail_sqrt - tail_beta).clamp(0.0, 1.0);
    Ok(BoundReport {
        epsilon,
        n0,
        t: waiting_time(epsilon, k, lambda),
        n,
        k,
        lambda,
        c1,
        c2,
        source,
        eps_power,
        beta_len: truncation_index.saturating_sub(n0),
        beta,
        tail_sqrt,
        tail_beta,
        lower_bound,
        truncation_index,
        truncation_remainder_bound: remainder,
        warnings,
    })
}

fn check_order_args(mu: f64, n0: usize) -> Result<()> {
    if !(mu > 0.0 && mu <= 1.0) {
        return Err(Error::InvalidParameter(format!("μ out of (0,1]: {mu}")));
    }
    if n0 == 0 {
        return Err(Error::InvalidParameter("order envelopes need n0 >= 1".into()));
    }
    Ok(())
}

/// `ln(n0^{1-mu/2} e^{-C n0^{mu/2}})`.
pub fn ln_order_envelope(mu: f64, c: f64, n0: usize) -> Result<f64> {
    check_order_args(mu, n0)?;
    let n = n0 as f64;
    Ok((1.0 - 0.5 * mu) * n.ln() - c * n.powf(0.5 * mu))
}

/// `n0^{1-mu/2} e^{-C n0^{mu/2}}`.
pub fn order_envelope(mu: f64, c: f64, n0: usize) -> Result<f64> {
    ln_order_envelope(mu, c, n0).map(f64::exp)
}

/// Log of the envelope for `sum_{n >= n0} e^{-C/beta_n}`: `e^{-C n0}` for `mu = 1, lambda > 1`,
/// `e^{-(C/2) n0}` for `mu = 1, lambda <= 1` and `n0^{1-mu} e^{-C (n0-1)^mu}` for `mu < 1`.
pub fn ln_beta_envelope(mu: f64, lambda: f64, c: f64, n0: usize) -> Result<f64> {
    check_order_args(mu, n0)?;
    let n = n0 as f64;
    Ok(if mu == 1.0 {
        if lambda > 1.0 {
            -c * n
        } else {
            -0.5 * c * n
        }
    } else {
        (1.0 - mu) * n.ln() - c * (n - 1.0).powf(mu)
    })
}

/// One line of an order study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderRow {
    pub n0: usize,
    pub ln_tail_sqrt: f64,
    pub ln_envelope: f64,
    pub ratio: f64,
    pub ln_tail_beta: f64,
    pub ln_beta_envelope: f64,
    pub beta_ratio: f64,
    pub horizon: usize,
}

impl OrderRow {
    pub const CSV_HEADER: &'static str =
        "n0,tail_sum,envelope,ratio,ln_tail_sum,ln_envelope,beta_tail_sum,beta_envelope,beta_ratio,horizon";

    pub fn csv_row(&self) -> String {
        [
            self.n0.to_string(),
            fmt_f64(self.ln_tail_sqrt.exp()),
            fmt_f64(self.ln_envelope.exp()),
            fmt_f64(self.ratio),
            fmt_f64(self.ln_tail_sqrt),
            fmt_f64(self.ln_envelope),
            fmt_f64(self.ln_tail_beta.exp()),
            fmt_f64(self.ln_beta_envelope.exp()),
            fmt_f64(self.beta_ratio),
            self.horizon.to_string(),
        ]
        .join(",")
    }
}

/// Relative size of the remainder accepted when growing the horizon of an order study.
const ORDER_REMAINDER_REL: f64 = 1e-10;

fn converged_tail(f: impl Fn(usize) -> Result<TailSum>, n0: usize) -> Result<(TailSum, usize)> {
    let mut horizon = (2 * n0).max(n0 + 1000);
    loop {
        let t = f(horizon)?;
        if t.ln_remainder <= t.ln_partial + ORDER_REMAINDER_REL.ln() || horizon - n0 > MAX_EXPLICIT_TERMS / 2 {
            return Ok((t, horizon));
        }
        horizon *= 2;
    }
}

/// Directly summed tails against their envelopes for power steps `a_n = (n+1)^{-mu}`.
pub fn order_study(mu: f64, lambda: f64, c: f64, n0s: &[usize]) -> Result<Vec<OrderRow>> {
    let schedule = StepSchedule::power(mu)?;
    n0s.iter()
        .map(|&n0| {
            let ln_envelope = ln_order_envelope(mu, c, n0)?;
            let ln_beta_env = ln_beta_envelope(mu, lambda, c, n0)?;
            let (s, hs) = converged_tail(|h| tail_sum_sqrt(&schedule, c, n0, h), n0)?;
            let (b, hb) = converged_tail(|h| tail_sum_beta(&schedule, lambda, c, n0, h), n0)?;
            Ok(OrderRow {
                n0,
                ln_tail_sqrt: s.ln_total(),
                ln_envelope,
                ratio: (s.ln_total() - ln_envelope).exp(),
                ln_tail_beta: b.ln_total(),
                ln_beta_envelope: ln_beta_env,
                beta_ratio: (b.ln_total() - ln_beta_env).exp(),
                horizon: hs.max(hb),
            })
        })
        .collect()
}

/// `|r_b - r_a| / |r_a|`.
pub fn relative_change(a: f64, b: f64) -> f64 {
    (b - a).abs() / a.abs()
}
