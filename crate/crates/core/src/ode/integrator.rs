//! Dormand–Prince 5(4) with a PI step-size controller.

use crate::error::{Error, Result};

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const BETA: f64 = 0.04;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const MAX_STEPS: usize = 2_000_000;

/// Integrate `y' = f(t, y)` from `t0` and report the state at each of `t_out` (sorted, `>= t0`).
///
/// Absolute and relative tolerances are both `tol`.
pub fn integrate<F>(f: F, t0: f64, y0: &[f64], t_out: &[f64], tol: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tolerance must be positive, got {tol}")));
    }
    if t_out.windows(2).any(|w| w[1] < w[0]) || t_out.first().is_some_and(|t| *t < t0) {
        return Err(Error::InvalidParameter("output times must be sorted and not before t0".into()));
    }
    let n = y0.len();
    let mut y = y0.to_vec();
    let mut t = t0;
    let mut k1 = vec![0.0; n];
    let (mut k2, mut k3, mut k4, mut k5, mut k6, mut k7) =
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    f(t, &y, &mut k1);

    let mut out = Vec::with_capacity(t_out.len());
    let Some(&t_last) = t_out.last() else { return Ok(out) };
    let mut h = initial_step(&f, t, &y, &k1, tol, t_last - t0);
    let mut fac_old: f64 = 1e-4;
    let mut steps = 0usize;

    for &target in t_out {
        while t < target {
            steps += 1;
            if steps > MAX_STEPS {
                return Err(Error::TooManySteps(MAX_STEPS));
            }
            if h < 1e-14 * t.abs().max(1.0) {
                return Err(Error::StepUnderflow { t, h });
            }
            let last = t + h >= target;
            let hs = if last { target - t } else { h };

            for i in 0..n {
                tmp[i] = y[i] + hs * A21 * k1[i];
            }
            f(t + C2 * hs, &tmp, &mut k2);
            for i in 0..n {
                tmp[i] = y[i] + hs * (A31 * k1[i] + A32 * k2[i]);
            }
            f(t + C3 * hs, &tmp, &mut k3);
            for i in 0..n {
                tmp[i] = y[i] + hs * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
            }
            f(t + C4 * hs, &tmp, &mut k4);
            for i in 0..n {
                tmp[i] = y[i] + hs * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
            }
            f(t + C5 * hs, &tmp, &mut k5);
            for i in 0..n {
                tmp[i] = y[i] + hs * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
            }
            f(t + hs, &tmp, &mut k6);
            for i in 0..n {
                y_new[i] = y[i] + hs * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
            }
            f(t + hs, &y_new, &mut k7);

            let mut err = 0.0;
            for i in 0..n {
                let e = hs * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
                let sc = tol + tol * y[i].abs().max(y_new[i].abs());
                err += (e / sc).powi(2);
            }
            let err = (err / n.max(1) as f64).sqrt();
            if !err.is_finite() {
                h = 0.25 * hs;
                continue;
            }

            let fac11 = err.powf(0.2 - 0.75 * BETA);
            if err <= 1.0 {
                let fac = (fac11 / fac_old.powf(BETA) / SAFETY).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
                fac_old = err.max(1e-4);
                t = if last { target } else { t + hs };
                std::mem::swap(&mut y, &mut y_new);
                std::mem::swap(&mut k1, &mut k7);
                let h_next = hs / fac;
                // Keep the controller's step when the last one was shortened to hit a target.
                h = if last { h.max(h_next) } else { h_next };
            } else {
                h = hs / (fac11 / SAFETY).min(1.0 / FAC_MIN);
            }
        }
        out.push(y.clone());
    }
    Ok(out)
}

fn initial_step<F>(f: &F, t: f64, y: &[f64], f0: &[f64], tol: f64, span: f64) -> f64
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    let n = y.len().max(1) as f64;
    let sc: Vec<f64> = y.iter().map(|v| tol + tol * v.abs()).collect();
    let d0 = (y.iter().zip(&sc).map(|(v, s)| (v / s).powi(2)).sum::<f64>() / n).sqrt();
    let d1 = (f0.iter().zip(&sc).map(|(v, s)| (v / s).powi(2)).sum::<f64>() / n).sqrt();
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span.max(1e-12));
    let y1: Vec<f64> = y.iter().zip(f0).map(|(v, d)| v + h0 * d).collect();
    let mut f1 = vec![0.0; y.len()];
    f(t + h0, &y1, &mut f1);
    let d2 = (f1.iter().zip(f0).zip(&sc).map(|((a, b), s)| ((a - b) / s).powi(2)).sum::<f64>() / n).sqrt() / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0).min(h1).min(span.max(1e-12))
}
