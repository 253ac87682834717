use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Declarative stepsize schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScheduleSpec {
    /// a_n = 1/(n+1)^mu
    Power { mu: f64 },
    /// a_n = min(a0, 1/(n+1)^mu)
    ConstantThenPower { a0: f64, mu: f64 },
    /// a_n = values[n], holding the last value beyond the list.
    ExplicitList { values: Vec<f64> },
}

/// Validated stepsize sequence `a_n` with timeline `t_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    spec: ScheduleSpec,
}

fn check_mu(mu: f64) -> Result<()> {
    if mu > 0.0 && mu <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("μ out of (0,1]: {mu}")))
    }
}

impl StepSchedule {
    pub fn new(spec: ScheduleSpec) -> Result<Self> {
        match &spec {
            ScheduleSpec::Power { mu } => check_mu(*mu)?,
            ScheduleSpec::ConstantThenPower { a0, mu } => {
                check_mu(*mu)?;
                if !(*a0 > 0.0 && *a0 <= 1.0) {
                    return Err(Error::InvalidParameter(format!("a0 out of (0,1]: {a0}")));
                }
            }
            ScheduleSpec::ExplicitList { values } => {
                if values.is_empty() {
                    return Err(Error::InvalidParameter("empty stepsize list".into()));
                }
                if let Some(v) = values.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
                    return Err(Error::InvalidParameter(format!("stepsize out of (0,1]: {v}")));
                }
            }
        }
        Ok(StepSchedule { spec })
    }

    pub fn power(mu: f64) -> Result<Self> {
        Self::new(ScheduleSpec::Power { mu })
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    /// The exponent of the eventual power-law tail, if any.
    pub fn tail_exponent(&self) -> Option<f64> {
        match self.spec {
            ScheduleSpec::Power { mu } | ScheduleSpec::ConstantThenPower { mu, .. } => Some(mu),
            ScheduleSpec::ExplicitList { .. } => None,
        }
    }

    /// First index from which `a_n = 1/(n+1)^mu` holds exactly.
    pub fn power_tail_start(&self) -> Option<usize> {
        match self.spec {
            ScheduleSpec::Power { .. } => Some(0),
            ScheduleSpec::ConstantThenPower { a0, mu } => {
                let mut n = (a0.powf(-1.0 / mu) - 1.0).max(0.0).floor() as usize;
                while n > 0 && power_step(n - 1, mu) <= a0 {
                    n -= 1;
                }
                while power_step(n, mu) > a0 {
                    n += 1;
                }
                Some(n)
            }
            ScheduleSpec::ExplicitList { .. } => None,
        }
    }

    pub fn is_nonincreasing(&self) -> bool {
        match &self.spec {
            ScheduleSpec::ExplicitList { values } => values.windows(2).all(|w| w[1] <= w[0]),
            _ => true,
        }
    }

    /// `a_n`.
    pub fn step_at(&self, n: usize) -> f64 {
        match &self.spec {
            ScheduleSpec::Power { mu } => power_step(n, *mu),
            ScheduleSpec::ConstantThenPower { a0, mu } => a0.min(power_step(n, *mu)),
            ScheduleSpec::ExplicitList { values } => values[n.min(values.len() - 1)],
        }
    }

    /// `t_n = sum_{k<n} a_k`, accumulated sequentially so that `t_{n+1} = t_n + a_n` bitwise.
    pub fn time_of(&self, n: usize) -> f64 {
        (0..n).fold(0.0, |t, k| t + self.step_at(k))
    }

    /// Steps `a_n` for `n in start..end` and times `t_n` for `n in start..=end`.
    pub fn timeline(&self, start: usize, end: usize) -> (Vec<f64>, Vec<f64>) {
        let mut t = self.time_of(start);
        let mut steps = Vec::with_capacity(end.saturating_sub(start));
        let mut times = Vec::with_capacity(end.saturating_sub(start) + 1);
        times.push(t);
        for n in start..end {
            let a = self.step_at(n);
            t += a;
            steps.push(a);
            times.push(t);
        }
        (steps, times)
    }

    /// Smallest `n >= start` with `t_n - t_start >= span`.
    pub fn index_after(&self, start: usize, span: f64, cap: usize) -> Result<usize> {
        let mut acc = 0.0;
        let mut n = start;
        while acc < span {
            if n >= cap {
                return Err(Error::HorizonExhausted(cap));
            }
            acc += self.step_at(n);
            n += 1;
        }
        Ok(n)
    }
}

fn power_step(n: usize, mu: f64) -> f64 {
    if mu == 1.0 {
        1.0 / (n as f64 + 1.0)
    } else {
        (n as f64 + 1.0).powf(-mu)
    }
}
