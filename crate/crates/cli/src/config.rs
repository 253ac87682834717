//! TOML experiment configuration.
//!
//! ```toml
//! seed = 7
//! x_star = [0.0]
//!
//! [scenario]
//! drift = "linear-1d"
//! rate = 1.0
//!
//! [schedule]
//! kind = "power"
//! mu = 1.0
//!
//! [noise]
//! kind = "laplace"
//! scale = 0.05
//!
//! [bound]
//! epsilon = 0.3
//! n0 = 200
//! T = "auto"
//! ```
//!
//! Optional sections: `[mc]`, `[decomposition]`, `[concentration]`, `[order_study]`, `[geometry]`, `[output]`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use lockin_core::bound::ConstantSource;
use lockin_core::conc::GeometricExperiment;
use lockin_core::experiment::Setup;
use lockin_core::model::{make_drift, NoiseModel, NoiseSpec, ScenarioSpec, ScheduleSpec, StepSchedule};
use lockin_core::montecarlo::{InitSampler, MIN_TRIALS};
use lockin_core::ode::GeometryOptions;

/// Waiting time: a number, or `"auto"` for `ln(4K/eps)/lambda` with the fitted `K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WaitSpec {
    Value(f64),
    Auto(String),
}

impl Default for WaitSpec {
    fn default() -> Self {
        WaitSpec::Auto("auto".into())
    }
}

fn default_kappa() -> f64 {
    0.5
}
fn default_fraction() -> f64 {
    0.9
}
fn default_bound_horizon() -> usize {
    1_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundSection {
    pub epsilon: f64,
    pub n0: usize,
    #[serde(rename = "T", default)]
    pub t: WaitSpec,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_fraction")]
    pub lambda_prime_fraction: f64,
    #[serde(default = "default_source")]
    pub constants: ConstantSource,
    #[serde(rename = "C1", default)]
    pub c1: Option<f64>,
    #[serde(rename = "C2", default)]
    pub c2: Option<f64>,
    /// Overrides the fitted `K`.
    #[serde(rename = "K", default)]
    pub k: Option<f64>,
    /// Index up to which the bound's series are summed explicitly.
    #[serde(default = "default_bound_horizon")]
    pub horizon: usize,
}

fn default_source() -> ConstantSource {
    ConstantSource::Fitted
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    pub trials: usize,
    /// Last simulated index; default horizon when absent.
    #[serde(default)]
    pub horizon: Option<usize>,
    /// Values of `n0` swept; `[bound].n0` when absent.
    #[serde(default)]
    pub n0s: Option<Vec<usize>>,
    #[serde(default)]
    pub init: InitSampler,
    /// Also rerun with the horizon doubled.
    #[serde(default)]
    pub sensitivity: bool,
}

fn default_quad() -> usize {
    4
}
fn default_tol() -> f64 {
    1e-10
}
fn default_accept() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecompositionSection {
    /// State at index 0.
    pub x0: Vec<f64>,
    pub n0: usize,
    pub n: usize,
    #[serde(default = "default_quad")]
    pub quad_order: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_accept")]
    pub tol_accept: f64,
}

fn default_conc_trials() -> u64 {
    100_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConcentrationSection {
    /// Noise strings such as `laplace:1`; the top-level noise when absent.
    #[serde(default)]
    pub noises: Option<Vec<String>>,
    #[serde(default = "default_conc_trials")]
    pub trials: u64,
    #[serde(default)]
    pub weights: GeometricExperiment,
}

fn default_c() -> f64 {
    1.0
}
fn default_order_lambda() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderSection {
    /// Exponents studied; the schedule's exponent when absent.
    #[serde(default)]
    pub mus: Option<Vec<f64>>,
    #[serde(default = "default_order_lambda")]
    pub lambda: f64,
    #[serde(rename = "C", default = "default_c")]
    pub c: f64,
    pub n0: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub workers: usize,
    /// Starting guess for the equilibrium.
    pub x_star: Vec<f64>,
    pub scenario: ScenarioSpec,
    pub schedule: ScheduleSpec,
    pub noise: NoiseSpec,
    pub bound: BoundSection,
    #[serde(default)]
    pub mc: Option<McSection>,
    #[serde(default)]
    pub decomposition: Option<DecompositionSection>,
    #[serde(default)]
    pub concentration: Option<ConcentrationSection>,
    #[serde(default)]
    pub order_study: Option<OrderSection>,
    #[serde(default)]
    pub geometry: GeometryOptions,
    #[serde(default)]
    pub output: OutputSection,
}

fn check_mu(mu: f64) -> Result<()> {
    if mu > 0.0 && mu <= 1.0 {
        Ok(())
    } else {
        bail!("μ out of (0,1]: {mu}")
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| anyhow::anyhow!("config parse error: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<u8>)> {
        let bytes = std::fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
        let text = std::str::from_utf8(&bytes).context("config is not UTF-8")?;
        let cfg = Self::parse(text).with_context(|| format!("in {}", path.display()))?;
        Ok((cfg, bytes))
    }

    /// Resolve every referenced spec and check ranges.
    pub fn validate(&self) -> Result<()> {
        StepSchedule::new(self.schedule.clone()).map_err(|e| anyhow::anyhow!("schedule: {e}"))?;
        let drift = make_drift(&self.scenario).map_err(|e| anyhow::anyhow!("scenario: {e}"))?;
        NoiseModel::new(self.noise.clone(), drift.dim()).map_err(|e| anyhow::anyhow!("noise: {e}"))?;
        if self.x_star.len() != drift.dim() {
            bail!("x_star: expected {} coordinates, got {}", drift.dim(), self.x_star.len());
        }
        let b = &self.bound;
        if !(b.epsilon > 0.0 && b.epsilon.is_finite()) {
            bail!("bound.epsilon: must be positive, got {}", b.epsilon);
        }
        if let WaitSpec::Auto(s) = &b.t {
            if s != "auto" {
                bail!("bound.T: expected a number or \"auto\", got {s:?}");
            }
        }
        if let WaitSpec::Value(t) = b.t {
            if !(t >= 0.0 && t.is_finite()) {
                bail!("bound.T: must be nonnegative, got {t}");
            }
        }
        if b.constants == ConstantSource::User && (b.c1.is_none() || b.c2.is_none()) {
            bail!("bound: constants = \"user\" needs both C1 and C2");
        }
        if let Some(mc) = &self.mc {
            if mc.trials < MIN_TRIALS {
                bail!("mc.trials: need at least {MIN_TRIALS}, got {}", mc.trials);
            }
        }
        if let Some(d) = &self.decomposition {
            if d.x0.len() != drift.dim() {
                bail!("decomposition.x0: expected {} coordinates, got {}", drift.dim(), d.x0.len());
            }
            if d.n <= d.n0 {
                bail!("decomposition: need n > n0, got n0={}, n={}", d.n0, d.n);
            }
        }
        if let Some(c) = &self.concentration {
            for s in c.noises.iter().flatten() {
                NoiseSpec::parse(s).map_err(|e| anyhow::anyhow!("concentration.noises: {e}"))?;
            }
            check_mu(c.weights.mu).context("concentration.weights.mu")?;
        }
        if let Some(o) = &self.order_study {
            for mu in o.mus.iter().flatten() {
                check_mu(*mu).context("order_study.mus")?;
            }
            if o.n0.is_empty() {
                bail!("order_study.n0: empty list");
            }
        }
        Ok(())
    }

    pub fn setup(&self) -> Setup {
        let mut s = Setup::new(
            self.scenario.clone(),
            &self.x_star,
            self.schedule.clone(),
            self.noise.clone(),
            self.bound.epsilon,
        );
        s.kappa = self.bound.kappa;
        s.lambda_prime_fraction = self.bound.lambda_prime_fraction;
        s.seed = self.seed;
        s.geometry = self.geometry.clone();
        s
    }

    /// Exponent of a power-type schedule.
    pub fn mu(&self) -> Option<f64> {
        match self.schedule {
            ScheduleSpec::Power { mu } | ScheduleSpec::ConstantThenPower { mu, .. } => Some(mu),
            ScheduleSpec::ExplicitList { .. } => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 7
x_star = [0.0]

[scenario]
drift = "linear-1d"
rate = 1.0

[schedule]
kind = "power"
mu = 1.0

[noise]
kind = "laplace"
scale = 0.05

[bound]
epsilon = 0.3
n0 = 200
"#;

    #[test]
    fn parses_minimal_config() {
        let c = ExperimentConfig::parse(BASE).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.bound.t, WaitSpec::default());
        assert_eq!(c.bound.constants, ConstantSource::Fitted);
        assert_eq!(c.mu(), Some(1.0));
        assert!(c.mc.is_none());
    }

    #[test]
    fn rejects_bad_mu() {
        let text = BASE.replace("mu = 1.0", "mu = 1.5");
        let err = format!("{:#}", ExperimentConfig::parse(&text).unwrap_err());
        assert!(err.contains("μ out of (0,1]"), "{err}");
    }

    #[test]
    fn seed_is_required() {
        let text = BASE.replace("seed = 7", "");
        let err = format!("{:#}", ExperimentConfig::parse(&text).unwrap_err());
        assert!(err.contains("seed"), "{err}");
    }

    #[test]
    fn unknown_field_is_reported_with_location() {
        let text = BASE.replace("n0 = 200", "n0 = 200\nepsilom = 1");
        let err = format!("{:#}", ExperimentConfig::parse(&text).unwrap_err());
        assert!(err.contains("epsilom") && err.contains("line"), "{err}");
    }

    #[test]
    fn user_constants_need_values() {
        let text = BASE.replace("n0 = 200", "n0 = 200\nconstants = \"user\"\nC1 = 0.0");
        assert!(ExperimentConfig::parse(&text).is_err());
        let text = text.replace("C1 = 0.0", "C1 = 0.0\nC2 = 1.0");
        assert!(ExperimentConfig::parse(&text).is_ok());
    }

    #[test]
    fn wait_spec_accepts_number_or_auto() {
        let c = ExperimentConfig::parse(&BASE.replace("n0 = 200", "n0 = 200\nT = 2.5")).unwrap();
        assert_eq!(c.bound.t, WaitSpec::Value(2.5));
        assert!(ExperimentConfig::parse(&BASE.replace("n0 = 200", "n0 = 200\nT = \"soon\"")).is_err());
    }
}
