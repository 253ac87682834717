//! Subcommands. Each one resolves its inputs, calls the core operations and writes artifacts.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use lockin_core::alekseev::{alpha_weight_norms, decompose, verify_identity, DecompositionReport, IdentityCheck, WeightNorms};
use lockin_core::bound::{lockin_bound, order_study, relative_change, BoundParams, BoundReport, ConstantSource, OrderRow};
use lockin_core::conc::{geometric_domination, ConcentrationParams, DominationRow, FittedConstants, GeometricExperiment};
use lockin_core::experiment::{prepare, Prepared};
use lockin_core::model::{make_drift, NoiseModel, NoiseSpec, RngStream, StepSchedule, Vector};
use lockin_core::montecarlo::{
    compare_bound, estimate_lockin, horizon_sensitivity, HorizonSensitivity, LockinEstimate, LockinParams, SweepRow,
    Verdict,
};
use lockin_core::sa::run_sa;
use lockin_core::Error as CoreError;

use crate::config::{ExperimentConfig, WaitSpec};
use crate::output::Outputs;
use crate::{BoundOverrides, Cli, Command};

const DEFAULT_OUT_DIR: &str = "out";
const DEFAULT_CONC_TRIALS: u64 = 100_000;

/// Result of one invocation.
#[derive(Debug, Clone)]
pub struct Outcome {
    /// Every check the command performed held.
    pub ok: bool,
    pub out_dir: PathBuf,
    pub files: Vec<String>,
    /// Human-readable lines for stdout.
    pub summary: Vec<String>,
}

struct Ctx {
    cfg: Option<ExperimentConfig>,
    raw: Option<Vec<u8>>,
    seed: u64,
    workers: usize,
    trials: Option<usize>,
    horizon: Option<usize>,
    summary: Vec<String>,
}

impl Ctx {
    fn cfg(&self, what: &str) -> Result<&ExperimentConfig> {
        self.cfg.as_ref().with_context(|| format!("{what} needs --config"))
    }

    fn note(&mut self, line: String) {
        self.summary.push(line);
    }
}

pub fn execute(cli: &Cli) -> Result<Outcome> {
    let path = match &cli.command {
        Command::Run { path: Some(p) } => Some(p.clone()),
        _ => cli.config.clone(),
    };
    let (cfg, raw) = match &path {
        Some(p) => {
            let (c, r) = ExperimentConfig::load(p)?;
            (Some(c), Some(r))
        }
        None => (None, None),
    };
    let out_dir = cli
        .out_dir
        .clone()
        .or_else(|| cfg.as_ref().and_then(|c| c.output.dir.clone()))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    let mut ctx = Ctx {
        seed: cli.seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0),
        workers: cli.workers.or(cfg.as_ref().map(|c| c.workers)).unwrap_or(0),
        trials: cli.trials,
        horizon: cli.horizon,
        cfg,
        raw,
        summary: Vec::new(),
    };
    let mut out = Outputs::create(&out_dir)?;
    let (name, ok) = match &cli.command {
        Command::Run { .. } => ("run", run_all(&mut ctx, &mut out)?),
        Command::VerifyDecomposition { noise } => ("verify-decomposition", verify_decomposition(&mut ctx, noise.as_deref(), &mut out)?),
        Command::EvalBound(o) => {
            let prep = prepare(&ctx.cfg("eval-bound")?.setup())?;
            eval_bound(&mut ctx, &prep, o, &mut out)?;
            ("eval-bound", true)
        }
        Command::McLockin => {
            let prep = prepare(&ctx.cfg("mc-lockin")?.setup())?;
            ("mc-lockin", mc_lockin(&mut ctx, &prep, &mut out)?)
        }
        Command::ConcCheck { noise } => ("conc-check", conc_check(&mut ctx, noise, &mut out)?),
        Command::OrderStudy { mu, c, lambda, n0 } => ("order-study", run_order_study(&mut ctx, mu, *c, *lambda, n0, &mut out)?),
    };
    let files = out.finish(name, ctx.raw.as_deref(), ctx.seed)?;
    Ok(Outcome { ok, out_dir, files, summary: ctx.summary })
}

fn run_all(ctx: &mut Ctx, out: &mut Outputs) -> Result<bool> {
    let cfg = ctx.cfg("run")?.clone();
    let prep = prepare(&cfg.setup())?;
    out.json("spectral.json", &prep.spectral)?;
    out.json("geometry.json", &prep.geometry)?;
    out.json("envelope.json", &prep.envelope)?;
    ctx.note(format!("lambda = {}, K = {}", prep.spectral.lambda, prep.k));
    eval_bound(ctx, &prep, &BoundOverrides::default(), out)?;
    let mut ok = true;
    if cfg.decomposition.is_some() {
        ok &= verify_decomposition(ctx, None, out)?;
    }
    if cfg.mc.is_some() {
        ok &= mc_lockin(ctx, &prep, out)?;
    }
    if cfg.concentration.is_some() {
        ok &= conc_check(ctx, &[], out)?;
    }
    if cfg.order_study.is_some() {
        ok &= run_order_study(ctx, &[], None, None, &[], out)?;
    }
    Ok(ok)
}

#[derive(Serialize)]
struct DecompositionOutput<'a> {
    noise: &'a NoiseSpec,
    identity: IdentityCheck,
    weight_norms: WeightNorms,
    report: &'a DecompositionReport,
}

fn verify_decomposition(ctx: &mut Ctx, noise: Option<&str>, out: &mut Outputs) -> Result<bool> {
    let cfg = ctx.cfg("verify-decomposition")?;
    let d = cfg.decomposition.as_ref().context("config has no [decomposition] section")?;
    let drift = make_drift(&cfg.scenario)?;
    let schedule = StepSchedule::new(cfg.schedule.clone())?;
    let spec = match noise {
        Some(s) => NoiseSpec::parse(s).context("--noise")?,
        None => cfg.noise.clone(),
    };
    let noise = NoiseModel::new(spec.clone(), drift.dim())?;
    let x0 = Vector::from_column_slice(&d.x0);
    let traj = run_sa(&drift, &schedule, &noise, &x0, 0, d.n, &mut RngStream::new(ctx.seed, 0))?;
    let report = decompose(&traj, &drift, d.n0, d.n, d.quad_order, d.tol)?;
    let identity = verify_identity(&report, d.tol_accept);
    let weight_norms = alpha_weight_norms(&report);
    out.json("decomposition.json", &DecompositionOutput { noise: &spec, identity, weight_norms, report: &report })?;
    ctx.note(format!(
        "decomposition n0={} n={}: residual {:e} (accept {:e}) {}",
        d.n0,
        d.n,
        identity.residual,
        identity.tol_accept,
        if identity.pass { "PASS" } else { "FAIL" }
    ));
    Ok(identity.pass)
}

/// Bound parameters for one `n0`: fitted constants unless the config or the flags supply them.
fn resolve_bound(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    n0: usize,
    o: &BoundOverrides,
) -> Result<(BoundParams, Option<FittedConstants>)> {
    let b = &cfg.bound;
    let eps = o.epsilon.unwrap_or(b.epsilon);
    let horizon = b.horizon.max(n0);
    let (mut params, fitted) = if b.constants == ConstantSource::User {
        let p = BoundParams {
            epsilon: eps,
            c1: b.c1.unwrap_or_default(),
            c2: b.c2.unwrap_or_default(),
            k: prep.k,
            lambda: prep.spectral.lambda,
            n0,
            horizon,
            source: ConstantSource::User,
        };
        (p, None)
    } else {
        let (p, fc) = prep.fitted_bound_params(eps, n0, horizon)?;
        (p, Some(fc))
    };
    if let Some(k) = o.k.or(b.k) {
        params.k = k;
    }
    if o.c1.is_some() || o.c2.is_some() {
        params.c1 = o.c1.unwrap_or(params.c1);
        params.c2 = o.c2.unwrap_or(params.c2);
        params.source = ConstantSource::User;
    }
    Ok((params, fitted))
}

fn eval_bound(ctx: &mut Ctx, prep: &Prepared, o: &BoundOverrides, out: &mut Outputs) -> Result<BoundReport> {
    let cfg = ctx.cfg("eval-bound")?;
    let n0 = o.n0.unwrap_or(cfg.bound.n0);
    let (params, fitted) = resolve_bound(cfg, prep, n0, o)?;
    let schedule = StepSchedule::new(cfg.schedule.clone())?;
    let report = lockin_bound(&params, &schedule)?;
    if let Some(fc) = &fitted {
        out.json("constants.json", fc)?;
    }
    out.json("bound_report.json", &report)?;
    out.csv("bound.csv", BoundReport::CSV_HEADER, [report.csv_row()])?;
    ctx.note(format!(
        "bound eps={} n0={} T={}: lower_bound {} ({} constants)",
        report.epsilon, report.n0, report.t, report.lower_bound, report.source
    ));
    for w in &report.warnings {
        ctx.note(format!("  warning: {w}"));
    }
    Ok(report)
}

#[derive(Serialize)]
struct LockinEntry {
    estimate: LockinEstimate,
    verdict: Option<Verdict>,
    bound_warnings: Vec<String>,
    sensitivity: Option<HorizonSensitivity>,
}

fn mc_lockin(ctx: &mut Ctx, prep: &Prepared, out: &mut Outputs) -> Result<bool> {
    let cfg = ctx.cfg("mc-lockin")?.clone();
    let mc = cfg.mc.as_ref().context("config has no [mc] section")?;
    let n0s = mc.n0s.clone().unwrap_or_else(|| vec![cfg.bound.n0]);
    let trials = ctx.trials.unwrap_or(mc.trials);
    let horizon = ctx.horizon.or(mc.horizon);
    let label = prep.drift.label().to_string();
    let mut entries = Vec::with_capacity(n0s.len());
    let mut ok = true;
    for n0 in n0s {
        let (params, _) = resolve_bound(&cfg, prep, n0, &BoundOverrides::default())?;
        let report = lockin_bound(&params, &prep.schedule)?;
        let t_wait = match cfg.bound.t {
            WaitSpec::Value(t) => t,
            WaitSpec::Auto(_) => report.t,
        };
        let lp = LockinParams {
            eps: cfg.bound.epsilon,
            n0,
            t_wait,
            trials,
            horizon_n: horizon,
            init: mc.init.clone(),
            seed: ctx.seed,
            workers: ctx.workers,
        };
        let (mut estimate, sensitivity) = if mc.sensitivity {
            let s = horizon_sensitivity(&prep.scenario(), &lp)?;
            (s.base.clone(), Some(s))
        } else {
            (estimate_lockin(&prep.scenario(), &lp)?, None)
        };
        estimate.theoretical_lower = Some(report.lower_bound);
        let verdict = match compare_bound(&estimate, &report) {
            Ok(v) => Some(v),
            Err(CoreError::ParameterMismatch(m)) => {
                ctx.note(format!("  n0={n0}: no verdict, T differs from the bound's waiting time ({m})"));
                None
            }
            Err(e) => return Err(e.into()),
        };
        ok &= verdict.as_ref().is_none_or(|v| v.pass);
        ctx.note(format!(
            "lock-in n0={n0} T={}: p_hat {} [{}, {}] over {} conditioned, bound {} {}",
            estimate.t_wait,
            estimate.p_hat,
            estimate.wilson_lo,
            estimate.wilson_hi,
            estimate.trials_conditioned,
            report.lower_bound,
            verdict.as_ref().map_or("", |v| v.label()),
        ));
        if let Some(s) = &sensitivity {
            if s.flagged {
                ctx.note(format!("  n0={n0}: p_hat moved by {} when the horizon doubled", s.change));
            }
        }
        entries.push(LockinEntry { estimate, verdict, bound_warnings: report.warnings, sensitivity });
    }
    out.json("lockin.json", &entries)?;
    let rows: Vec<SweepRow> = entries.iter().map(|e| SweepRow::new(&label, &e.estimate, e.verdict.as_ref())).collect();
    out.csv("lockin_sweep.csv", SweepRow::CSV_HEADER, rows.iter().map(SweepRow::csv_row))?;
    Ok(ok)
}

#[derive(Serialize)]
struct ConcEntry {
    noise: NoiseSpec,
    weights: GeometricExperiment,
    trials: u64,
    params: ConcentrationParams,
    dominated: bool,
    rows: Vec<DominationRow>,
}

fn slug(text: &str) -> String {
    text.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

fn conc_check(ctx: &mut Ctx, noises: &[String], out: &mut Outputs) -> Result<bool> {
    let section = ctx.cfg.as_ref().and_then(|c| c.concentration.clone());
    let noises: Vec<String> = if !noises.is_empty() {
        noises.to_vec()
    } else if let Some(list) = section.as_ref().and_then(|s| s.noises.clone()) {
        list
    } else {
        bail!("conc-check needs --noise or [concentration].noises")
    };
    let dim = match &ctx.cfg {
        Some(c) => make_drift(&c.scenario)?.dim(),
        None => 1,
    };
    let trials = ctx.trials.map(|t| t as u64).or(section.as_ref().map(|s| s.trials)).unwrap_or(DEFAULT_CONC_TRIALS);
    let weights = section.map(|s| s.weights).unwrap_or_default();
    let mut entries = Vec::with_capacity(noises.len());
    for text in &noises {
        let spec = NoiseSpec::parse(text).with_context(|| format!("--noise {text}"))?;
        let noise = NoiseModel::new(spec.clone(), dim)?;
        let (params, rows) = geometric_domination(&noise, &weights, trials, ctx.seed, ctx.workers)?;
        let dominated = rows.iter().all(|r| r.dominated);
        let active = rows.iter().filter(|r| r.active).count();
        out.csv(&format!("conc_check_{}.csv", slug(text)), DominationRow::CSV_HEADER, rows.iter().map(DominationRow::csv_row))?;
        ctx.note(format!(
            "concentration {text}: {} of {active} active grid points dominated, {}",
            rows.iter().filter(|r| r.active && r.dominated).count(),
            if dominated { "PASS" } else { "FAIL" }
        ));
        entries.push(ConcEntry { noise: spec, weights: weights.clone(), trials, params, dominated, rows });
    }
    out.json("conc_check.json", &entries)?;
    Ok(entries.iter().all(|e| e.dominated))
}

#[derive(Serialize)]
struct OrderEntry {
    mu: f64,
    lambda: f64,
    c: f64,
    rows: Vec<OrderRow>,
    /// Relative change of the ratio between consecutive `n0`.
    ratio_changes: Vec<f64>,
}

fn run_order_study(
    ctx: &mut Ctx,
    mus: &[f64],
    c: Option<f64>,
    lambda: Option<f64>,
    n0s: &[usize],
    out: &mut Outputs,
) -> Result<bool> {
    let section = ctx.cfg.as_ref().and_then(|cfg| cfg.order_study.clone());
    let schedule_mu = ctx.cfg.as_ref().and_then(|cfg| cfg.mu());
    let mus: Vec<f64> = if !mus.is_empty() {
        mus.to_vec()
    } else if let Some(list) = section.as_ref().and_then(|s| s.mus.clone()) {
        list
    } else {
        schedule_mu.map(|m| vec![m]).context("order-study needs --mu or [order_study].mus")?
    };
    let n0s: Vec<usize> = if !n0s.is_empty() {
        n0s.to_vec()
    } else {
        section.as_ref().map(|s| s.n0.clone()).context("order-study needs --n0 or [order_study].n0")?
    };
    let c = c.or(section.as_ref().map(|s| s.c)).unwrap_or(1.0);
    let lambda = lambda.or(section.as_ref().map(|s| s.lambda)).unwrap_or(1.0);
    let mut entries = Vec::with_capacity(mus.len());
    for mu in mus {
        let rows = order_study(mu, lambda, c, &n0s)?;
        let ratio_changes: Vec<f64> = rows.windows(2).map(|w| relative_change(w[0].ratio, w[1].ratio)).collect();
        out.csv(&format!("order_study_mu{mu}.csv"), OrderRow::CSV_HEADER, rows.iter().map(OrderRow::csv_row))?;
        for (w, ch) in rows.windows(2).zip(&ratio_changes) {
            ctx.note(format!("order mu={mu}: ratio {} -> {} (n0 {} -> {}), change {ch}", w[0].ratio, w[1].ratio, w[0].n0, w[1].n0));
        }
        entries.push(OrderEntry { mu, lambda, c, rows, ratio_changes });
    }
    out.json("order_study.json", &entries)?;
    Ok(true)
}
