//! One pass/fail line per acceptance criterion. Exits nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;
use serde_json::Value;

use lockin_cli::{Cli, Command};
use lockin_core::bound::{beta_closed_form_start, beta_direct, beta_sequence, BetaIter};
use lockin_core::conc::{empirical_tail_grid, Weights};
use lockin_core::experiment::prepare;
use lockin_core::model::{make_drift, NoiseModel, NoiseSpec, RngStream, StepSchedule, Vector};
use lockin_core::ode::{lyapunov_residual, replay_envelopes, sample_pairs, solve_lyapunov, WINDOW_RATES};

const IDENTITY_TOL: f64 = 1e-5;
const ZERO_NOISE_TOL: f64 = 1e-7;
const DECOMPOSITION_SECS: f64 = 60.0;
const LYAPUNOV_TOL: f64 = 1e-10;
const ENVELOPE_INFLATION: f64 = 1.2;
const ENVELOPE_PAIRS: usize = 50;
const BETA_N_MAX: usize = 100_000;
const BETA_TUPLES: usize = 1000;
const BETA_TOL: f64 = 1e-14;
const ORDER_CHANGE: f64 = 0.10;
const ORDER_SECS: f64 = 120.0;
const KC_LEVEL: f64 = 0.99;
const KC_SECS: f64 = 600.0;

fn cli(config: &str, out_dir: &Path, workers: usize, command: Command) -> Cli {
    Cli {
        config: Some(PathBuf::from(config)),
        seed: None,
        workers: Some(workers),
        out_dir: Some(out_dir.to_path_buf()),
        horizon: None,
        trials: None,
        command,
    }
}

struct Lab {
    root: PathBuf,
    configs: PathBuf,
}

impl Lab {
    fn config(&self, name: &str) -> String {
        self.configs.join(format!("{name}.toml")).to_string_lossy().into_owned()
    }

    fn dir(&self, name: &str, tag: &str) -> PathBuf {
        self.root.join(name).join(tag)
    }

    /// `run` on a shipped config; returns `(all checks held, seconds)`.
    fn run(&self, name: &str, tag: &str, workers: usize) -> Result<(bool, f64), String> {
        let dir = self.dir(name, tag);
        let start = Instant::now();
        let outcome = lockin_cli::execute(&cli(&self.config(name), &dir, workers, Command::Run { path: None })).map_err(|e| format!("{name}: {e:#}"))?;
        Ok((outcome.ok, start.elapsed().as_secs_f64()))
    }

    fn json(&self, name: &str, tag: &str, file: &str) -> Result<Value, String> {
        let path = self.dir(name, tag).join(file);
        let bytes = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_slice(&bytes).map_err(|e| format!("{}: {e}", path.display()))
    }
}

type Check = Result<(bool, String), String>;
type Criterion = (u8, &'static str, fn(&Lab) -> Check);

fn f(v: &Value) -> f64 {
    v.as_f64().unwrap_or(f64::NAN)
}

fn decomposition(lab: &Lab) -> Check {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["crit1_linear", "crit1_double_well"] {
        let (_, secs) = lab.run(name, "w1a", 1)?;
        let laplace = f(&lab.json(name, "w1a", "decomposition.json")?["identity"]["residual"]);
        let dir = lab.dir(name, "zero");
        let start = Instant::now();
        lockin_cli::execute(&cli(&lab.config(name), &dir, 1, Command::VerifyDecomposition { noise: Some("zero".into()) })).map_err(|e| format!("{e:#}"))?;
        let secs_zero = start.elapsed().as_secs_f64();
        let zero = f(&lab.json(name, "zero", "decomposition.json")?["identity"]["residual"]);
        ok &= laplace <= IDENTITY_TOL && zero <= ZERO_NOISE_TOL && secs <= DECOMPOSITION_SECS && secs_zero <= DECOMPOSITION_SECS;
        parts.push(format!("{name}: residual {laplace:.2e} (Laplace 0.1), {zero:.2e} (zero noise), {:.1} s", secs + secs_zero));
    }
    Ok((ok, parts.join("; ")))
}

fn lyapunov(_lab: &Lab) -> Check {
    let cases = [
        (make_drift(&lockin_core::model::ScenarioSpec::Linear1d { rate: 1.0 }), vec![0.0]),
        (make_drift(&lockin_core::model::ScenarioSpec::DoubleWell1d), vec![1.0]),
        (make_drift(&lockin_core::model::ScenarioSpec::Spiral2d { sigma: 1.0, omega: 2.0 }), vec![0.0, 0.0]),
    ];
    let mut ok = true;
    let mut worst: f64 = 0.0;
    let mut scalar_p = f64::NAN;
    for (drift, x) in cases {
        let drift = drift.map_err(|e| e.to_string())?;
        let a = drift.jacobian(&Vector::from_vec(x));
        let p = solve_lyapunov(&a).map_err(|e| e.to_string())?;
        let res = lyapunov_residual(&a, &p);
        let min_eig = p.clone().symmetric_eigen().eigenvalues.min();
        ok &= res <= LYAPUNOV_TOL && min_eig > 0.0;
        worst = worst.max(res);
        if drift.dim() == 1 && a[(0, 0)] == -1.0 {
            scalar_p = p[(0, 0)];
        }
    }
    ok &= scalar_p == 0.5;
    Ok((ok, format!("max residual {worst:.2e} over 3 Jacobians, all P positive definite, P(-1) = {scalar_p}")))
}

fn envelopes(lab: &Lab) -> Check {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["crit1_linear", "crit1_double_well", "crit2_spiral"] {
        let cfg = lockin_cli::ExperimentConfig::load(Path::new(&lab.config(name))).map_err(|e| format!("{e:#}"))?.0;
        let prep = prepare(&cfg.setup()).map_err(|e| e.to_string())?;
        let fit = &prep.envelope;
        let fresh = sample_pairs(&prep.geometry, ENVELOPE_PAIRS, &mut RngStream::new(cfg.seed, u64::MAX - 1));
        let replay = replay_envelopes(&prep.drift, fit, &fresh, ENVELOPE_INFLATION, prep.setup.ode_tol).map_err(|e| e.to_string())?;
        let finite = [fit.k1, fit.k3, fit.k4].iter().all(|k| k.is_finite());
        ok &= finite && fit.pairs == ENVELOPE_PAIRS && replay.pass_rate() == 1.0;
        parts.push(format!(
            "{}: K1 {:.3} K3 {:.3} K4 {:.3}, replay {}/{}",
            prep.drift.label(),
            fit.k1,
            fit.k3,
            fit.k4,
            replay.passed,
            replay.checked
        ));
    }
    Ok((ok, format!("window {WINDOW_RATES}/lambda, inflation {ENVELOPE_INFLATION}; {}", parts.join("; "))))
}

fn beta_closed_forms(_lab: &Lab) -> Check {
    let one = StepSchedule::power(1.0).map_err(|e| e.to_string())?;
    let n0_one = beta_closed_form_start(&one, 2.0, BETA_N_MAX);
    let mut ok = n0_one < BETA_N_MAX;
    for n0 in [n0_one, n0_one + 1, n0_one + 17, 1000, 50_000].into_iter().filter(|&n0| n0 < BETA_N_MAX) {
        for (n, b) in BetaIter::new(&one, 2.0, n0).take(BETA_N_MAX - n0) {
            ok &= b == 1.0 / n as f64;
        }
    }
    let half = StepSchedule::power(0.5).map_err(|e| e.to_string())?;
    let n0_half = beta_closed_form_start(&half, 0.45, BETA_N_MAX);
    ok &= n0_half < BETA_N_MAX;
    for n0 in [n0_half, 3 * n0_half + 5, 10_000, 50_000].into_iter().filter(|&n0| n0 < BETA_N_MAX) {
        for (n, b) in BetaIter::new(&half, 0.45, n0).take(BETA_N_MAX - n0) {
            ok &= b == half.step_at(n - 1) && (b - (n as f64).powf(-0.5)).abs() <= 1e-16;
        }
    }
    let mut rng = RngStream::new(4, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..BETA_TUPLES {
        let mu = rng.random_range(0.05..=1.0);
        let lambda = rng.random_range(0.01..5.0);
        let n0 = rng.random_range(0..1000usize);
        let n = n0 + rng.random_range(1..2000usize);
        let s = StepSchedule::power(mu).map_err(|e| e.to_string())?;
        let rec = *beta_sequence(&s, lambda, n0, n).map_err(|e| e.to_string())?.last().unwrap();
        worst = worst.max((rec - beta_direct(&s, lambda, n0, n)).abs());
    }
    ok &= worst <= BETA_TOL;
    Ok((
        ok,
        format!("N0 = {n0_one} (mu 1, lambda 2), N0 = {n0_half} (mu 0.5, lambda 0.45), checked to n = {BETA_N_MAX}; recurrence vs direct max {worst:.1e} over {BETA_TUPLES} tuples"),
    ))
}

fn order_estimates(lab: &Lab) -> Check {
    let (_, secs) = lab.run("crit5_order", "w1a", 1)?;
    let study = lab.json("crit5_order", "w1a", "order_study.json")?;
    let mut ok = secs <= ORDER_SECS;
    let mut parts = Vec::new();
    for e in study.as_array().ok_or("order_study.json is not a list")? {
        let change = f(&e["ratio_changes"][0]);
        let rows = &e["rows"];
        ok &= change <= ORDER_CHANGE;
        parts.push(format!("mu {}: ratio {:.4} -> {:.4}, change {:.1}%", e["mu"], f(&rows[0]["ratio"]), f(&rows[1]["ratio"]), 100.0 * change));
    }
    Ok((ok, format!("{} (limit {}%), {secs:.1} s", parts.join("; "), 100.0 * ORDER_CHANGE)))
}

fn concentration(lab: &Lab) -> Check {
    let (_, _) = lab.run("crit6_concentration", "w1a", 1)?;
    let entries = lab.json("crit6_concentration", "w1a", "conc_check.json")?;
    let mut ok = true;
    let mut parts = Vec::new();
    for e in entries.as_array().ok_or("conc_check.json is not a list")? {
        let rows = e["rows"].as_array().ok_or("rows")?;
        let active: Vec<&Value> = rows.iter().filter(|r| r["active"] == true).collect();
        let dominated = active.iter().filter(|r| f(&r["wilson_hi"]) <= f(&r["bound"])).count();
        ok &= active.len() == 20 && dominated == active.len() && e["trials"] == 100_000;
        parts.push(format!("{}: {dominated}/{} dominated", e["noise"]["kind"].as_str().unwrap_or("?"), active.len()));
    }
    let noise = NoiseModel::new(NoiseSpec::Laplace { scale: 1.0 }, 1).map_err(|e| e.to_string())?;
    let xis = [0.5, 1.0, 2.0, 3.0, 4.0, 5.0];
    let tails = empirical_tail_grid(&Weights::scalar(&[1.0], 1), &noise, &xis, 100_000, 6, 1).map_err(|e| e.to_string())?;
    let inside = tails.iter().filter(|t| t.wilson_lo <= (-t.xi).exp() && (-t.xi).exp() <= t.wilson_hi).count();
    ok &= inside == xis.len();
    parts.push(format!("single Laplace term e^-xi inside the Wilson interval at {inside}/{} points", xis.len()));
    Ok((ok, parts.join("; ")))
}

fn lockin_validity(lab: &Lab) -> Check {
    let (_, secs) = lab.run("crit7_lockin", "w1a", 1)?;
    let entries = lab.json("crit7_lockin", "w1a", "lockin.json")?;
    let bound = lab.json("crit7_lockin", "w1a", "bound_report.json")?;
    let e = &entries[0];
    let est = &e["estimate"];
    let v = &e["verdict"];
    let same_t = f(&est["T"]) == f(&bound["T"]);
    let ok = v["pass"] == true && same_t && est["trials_total"] == 10_000 && est["n0"] == 200 && f(&est["eps"]) == 0.3;
    Ok((
        ok,
        format!(
            "p_hat {} (Wilson lower {:.5}) vs bound {} with K = {}, T = {:.4}{}, {secs:.1} s",
            est["p_hat"],
            f(&est["wilson_lo"]),
            v["theoretical_lower"],
            bound["K"],
            f(&bound["T"]),
            if v["vacuous"] == true { ", bound vacuous" } else { "" }
        ),
    ))
}

fn kushner_clark(lab: &Lab) -> Check {
    let (_, secs) = lab.run("crit8_kushner_clark", "w1a", 1)?;
    let entries = lab.json("crit8_kushner_clark", "w1a", "lockin.json")?;
    let list = entries.as_array().ok_or("lockin.json is not a list")?;
    let p: Vec<f64> = list.iter().map(|e| f(&e["estimate"]["p_hat"])).collect();
    let n0s: Vec<u64> = list.iter().map(|e| e["estimate"]["n0"].as_u64().unwrap_or(0)).collect();
    let increasing = p.windows(2).all(|w| w[1] > w[0]);
    let ok = n0s == [50, 200, 800] && increasing && p.last().is_some_and(|x| *x > KC_LEVEL) && secs <= KC_SECS;
    Ok((ok, format!("lock-in frequency {p:?} at n0 {n0s:?}, {secs:.1} s")))
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).into_iter().flatten().flatten() {
        out.insert(e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap_or_default());
    }
    out
}

fn determinism(lab: &Lab) -> Check {
    let names = ["crit1_linear", "crit1_double_well", "crit2_spiral", "crit5_order", "crit6_concentration", "crit7_lockin", "crit8_kushner_clark"];
    let mut ok = true;
    let mut compared = 0;
    let mut bad = Vec::new();
    for name in names {
        if !lab.dir(name, "w1a").exists() {
            lab.run(name, "w1a", 1)?;
        }
        lab.run(name, "w1b", 1)?;
        lab.run(name, "w4", 4)?;
        let a = files(&lab.dir(name, "w1a"));
        let same = a.len() > 1 && ["w1b", "w4"].iter().all(|tag| files(&lab.dir(name, tag)) == a);
        compared += a.len();
        if !same {
            ok = false;
            bad.push(name);
        }
    }
    let detail = if ok {
        format!("{compared} artifacts from {} configs identical over runs (workers 1, 1, 4)", names.len())
    } else {
        format!("differences in {bad:?}")
    };
    Ok((ok, detail))
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let lab = Lab {
        root: tmp.path().to_path_buf(),
        configs: Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs"),
    };
    let criteria: [Criterion; 9] = [
        (1, "decomposition identity", decomposition),
        (2, "Lyapunov equation", lyapunov),
        (3, "envelope constants", envelopes),
        (4, "beta closed forms", beta_closed_forms),
        (5, "order estimates", order_estimates),
        (6, "concentration domination", concentration),
        (7, "lock-in bound validity", lockin_validity),
        (8, "lock-in under non-square-summable steps", kushner_clark),
        (9, "determinism", determinism),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        let (pass, detail) = check(&lab).unwrap_or_else(|e| (false, format!("error: {e}")));
        failed += usize::from(!pass);
        println!("{} criterion {id} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        std::io::stdout().flush().ok();
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
