//! Stochastic approximation iterates and their piecewise-linear interpolation.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::model::{DriftFunction, NoiseModel, RngStream, StepSchedule, Vector};

/// Norm beyond which a run is declared divergent.
pub const DIVERGENCE_NORM: f64 = 1e12;

/// A stored run `x_{n_start}, ..., x_{n_end}` with the noises that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub schedule: StepSchedule,
    pub n_start: usize,
    /// `a_n` for `n in n_start..n_end`.
    pub steps: Vec<f64>,
    /// `t_n` for `n in n_start..=n_end`.
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
    /// `noises[i]` is `M_{n_start + i + 1}`.
    pub noises: Vec<Vector>,
    /// Index of the first non-finite or exploding state, if the run was cut short.
    pub diverged_at: Option<usize>,
}

/// `x + a (h + m)`, shared by the generator and the replay check.
fn sa_step(x: &Vector, a: f64, hx: &Vector, m: &Vector) -> Vector {
    x + (hx + m) * a
}

/// Iterate `x_{n+1} = x_n + a_n (h(x_n) + M_{n+1})` for `n_steps` steps from index `n_start`.
pub fn run_sa(
    drift: &DriftFunction,
    schedule: &StepSchedule,
    noise: &NoiseModel,
    x0: &Vector,
    n_start: usize,
    n_steps: usize,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    if n_steps == 0 {
        return Err(Error::InvalidParameter("n_steps must be at least 1".into()));
    }
    if x0.len() != drift.dim() {
        return Err(Error::DimensionMismatch { expected: drift.dim(), got: x0.len() });
    }
    if noise.dim != drift.dim() {
        return Err(Error::DimensionMismatch { expected: drift.dim(), got: noise.dim });
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("initial state is not finite".into()));
    }
    let mut t = schedule.time_of(n_start);
    let mut traj = Trajectory {
        schedule: schedule.clone(),
        n_start,
        steps: Vec::with_capacity(n_steps),
        times: Vec::with_capacity(n_steps + 1),
        states: Vec::with_capacity(n_steps + 1),
        noises: Vec::with_capacity(n_steps),
        diverged_at: None,
    };
    traj.times.push(t);
    traj.states.push(x0.clone());
    let mut x = x0.clone();
    for n in n_start..n_start + n_steps {
        let a = schedule.step_at(n);
        let m = noise.sample(&x, rng);
        let next = sa_step(&x, a, &drift.eval(&x), &m);
        if next.iter().any(|v| !v.is_finite()) || next.norm() > DIVERGENCE_NORM {
            traj.diverged_at = Some(n + 1);
            break;
        }
        t += a;
        traj.steps.push(a);
        traj.times.push(t);
        traj.noises.push(m);
        traj.states.push(next.clone());
        x = next;
    }
    Ok(traj)
}

impl Trajectory {
    pub fn n_end(&self) -> usize {
        self.n_start + self.states.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn state(&self, n: usize) -> &Vector {
        &self.states[n - self.n_start]
    }

    pub fn time(&self, n: usize) -> f64 {
        self.times[n - self.n_start]
    }

    pub fn step(&self, n: usize) -> f64 {
        self.steps[n - self.n_start]
    }

    /// `M_{n+1}`.
    pub fn noise_after(&self, n: usize) -> Result<&Vector> {
        n.checked_sub(self.n_start)
            .and_then(|i| self.noises.get(i))
            .ok_or(Error::MissingNoise(n + 1))
    }

    /// Interval index `n` with `t in [t_n, t_{n+1}]`.
    pub fn interval_of(&self, t: f64) -> Result<usize> {
        let lo = self.times[0];
        let hi = *self.times.last().unwrap();
        if !(t >= lo && t <= hi) {
            return Err(Error::OutOfRange { t, lo, hi });
        }
        let i = self.times.partition_point(|s| *s <= t);
        Ok(self.n_start + i.saturating_sub(1).min(self.steps.len().saturating_sub(1)))
    }

    /// `x_bar(t)`, exact at grid times.
    pub fn interpolate(&self, t: f64) -> Result<Vector> {
        let n = self.interval_of(t)?;
        let i = n - self.n_start;
        if t == self.times[i] {
            return Ok(self.states[i].clone());
        }
        if i + 1 < self.times.len() && t == self.times[i + 1] {
            return Ok(self.states[i + 1].clone());
        }
        Ok(self.interpolate_in(n, (t - self.times[i]) / self.steps[i]))
    }

    /// Point at fraction `theta` of the segment `[x_n, x_{n+1}]`.
    pub fn interpolate_in(&self, n: usize, theta: f64) -> Vector {
        let i = n - self.n_start;
        let x0 = &self.states[i];
        x0 + (&self.states[i + 1] - x0) * theta
    }

    /// Recompute every step and compare bitwise.
    pub fn replay_check(&self, drift: &DriftFunction) -> bool {
        self.noises.len() + 1 == self.states.len()
            && (0..self.noises.len()).all(|i| {
                let x = &self.states[i];
                sa_step(x, self.steps[i], &drift.eval(x), &self.noises[i]) == self.states[i + 1]
            })
    }

    /// Columns `n, t_n, a_n, x_1..x_d, M_1..M_d`; the last row has empty step and noise cells.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let d = self.dim();
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["n".to_string(), "t_n".into(), "a_n".into()];
        header.extend((1..=d).map(|j| format!("x_{j}")));
        header.extend((1..=d).map(|j| format!("M_{j}")));
        out.write_record(&header)?;
        for (i, x) in self.states.iter().enumerate() {
            let mut row = vec![(self.n_start + i).to_string(), fmt_f64(self.times[i])];
            row.push(self.steps.get(i).map_or(String::new(), |a| fmt_f64(*a)));
            row.extend(x.iter().map(|v| fmt_f64(*v)));
            match self.noises.get(i) {
                Some(m) => row.extend(m.iter().map(|v| fmt_f64(*v))),
                None => row.extend(std::iter::repeat_n(String::new(), d)),
            }
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Inverse of [`Trajectory::write_csv`].
    pub fn read_csv<R: Read>(r: R, schedule: &StepSchedule) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let d = (rdr.headers()?.len() - 3) / 2;
        let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Io(format!("bad number `{s}`: {e}")));
        let mut traj = Trajectory {
            schedule: schedule.clone(),
            n_start: 0,
            steps: vec![],
            times: vec![],
            states: vec![],
            noises: vec![],
            diverged_at: None,
        };
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if i == 0 {
                traj.n_start = rec[0].parse().map_err(|e| Error::Io(format!("bad index: {e}")))?;
            }
            traj.times.push(parse(&rec[1])?);
            if !rec[2].is_empty() {
                traj.steps.push(parse(&rec[2])?);
            }
            let x: Result<Vec<f64>> = (0..d).map(|j| parse(&rec[3 + j])).collect();
            traj.states.push(Vector::from_vec(x?));
            if !rec[3 + d].is_empty() {
                let m: Result<Vec<f64>> = (0..d).map(|j| parse(&rec[3 + d + j])).collect();
                traj.noises.push(Vector::from_vec(m?));
            }
        }
        if traj.states.is_empty() {
            return Err(Error::Io("empty trajectory file".into()));
        }
        Ok(traj)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_drift, NoiseSpec, ScenarioSpec, ScheduleSpec};

    fn lin() -> DriftFunction {
        make_drift(&ScenarioSpec::Linear1d { rate: 1.0 }).unwrap()
    }

    fn v(x: f64) -> Vector {
        Vector::from_element(1, x)
    }

    #[test]
    fn single_deterministic_step() {
        let s = StepSchedule::new(ScheduleSpec::ExplicitList { values: vec![0.5] }).unwrap();
        let z = NoiseModel::new(NoiseSpec::Zero, 1).unwrap();
        let tr = run_sa(&lin(), &s, &z, &v(1.0), 0, 1, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(tr.states[1][0], 0.5);
    }

    #[test]
    fn fixed_point_stays_put() {
        let dw = make_drift(&ScenarioSpec::DoubleWell1d).unwrap();
        let s = StepSchedule::power(1.0).unwrap();
        let z = NoiseModel::new(NoiseSpec::Zero, 1).unwrap();
        let tr = run_sa(&dw, &s, &z, &v(1.0), 0, 50, &mut RngStream::new(0, 0)).unwrap();
        assert!(tr.states.iter().all(|x| x[0] == 1.0));
    }

    #[test]
    fn independent_recomputation() {
        let s = StepSchedule::power(1.0).unwrap();
        let noise = NoiseModel::new(NoiseSpec::Laplace { scale: 0.1 }, 1).unwrap();
        let tr = run_sa(&lin(), &s, &noise, &v(1.0), 0, 100, &mut RngStream::new(42, 0)).unwrap();
        let mut rng = RngStream::new(42, 0);
        let mut x = 1.0f64;
        for n in 0..100 {
            let m = noise.sample(&v(x), &mut rng)[0];
            x += (-x + m) / (n as f64 + 1.0);
        }
        assert!((tr.states[100][0] - x).abs() < 1e-14);
        assert!(tr.replay_check(&lin()));
        assert_eq!(tr.noises.len() + 1, tr.states.len());
        let again = run_sa(&lin(), &s, &noise, &v(1.0), 0, 100, &mut RngStream::new(42, 0)).unwrap();
        assert_eq!(tr, again);
    }

    #[test]
    fn interpolation() {
        let s = StepSchedule::power(1.0).unwrap();
        let noise = NoiseModel::new(NoiseSpec::Laplace { scale: 0.5 }, 1).unwrap();
        let mut tr = run_sa(&lin(), &s, &noise, &v(1.0), 0, 6, &mut RngStream::new(3, 0)).unwrap();
        for n in 0..=6 {
            assert_eq!(tr.interpolate(tr.time(n)).unwrap(), *tr.state(n));
        }
        tr.states[2] = v(0.0);
        tr.states[3] = v(1.0);
        let mid = 0.5 * (tr.time(2) + tr.time(3));
        assert!((tr.interpolate(mid).unwrap()[0] - 0.5).abs() < 1e-15);
        assert!(tr.interpolate(tr.time(6) + 1e-9).is_err());
        assert!(tr.interpolate(-1.0).is_err());
    }

    #[test]
    fn interpolant_is_linear_between_grid_points() {
        let s = StepSchedule::power(0.6).unwrap();
        let noise = NoiseModel::new(NoiseSpec::Laplace { scale: 0.5 }, 1).unwrap();
        let tr = run_sa(&lin(), &s, &noise, &v(2.0), 4, 20, &mut RngStream::new(8, 0)).unwrap();
        for n in 4..24 {
            let (a, b) = (tr.time(n), tr.time(n + 1));
            let xs: Vec<f64> = (0..=8).map(|j| tr.interpolate(a + (b - a) * j as f64 / 8.0).unwrap()[0]).collect();
            for j in 1..8 {
                let chord = 0.5 * (xs[j - 1] + xs[j + 1]);
                assert!((xs[j] - chord).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn divergence_is_flagged() {
        let grow = DriftFunction::custom(1, "blowup", |x| x.map(|u| u * u * u), None);
        let s = StepSchedule::power(1.0).unwrap();
        let z = NoiseModel::new(NoiseSpec::Zero, 1).unwrap();
        let tr = run_sa(&grow, &s, &z, &v(10.0), 0, 100, &mut RngStream::new(0, 0)).unwrap();
        assert!(tr.diverged_at.is_some());
        assert_eq!(tr.noises.len() + 1, tr.states.len());
        assert!(tr.states.iter().all(|x| x[0].is_finite()));
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let s = StepSchedule::power(1.0).unwrap();
        let noise = NoiseModel::new(NoiseSpec::Laplace { scale: 0.1 }, 1).unwrap();
        let tr = run_sa(&lin(), &s, &noise, &v(1.0), 3, 30, &mut RngStream::new(1, 0)).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let back = Trajectory::read_csv(buf.as_slice(), &s).unwrap();
        assert_eq!(tr, back);
        assert!(back.replay_check(&lin()));
    }
}
