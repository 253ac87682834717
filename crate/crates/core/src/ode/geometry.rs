use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::lyapunov::{lyapunov_residual, solve_lyapunov};
use super::spectral::SpectralData;
use crate::error::{Error, Result};
use crate::io;
use crate::model::{DriftFunction, Matrix, RngStream, Vector};

/// Tunables for the level-set search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeometryOptions {
    /// Starting value of `r` for the shrinking search.
    pub r_cap: f64,
    pub shrink: f64,
    pub max_shrinks: usize,
    /// `r0 = r0_fraction * r`.
    pub r0_fraction: f64,
    /// `B = V^{b_fraction * r0}`.
    pub b_fraction: f64,
    pub shell_samples: usize,
    pub seed: u64,
}

impl Default for GeometryOptions {
    fn default() -> Self {
        GeometryOptions {
            r_cap: 1.0,
            shrink: 0.7,
            max_shrinks: 80,
            r0_fraction: 0.25,
            b_fraction: 0.5,
            shell_samples: 200,
            seed: 0x5eed,
        }
    }
}

/// Quadratic Lyapunov function `V(x) = (x - x*)^T P (x - x*)` and its nested level sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionGeometry {
    #[serde(with = "io::vector")]
    pub x_star: Vector,
    #[serde(with = "io::matrix_rows")]
    pub p: Matrix,
    pub r: f64,
    pub r0: f64,
    pub eps0: f64,
    /// The start set `B` is `{V <= b_radius_v}`.
    pub b_radius_v: f64,
    /// `sup_{V(x) <= r} ||x - x*||`.
    pub big_r: f64,
    pub p_eig_min: f64,
    pub p_eig_max: f64,
    /// Largest `epsilon` for which the nesting holds with these radii.
    pub eps_max: f64,
    pub lyapunov_residual: f64,
    #[serde(with = "io::matrix_rows")]
    p_inv_sqrt: Matrix,
}

impl RegionGeometry {
    pub fn v(&self, x: &Vector) -> f64 {
        let e = x - &self.x_star;
        (e.transpose() * &self.p * &e)[(0, 0)]
    }

    pub fn grad_v(&self, x: &Vector) -> Vector {
        (&self.p * (x - &self.x_star)) * 2.0
    }

    /// Point with `V = level` in unit direction `u`.
    pub fn point_on_level(&self, level: f64, u: &Vector) -> Vector {
        &self.x_star + &self.p_inv_sqrt * u * level.sqrt()
    }

    /// Uniform draw from `{V <= level}`.
    pub fn sample_sublevel(&self, level: f64, rng: &mut RngStream) -> Vector {
        let d = self.x_star.len();
        let u = random_direction(d, rng);
        let radius: f64 = rng.random::<f64>().powf(1.0 / d as f64);
        &self.x_star + &self.p_inv_sqrt * u * (radius * level.sqrt())
    }

    /// Radius of the largest ball around `x*` inside `{V <= level}`.
    pub fn inner_radius(&self, level: f64) -> f64 {
        (level / self.p_eig_max).sqrt()
    }

    /// Radius of the smallest ball around `x*` containing `{V <= level}`.
    pub fn outer_radius(&self, level: f64) -> f64 {
        (level / self.p_eig_min).sqrt()
    }

    pub fn in_start_set(&self, x: &Vector) -> bool {
        self.v(x) <= self.b_radius_v
    }
}

pub fn random_direction(d: usize, rng: &mut RngStream) -> Vector {
    loop {
        let g = Vector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = g.norm();
        if n > 1e-12 {
            return g / n;
        }
    }
}

/// Geometry with default options.
pub fn build_region_geometry(drift: &DriftFunction, spec: &SpectralData, eps: f64) -> Result<RegionGeometry> {
    build_region_geometry_with(drift, spec, eps, &GeometryOptions::default())
}

/// Shrink `r` from the cap until `grad V . h < 0` on sampled shell points, then nest `r0`, `B` and `eps0`.
pub fn build_region_geometry_with(
    drift: &DriftFunction,
    spec: &SpectralData,
    eps: f64,
    opts: &GeometryOptions,
) -> Result<RegionGeometry> {
    if !(eps > 0.0) {
        return Err(Error::InvalidParameter(format!("eps must be positive, got {eps}")));
    }
    if !(opts.r_cap > 0.0 && opts.shrink > 0.0 && opts.shrink < 1.0) {
        return Err(Error::InvalidParameter("r_cap must be positive and shrink in (0,1)".into()));
    }
    if !(opts.r0_fraction > 0.0 && opts.r0_fraction < 1.0 && opts.b_fraction > 0.0 && opts.b_fraction <= 1.0) {
        return Err(Error::InvalidParameter("r0_fraction must lie in (0,1) and b_fraction in (0,1]".into()));
    }
    let a = &spec.jacobian_at_star;
    let p = solve_lyapunov(a)?;
    let eig = p.clone().symmetric_eigen();
    let p_eig_min = eig.eigenvalues.min();
    let p_eig_max = eig.eigenvalues.max();
    let p_inv_sqrt = &eig.eigenvectors
        * Matrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()))
        * eig.eigenvectors.transpose();

    let mut geom = RegionGeometry {
        x_star: spec.x_star.clone(),
        lyapunov_residual: lyapunov_residual(a, &p),
        p,
        r: opts.r_cap,
        r0: 0.0,
        eps0: 0.0,
        b_radius_v: 0.0,
        big_r: 0.0,
        p_eig_min,
        p_eig_max,
        eps_max: 0.0,
        p_inv_sqrt,
    };

    let mut shrinks = 0;
    loop {
        geom.r0 = opts.r0_fraction * geom.r;
        if shell_is_descending(drift, &geom, opts) {
            break;
        }
        shrinks += 1;
        if shrinks > opts.max_shrinks {
            return Err(Error::NoAdmissibleRadius(opts.max_shrinks));
        }
        geom.r *= opts.shrink;
    }
    geom.b_radius_v = opts.b_fraction * geom.r0;
    geom.big_r = geom.outer_radius(geom.r);
    geom.eps0 = geom.inner_radius(geom.r) - geom.outer_radius(geom.r0);
    if geom.eps0 <= 0.0 {
        return Err(Error::InvalidParameter(
            "P is too anisotropic for the chosen r0 fraction; the fattened set leaves V^r".into(),
        ));
    }
    geom.eps_max = geom.eps0.min(geom.inner_radius(geom.b_radius_v));
    if eps > geom.eps_max {
        return Err(Error::EpsilonTooLarge { eps, max: geom.eps_max });
    }
    Ok(geom)
}

/// `grad V . h < 0` on stratified shell samples with antithetic directions.
fn shell_is_descending(drift: &DriftFunction, geom: &RegionGeometry, opts: &GeometryOptions) -> bool {
    let d = geom.x_star.len();
    let mut rng = RngStream::new(opts.seed, 0);
    let lo = 0.5 * geom.r0;
    let mut u = random_direction(d, &mut rng);
    (0..opts.shell_samples).all(|i| {
        if i % 2 == 0 {
            u = random_direction(d, &mut rng);
        } else {
            u = -&u;
        }
        let level = lo + (geom.r - lo) * ((i / 2) % 10) as f64 / 9.0;
        let x = geom.point_on_level(level, &u);
        let h = drift.eval(&x);
        geom.grad_v(&x).dot(&h) < 0.0
    })
}
