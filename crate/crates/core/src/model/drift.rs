use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

type EvalFn = Arc<dyn Fn(&Vector) -> Vector + Send + Sync>;
type JacFn = Arc<dyn Fn(&Vector) -> Matrix + Send + Sync>;

/// One monomial `coeff * prod_j x_j^powers[j]` contributing to component `component`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyTerm {
    pub component: usize,
    pub coeff: f64,
    pub powers: Vec<u32>,
}

/// Declarative description of a drift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "drift", rename_all = "kebab-case")]
pub enum ScenarioSpec {
    /// h(x) = -rate * x
    #[serde(rename = "linear-1d")]
    Linear1d { rate: f64 },
    /// h(x) = x - x^3
    #[serde(rename = "double-well-1d")]
    DoubleWell1d,
    /// h(x) = A x with A = [[-sigma, omega], [-omega, -sigma]]
    #[serde(rename = "spiral-2d")]
    Spiral2d { sigma: f64, omega: f64 },
    /// Scalar polynomial h(x) = sum_i coeffs[i] x^i.
    Polynomial { coeffs: Vec<f64> },
    /// Affine map h(x) = A x + b, rows of A given explicitly.
    Linear {
        matrix: Vec<Vec<f64>>,
        #[serde(default)]
        offset: Vec<f64>,
    },
    /// Multivariate polynomial table.
    Table { dim: usize, terms: Vec<PolyTerm> },
}

impl ScenarioSpec {
    /// Built-in scenario by name with its default parameters.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "linear-1d" => Ok(Self::Linear1d { rate: 1.0 }),
            "double-well-1d" => Ok(Self::DoubleWell1d),
            "spiral-2d" => Ok(Self::Spiral2d { sigma: 1.0, omega: 2.0 }),
            other => Err(Error::UnknownScenario(other.to_string())),
        }
    }
}

#[derive(Clone)]
enum Kind {
    Affine { a: Matrix, b: Vector },
    DoubleWell,
    Table(Vec<PolyTerm>),
    Custom { eval: EvalFn, jacobian: Option<JacFn> },
}

/// The mean field `h` together with its Jacobian.
#[derive(Clone)]
pub struct DriftFunction {
    dim: usize,
    label: String,
    kind: Kind,
}

impl fmt::Debug for DriftFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriftFunction")
            .field("dim", &self.dim)
            .field("label", &self.label)
            .finish()
    }
}

/// Build a drift from its declarative description.
pub fn make_drift(spec: &ScenarioSpec) -> Result<DriftFunction> {
    let positive = |name: &str, v: f64| {
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")))
        }
    };
    match spec {
        ScenarioSpec::Linear1d { rate } => {
            positive("rate", *rate)?;
            Ok(DriftFunction {
                dim: 1,
                label: "linear-1d".into(),
                kind: Kind::Affine {
                    a: Matrix::from_element(1, 1, -rate),
                    b: Vector::zeros(1),
                },
            })
        }
        ScenarioSpec::DoubleWell1d => Ok(DriftFunction {
            dim: 1,
            label: "double-well-1d".into(),
            kind: Kind::DoubleWell,
        }),
        ScenarioSpec::Spiral2d { sigma, omega } => {
            positive("sigma", *sigma)?;
            if !omega.is_finite() {
                return Err(Error::InvalidParameter("omega must be finite".into()));
            }
            Ok(DriftFunction {
                dim: 2,
                label: "spiral-2d".into(),
                kind: Kind::Affine {
                    a: Matrix::from_row_slice(2, 2, &[-sigma, *omega, -omega, -sigma]),
                    b: Vector::zeros(2),
                },
            })
        }
        ScenarioSpec::Polynomial { coeffs } => {
            if coeffs.is_empty() {
                return Err(Error::InvalidParameter("polynomial needs coefficients".into()));
            }
            let terms = coeffs
                .iter()
                .enumerate()
                .filter(|(_, c)| **c != 0.0)
                .map(|(i, c)| PolyTerm { component: 0, coeff: *c, powers: vec![i as u32] })
                .collect();
            Ok(DriftFunction { dim: 1, label: "polynomial".into(), kind: Kind::Table(terms) })
        }
        ScenarioSpec::Linear { matrix, offset } => {
            let d = matrix.len();
            if d == 0 {
                return Err(Error::InvalidParameter("empty matrix".into()));
            }
            for row in matrix {
                if row.len() != d {
                    return Err(Error::DimensionMismatch { expected: d, got: row.len() });
                }
            }
            let b = if offset.is_empty() {
                Vector::zeros(d)
            } else if offset.len() == d {
                Vector::from_column_slice(offset)
            } else {
                return Err(Error::DimensionMismatch { expected: d, got: offset.len() });
            };
            let a = Matrix::from_fn(d, d, |i, j| matrix[i][j]);
            Ok(DriftFunction { dim: d, label: "linear".into(), kind: Kind::Affine { a, b } })
        }
        ScenarioSpec::Table { dim, terms } => {
            if *dim == 0 {
                return Err(Error::InvalidParameter("dim must be positive".into()));
            }
            for t in terms {
                if t.powers.len() != *dim {
                    return Err(Error::DimensionMismatch { expected: *dim, got: t.powers.len() });
                }
                if t.component >= *dim {
                    return Err(Error::DimensionMismatch { expected: *dim, got: t.component + 1 });
                }
            }
            Ok(DriftFunction { dim: *dim, label: "table".into(), kind: Kind::Table(terms.clone()) })
        }
    }
}

fn monomial(x: &Vector, powers: &[u32], skip: Option<usize>) -> f64 {
    powers
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != skip)
        .map(|(j, p)| x[j].powi(*p as i32))
        .product()
}

impl DriftFunction {
    /// Wrap an arbitrary map; the Jacobian falls back to finite differences when absent.
    pub fn custom<F>(dim: usize, label: &str, eval: F, jacobian: Option<JacFn>) -> Self
    where
        F: Fn(&Vector) -> Vector + Send + Sync + 'static,
    {
        DriftFunction {
            dim,
            label: label.to_string(),
            kind: Kind::Custom { eval: Arc::new(eval), jacobian },
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn has_analytic_jacobian(&self) -> bool {
        !matches!(self.kind, Kind::Custom { jacobian: None, .. })
    }

    pub fn eval(&self, x: &Vector) -> Vector {
        match &self.kind {
            Kind::Affine { a, b } => a * x + b,
            Kind::DoubleWell => Vector::from_element(1, x[0] - x[0] * x[0] * x[0]),
            Kind::Table(terms) => {
                let mut out = Vector::zeros(self.dim);
                for t in terms {
                    out[t.component] += t.coeff * monomial(x, &t.powers, None);
                }
                out
            }
            Kind::Custom { eval, .. } => eval(x),
        }
    }

    /// `h(x)` written into `out`, bitwise equal to [`DriftFunction::eval`].
    pub fn eval_into(&self, x: &Vector, out: &mut Vector) {
        match &self.kind {
            Kind::Affine { a, b } if self.dim == 1 => out[0] = a[(0, 0)] * x[0] + b[0],
            Kind::Affine { a, b } => {
                out.gemv(1.0, a, x, 0.0);
                *out += b;
            }
            Kind::DoubleWell => out[0] = x[0] - x[0] * x[0] * x[0],
            _ => out.copy_from(&self.eval(x)),
        }
    }

    pub fn jacobian(&self, x: &Vector) -> Matrix {
        match &self.kind {
            Kind::Affine { a, .. } => a.clone(),
            Kind::DoubleWell => Matrix::from_element(1, 1, 1.0 - 3.0 * x[0] * x[0]),
            Kind::Table(terms) => {
                let mut out = Matrix::zeros(self.dim, self.dim);
                for t in terms {
                    for (j, &p) in t.powers.iter().enumerate() {
                        if p == 0 {
                            continue;
                        }
                        let rest = monomial(x, &t.powers, Some(j));
                        out[(t.component, j)] += t.coeff * p as f64 * x[j].powi(p as i32 - 1) * rest;
                    }
                }
                out
            }
            Kind::Custom { jacobian: Some(j), .. } => j(x),
            Kind::Custom { jacobian: None, .. } => self.finite_difference_jacobian(x),
        }
    }

    /// Central differences with step max(1e-6, 1e-6 |x_j|).
    pub fn finite_difference_jacobian(&self, x: &Vector) -> Matrix {
        let mut out = Matrix::zeros(self.dim, self.dim);
        let mut xp = x.clone();
        for j in 0..self.dim {
            let h = (1e-6 * x[j].abs()).max(1e-6);
            xp[j] = x[j] + h;
            let fp = self.eval(&xp);
            xp[j] = x[j] - h;
            let fm = self.eval(&xp);
            xp[j] = x[j];
            out.set_column(j, &((fp - fm) / (2.0 * h)));
        }
        out
    }

    /// Compare the Jacobian against finite differences at the given points.
    pub fn check_jacobian(&self, points: &[Vector]) -> bool {
        points.iter().all(|x| {
            let a = self.jacobian(x);
            let fd = self.finite_difference_jacobian(x);
            a.iter().zip(fd.iter()).all(|(u, v)| (u - v).abs() <= 1e-4 * u.abs() + 1e-8)
        })
    }
}
