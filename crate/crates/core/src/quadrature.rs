//! Gauss–Legendre rules.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Nodes and weights on [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(order: usize) -> Result<Self> {
        if order == 0 || order > 64 {
            return Err(Error::InvalidParameter(format!("quadrature order {order} not in 1..=64")));
        }
        let n = order;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            // Newton on P_n from the Chebyshev-like initial guess.
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, dp) = legendre(n, x);
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Ok(GaussLegendre { nodes, weights })
    }

    /// Nodes and weights mapped to [a, b].
    pub fn on(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(x, w)| (mid + half * x, half * w))
    }
}

/// `(P_n(x), P_n'(x))` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_rule() {
        let g = GaussLegendre::new(2).unwrap();
        let r = 1.0 / 3f64.sqrt();
        assert!((g.nodes[0] + r).abs() < 1e-15 && (g.nodes[1] - r).abs() < 1e-15);
        assert!((g.weights[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn exact_for_polynomials_up_to_degree_2n_minus_1() {
        for n in 1..=12 {
            let g = GaussLegendre::new(n).unwrap();
            for deg in 0..2 * n {
                let approx: f64 = g.on(0.0, 2.0).map(|(x, w)| w * x.powi(deg as i32)).sum();
                let exact = 2f64.powi(deg as i32 + 1) / (deg as f64 + 1.0);
                assert!((approx - exact).abs() <= 1e-12 * exact.max(1.0), "n={n} deg={deg}");
            }
        }
    }

    #[test]
    fn exponential_integral() {
        let g = GaussLegendre::new(4).unwrap();
        let approx: f64 = g.on(0.0, 0.5).map(|(x, w)| w * x.exp()).sum();
        // Remainder term is about 1.8e-12 here.
        assert!((approx - (0.5f64.exp() - 1.0)).abs() < 5e-12);
    }

    #[test]
    fn rejects_order_zero() {
        assert!(GaussLegendre::new(0).is_err());
    }
}
