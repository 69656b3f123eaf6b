//! Gauss-Legendre quadrature with precomputed nodes.
//!
//! Nodes are the roots of the Legendre polynomial P_n, found by Newton
//! iteration from the Chebyshev-like initial guess; weights follow from the
//! derivative at the root. An n-point rule is exact for polynomials up to
//! degree 2n-1 and converges spectrally on analytic integrands, which is what
//! the frontier integrals need.

use crate::error::{Error, Result};

/// An n-point Gauss-Legendre rule on the reference interval [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::usage("quadrature rule needs at least one node".to_string()));
        }
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n {
            // Initial guess for the i-th root (descending order).
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            let (_, dp) = legendre_with_derivative(n, x);
            nodes[i] = x;
            weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
        }
        nodes.reverse();
        weights.reverse();
        Ok(GaussLegendre { nodes, weights })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Integrate f over [a, b]. Returns 0 for an empty interval; a and b may
    /// be passed in either order (sign follows orientation).
    pub fn integrate<F: Fn(f64) -> f64>(&self, a: f64, b: f64, f: F) -> f64 {
        if a == b {
            return 0.0;
        }
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(mid + half * x);
        }
        acc * half
    }
}

/// Evaluate (P_n(x), P_n'(x)) by the three-term recurrence.
fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p_prev = 1.0;
    let mut p = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let k = k as f64;
        let p_next = ((2.0 * k - 1.0) * x * p - (k - 1.0) * p_prev) / k;
        p_prev = p;
        p = p_next;
    }
    let dp = n as f64 * (x * p - p_prev) / (x * x - 1.0);
    (p, dp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_rule_matches_closed_form() {
        let q = GaussLegendre::new(2).unwrap();
        let expect = 1.0 / 3f64.sqrt();
        assert!((q.nodes[0] + expect).abs() < 1e-14);
        assert!((q.nodes[1] - expect).abs() < 1e-14);
        assert!((q.weights[0] - 1.0).abs() < 1e-14);
        assert!((q.weights[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn three_point_rule_matches_closed_form() {
        let q = GaussLegendre::new(3).unwrap();
        let expect = (3f64 / 5.0).sqrt();
        assert!((q.nodes[0] + expect).abs() < 1e-14);
        assert!(q.nodes[1].abs() < 1e-14);
        assert!((q.nodes[2] - expect).abs() < 1e-14);
        assert!((q.weights[0] - 5.0 / 9.0).abs() < 1e-14);
        assert!((q.weights[1] - 8.0 / 9.0).abs() < 1e-14);
    }

    #[test]
    fn exact_on_polynomials_up_to_degree_2n_minus_1() {
        for n in [1usize, 2, 3, 5, 8] {
            let q = GaussLegendre::new(n).unwrap();
            for deg in 0..(2 * n) {
                let got = q.integrate(-1.0, 1.0, |x| x.powi(deg as i32));
                let expect = if deg % 2 == 1 { 0.0 } else { 2.0 / (deg as f64 + 1.0) };
                assert!(
                    (got - expect).abs() < 1e-13,
                    "n={n} deg={deg}: got {got}, expect {expect}"
                );
            }
        }
    }

    #[test]
    fn exponential_integral_to_machine_precision() {
        let q = GaussLegendre::new(16).unwrap();
        let got = q.integrate(0.0, 1.0, f64::exp);
        assert!((got - (std::f64::consts::E - 1.0)).abs() < 1e-14);
    }

    #[test]
    fn gaussian_mass_on_wide_interval() {
        let q = GaussLegendre::new(256).unwrap();
        let got = q.integrate(-6.0, 12.0, |s| crate::econ::normal_pdf(s, 2.5, 1.5));
        // Mass of N(2.5, 1.5) on [-6, 12]: 1 minus ~7e-9 of tail.
        assert!((got - 0.999999993).abs() < 1e-8, "got {got}");
    }

    #[test]
    fn empty_and_reversed_intervals() {
        let q = GaussLegendre::new(8).unwrap();
        assert_eq!(q.integrate(2.0, 2.0, |_| 1.0), 0.0);
        let fwd = q.integrate(0.0, 1.0, |x| x);
        let rev = q.integrate(1.0, 0.0, |x| x);
        assert!((fwd + rev).abs() < 1e-15);
    }

    #[test]
    fn large_rules_build() {
        for n in [64usize, 256, 512] {
            let q = GaussLegendre::new(n).unwrap();
            assert_eq!(q.node_count(), n);
            let got = q.integrate(-1.0, 1.0, |x| (5.0 * x).cos());
            let expect = 2.0 * (5f64).sin() / 5.0;
            assert!((got - expect).abs() < 1e-12);
        }
    }
}
