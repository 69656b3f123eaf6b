//! Numerical realization of the score-threshold theory: quality-cost
//! frontiers Q(tau), C(tau), J(tau), the optimal fallback threshold tau*,
//! and its comparative statics in the cost scaling kappa.
//!
//! The threshold policy accepts scores `s >= tau` at the edge and escalates
//! the rest, so
//!
//! ```text
//! Q(tau) = int_tau^hi Q_E f ds + int_lo^tau Q_C f ds
//! C(tau) = int_tau^hi C_E f ds + int_lo^tau (C_E + kappa * dC) f ds
//! ```
//!
//! Integrals use composite Gauss-Legendre split at tau, where the integrand
//! has its only kink. tau* solves rho(tau) = lambda * kappa by bisection; an
//! independent dense-grid argmax of J acts as the oracle for that solver.

use rayon::prelude::*;

use crate::econ::ScoreModel;
use crate::error::{Error, Result};
use crate::format::sig9;
use crate::quad::GaussLegendre;

/// One sample on the quality-cost frontier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrontierPoint {
    pub tau: f64,
    pub q: f64,
    pub c: f64,
    pub j: f64,
}

/// Composite quadrature budget: `node_count` total Gauss-Legendre nodes,
/// half on each side of the split point.
#[derive(Debug, Clone)]
pub struct QuadratureSpec {
    segment_rule: GaussLegendre,
    node_count: usize,
}

impl QuadratureSpec {
    pub fn new(node_count: usize) -> Result<Self> {
        if node_count < 64 {
            return Err(Error::usage(format!(
                "quadrature spec needs >= 64 nodes, got {node_count}"
            )));
        }
        Ok(QuadratureSpec {
            segment_rule: GaussLegendre::new(node_count / 2)?,
            node_count,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    fn rule(&self) -> &GaussLegendre {
        &self.segment_rule
    }
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec::new(512).expect("static node count is valid")
    }
}

fn check_tau(model: &ScoreModel, tau: f64) -> Result<()> {
    let (lo, hi) = model.support();
    if !(tau >= lo && tau <= hi) {
        return Err(Error::domain(format!(
            "tau {tau} outside model support [{lo}, {hi}]"
        )));
    }
    Ok(())
}

fn check_positive(name: &str, x: f64) -> Result<()> {
    if !(x > 0.0) {
        return Err(Error::domain(format!("{name} must be strictly positive, got {x}")));
    }
    Ok(())
}

/// Evaluate (Q, C, J) at one threshold.
pub fn frontier_point(
    model: &ScoreModel,
    tau: f64,
    kappa: f64,
    lambda: f64,
    quad: &QuadratureSpec,
) -> Result<FrontierPoint> {
    check_tau(model, tau)?;
    check_positive("kappa", kappa)?;
    check_positive("lambda", lambda)?;
    let (lo, hi) = model.support();
    let rule = quad.rule();
    let q = rule.integrate(tau, hi, |s| model.q_edge(s) * model.density(s))
        + rule.integrate(lo, tau, |s| model.q_cloud(s) * model.density(s));
    let c = rule.integrate(tau, hi, |s| model.c_edge(s) * model.density(s))
        + rule.integrate(lo, tau, |s| {
            (model.c_edge(s) + kappa * model.delta_c(s)) * model.density(s)
        });
    Ok(FrontierPoint {
        tau,
        q,
        c,
        j: q - lambda * c,
    })
}

fn check_sorted(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::usage("tau grid must be nonempty".to_string()));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::usage("tau grid must be sorted ascending".to_string()));
    }
    Ok(())
}

/// Frontier at every grid node. Nodes are independent, so the sweep runs in
/// parallel with results assembled in grid order.
pub fn frontier_sweep(
    model: &ScoreModel,
    tau_grid: &[f64],
    kappa: f64,
    lambda: f64,
    quad: &QuadratureSpec,
) -> Result<Vec<FrontierPoint>> {
    check_sorted(tau_grid)?;
    tau_grid
        .par_iter()
        .map(|&tau| frontier_point(model, tau, kappa, lambda, quad))
        .collect()
}

/// Uniform grid with `n` nodes over `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Bisection root of `rho(tau) - lambda * kappa` inside the bracket.
///
/// Errors with "no interior optimum" when the residual does not change sign;
/// callers fall back to the bracket endpoint with the larger J.
pub fn solve_optimal_tau(
    model: &ScoreModel,
    lambda: f64,
    kappa: f64,
    bracket: (f64, f64),
    tol: f64,
) -> Result<f64> {
    check_positive("lambda", lambda)?;
    check_positive("kappa", kappa)?;
    check_positive("tol", tol)?;
    let (mut lo, mut hi) = bracket;
    if !(lo < hi) {
        return Err(Error::usage(format!("bracket must satisfy lo < hi, got ({lo}, {hi})")));
    }
    check_tau(model, lo)?;
    check_tau(model, hi)?;
    let target = lambda * kappa;
    let g = |tau: f64| model.rho(tau) - target;
    let (mut g_lo, g_hi) = (g(lo), g(hi));
    if g_lo == 0.0 {
        return Ok(lo);
    }
    if g_hi == 0.0 {
        return Ok(hi);
    }
    if g_lo.signum() == g_hi.signum() {
        return Err(Error::runtime(format!(
            "no interior optimum: rho - lambda*kappa has no sign change on [{lo}, {hi}]"
        )));
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let g_mid = g(mid);
        if g_mid == 0.0 {
            return Ok(mid);
        }
        if g_mid.signum() == g_lo.signum() {
            lo = mid;
            g_lo = g_mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Dense-grid argmax of J(tau): the independent oracle for the bisection
/// solver. J is accumulated with a per-interval 8-node rule, one pass over
/// the grid; ties break toward the smaller tau.
pub fn brute_force_tau(
    model: &ScoreModel,
    lambda: f64,
    kappa: f64,
    grid: &[f64],
    _quad: &QuadratureSpec,
) -> Result<f64> {
    check_sorted(grid)?;
    check_positive("lambda", lambda)?;
    check_positive("kappa", kappa)?;
    for &tau in [grid[0], *grid.last().unwrap()].iter() {
        check_tau(model, tau)?;
    }
    let rule = GaussLegendre::new(8)?;
    // J(tau) - J(grid[0]) = int_{grid[0]}^{tau} f * [dQ - lambda*dC] ds with
    // dJ/dtau = f * (q_cloud - q_edge) - lambda * f * kappa * delta_c.
    let increment = |a: f64, b: f64| {
        rule.integrate(a, b, |s| {
            model.density(s)
                * ((model.q_cloud(s) - model.q_edge(s)) - lambda * kappa * model.delta_c(s))
        })
    };
    let mut best_tau = grid[0];
    let mut best_j = 0.0;
    let mut j = 0.0;
    for w in grid.windows(2) {
        j += increment(w[0], w[1]);
        if j > best_j {
            best_j = j;
            best_tau = w[1];
        }
    }
    Ok(best_tau)
}

/// Local sensitivity of tau* to kappa: `lambda / rho'(tau*)`, with rho'
/// taken by central difference. Negative whenever rho is decreasing.
pub fn dtau_dkappa(model: &ScoreModel, lambda: f64, kappa: f64, tol: f64) -> Result<f64> {
    let (lo, hi) = model.support();
    let tau_star = solve_optimal_tau(model, lambda, kappa, (lo, hi), tol)?;
    let h = 1e-5 * (hi - lo).max(1.0);
    let a = (tau_star - h).max(lo);
    let b = (tau_star + h).min(hi);
    let d_rho = (model.rho(b) - model.rho(a)) / (b - a);
    if !(d_rho < 0.0) {
        return Err(Error::domain(format!(
            "rho'(tau*) = {d_rho} is not negative; sensitivity undefined"
        )));
    }
    Ok(lambda / d_rho)
}

/// Result of the empirical threshold selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tau0 {
    pub tau: f64,
    pub utility: f64,
}

/// Empirical utility-maximizing hard threshold over observed records
/// `(score, j_edge, j_cloud)`.
///
/// Candidates are midpoints between consecutive distinct scores plus a
/// below-min and an above-max sentinel, so the result is invariant to any
/// monotone re-scoring between observed scores. Ties break toward the
/// smallest candidate.
pub fn empirical_tau0(records: &[(f64, f64, f64)]) -> Result<Tau0> {
    if records.is_empty() {
        return Err(Error::usage("empirical_tau0 needs at least one record".to_string()));
    }
    let mut scores: Vec<f64> = records.iter().map(|r| r.0).collect();
    scores.sort_by(|a, b| a.partial_cmp(b).expect("scores must be comparable"));
    scores.dedup();
    let mut candidates = Vec::with_capacity(scores.len() + 1);
    candidates.push(scores[0] - 1.0);
    for w in scores.windows(2) {
        candidates.push(0.5 * (w[0] + w[1]));
    }
    candidates.push(scores[scores.len() - 1] + 1.0);

    let utility = |tau: f64| {
        records
            .iter()
            .map(|&(s, j_edge, j_cloud)| if s >= tau { j_edge } else { j_cloud })
            .sum::<f64>()
    };
    let mut best = Tau0 {
        tau: candidates[0],
        utility: utility(candidates[0]),
    };
    for &tau in &candidates[1..] {
        let u = utility(tau);
        if u > best.utility {
            best = Tau0 { tau, utility: u };
        }
    }
    Ok(best)
}

/// Render a sweep as `tau,q,c,j,kappa,lambda` rows, 9 significant digits.
pub fn frontier_to_csv(points: &[FrontierPoint], kappa: f64, lambda: f64) -> String {
    let mut out = String::from("tau,q,c,j,kappa,lambda\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            sig9(p.tau),
            sig9(p.q),
            sig9(p.c),
            sig9(p.j),
            sig9(kappa),
            sig9(lambda)
        ));
    }
    out
}
