//! Per-step latency, cost, and quality primitives, task-level aggregation,
//! and the analytic score model the theory layer integrates over.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::NetworkState;

/// Default cloud token price, currency per token. Also the reference price
/// for the kappa scaling.
pub const DEFAULT_TOKEN_PRICE: f64 = 1e-5;

/// Where a step executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    Edge,
    Cloud,
}

impl std::fmt::Display for Decision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Decision::Edge => f.write_str("Edge"),
            Decision::Cloud => f.write_str("Cloud"),
        }
    }
}

/// Latency model inputs. Edge inference time is a constant; the cloud path
/// adds round-trip, transfer, and cloud compute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyParams {
    /// On-device inference latency, seconds.
    pub edge_latency: f64,
    /// Cloud model compute time, seconds.
    pub cloud_compute: f64,
    /// Uplink payload per offloaded step, bytes.
    pub payload_bytes: u64,
}

impl Default for LatencyParams {
    fn default() -> Self {
        LatencyParams {
            edge_latency: 0.5,
            cloud_compute: 0.3,
            payload_bytes: 4_000_000,
        }
    }
}

/// Cost weights: latency penalty, token price, and the quality-cost trade-off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// Latency-to-cost conversion, penalty per second.
    pub alpha: f64,
    /// Price per cloud token.
    pub c_tok: f64,
    /// Cost weight in the utility J = Q - lambda * C.
    pub lambda: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams {
            alpha: 0.01,
            c_tok: DEFAULT_TOKEN_PRICE,
            lambda: 10.0,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.c_tok < 0.0 {
            return Err(Error::domain("alpha and c_tok must be nonnegative".to_string()));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::domain("lambda must be strictly positive".to_string()));
        }
        Ok(())
    }
}

/// Everything the aggregator needs about one executed step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub decision: Decision,
    /// Realized step latency, seconds.
    pub latency: f64,
    /// Cloud tokens consumed; always 0 on the edge path.
    pub tokens: u64,
    /// Gated step quality in [0,1].
    pub quality: f64,
    /// Step cost.
    pub cost: f64,
}

/// Task-level aggregate: mean quality, summed cost, utility.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskAggregate {
    pub q: f64,
    pub c: f64,
    pub j: f64,
}

/// Payload transfer time `8 * bytes / bw`.
pub fn transmission_time(payload_bytes: u64, bw: f64) -> Result<f64> {
    if !(bw > 0.0) {
        return Err(Error::domain(format!("bandwidth must be positive, got {bw}")));
    }
    Ok(8.0 * payload_bytes as f64 / bw)
}

/// Realized latency of a routed step.
pub fn step_latency(decision: Decision, params: &LatencyParams, state: &NetworkState) -> Result<f64> {
    match decision {
        Decision::Edge => Ok(params.edge_latency),
        Decision::Cloud => Ok(state.rtt
            + transmission_time(params.payload_bytes, state.bw)?
            + params.cloud_compute),
    }
}

/// Step cost `alpha * latency + c_tok * tokens`.
pub fn step_cost(latency: f64, tokens: u64, params: &CostParams) -> f64 {
    params.alpha * latency + params.c_tok * tokens as f64
}

/// Deterministic cloud token usage: prompt grows with the context length.
pub fn cloud_tokens(context_steps: usize) -> u64 {
    400 + 100 * context_steps as u64
}

/// Schema-gated quality: any structural violation forces 0.
pub fn step_quality(schema_valid: bool, evaluator_score: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&evaluator_score) {
        return Err(Error::domain(format!(
            "evaluator score must lie in [0,1], got {evaluator_score}"
        )));
    }
    Ok(if schema_valid { evaluator_score } else { 0.0 })
}

/// Aggregate a task: mean quality, total cost, J = Q - lambda * C.
pub fn task_aggregate(steps: &[StepOutcome], lambda: f64) -> Result<TaskAggregate> {
    if steps.is_empty() {
        return Err(Error::usage("task_aggregate needs at least one step".to_string()));
    }
    let q = steps.iter().map(|s| s.quality).sum::<f64>() / steps.len() as f64;
    let c = steps.iter().map(|s| s.cost).sum::<f64>();
    Ok(TaskAggregate {
        q,
        c,
        j: q - lambda * c,
    })
}

type RealFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Analytic conditional model over the router score: a score density and the
/// conditional quality/cost means of each venue, on a finite support used for
/// quadrature.
#[derive(Clone)]
pub struct ScoreModel {
    support: (f64, f64),
    density: RealFn,
    q_edge: RealFn,
    q_cloud: RealFn,
    c_edge: RealFn,
    c_cloud: RealFn,
}

impl ScoreModel {
    pub fn new(
        support: (f64, f64),
        density: RealFn,
        q_edge: RealFn,
        q_cloud: RealFn,
        c_edge: RealFn,
        c_cloud: RealFn,
    ) -> Result<Self> {
        if !(support.0 < support.1) {
            return Err(Error::domain(format!(
                "support must be a nonempty interval, got ({}, {})",
                support.0, support.1
            )));
        }
        Ok(ScoreModel {
            support,
            density,
            q_edge,
            q_cloud,
            c_edge,
            c_cloud,
        })
    }

    pub fn support(&self) -> (f64, f64) {
        self.support
    }

    pub fn density(&self, s: f64) -> f64 {
        (self.density)(s)
    }

    pub fn q_edge(&self, s: f64) -> f64 {
        (self.q_edge)(s)
    }

    pub fn q_cloud(&self, s: f64) -> f64 {
        (self.q_cloud)(s)
    }

    pub fn c_edge(&self, s: f64) -> f64 {
        (self.c_edge)(s)
    }

    pub fn c_cloud(&self, s: f64) -> f64 {
        (self.c_cloud)(s)
    }

    /// Marginal quality gain from escalating a score-s step.
    pub fn delta_q(&self, s: f64) -> f64 {
        self.q_cloud(s) - self.q_edge(s)
    }

    /// Marginal cost of escalating a score-s step (before kappa scaling).
    pub fn delta_c(&self, s: f64) -> f64 {
        self.c_cloud(s) - self.c_edge(s)
    }

    /// Local benefit-cost ratio rho = delta_q / delta_c.
    pub fn rho(&self, s: f64) -> f64 {
        self.delta_q(s) / self.delta_c(s)
    }
}

pub(crate) fn normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}

/// Testbed model: score ~ Normal(2.5, 1.5) on [-6, 12], edge quality/cost 0,
/// cloud quality exp(-s), cloud cost 0.01. Then delta_c = 0.01 everywhere and
/// rho(s) = 100 * exp(-s), strictly decreasing.
pub fn default_score_model() -> ScoreModel {
    ScoreModel::new(
        (-6.0, 12.0),
        Arc::new(|s| normal_pdf(s, 2.5, 1.5)),
        Arc::new(|_| 0.0),
        Arc::new(|s| (-s).exp()),
        Arc::new(|_| 0.0),
        Arc::new(|_| 0.01),
    )
    .expect("static support is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetworkState;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transmission_time_cases() {
        assert_eq!(transmission_time(0, 80e6).unwrap(), 0.0);
        assert!((transmission_time(1_000_000, 80e6).unwrap() - 0.1).abs() < 1e-12);
        assert!((transmission_time(1_000_000, 8e6).unwrap() - 1.0).abs() < 1e-12);
        assert!(transmission_time(1, 0.0).is_err());
    }

    #[test]
    fn step_latency_cases() {
        let state = NetworkState::new(0.05, 80e6).unwrap();
        let params = LatencyParams {
            edge_latency: 0.5,
            cloud_compute: 0.3,
            payload_bytes: 1_000_000,
        };
        assert_eq!(step_latency(Decision::Edge, &params, &state).unwrap(), 0.5);
        let cloud = step_latency(Decision::Cloud, &params, &state).unwrap();
        assert!((cloud - 0.45).abs() < 1e-12);
        let bare = LatencyParams {
            edge_latency: 0.5,
            cloud_compute: 0.0,
            payload_bytes: 0,
        };
        assert_eq!(step_latency(Decision::Cloud, &bare, &state).unwrap(), state.rtt);
    }

    #[test]
    fn step_cost_cases() {
        let zero = CostParams {
            alpha: 0.0,
            c_tok: 1e-6,
            lambda: 1.0,
        };
        assert_eq!(step_cost(1.0, 0, &zero), 0.0);
        let p = CostParams {
            alpha: 0.01,
            c_tok: 2e-6,
            lambda: 1.0,
        };
        assert!((step_cost(0.45, 500, &p) - 0.0055).abs() < 1e-12);
        // Edge path forces tokens = 0.
        assert!((step_cost(0.5, 0, &p) - 0.005).abs() < 1e-12);
    }

    #[test]
    fn step_cost_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = CostParams {
            alpha: rng.random_range(0.0..1.0),
            c_tok: rng.random_range(0.0..1e-3),
            lambda: 1.0,
        };
        for _ in 0..100 {
            let l1 = rng.random_range(0.0..5.0);
            let l2 = rng.random_range(0.0..5.0);
            let t1 = rng.random_range(0..2000u64);
            let t2 = rng.random_range(0..2000u64);
            let joint = step_cost(l1 + l2, t1 + t2, &p);
            let split = step_cost(l1, t1, &p) + step_cost(l2, t2, &p);
            assert!((joint - split).abs() < 1e-12);
        }
    }

    #[test]
    fn step_quality_gate() {
        assert_eq!(step_quality(false, 0.9).unwrap(), 0.0);
        assert_eq!(step_quality(true, 0.7).unwrap(), 0.7);
        assert_eq!(step_quality(true, 0.0).unwrap(), 0.0);
        assert!(step_quality(true, 1.2).is_err());
        assert!(step_quality(false, -0.1).is_err());
    }

    fn outcome(quality: f64, cost: f64) -> StepOutcome {
        StepOutcome {
            decision: Decision::Edge,
            latency: 0.0,
            tokens: 0,
            quality,
            cost,
        }
    }

    #[test]
    fn task_aggregate_cases() {
        let agg = task_aggregate(&[outcome(1.0, 0.1), outcome(0.5, 0.3)], 1.0).unwrap();
        assert!((agg.q - 0.75).abs() < 1e-12);
        assert!((agg.c - 0.4).abs() < 1e-12);
        assert!((agg.j - 0.35).abs() < 1e-12);

        let single = task_aggregate(&[outcome(0.42, 0.0)], 3.0).unwrap();
        assert!((single.j - 0.42).abs() < 1e-12);

        let agg10 = task_aggregate(&[outcome(0.8, 0.01), outcome(0.6, 0.02)], 10.0).unwrap();
        assert!((agg10.q - 0.7).abs() < 1e-12);
        assert!((agg10.c - 0.03).abs() < 1e-12);
        assert!((agg10.j - 0.4).abs() < 1e-12);

        assert!(task_aggregate(&[], 1.0).is_err());
    }

    #[test]
    fn task_aggregate_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let steps: Vec<StepOutcome> = (0..20)
            .map(|_| outcome(rng.random_range(0.0..1.0), rng.random_range(0.0..0.1)))
            .collect();
        let base = task_aggregate(&steps, 10.0).unwrap();
        let mut reversed = steps.clone();
        reversed.reverse();
        let agg = task_aggregate(&reversed, 10.0).unwrap();
        assert!((agg.q - base.q).abs() < 1e-12);
        assert!((agg.c - base.c).abs() < 1e-12);
    }

    #[test]
    fn default_model_examples() {
        let m = default_score_model();
        assert!((m.rho(0.0) - 100.0).abs() < 1e-9);
        for s in [-6.0, -1.0, 0.0, 3.0, 12.0] {
            assert!((m.delta_c(s) - 0.01).abs() < 1e-15);
        }
        assert!(m.rho(1.0) > m.rho(2.0));
    }

    #[test]
    fn default_model_satisfies_regularity_assumptions() {
        // Strictly positive density and strictly decreasing rho, on a dense grid.
        let m = default_score_model();
        let (lo, hi) = m.support();
        let n = 1000;
        let mut prev_rho = f64::INFINITY;
        for i in 0..=n {
            let s = lo + (hi - lo) * i as f64 / n as f64;
            assert!(m.density(s) > 0.0, "density vanished at {s}");
            assert!(m.delta_c(s) > 0.0);
            let r = m.rho(s);
            assert!(r < prev_rho, "rho not strictly decreasing at {s}");
            prev_rho = r;
        }
    }
}
