//! End-to-end orchestration: routed episodes over network traces, the online
//! loop with idle-window updates (PPO + anchoring, RM refresh, controller
//! recalibration), experiment metrics, threshold scans, and risk-coverage
//! analysis.
//!
//! Everything is deterministic in the experiment seed. Episode rollout,
//! counterfactual evaluation, and learning draw from separate ChaCha
//! streams, so enabling counterfactuals or learning never perturbs the
//! routed trajectory of the shared stream.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controllers::{funcdyn_threshold, route_fixed, FuncDynParams, PolicyNet};
use crate::econ::{
    cloud_tokens, step_cost, step_latency, step_quality, task_aggregate, CostParams, Decision,
    LatencyParams, StepOutcome, TaskAggregate,
};
use crate::error::{Error, Result};
use crate::format::sig9;
use crate::learning::{
    near_threshold_sample, rm_train, sft_dataset, two_stage_update, CachedTuple, Caches, PpoConfig,
    PreferencePair, RewardModel, RlContext, RlSample, RmTrainConfig, TwoStageReport,
};
use crate::net::{NetworkState, RegimeName, TraceStep};
use crate::theory::empirical_tau0;
use crate::world::{
    action_summary, cloud_oracle, evaluate_quality, update_context, validate_schema, Context,
    EdgePolicy, StructuredAction, Task,
};

/// Routing controller choices for a run.
#[derive(Debug, Clone)]
pub enum RunController {
    Fixed { tau: f64 },
    FuncDyn(FuncDynParams),
    PolicyNet(PolicyNet),
    AllEdge,
    AllCloud,
    /// One-shot router: scores only the first step and fixes the venue for
    /// the whole task (front-door routing approximation).
    OneshotRouter { tau: f64 },
    /// Fixed-threshold cascade approximation: the fixed rule at tau0.
    FixedCascade { tau: f64 },
}

impl RunController {
    pub fn name(&self) -> &'static str {
        match self {
            RunController::Fixed { .. } => "fixed",
            RunController::FuncDyn(_) => "funcdyn",
            RunController::PolicyNet(_) => "policynet",
            RunController::AllEdge => "all-edge",
            RunController::AllCloud => "all-cloud",
            RunController::OneshotRouter { .. } => "oneshot-router",
            RunController::FixedCascade { .. } => "fixed-cascade",
        }
    }

    /// Threshold-based controllers expose the threshold they applied; these
    /// are the ones eligible for near-threshold uploads.
    fn threshold(&self, state: &NetworkState, q_hat: f64) -> Option<f64> {
        match self {
            RunController::Fixed { tau }
            | RunController::OneshotRouter { tau }
            | RunController::FixedCascade { tau } => Some(*tau),
            RunController::FuncDyn(params) => Some(funcdyn_threshold(params, state, q_hat)),
            _ => None,
        }
    }
}

/// Immutable per-run knobs of the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub latency: LatencyParams,
    pub cost: CostParams,
    /// Cloud oracle exactness.
    pub p_correct: f64,
    /// Hard per-task step cap.
    pub step_cap: usize,
    /// EWMA weight for the running quality estimate.
    pub ewma_beta: f64,
    /// Evaluate both venues on every step and record the flags.
    pub counterfactual: bool,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            latency: LatencyParams::default(),
            cost: CostParams::default(),
            p_correct: 0.98,
            step_cap: 12,
            ewma_beta: 0.2,
            counterfactual: false,
        }
    }
}

/// One logged step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub task_id: u64,
    pub step: usize,
    pub score: f64,
    /// Threshold for rule controllers, cloud probability for PolicyNet,
    /// 0 for forced venues.
    pub basis: f64,
    pub decision: Decision,
    pub regime: RegimeName,
    pub state: NetworkState,
    pub latency: f64,
    pub cost: f64,
    pub quality: f64,
    pub schema_ok: bool,
    pub q_hat: f64,
    /// Counterfactual fields, present only when enabled.
    pub j_edge: Option<f64>,
    pub j_cloud: Option<f64>,
    pub cloud_better: Option<bool>,
}

/// Cursor over a pregenerated trace; erroring out when exhausted.
#[derive(Debug, Clone)]
pub struct TraceCursor<'a> {
    trace: &'a [TraceStep],
    pos: usize,
}

impl<'a> TraceCursor<'a> {
    pub fn new(trace: &'a [TraceStep]) -> Self {
        TraceCursor { trace, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.trace.len() - self.pos
    }

    fn next_state(&mut self) -> Result<TraceStep> {
        let step = self.trace.get(self.pos).copied().ok_or_else(|| {
            Error::runtime(format!(
                "trace exhausted after {} states; the run needs more trace steps",
                self.trace.len()
            ))
        })?;
        self.pos += 1;
        Ok(step)
    }
}

/// Edge step kept for possible near-threshold upload at the next idle window.
#[derive(Debug, Clone)]
pub struct PendingUpload {
    pub task: Arc<Task>,
    pub ctx: Context,
    pub edge_action: StructuredAction,
    pub score: f64,
    pub threshold: f64,
    pub net_state: NetworkState,
}

/// Everything one episode produced.
#[derive(Debug, Clone)]
pub struct EpisodeOutput {
    pub records: Vec<StepRecord>,
    pub rl_samples: Vec<RlSample>,
    pub rm_tuples: Vec<CachedTuple>,
    pub pending_uploads: Vec<PendingUpload>,
    pub aggregate: TaskAggregate,
    pub q_hat: f64,
}

/// Counterfactual outcome of evaluating both venues on one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CfOutcome {
    pub j_edge: f64,
    pub j_cloud: f64,
    /// Ties go to the edge.
    pub edge_better: bool,
}

/// Evaluate both the edge action and a cloud draw on the same step without
/// touching the routed episode's state.
pub fn counterfactual_eval<R: Rng + ?Sized>(
    task: &Task,
    ctx: &Context,
    step_index: usize,
    edge_action: &StructuredAction,
    state: &NetworkState,
    params: &SimParams,
    rng: &mut R,
) -> Result<CfOutcome> {
    let lambda = params.cost.lambda;
    let q_e = step_quality(
        validate_schema(edge_action, task),
        evaluate_quality(edge_action, task, step_index),
    )?;
    let c_e = step_cost(
        step_latency(Decision::Edge, &params.latency, state)?,
        0,
        &params.cost,
    );
    let cloud_action = cloud_oracle(task, ctx, params.p_correct, rng);
    let q_c = step_quality(
        validate_schema(&cloud_action, task),
        evaluate_quality(&cloud_action, task, step_index),
    )?;
    let c_c = step_cost(
        step_latency(Decision::Cloud, &params.latency, state)?,
        cloud_tokens(ctx.completed.len()),
        &params.cost,
    );
    let j_edge = q_e - lambda * c_e;
    let j_cloud = q_c - lambda * c_c;
    Ok(CfOutcome {
        j_edge,
        j_cloud,
        edge_better: j_edge >= j_cloud,
    })
}

/// Run one task to finish() or the step cap.
///
/// The main stream drives edge sampling and routed cloud draws; `cf_rng`
/// exclusively drives counterfactual cloud draws so the routed trajectory is
/// identical with counterfactuals on or off.
#[allow(clippy::too_many_arguments)]
pub fn run_episode<R: Rng + ?Sized>(
    task: &Arc<Task>,
    policy: &EdgePolicy,
    rm: &RewardModel,
    controller: &RunController,
    cursor: &mut TraceCursor<'_>,
    params: &SimParams,
    q_hat0: f64,
    rng: &mut R,
    cf_rng: &mut R,
) -> Result<EpisodeOutput> {
    let mut ctx = Context::initial(task);
    let mut q_hat = q_hat0;
    let mut records = Vec::new();
    let mut rl_samples = Vec::new();
    let mut rm_tuples = Vec::new();
    let mut pending_uploads = Vec::new();
    let mut outcomes = Vec::new();
    let mut locked_venue: Option<Decision> = None;

    for k in 0..params.step_cap {
        let trace_step = cursor.next_state()?;
        let state = trace_step.state;
        let (edge_action, log_prob) = policy.sample(task, &ctx, rng);
        let score = rm.score(task, &ctx, &edge_action);

        let threshold = controller.threshold(&state, q_hat);
        let (decision, basis) = match controller {
            RunController::Fixed { .. }
            | RunController::FuncDyn(_)
            | RunController::FixedCascade { .. } => {
                let tau = threshold.expect("threshold controller");
                let d = route_fixed(score, tau);
                (d.choice, tau)
            }
            RunController::OneshotRouter { .. } => {
                let tau = threshold.expect("threshold controller");
                let venue = *locked_venue.get_or_insert_with(|| route_fixed(score, tau).choice);
                (venue, tau)
            }
            RunController::PolicyNet(net) => {
                let features = net.norm.features(&state, score, q_hat);
                let d = net.decide(&features)?;
                (d.choice, d.basis)
            }
            RunController::AllEdge => (Decision::Edge, 0.0),
            RunController::AllCloud => (Decision::Cloud, 0.0),
        };

        let cf = if params.counterfactual {
            Some(counterfactual_eval(
                task,
                &ctx,
                k,
                &edge_action,
                &state,
                params,
                cf_rng,
            )?)
        } else {
            None
        };

        let executed = match decision {
            Decision::Edge => edge_action.clone(),
            Decision::Cloud => cloud_oracle(task, &ctx, params.p_correct, rng),
        };
        let schema_ok = validate_schema(&executed, task);
        let quality = step_quality(schema_ok, evaluate_quality(&executed, task, k))?;
        let latency = step_latency(decision, &params.latency, &state)?;
        let tokens = match decision {
            Decision::Edge => 0,
            Decision::Cloud => cloud_tokens(ctx.completed.len()),
        };
        let cost = step_cost(latency, tokens, &params.cost);

        rl_samples.push(RlSample {
            task: Arc::clone(task),
            ctx: ctx.clone(),
            action: edge_action.clone(),
            log_prob,
            reward: score,
            episode: task.id,
        });
        match decision {
            Decision::Cloud => rm_tuples.push(CachedTuple {
                task: Arc::clone(task),
                ctx: ctx.clone(),
                edge_action: edge_action.clone(),
                cloud_action: executed.clone(),
                score,
                net_state: state,
            }),
            Decision::Edge => {
                if let Some(tau) = threshold {
                    pending_uploads.push(PendingUpload {
                        task: Arc::clone(task),
                        ctx: ctx.clone(),
                        edge_action: edge_action.clone(),
                        score,
                        threshold: tau,
                        net_state: state,
                    });
                }
            }
        }

        q_hat = (1.0 - params.ewma_beta) * q_hat + params.ewma_beta * quality;
        records.push(StepRecord {
            task_id: task.id,
            step: k,
            score,
            basis,
            decision,
            regime: trace_step.regime,
            state,
            latency,
            cost,
            quality,
            schema_ok,
            q_hat,
            j_edge: cf.map(|c| c.j_edge),
            j_cloud: cf.map(|c| c.j_cloud),
            cloud_better: cf.map(|c| !c.edge_better),
        });
        outcomes.push(StepOutcome {
            decision,
            latency,
            tokens,
            quality,
            cost,
        });

        let (next_ctx, _) = update_context(&ctx, decision, &executed.tool, &action_summary(&executed));
        ctx = next_ctx;
        if executed.is_finish() {
            break;
        }
    }

    let aggregate = task_aggregate(&outcomes, params.cost.lambda)?;
    Ok(EpisodeOutput {
        records,
        rl_samples,
        rm_tuples,
        pending_uploads,
        aggregate,
        q_hat,
    })
}

/// Step-level metrics within one regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeMetrics {
    pub steps: usize,
    pub mean_quality: f64,
    pub total_cost: f64,
    pub offload_rate: f64,
}

/// Run-level summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub tasks: usize,
    pub steps: usize,
    /// Mean per-task utility J = Q - lambda * C.
    pub mean_j: f64,
    /// Mean per-task quality.
    pub mean_q: f64,
    /// Total cost over the run.
    pub total_c: f64,
    pub offload_rate: f64,
    /// Fraction of executed steps failing schema validation.
    pub schema_violation_rate: f64,
    /// Schema violation rate among edge-executed steps only.
    pub edge_schema_violation_rate: f64,
    /// Mean router score of edge proposals (the reward signal).
    pub mean_score: f64,
    pub per_regime: BTreeMap<String, RegimeMetrics>,
}

/// Aggregate per-task results and step records into a summary.
pub fn summarize(aggregates: &[TaskAggregate], records: &[StepRecord]) -> MetricsSummary {
    let n_tasks = aggregates.len().max(1) as f64;
    let mean_j = aggregates.iter().map(|a| a.j).sum::<f64>() / n_tasks;
    let mean_q = aggregates.iter().map(|a| a.q).sum::<f64>() / n_tasks;
    let total_c = aggregates.iter().map(|a| a.c).sum::<f64>();
    let n_steps = records.len().max(1) as f64;
    let offloads = records.iter().filter(|r| r.decision == Decision::Cloud).count();
    let violations = records.iter().filter(|r| !r.schema_ok).count();
    let edge_steps: Vec<&StepRecord> =
        records.iter().filter(|r| r.decision == Decision::Edge).collect();
    let edge_violations = edge_steps.iter().filter(|r| !r.schema_ok).count();
    let mut per_regime = BTreeMap::new();
    for name in [RegimeName::Good, RegimeName::Mid, RegimeName::Bad] {
        let group: Vec<&StepRecord> = records.iter().filter(|r| r.regime == name).collect();
        if group.is_empty() {
            continue;
        }
        let n = group.len() as f64;
        per_regime.insert(
            name.to_string(),
            RegimeMetrics {
                steps: group.len(),
                mean_quality: group.iter().map(|r| r.quality).sum::<f64>() / n,
                total_cost: group.iter().map(|r| r.cost).sum::<f64>(),
                offload_rate: group.iter().filter(|r| r.decision == Decision::Cloud).count() as f64
                    / n,
            },
        );
    }
    MetricsSummary {
        tasks: aggregates.len(),
        steps: records.len(),
        mean_j,
        mean_q,
        total_c,
        offload_rate: offloads as f64 / n_steps,
        schema_violation_rate: violations as f64 / n_steps,
        edge_schema_violation_rate: edge_violations as f64 / edge_steps.len().max(1) as f64,
        mean_score: records.iter().map(|r| r.score).sum::<f64>() / n_steps,
        per_regime,
    }
}

/// Learning-loop knobs for [`run_experiment`].
#[derive(Debug, Clone)]
pub struct LearningConfig {
    pub ppo: PpoConfig,
    pub rm_refresh: RmTrainConfig,
    /// Completed tasks per idle window.
    pub idle_window: usize,
    /// PPO updates per idle window.
    pub updates_per_window: usize,
    pub cache_capacity: usize,
    /// Near-threshold upload fraction.
    pub near_fraction: f64,
    /// Band width as a multiple of the window score standard deviation.
    pub near_delta_scale: f64,
    /// Run the SFT anchoring stage (anchor_period = 0 disables it).
    pub anchor_on: bool,
    /// Refresh the reward model at idle windows.
    pub rm_refresh_on: bool,
    /// Re-estimate tau0 for threshold controllers from cached tuples.
    pub recalibrate: bool,
}

impl Default for LearningConfig {
    fn default() -> Self {
        LearningConfig {
            ppo: PpoConfig::default(),
            rm_refresh: RmTrainConfig::default(),
            idle_window: 64,
            updates_per_window: 5,
            cache_capacity: 10_000,
            near_fraction: 0.05,
            near_delta_scale: 0.25,
            anchor_on: true,
            rm_refresh_on: true,
            recalibrate: false,
        }
    }
}

/// One diagnostics row per PPO update.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainingRow {
    pub update: usize,
    pub mean_reward: f64,
    pub kl: f64,
    pub clip_frac: f64,
    pub schema_rate: f64,
    pub composite: f64,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub metrics: MetricsSummary,
    pub records: Vec<StepRecord>,
    pub aggregates: Vec<TaskAggregate>,
    pub training: Vec<TrainingRow>,
    pub policy: EdgePolicy,
    pub rm: RewardModel,
    pub controller: RunController,
}

fn derive_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, mixed with the base seed.
    let mut h: u64 = 0xcbf29ce484222325 ^ seed.rotate_left(17);
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn experiment_rng(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}

/// Run a corpus over a trace, interleaving idle-window updates when learning
/// is on. Deterministic in `(inputs, seed)`.
#[allow(clippy::too_many_arguments)]
pub fn run_experiment(
    tasks: &[Arc<Task>],
    trace: &[TraceStep],
    policy: &EdgePolicy,
    rm: &RewardModel,
    controller: &RunController,
    params: &SimParams,
    learning: Option<&LearningConfig>,
    sft_reference: Option<&EdgePolicy>,
    seed: u64,
) -> Result<ExperimentOutput> {
    if tasks.is_empty() {
        return Err(Error::usage("experiment needs a nonempty corpus".to_string()));
    }
    let mut policy = policy.clone();
    let mut rm = rm.clone();
    let mut controller = controller.clone();
    let mut rng = experiment_rng(seed, "episodes");
    let mut cf_rng = experiment_rng(seed, "counterfactual");
    let mut learn_rng = experiment_rng(seed, "learning");

    let mut cursor = TraceCursor::new(trace);
    let mut caches = Caches::new(learning.map_or(10_000, |l| l.cache_capacity));
    let sft_owned;
    let sft_ref: &EdgePolicy = match sft_reference {
        Some(p) => p,
        None => {
            sft_owned = policy.clone();
            &sft_owned
        }
    };
    let anchor_pool: Vec<RlContext> = if learning.is_some() {
        sft_dataset(tasks).into_iter().map(|(c, _)| c).collect()
    } else {
        Vec::new()
    };

    let mut q_hat = 0.5;
    let mut records = Vec::new();
    let mut aggregates = Vec::new();
    let mut training = Vec::new();
    let mut window_pending: Vec<PendingUpload> = Vec::new();
    let mut window_scores: Vec<f64> = Vec::new();
    let mut updates_done = 0usize;

    for (i, task) in tasks.iter().enumerate() {
        let out = run_episode(
            task,
            &policy,
            &rm,
            &controller,
            &mut cursor,
            params,
            q_hat,
            &mut rng,
            &mut cf_rng,
        )?;
        q_hat = out.q_hat;
        window_scores.extend(out.records.iter().map(|r| r.score));
        records.extend(out.records);
        aggregates.push(out.aggregate);
        if learning.is_some() {
            for s in out.rl_samples {
                caches.push_rl(s);
            }
            for t in out.rm_tuples {
                caches.push_rm(t);
            }
            window_pending.extend(out.pending_uploads);
        }

        if let Some(cfg) = learning {
            if (i + 1) % cfg.idle_window == 0 {
                idle_window_update(
                    &mut policy,
                    &mut rm,
                    &mut controller,
                    &mut caches,
                    sft_ref,
                    &anchor_pool,
                    &mut window_pending,
                    &mut window_scores,
                    cfg,
                    params,
                    &mut updates_done,
                    &mut training,
                    &mut learn_rng,
                )?;
            }
        }
    }

    let metrics = summarize(&aggregates, &records);
    Ok(ExperimentOutput {
        metrics,
        records,
        aggregates,
        training,
        policy,
        rm,
        controller,
    })
}

#[allow(clippy::too_many_arguments)]
fn idle_window_update(
    policy: &mut EdgePolicy,
    rm: &mut RewardModel,
    controller: &mut RunController,
    caches: &mut Caches,
    sft_ref: &EdgePolicy,
    anchor_pool: &[RlContext],
    window_pending: &mut Vec<PendingUpload>,
    window_scores: &mut Vec<f64>,
    cfg: &LearningConfig,
    params: &SimParams,
    updates_done: &mut usize,
    training: &mut Vec<TrainingRow>,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    // Near-threshold uploads: enrich the RM cache with edge steps scoring
    // just above their threshold.
    if !window_pending.is_empty() {
        let delta = cfg.near_delta_scale * std_dev(window_scores);
        let pairs: Vec<(f64, f64)> =
            window_pending.iter().map(|p| (p.score, p.threshold)).collect();
        let picked = near_threshold_sample(&pairs, delta, cfg.near_fraction, rng)?;
        for i in picked {
            let p = &window_pending[i];
            let cloud_action = cloud_oracle(&p.task, &p.ctx, params.p_correct, rng);
            caches.push_rm(CachedTuple {
                task: Arc::clone(&p.task),
                ctx: p.ctx.clone(),
                edge_action: p.edge_action.clone(),
                cloud_action,
                score: p.score,
                net_state: p.net_state,
            });
        }
    }
    window_pending.clear();
    window_scores.clear();

    // Two-stage policy update.
    if !caches.rl().is_empty() && cfg.updates_per_window > 0 {
        let mut ppo = cfg.ppo;
        if !cfg.anchor_on {
            ppo.anchor_period = 0;
        }
        let report: TwoStageReport = two_stage_update(
            policy,
            caches,
            sft_ref,
            anchor_pool,
            &ppo,
            cfg.updates_per_window,
            rng,
        )?;
        let schema_rate = mean_malformed_prob(policy, caches);
        for (diag, composite) in report.diagnostics.iter().zip(&report.composites) {
            *updates_done += 1;
            training.push(TrainingRow {
                update: *updates_done,
                mean_reward: diag.mean_reward,
                kl: diag.final_kl,
                clip_frac: diag.final_clip_fraction,
                schema_rate,
                composite: *composite,
            });
        }
    }

    // Incremental RM refresh on cached edge/cloud pairs.
    if cfg.rm_refresh_on && !caches.rm().is_empty() {
        let pairs: Vec<PreferencePair> = caches
            .rm()
            .iter()
            .map(|t| {
                PreferencePair::new(
                    Arc::clone(&t.task),
                    t.ctx.clone(),
                    t.cloud_action.clone(),
                    t.edge_action.clone(),
                )
            })
            .collect();
        let mut rm_cfg = cfg.rm_refresh;
        rm_cfg.seed = rng.random_range(0..u64::MAX);
        let (refreshed, _) = rm_train(rm, &pairs, &rm_cfg)?;
        *rm = refreshed;
    }

    // Recalibrate threshold controllers from cached tuples.
    if cfg.recalibrate {
        if let Some(tau0) = recalibrated_tau0(caches, params)? {
            match controller {
                RunController::Fixed { tau }
                | RunController::OneshotRouter { tau }
                | RunController::FixedCascade { tau } => *tau = tau0,
                RunController::FuncDyn(p) => p.tau0 = tau0,
                _ => {}
            }
        }
    }
    Ok(())
}

/// Empirical tau0 from cached tuples: both venue utilities are recomputable
/// from the stored actions and network state.
fn recalibrated_tau0(caches: &Caches, params: &SimParams) -> Result<Option<f64>> {
    if caches.rm().len() < 32 {
        return Ok(None);
    }
    let lambda = params.cost.lambda;
    let mut recs = Vec::with_capacity(caches.rm().len());
    for t in caches.rm() {
        let k = t.ctx.k;
        let q_e = step_quality(
            validate_schema(&t.edge_action, &t.task),
            evaluate_quality(&t.edge_action, &t.task, k),
        )?;
        let c_e = step_cost(
            step_latency(Decision::Edge, &params.latency, &t.net_state)?,
            0,
            &params.cost,
        );
        let q_c = step_quality(
            validate_schema(&t.cloud_action, &t.task),
            evaluate_quality(&t.cloud_action, &t.task, k),
        )?;
        let c_c = step_cost(
            step_latency(Decision::Cloud, &params.latency, &t.net_state)?,
            cloud_tokens(t.ctx.completed.len()),
            &params.cost,
        );
        recs.push((t.score, q_e - lambda * c_e, q_c - lambda * c_c));
    }
    Ok(Some(empirical_tau0(&recs)?.tau))
}

fn mean_malformed_prob(policy: &EdgePolicy, caches: &Caches) -> f64 {
    let sample: Vec<&RlSample> = caches.rl().iter().rev().take(128).collect();
    if sample.is_empty() {
        return 0.0;
    }
    sample
        .iter()
        .map(|s| policy.malformed_prob(&s.task, &s.ctx))
        .sum::<f64>()
        / sample.len() as f64
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

// ---------------------------------------------------------------------------
// Risk-coverage
// ---------------------------------------------------------------------------

/// One point of a risk-coverage curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskCoveragePoint {
    pub tau: f64,
    pub coverage: f64,
    pub selective_risk: f64,
}

/// Risk-coverage curve over `(score, cloud_better)` records: coverage is the
/// edge-accepted fraction at threshold tau, selective risk the
/// should-have-offloaded fraction among the accepted (0 for an empty set).
pub fn risk_coverage_curve(records: &[(f64, bool)], tau_grid: &[f64]) -> Result<Vec<RiskCoveragePoint>> {
    if records.is_empty() {
        return Err(Error::usage("risk_coverage_curve needs records".to_string()));
    }
    let n = records.len() as f64;
    Ok(tau_grid
        .iter()
        .map(|&tau| {
            let accepted: Vec<&(f64, bool)> = records.iter().filter(|(s, _)| *s >= tau).collect();
            let coverage = accepted.len() as f64 / n;
            let selective_risk = if accepted.is_empty() {
                0.0
            } else {
                accepted.iter().filter(|(_, cb)| *cb).count() as f64 / accepted.len() as f64
            };
            RiskCoveragePoint {
                tau,
                coverage,
                selective_risk,
            }
        })
        .collect())
}

/// A grid of `n` thresholds spanning the observed scores.
pub fn tau_grid_spanning(scores: &[f64], n: usize) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::usage("cannot build a tau grid from no scores".to_string()));
    }
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(crate::theory::linspace(lo, hi, n.max(2)))
}

/// Selective risk at matched coverage by linear interpolation: for each
/// coverage level, the risk the curve attains there.
pub fn risk_at_coverage(curve: &[RiskCoveragePoint], coverage: f64) -> f64 {
    // Sort by coverage ascending.
    let mut pts: Vec<(f64, f64)> = curve.iter().map(|p| (p.coverage, p.selective_risk)).collect();
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    if coverage <= pts[0].0 {
        return pts[0].1;
    }
    if coverage >= pts[pts.len() - 1].0 {
        return pts[pts.len() - 1].1;
    }
    for w in pts.windows(2) {
        let (c0, r0) = w[0];
        let (c1, r1) = w[1];
        if coverage >= c0 && coverage <= c1 {
            if c1 == c0 {
                return r0.min(r1);
            }
            let t = (coverage - c0) / (c1 - c0);
            return r0 + t * (r1 - r0);
        }
    }
    pts[pts.len() - 1].1
}

// ---------------------------------------------------------------------------
// Threshold scan
// ---------------------------------------------------------------------------

/// One row of a threshold scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub lambda: f64,
    pub tau: f64,
    pub q: f64,
    pub c: f64,
    pub j: f64,
}

/// Scan result: all rows plus the per-lambda argmax tau.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanTable {
    pub rows: Vec<ScanRow>,
    pub argmax: Vec<(f64, f64)>,
}

/// Sweep fixed thresholds over the corpus with a frozen policy and RM; for
/// each lambda report per-tau (Q, C, J) averaged over seeds and the
/// J-maximizing tau (ties toward the smaller tau).
///
/// Episode dynamics under a fixed threshold do not depend on lambda, so each
/// (seed, tau) cell runs once and J is re-derived per lambda. Cells run in
/// parallel; assembly order is deterministic.
#[allow(clippy::too_many_arguments)]
pub fn threshold_scan(
    tasks: &[Arc<Task>],
    trace: &[TraceStep],
    policy: &EdgePolicy,
    rm: &RewardModel,
    params: &SimParams,
    tau_grid: &[f64],
    lambdas: &[f64],
    seeds: &[u64],
) -> Result<ScanTable> {
    if lambdas.is_empty() {
        return Err(Error::usage("threshold scan needs at least one lambda".to_string()));
    }
    if tau_grid.is_empty() || seeds.is_empty() {
        return Err(Error::usage("threshold scan needs taus and seeds".to_string()));
    }
    let mut params = *params;
    params.counterfactual = false;

    // (tau, seed) -> per-task (q, c) sums.
    let cells: Vec<Result<(usize, Vec<(f64, f64)>)>> = tau_grid
        .par_iter()
        .enumerate()
        .flat_map(|(ti, &tau)| {
            seeds.par_iter().map(move |&seed| (ti, tau, seed))
        })
        .map(|(ti, tau, seed)| {
            let controller = RunController::Fixed { tau };
            let out = run_experiment(
                tasks,
                trace,
                policy,
                rm,
                &controller,
                &params,
                None,
                None,
                seed,
            )?;
            Ok((ti, out.aggregates.iter().map(|a| (a.q, a.c)).collect()))
        })
        .collect();

    // Mean Q and C per tau across seeds and tasks.
    let mut q_sum = vec![0.0; tau_grid.len()];
    let mut c_sum = vec![0.0; tau_grid.len()];
    let mut n_cell = vec![0usize; tau_grid.len()];
    for cell in cells {
        let (ti, pairs) = cell?;
        for (q, c) in pairs {
            q_sum[ti] += q;
            c_sum[ti] += c;
            n_cell[ti] += 1;
        }
    }

    let mut rows = Vec::with_capacity(tau_grid.len() * lambdas.len());
    let mut argmax = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut best: Option<(f64, f64)> = None;
        for (ti, &tau) in tau_grid.iter().enumerate() {
            let n = n_cell[ti] as f64;
            let q = q_sum[ti] / n;
            let c = c_sum[ti] / n;
            let j = q - lambda * c;
            rows.push(ScanRow { lambda, tau, q, c, j });
            match best {
                // Strict improvement only: ties keep the smaller tau.
                Some((_, best_j)) if j <= best_j => {}
                _ => best = Some((tau, j)),
            }
        }
        argmax.push((lambda, best.expect("nonempty grid").0));
    }
    Ok(ScanTable { rows, argmax })
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

/// Offline calibration products: the empirical tau0, per-regime tau0 values,
/// a FuncDyn controller fitted to them, and PolicyNet training data.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub tau0: f64,
    pub per_regime_tau0: BTreeMap<String, f64>,
    pub funcdyn: FuncDynParams,
    pub score_bounds: (f64, f64),
    /// (features, label) pairs for PolicyNet training.
    pub policynet_data: Vec<([f64; 4], u8)>,
}

/// Calibrate thresholds on an all-edge counterfactual run: collect
/// (score, j_edge, j_cloud) records, pick tau0 by empirical utility
/// maximization (globally and per regime), and fit the FuncDyn offsets so the
/// linear rule reproduces the per-regime thresholds at the regime feature
/// means.
pub fn calibrate(
    tasks: &[Arc<Task>],
    trace: &[TraceStep],
    policy: &EdgePolicy,
    rm: &RewardModel,
    params: &SimParams,
    seed: u64,
) -> Result<Calibration> {
    let mut params = *params;
    params.counterfactual = true;
    let out = run_experiment(
        tasks,
        trace,
        policy,
        rm,
        &RunController::AllEdge,
        &params,
        None,
        None,
        seed,
    )?;
    let recs: Vec<(f64, f64, f64)> = out
        .records
        .iter()
        .map(|r| (r.score, r.j_edge.unwrap(), r.j_cloud.unwrap()))
        .collect();
    if recs.is_empty() {
        return Err(Error::runtime("calibration run produced no records".to_string()));
    }
    let tau0 = empirical_tau0(&recs)?.tau;

    let norm = crate::controllers::NormBounds::regime_envelope();
    let mut per_regime_tau0 = BTreeMap::new();
    // Per-regime records and normalized feature means.
    let mut regressors: Vec<(f64, f64, f64)> = Vec::new(); // (rtt_norm mean, bw_norm mean, tau0_regime)
    for name in [RegimeName::Good, RegimeName::Mid, RegimeName::Bad] {
        let group: Vec<&StepRecord> = out.records.iter().filter(|r| r.regime == name).collect();
        if group.len() < 16 {
            continue;
        }
        let grecs: Vec<(f64, f64, f64)> = group
            .iter()
            .map(|r| (r.score, r.j_edge.unwrap(), r.j_cloud.unwrap()))
            .collect();
        let t = empirical_tau0(&grecs)?.tau;
        per_regime_tau0.insert(name.to_string(), t);
        let n = group.len() as f64;
        let rtt_mean = group.iter().map(|r| norm.rtt_norm(r.state.rtt)).sum::<f64>() / n;
        let bw_mean = group.iter().map(|r| norm.bw_norm(r.state.bw)).sum::<f64>() / n;
        regressors.push((rtt_mean, bw_mean, t));
    }

    // Fit tau = base - a*rtt_norm + b*bw_norm through the regime anchors by
    // least squares, clamping the slopes to the nonnegativity invariant.
    let funcdyn = fit_funcdyn(&regressors, tau0, norm);

    let scores: Vec<f64> = out.records.iter().map(|r| r.score).collect();
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let score_bounds = if lo < hi { (lo, hi) } else { (lo - 0.5, lo + 0.5) };

    let policynet_data: Vec<([f64; 4], u8)> = out
        .records
        .iter()
        .map(|r| {
            let s_norm = ((r.score - score_bounds.0) / (score_bounds.1 - score_bounds.0))
                .clamp(0.0, 1.0);
            let features = [
                norm.rtt_norm(r.state.rtt),
                norm.bw_norm(r.state.bw),
                s_norm,
                r.q_hat,
            ];
            (features, u8::from(r.cloud_better.unwrap()))
        })
        .collect();

    Ok(Calibration {
        tau0,
        per_regime_tau0,
        funcdyn,
        score_bounds,
        policynet_data,
    })
}

fn fit_funcdyn(
    regressors: &[(f64, f64, f64)],
    tau0: f64,
    norm: crate::controllers::NormBounds,
) -> FuncDynParams {
    // With fewer than 3 regime anchors fall back to mild default slopes.
    if regressors.len() < 3 {
        return FuncDynParams::new(tau0, 1.0, 0.5, 0.5, norm).expect("nonnegative defaults");
    }
    // Solve min sum (base - a*r_i + b*w_i - t_i)^2 via the 3x3 normal
    // equations in (base, a, b); design columns (1, -rtt, +bw).
    let mut ata = [[0.0f64; 3]; 3];
    let mut atb = [0.0f64; 3];
    for &(r, w, t) in regressors {
        let row = [1.0, -r, w];
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
            }
            atb[i] += row[i] * t;
        }
    }
    let sol = solve3(ata, atb);
    match sol {
        Some([base, a, b]) if a >= 0.0 && b >= 0.0 => {
            FuncDynParams::new(base, a, b, 0.0, norm).expect("checked nonnegative")
        }
        _ => FuncDynParams::new(tau0, 1.0, 0.5, 0.5, norm).expect("nonnegative defaults"),
    }
}

fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(a);
    if d.abs() < 1e-12 {
        return None;
    }
    let mut out = [0.0; 3];
    for k in 0..3 {
        let mut m = a;
        for row in 0..3 {
            m[row][k] = b[row];
        }
        out[k] = det(m) / d;
    }
    Some(out)
}

// ---------------------------------------------------------------------------
// Offline initialization
// ---------------------------------------------------------------------------

/// Products of the offline initialization stage: a supervised edge policy,
/// an initial reward model fitted on preference pairs, and the threshold
/// calibration.
#[derive(Debug, Clone)]
pub struct WorldSetup {
    pub sft_tasks: Vec<Arc<Task>>,
    pub rm_tasks: Vec<Arc<Task>>,
    pub eval_tasks: Vec<Arc<Task>>,
    pub policy_sft: EdgePolicy,
    pub rm: RewardModel,
    pub calibration: Calibration,
}

/// Corpus split fractions for initialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetupConfig {
    pub sft_fraction: f64,
    pub rm_fraction: f64,
    pub sft: crate::learning::SftConfig,
    pub rm_train: RmTrainConfig,
}

impl Default for SetupConfig {
    fn default() -> Self {
        SetupConfig {
            sft_fraction: 0.4,
            rm_fraction: 0.2,
            sft: crate::learning::SftConfig::default(),
            rm_train: RmTrainConfig::default(),
        }
    }
}

/// Initialize the world from a task corpus: fit the SFT policy on teacher
/// traces, fit the reward model on cloud-vs-edge preference pairs, and
/// calibrate thresholds on a counterfactual pass.
pub fn setup_world(
    tasks: &[Arc<Task>],
    calib_trace: &[TraceStep],
    params: &SimParams,
    config: &SetupConfig,
    seed: u64,
) -> Result<WorldSetup> {
    if tasks.len() < 10 {
        return Err(Error::usage("setup needs at least 10 tasks".to_string()));
    }
    let n_sft = ((tasks.len() as f64) * config.sft_fraction) as usize;
    let n_rm = ((tasks.len() as f64) * config.rm_fraction) as usize;
    let sft_tasks = tasks[..n_sft].to_vec();
    let rm_tasks = tasks[n_sft..n_sft + n_rm].to_vec();
    let eval_tasks = tasks[n_sft + n_rm..].to_vec();

    // SFT initialization on teacher traces.
    let mut policy_sft = EdgePolicy::zeros();
    let dataset = sft_dataset(&sft_tasks);
    let mut sft_cfg = config.sft;
    sft_cfg.seed = derive_seed(seed, "sft");
    crate::learning::sft_fit(&mut policy_sft, &dataset, &sft_cfg)?;

    // Preference pairs: cloud draws preferred, post-SFT edge samples rejected.
    let mut pair_rng = experiment_rng(seed, "rm-pairs");
    let mut pairs = Vec::new();
    for task in &rm_tasks {
        for (ctx, _) in crate::world::target_contexts(task) {
            let preferred = cloud_oracle(task, &ctx, params.p_correct, &mut pair_rng);
            let (rejected, _) = policy_sft.sample(task, &ctx, &mut pair_rng);
            pairs.push(PreferencePair::new(
                Arc::clone(task),
                ctx,
                preferred,
                rejected,
            ));
        }
    }
    let mut rm_cfg = config.rm_train;
    rm_cfg.seed = derive_seed(seed, "rm-train");
    let (rm, _) = rm_train(&RewardModel::zeros(), &pairs, &rm_cfg)?;

    let calibration = calibrate(&eval_tasks, calib_trace, &policy_sft, &rm, params, seed)?;
    Ok(WorldSetup {
        sft_tasks,
        rm_tasks,
        eval_tasks,
        policy_sft,
        rm,
        calibration,
    })
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

pub const STEP_LOG_HEADER: &str =
    "task,step,score,threshold,decision,rtt_ms,bw_mbps,latency_s,cost,quality,schema_ok,cloud_better";

/// Render step records in the step-log CSV format (floats at 9 significant
/// digits; the counterfactual column is empty when disabled).
pub fn step_log_to_csv(records: &[StepRecord]) -> String {
    let mut out = String::from(STEP_LOG_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.task_id,
            r.step,
            sig9(r.score),
            sig9(r.basis),
            r.decision,
            sig9(r.state.rtt_ms()),
            sig9(r.state.bw_mbps()),
            sig9(r.latency),
            sig9(r.cost),
            sig9(r.quality),
            r.schema_ok,
            r.cloud_better.map_or(String::new(), |b| b.to_string()),
        ));
    }
    out
}

/// Auxiliary counterfactual table consumed by `tau0` and `train-policynet`.
pub const CF_LOG_HEADER: &str = "task,step,score,q_hat,rtt_ms,bw_mbps,j_edge,j_cloud,cloud_better";

pub fn cf_log_to_csv(records: &[StepRecord]) -> Result<String> {
    let mut out = String::from(CF_LOG_HEADER);
    out.push('\n');
    for r in records {
        let (Some(je), Some(jc), Some(cb)) = (r.j_edge, r.j_cloud, r.cloud_better) else {
            return Err(Error::usage(
                "cannot write a counterfactual log from a run without counterfactuals".to_string(),
            ));
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.task_id,
            r.step,
            sig9(r.score),
            sig9(r.q_hat),
            sig9(r.state.rtt_ms()),
            sig9(r.state.bw_mbps()),
            sig9(je),
            sig9(jc),
            cb,
        ));
    }
    Ok(out)
}

/// Parse `(score, cloud_better)` pairs from a step log. Errors when the
/// counterfactual column is absent or empty.
pub fn risk_records_from_step_log(text: &str) -> Result<Vec<(f64, bool)>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::usage("empty step log".to_string()))?;
    let cols: Vec<&str> = header.trim().split(',').collect();
    let score_idx = cols
        .iter()
        .position(|c| *c == "score")
        .ok_or_else(|| Error::usage("step log lacks a score column".to_string()))?;
    let cb_idx = cols.iter().position(|c| *c == "cloud_better").ok_or_else(|| {
        Error::usage(
            "step log lacks the cloud_better column; rerun the sim with counterfactuals enabled"
                .to_string(),
        )
    })?;
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let score: f64 = fields
            .get(score_idx)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::usage(format!("bad score at line {}", lineno + 2)))?;
        let cb_field = fields.get(cb_idx).map(|s| s.trim()).unwrap_or("");
        if cb_field.is_empty() {
            return Err(Error::usage(format!(
                "cloud_better is empty at line {}; rerun the sim with counterfactuals enabled",
                lineno + 2
            )));
        }
        let cb: bool = cb_field
            .parse()
            .map_err(|_| Error::usage(format!("bad cloud_better at line {}", lineno + 2)))?;
        records.push((score, cb));
    }
    if records.is_empty() {
        return Err(Error::usage("step log has no data rows".to_string()));
    }
    Ok(records)
}

/// Render risk-coverage points as CSV.
pub fn risk_coverage_to_csv(points: &[RiskCoveragePoint]) -> String {
    let mut out = String::from("tau,coverage,selective_risk\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{}\n",
            sig9(p.tau),
            sig9(p.coverage),
            sig9(p.selective_risk)
        ));
    }
    out
}

/// Render training diagnostics as CSV.
pub fn training_to_csv(rows: &[TrainingRow]) -> String {
    let mut out = String::from("update,mean_reward,kl,clip_frac,schema_rate,composite\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.update,
            sig9(r.mean_reward),
            sig9(r.kl),
            sig9(r.clip_frac),
            sig9(r.schema_rate),
            sig9(r.composite)
        ));
    }
    out
}

/// Render scan rows as CSV.
pub fn scan_to_csv(table: &ScanTable) -> String {
    let mut out = String::from("lambda,tau,q,c,j\n");
    for r in &table.rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            sig9(r.lambda),
            sig9(r.tau),
            sig9(r.q),
            sig9(r.c),
            sig9(r.j)
        ));
    }
    out
}

/// Metrics summary serialized as JSON with floats rounded to 9 significant
/// digits.
pub fn metrics_to_json(metrics: &MetricsSummary) -> String {
    let rounded = MetricsSummary {
        mean_j: crate::format::round_sig9(metrics.mean_j),
        mean_q: crate::format::round_sig9(metrics.mean_q),
        total_c: crate::format::round_sig9(metrics.total_c),
        offload_rate: crate::format::round_sig9(metrics.offload_rate),
        schema_violation_rate: crate::format::round_sig9(metrics.schema_violation_rate),
        edge_schema_violation_rate: crate::format::round_sig9(metrics.edge_schema_violation_rate),
        mean_score: crate::format::round_sig9(metrics.mean_score),
        per_regime: metrics
            .per_regime
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    RegimeMetrics {
                        steps: v.steps,
                        mean_quality: crate::format::round_sig9(v.mean_quality),
                        total_cost: crate::format::round_sig9(v.total_cost),
                        offload_rate: crate::format::round_sig9(v.offload_rate),
                    },
                )
            })
            .collect(),
        ..metrics.clone()
    };
    serde_json::to_string_pretty(&rounded).expect("metrics serialize")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{make_trace, DriftParams, Regime};
    use crate::world::{generate_tasks, CorpusConfig};

    fn tasks(count: usize, seed: u64) -> Vec<Arc<Task>> {
        generate_tasks(&CorpusConfig {
            count,
            seed,
            ..CorpusConfig::default()
        })
        .unwrap()
        .into_iter()
        .map(Arc::new)
        .collect()
    }

    fn long_trace(seed: u64) -> Vec<TraceStep> {
        make_trace(
            &[(Regime::good(), 4000), (Regime::mid(), 4000), (Regime::bad(), 4000)],
            &DriftParams::default(),
            seed,
        )
        .unwrap()
    }

    fn finish_only_task() -> Arc<Task> {
        Arc::new(
            generate_tasks(&CorpusConfig {
                count: 1,
                tool_range: (10, 20),
                target_len_range: (1, 1),
                seed: 5,
            })
            .unwrap()
            .remove(0),
        )
    }

    #[test]
    fn minimal_episode_all_edge() {
        let task = finish_only_task();
        let trace = long_trace(1);
        let mut cursor = TraceCursor::new(&trace);
        let mut rng = experiment_rng(1, "episodes");
        let mut cf = experiment_rng(1, "cf");
        let policy = EdgePolicy::zeros();
        let rm = RewardModel::zeros();
        let out = run_episode(
            &task,
            &policy,
            &rm,
            &RunController::AllEdge,
            &mut cursor,
            &SimParams::default(),
            0.5,
            &mut rng,
            &mut cf,
        )
        .unwrap();
        // Zero policy may sample any tool; the episode ends at finish or the
        // cap, every decision Edge, no RM tuples cached.
        assert!(out.records.iter().all(|r| r.decision == Decision::Edge));
        assert!(out.rm_tuples.is_empty());
        assert_eq!(out.rl_samples.len(), out.records.len());
    }

    #[test]
    fn all_cloud_offloads_and_caches_every_step() {
        let ts = tasks(5, 2);
        let trace = long_trace(2);
        // Exact cloud: every episode runs its target length, all offloaded.
        let params = SimParams {
            p_correct: 1.0,
            ..SimParams::default()
        };
        let out = run_experiment(
            &ts,
            &trace,
            &EdgePolicy::zeros(),
            &RewardModel::zeros(),
            &RunController::AllCloud,
            &params,
            None,
            None,
            3,
        )
        .unwrap();
        assert_eq!(out.metrics.offload_rate, 1.0);
        let total_steps: usize = ts.iter().map(|t| t.target.len()).sum();
        assert_eq!(out.records.len(), total_steps);
    }

    #[test]
    fn ewma_direct_substitution() {
        // One step, all-edge, quality forced to 1 by a saturated policy.
        let params = SimParams {
            ewma_beta: 0.2,
            ..SimParams::default()
        };
        let task = finish_only_task();
        let trace = long_trace(3);
        let mut cursor = TraceCursor::new(&trace);
        let mut rng = experiment_rng(4, "episodes");
        let mut cf = experiment_rng(4, "cf");
        let mut policy = EdgePolicy::zeros();
        let layout = crate::world::policy_layout();
        let g = crate::world::tool_pool_index("finish").unwrap();
        let f = layout.f_dim;
        policy.params_mut()[g * f + f - 1] = 200.0;
        let out = run_episode(
            &task,
            &policy,
            &RewardModel::zeros(),
            &RunController::AllEdge,
            &mut cursor,
            &params,
            0.5,
            &mut rng,
            &mut cf,
        )
        .unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].quality, 1.0);
        assert!((out.q_hat - 0.6).abs() < 1e-12, "q_hat {}", out.q_hat);
    }

    #[test]
    fn experiment_is_deterministic() {
        let ts = tasks(30, 6);
        let trace = long_trace(7);
        let params = SimParams {
            counterfactual: true,
            ..SimParams::default()
        };
        let run = || {
            run_experiment(
                &ts,
                &trace,
                &EdgePolicy::zeros(),
                &RewardModel::zeros(),
                &RunController::Fixed { tau: 0.0 },
                &params,
                None,
                None,
                11,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.records, b.records);
        assert_eq!(step_log_to_csv(&a.records), step_log_to_csv(&b.records));
        assert_eq!(metrics_to_json(&a.metrics), metrics_to_json(&b.metrics));
    }

    #[test]
    fn counterfactuals_do_not_perturb_the_routed_trajectory() {
        let ts = tasks(20, 8);
        let trace = long_trace(9);
        let base = SimParams::default();
        let with_cf = SimParams {
            counterfactual: true,
            ..base
        };
        let run = |p: &SimParams| {
            run_experiment(
                &ts,
                &trace,
                &EdgePolicy::zeros(),
                &RewardModel::zeros(),
                &RunController::Fixed { tau: 0.0 },
                p,
                None,
                None,
                13,
            )
            .unwrap()
        };
        let plain = run(&base);
        let cf = run(&with_cf);
        assert_eq!(plain.records.len(), cf.records.len());
        for (a, b) in plain.records.iter().zip(&cf.records) {
            assert_eq!(a.decision, b.decision);
            assert_eq!(a.score, b.score);
            assert_eq!(a.quality, b.quality);
            assert!(a.cloud_better.is_none() && b.cloud_better.is_some());
        }
    }

    #[test]
    fn oracle_dominance_all_cloud_vs_all_edge() {
        let ts = tasks(60, 10);
        let trace = long_trace(11);
        let run = |c: &RunController| {
            run_experiment(
                &ts,
                &trace,
                &EdgePolicy::zeros(),
                &RewardModel::zeros(),
                c,
                &SimParams::default(),
                None,
                None,
                17,
            )
            .unwrap()
            .metrics
        };
        let edge = run(&RunController::AllEdge);
        let cloud = run(&RunController::AllCloud);
        assert!(cloud.mean_q >= edge.mean_q, "{} < {}", cloud.mean_q, edge.mean_q);
        assert!(cloud.total_c >= edge.total_c);
        assert_eq!(edge.offload_rate, 0.0);
        // Offload + edge rate = 1 on every run.
        assert_eq!(cloud.offload_rate, 1.0);
    }

    #[test]
    fn oneshot_router_locks_the_venue() {
        let ts = tasks(40, 12);
        let trace = long_trace(13);
        let out = run_experiment(
            &ts,
            &trace,
            &EdgePolicy::zeros(),
            &RewardModel::zeros(),
            &RunController::OneshotRouter { tau: 0.0 },
            &SimParams::default(),
            None,
            None,
            19,
        )
        .unwrap();
        let mut by_task: BTreeMap<u64, Vec<Decision>> = BTreeMap::new();
        for r in &out.records {
            by_task.entry(r.task_id).or_default().push(r.decision);
        }
        for (_, decisions) in by_task {
            assert!(decisions.windows(2).all(|w| w[0] == w[1]), "venue changed mid-task");
        }
    }

    #[test]
    fn counterfactual_fixture_matches_hand_enumeration() {
        // p_correct = 1: the cloud action is always the target. The edge
        // action is correct iff the policy is saturated toward the target.
        let ts = tasks(10, 14);
        let params = SimParams {
            counterfactual: true,
            p_correct: 1.0,
            ..SimParams::default()
        };
        let mut cf_rng = experiment_rng(23, "cf");
        let mut cloud_better = 0usize;
        let mut total = 0usize;
        for t in &ts {
            let pairs = crate::world::target_contexts(t);
            for (i, (ctx, action)) in pairs.iter().enumerate() {
                // Edge proposes the exact target: edge must win ties (costs
                // make the cloud strictly worse).
                let cf = counterfactual_eval(t, ctx, i, action, &Regime::mid().midpoint(), &params, &mut cf_rng)
                    .unwrap();
                assert!(cf.edge_better, "exact edge action must beat the cloud on cost");
                total += 1;
                // Edge proposes a wrong tool: quality gap 1.0 vs 0 dominates
                // the extra cloud cost at lambda = 10.
                let wrong = StructuredAction {
                    tool: "__malformed__".to_string(),
                    args: Default::default(),
                    thought: String::new(),
                };
                let cf = counterfactual_eval(t, ctx, i, &wrong, &Regime::mid().midpoint(), &params, &mut cf_rng)
                    .unwrap();
                if !cf.edge_better {
                    cloud_better += 1;
                }
                total += 1;
            }
        }
        // Hand enumeration: every exact pair -> edge_better; every malformed
        // pair -> cloud_better. So cloud_better count = total / 2.
        assert_eq!(cloud_better, total / 2);
    }

    #[test]
    fn risk_coverage_hand_enumeration() {
        let records = [(1.0, true), (2.0, false), (3.0, true), (4.0, false)];
        let curve = risk_coverage_curve(&records, &[2.5]).unwrap();
        assert_eq!(curve[0].coverage, 0.5);
        assert_eq!(curve[0].selective_risk, 0.5);
        // tau below all scores: full acceptance, risk = overall fraction.
        let full = risk_coverage_curve(&records, &[0.0]).unwrap();
        assert_eq!(full[0].coverage, 1.0);
        assert_eq!(full[0].selective_risk, 0.5);
        // tau above all scores: empty set convention.
        let empty = risk_coverage_curve(&records, &[5.0]).unwrap();
        assert_eq!(empty[0].coverage, 0.0);
        assert_eq!(empty[0].selective_risk, 0.0);
    }

    #[test]
    fn risk_coverage_is_monotone_and_bounded() {
        let mut rng = experiment_rng(29, "rc");
        let records: Vec<(f64, bool)> = (0..500)
            .map(|_| (rng.random_range(-2.0..2.0), rng.random_range(0.0..1.0) < 0.3))
            .collect();
        let grid = tau_grid_spanning(&records.iter().map(|r| r.0).collect::<Vec<_>>(), 101).unwrap();
        let curve = risk_coverage_curve(&records, &grid).unwrap();
        for w in curve.windows(2) {
            assert!(w[1].coverage <= w[0].coverage, "coverage must be nonincreasing");
        }
        for p in &curve {
            assert!((0.0..=1.0).contains(&p.selective_risk));
            assert!((0.0..=1.0).contains(&p.coverage));
        }
    }

    #[test]
    fn scan_shape_and_tie_break() {
        let ts = tasks(10, 15);
        let trace = long_trace(16);
        let table = threshold_scan(
            &ts,
            &trace,
            &EdgePolicy::zeros(),
            &RewardModel::zeros(),
            &SimParams::default(),
            &[0.0],
            &[8.0, 10.0, 12.0],
            &[31],
        )
        .unwrap();
        // Degenerate single-tau grid: one row per lambda.
        assert_eq!(table.rows.len(), 3);
        assert_eq!(table.argmax.len(), 3);
        for (_, tau) in &table.argmax {
            assert_eq!(*tau, 0.0);
        }
    }

    #[test]
    fn step_log_round_trip_for_risk_records() {
        let ts = tasks(10, 17);
        let trace = long_trace(18);
        let params = SimParams {
            counterfactual: true,
            ..SimParams::default()
        };
        let out = run_experiment(
            &ts,
            &trace,
            &EdgePolicy::zeros(),
            &RewardModel::zeros(),
            &RunController::Fixed { tau: 0.0 },
            &params,
            None,
            None,
            37,
        )
        .unwrap();
        let csv = step_log_to_csv(&out.records);
        let parsed = risk_records_from_step_log(&csv).unwrap();
        assert_eq!(parsed.len(), out.records.len());
        // Without counterfactuals the parse must fail with a hint.
        let plain = run_experiment(
            &ts,
            &trace,
            &EdgePolicy::zeros(),
            &RewardModel::zeros(),
            &RunController::Fixed { tau: 0.0 },
            &SimParams::default(),
            None,
            None,
            37,
        )
        .unwrap();
        let err = risk_records_from_step_log(&step_log_to_csv(&plain.records)).unwrap_err();
        assert!(err.to_string().contains("counterfactual"));
    }

    #[test]
    fn trace_exhaustion_is_reported() {
        let ts = tasks(50, 19);
        let short = make_trace(&[(Regime::good(), 3)], &DriftParams::default(), 20).unwrap();
        let err = run_experiment(
            &ts,
            &short,
            &EdgePolicy::zeros(),
            &RewardModel::zeros(),
            &RunController::AllEdge,
            &SimParams::default(),
            None,
            None,
            41,
        )
        .unwrap_err();
        assert!(err.to_string().contains("trace exhausted"));
    }

    #[test]
    fn metrics_identity_mean_j() {
        let ts = tasks(25, 21);
        let trace = long_trace(22);
        let out = run_experiment(
            &ts,
            &trace,
            &EdgePolicy::zeros(),
            &RewardModel::zeros(),
            &RunController::Fixed { tau: 0.0 },
            &SimParams::default(),
            None,
            None,
            43,
        )
        .unwrap();
        let m = &out.metrics;
        let lambda = SimParams::default().cost.lambda;
        let expect = m.mean_q - lambda * m.total_c / m.tasks as f64;
        assert!((m.mean_j - expect).abs() < 1e-10);
        assert!(m.offload_rate >= 0.0 && m.offload_rate <= 1.0);
    }

    #[test]
    fn learning_caches_follow_cache_rules() {
        let ts = tasks(70, 23);
        let trace = long_trace(24);
        let learning = LearningConfig {
            idle_window: 64,
            updates_per_window: 1,
            ..LearningConfig::default()
        };
        let out = run_experiment(
            &ts,
            &trace,
            &EdgePolicy::zeros(),
            &RewardModel::zeros(),
            &RunController::Fixed { tau: 0.0 },
            &SimParams::default(),
            Some(&learning),
            None,
            47,
        )
        .unwrap();
        assert!(!out.training.is_empty(), "idle window must have fired");
        for w in out.training.windows(2) {
            assert_eq!(w[1].update, w[0].update + 1);
        }
    }
}
