//! Online self-improvement: reward-model scoring and refresh, clipped PPO
//! with an exact KL penalty, SFT anchoring, the composite monitoring
//! objective, and the bounded RM/RL caches with near-threshold sampling.
//!
//! Policies implement [`PolicyModel`]: a flat parameter vector plus exact
//! log-probabilities, KLs, cross-entropies, and their analytic gradients.
//! The PPO objective and its gradient are separate functions so finite
//! differences can check the gradient of exactly the quantity being ascended.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::NetworkState;
use crate::world::{
    policy_layout, tool_pool_index, validate_schema, Context, EdgePolicy, StructuredAction, Task,
    FAMILIES,
};

// ---------------------------------------------------------------------------
// Policy abstraction
// ---------------------------------------------------------------------------

/// A stochastic policy with a flat parameter vector and exact divergence
/// gradients. `add_scaled_*` methods accumulate `weight * grad` into a dense
/// buffer of `param_len` entries.
pub trait PolicyModel: Clone {
    type Ctx;
    type Action;

    fn param_len(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    fn log_prob(&self, ctx: &Self::Ctx, action: &Self::Action) -> f64;
    fn add_scaled_grad_log_prob(
        &self,
        ctx: &Self::Ctx,
        action: &Self::Action,
        weight: f64,
        out: &mut [f64],
    );

    /// Reverse KL(self || old) at one context.
    fn kl_to(&self, old: &Self, ctx: &Self::Ctx) -> f64;
    fn add_scaled_grad_kl(&self, old: &Self, ctx: &Self::Ctx, weight: f64, out: &mut [f64]);

    /// Cross-entropy H(reference, self) at one context.
    fn cross_entropy_from(&self, reference: &Self, ctx: &Self::Ctx) -> f64;
    fn add_scaled_grad_cross_entropy(
        &self,
        reference: &Self,
        ctx: &Self::Ctx,
        weight: f64,
        out: &mut [f64],
    );

    /// Forward KL(reference || self) at one context.
    fn forward_kl_from(&self, reference: &Self, ctx: &Self::Ctx) -> f64;
}

/// Context handle the caches store: the task plus a context snapshot.
#[derive(Debug, Clone)]
pub struct RlContext {
    pub task: Arc<Task>,
    pub ctx: Context,
}

impl PolicyModel for EdgePolicy {
    type Ctx = RlContext;
    type Action = StructuredAction;

    fn param_len(&self) -> usize {
        EdgePolicy::param_len(self)
    }

    fn params(&self) -> &[f64] {
        EdgePolicy::params(self)
    }

    fn params_mut(&mut self) -> &mut [f64] {
        EdgePolicy::params_mut(self)
    }

    fn log_prob(&self, c: &RlContext, a: &StructuredAction) -> f64 {
        EdgePolicy::log_prob(self, &c.task, &c.ctx, a)
    }

    fn add_scaled_grad_log_prob(&self, c: &RlContext, a: &StructuredAction, w: f64, out: &mut [f64]) {
        EdgePolicy::add_scaled_grad_log_prob(self, &c.task, &c.ctx, a, w, out);
    }

    fn kl_to(&self, old: &Self, c: &RlContext) -> f64 {
        EdgePolicy::kl_to(self, old, &c.task, &c.ctx)
    }

    fn add_scaled_grad_kl(&self, old: &Self, c: &RlContext, w: f64, out: &mut [f64]) {
        EdgePolicy::add_scaled_grad_kl(self, old, &c.task, &c.ctx, w, out);
    }

    fn cross_entropy_from(&self, reference: &Self, c: &RlContext) -> f64 {
        EdgePolicy::cross_entropy_from(self, reference, &c.task, &c.ctx)
    }

    fn add_scaled_grad_cross_entropy(&self, reference: &Self, c: &RlContext, w: f64, out: &mut [f64]) {
        EdgePolicy::add_scaled_grad_cross_entropy(self, reference, &c.task, &c.ctx, w, out);
    }

    fn forward_kl_from(&self, reference: &Self, c: &RlContext) -> f64 {
        EdgePolicy::forward_kl_from(self, reference, &c.task, &c.ctx)
    }
}

/// Flat linear-softmax policy over dense features: logits = W x with W of
/// shape (n_actions, dim). The smallest member of the policy family; the
/// 3-action instance is the reference point for gradient checks.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSoftmaxPolicy {
    n_actions: usize,
    dim: usize,
    params: Vec<f64>,
}

impl LinearSoftmaxPolicy {
    pub fn zeros(n_actions: usize, dim: usize) -> Self {
        LinearSoftmaxPolicy {
            n_actions,
            dim,
            params: vec![0.0; n_actions * dim],
        }
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn probs(&self, x: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = (0..self.n_actions)
            .map(|a| {
                self.params[a * self.dim..(a + 1) * self.dim]
                    .iter()
                    .zip(x)
                    .map(|(w, xi)| w * xi)
                    .sum()
            })
            .collect();
        softmax(&logits)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Exact categorical KL(p || q).
pub fn categorical_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

impl PolicyModel for LinearSoftmaxPolicy {
    type Ctx = Vec<f64>;
    type Action = usize;

    fn param_len(&self) -> usize {
        self.params.len()
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn log_prob(&self, x: &Vec<f64>, a: &usize) -> f64 {
        self.probs(x)[*a].ln()
    }

    fn add_scaled_grad_log_prob(&self, x: &Vec<f64>, a: &usize, w: f64, out: &mut [f64]) {
        let p = self.probs(x);
        for b in 0..self.n_actions {
            let coef = w * (f64::from(b == *a) - p[b]);
            for (o, xi) in out[b * self.dim..(b + 1) * self.dim].iter_mut().zip(x) {
                *o += coef * xi;
            }
        }
    }

    fn kl_to(&self, old: &Self, x: &Vec<f64>) -> f64 {
        categorical_kl(&self.probs(x), &old.probs(x))
    }

    fn add_scaled_grad_kl(&self, old: &Self, x: &Vec<f64>, w: f64, out: &mut [f64]) {
        let p = self.probs(x);
        let q = old.probs(x);
        let lr: Vec<f64> = p.iter().zip(&q).map(|(&a, &b)| (a / b).ln()).collect();
        let mean: f64 = p.iter().zip(&lr).map(|(&pi, &l)| pi * l).sum();
        for b in 0..self.n_actions {
            let coef = w * p[b] * (lr[b] - mean);
            for (o, xi) in out[b * self.dim..(b + 1) * self.dim].iter_mut().zip(x) {
                *o += coef * xi;
            }
        }
    }

    fn cross_entropy_from(&self, reference: &Self, x: &Vec<f64>) -> f64 {
        let p_ref = reference.probs(x);
        let p = self.probs(x);
        -p_ref.iter().zip(&p).map(|(&r, &s)| r * s.ln()).sum::<f64>()
    }

    fn add_scaled_grad_cross_entropy(&self, reference: &Self, x: &Vec<f64>, w: f64, out: &mut [f64]) {
        let p_ref = reference.probs(x);
        let p = self.probs(x);
        for b in 0..self.n_actions {
            let coef = w * (p[b] - p_ref[b]);
            for (o, xi) in out[b * self.dim..(b + 1) * self.dim].iter_mut().zip(x) {
                *o += coef * xi;
            }
        }
    }

    fn forward_kl_from(&self, reference: &Self, x: &Vec<f64>) -> f64 {
        categorical_kl(&reference.probs(x), &self.probs(x))
    }
}

// ---------------------------------------------------------------------------
// Reward model
// ---------------------------------------------------------------------------

const RM_POS_BUCKETS: usize = 16;

/// Linear reward model over a frozen sparse encoding of (context, action):
/// a bias, a schema-validity flag, the action tool, and the
/// (family, trace position, tool) triple.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    weights: Vec<f64>,
}

fn rm_dim() -> usize {
    let vocab = policy_layout().vocab;
    2 + vocab + FAMILIES.len() * RM_POS_BUCKETS * vocab
}

fn rm_features(task: &Task, ctx: &Context, action: &StructuredAction) -> Vec<usize> {
    let vocab = policy_layout().vocab;
    let mut idx = vec![0];
    if validate_schema(action, task) {
        idx.push(1);
    }
    if let Some(g) = tool_pool_index(&action.tool) {
        idx.push(2 + g);
        let pos = ctx.completed.len().min(RM_POS_BUCKETS - 1);
        idx.push(2 + vocab + (task.family * RM_POS_BUCKETS + pos) * vocab + g);
    }
    idx
}

impl Default for RewardModel {
    fn default() -> Self {
        Self::zeros()
    }
}

impl RewardModel {
    pub fn zeros() -> Self {
        RewardModel {
            weights: vec![0.0; rm_dim()],
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Deterministic scalar score of an action in context.
    pub fn score(&self, task: &Task, ctx: &Context, action: &StructuredAction) -> f64 {
        rm_features(task, ctx, action)
            .into_iter()
            .map(|i| self.weights[i])
            .sum()
    }
}

/// One preference pair with its schema flags.
#[derive(Debug, Clone)]
pub struct PreferencePair {
    pub task: Arc<Task>,
    pub ctx: Context,
    pub preferred: StructuredAction,
    pub rejected: StructuredAction,
    pub preferred_valid: bool,
    pub rejected_valid: bool,
}

impl PreferencePair {
    pub fn new(
        task: Arc<Task>,
        ctx: Context,
        preferred: StructuredAction,
        rejected: StructuredAction,
    ) -> Self {
        let preferred_valid = validate_schema(&preferred, &task);
        let rejected_valid = validate_schema(&rejected, &task);
        PreferencePair {
            task,
            ctx,
            preferred,
            rejected,
            preferred_valid,
            rejected_valid,
        }
    }
}

/// Pairwise ranking loss `ln(1 + exp(-(s_plus - s_minus)))`.
pub fn pairwise_loss(s_plus: f64, s_minus: f64) -> f64 {
    softplus(-(s_plus - s_minus))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Training knobs for the reward model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Score margin subtracted from schema-invalid candidates before the loss.
    pub margin: f64,
    /// Fraction of pairs held out for early stopping.
    pub val_fraction: f64,
    /// Stop after this many validation evaluations without improvement.
    pub patience: usize,
}

impl Default for RmTrainConfig {
    fn default() -> Self {
        RmTrainConfig {
            lr: 0.5,
            epochs: 60,
            batch: 64,
            seed: 0,
            margin: 1.0,
            val_fraction: 0.2,
            patience: 3,
        }
    }
}

/// Report from one RM fit.
#[derive(Debug, Clone)]
pub struct RmTrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub stopped_early: bool,
}

fn rm_pair_margin_scores(rm: &RewardModel, pair: &PreferencePair, margin: f64) -> (f64, f64) {
    let s_plus = rm.score(&pair.task, &pair.ctx, &pair.preferred)
        - if pair.preferred_valid { 0.0 } else { margin };
    let s_minus = rm.score(&pair.task, &pair.ctx, &pair.rejected)
        - if pair.rejected_valid { 0.0 } else { margin };
    (s_plus, s_minus)
}

/// Mean pairwise loss (with schema margins) over a set.
pub fn rm_mean_loss(rm: &RewardModel, pairs: &[PreferencePair], margin: f64) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs
        .iter()
        .map(|p| {
            let (sp, sm) = rm_pair_margin_scores(rm, p, margin);
            pairwise_loss(sp, sm)
        })
        .sum::<f64>()
        / pairs.len() as f64
}

/// Fit the reward model on preference pairs with mini-batch gradient descent
/// and early stopping on a held-out slice. Returns the refreshed model.
pub fn rm_train(
    rm: &RewardModel,
    pairs: &[PreferencePair],
    config: &RmTrainConfig,
) -> Result<(RewardModel, RmTrainReport)> {
    if pairs.is_empty() {
        return Err(Error::usage("rm_train needs at least one pair".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    shuffle(&mut order, &mut rng);
    let n_val = ((pairs.len() as f64 * config.val_fraction) as usize).min(pairs.len() / 2);
    let (val_idx, train_idx) = order.split_at(n_val);
    let train: Vec<PreferencePair> = train_idx.iter().map(|&i| pairs[i].clone()).collect();
    let val: Vec<PreferencePair> = val_idx.iter().map(|&i| pairs[i].clone()).collect();

    let mut model = rm.clone();
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut stale = 0usize;
    let mut train_loss = Vec::new();
    let mut val_loss = Vec::new();
    let mut stopped_early = false;
    let mut epoch_order: Vec<usize> = (0..train.len()).collect();

    for _ in 0..config.epochs {
        shuffle(&mut epoch_order, &mut rng);
        for chunk in epoch_order.chunks(config.batch.max(1)) {
            let mut grad: Vec<(usize, f64)> = Vec::new();
            for &i in chunk {
                let pair = &train[i];
                let (sp, sm) = rm_pair_margin_scores(&model, pair, config.margin);
                // dL/dd = -sigmoid(-d) with d = sp - sm.
                let coef = -sigmoid(-(sp - sm)) / chunk.len() as f64;
                for f in rm_features(&pair.task, &pair.ctx, &pair.preferred) {
                    grad.push((f, coef));
                }
                for f in rm_features(&pair.task, &pair.ctx, &pair.rejected) {
                    grad.push((f, -coef));
                }
            }
            for (f, g) in grad {
                model.weights[f] -= config.lr * g;
            }
        }
        train_loss.push(rm_mean_loss(&model, &train, config.margin));
        if !val.is_empty() {
            let vl = rm_mean_loss(&model, &val, config.margin);
            val_loss.push(vl);
            if vl + 1e-9 < best_val {
                best_val = vl;
                best = model.clone();
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    let final_model = if val.is_empty() { model } else { best };
    Ok((
        final_model,
        RmTrainReport {
            train_loss,
            val_loss,
            stopped_early,
        },
    ))
}

// ---------------------------------------------------------------------------
// Caches
// ---------------------------------------------------------------------------

/// Tuple cached for cloud-routed (or near-threshold-uploaded) steps.
#[derive(Debug, Clone)]
pub struct CachedTuple {
    pub task: Arc<Task>,
    pub ctx: Context,
    pub edge_action: StructuredAction,
    pub cloud_action: StructuredAction,
    pub score: f64,
    pub net_state: NetworkState,
}

/// One RL cache entry: the edge-proposed action with its log-probability and
/// the score-as-reward recorded at collection time.
#[derive(Debug, Clone)]
pub struct RlSample {
    pub task: Arc<Task>,
    pub ctx: Context,
    pub action: StructuredAction,
    pub log_prob: f64,
    pub reward: f64,
    /// Episode id grouping steps for return-to-go computation.
    pub episode: u64,
}

/// Bounded FIFO caches for RM and RL samples.
#[derive(Debug, Clone)]
pub struct Caches {
    rm: VecDeque<CachedTuple>,
    rl: VecDeque<RlSample>,
    capacity: usize,
}

impl Caches {
    pub fn new(capacity: usize) -> Self {
        Caches {
            rm: VecDeque::new(),
            rl: VecDeque::new(),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push_rm(&mut self, tuple: CachedTuple) {
        if self.rm.len() == self.capacity {
            self.rm.pop_front();
        }
        self.rm.push_back(tuple);
    }

    pub fn push_rl(&mut self, sample: RlSample) {
        if self.rl.len() == self.capacity {
            self.rl.pop_front();
        }
        self.rl.push_back(sample);
    }

    pub fn rm(&self) -> &VecDeque<CachedTuple> {
        &self.rm
    }

    pub fn rl(&self) -> &VecDeque<RlSample> {
        &self.rl
    }
}

/// Discounted return-to-go `G_k = sum_{j>=k} gamma^(j-k) r_j`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::domain(format!("gamma must lie in [0,1], got {gamma}")));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, &r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[i] = acc;
    }
    Ok(out)
}

/// Select near-threshold steps: from entries with `tau <= s <= tau + delta`,
/// uniformly pick `floor(fraction * eligible)` without replacement. Returns
/// sorted indices into `steps`.
pub fn near_threshold_sample<R: Rng + ?Sized>(
    steps: &[(f64, f64)],
    delta: f64,
    fraction: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if delta < 0.0 {
        return Err(Error::domain("delta must be nonnegative".to_string()));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::domain("fraction must lie in [0,1]".to_string()));
    }
    let mut eligible: Vec<usize> = steps
        .iter()
        .enumerate()
        .filter(|(_, &(s, tau))| s >= tau && s <= tau + delta)
        .map(|(i, _)| i)
        .collect();
    let take = (fraction * eligible.len() as f64).floor() as usize;
    // Partial Fisher-Yates: the first `take` entries become the sample.
    for i in 0..take {
        let j = rng.random_range(i..eligible.len());
        eligible.swap(i, j);
    }
    let mut selected = eligible[..take].to_vec();
    selected.sort_unstable();
    Ok(selected)
}

// ---------------------------------------------------------------------------
// PPO
// ---------------------------------------------------------------------------

/// PPO and anchoring knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub gamma: f64,
    pub lr: f64,
    /// Gradient passes over the batch per update.
    pub epochs: usize,
    pub minibatch: usize,
    /// Samples drawn from the RL cache per update.
    pub batch_size: usize,
    /// Anchor after every M PPO updates.
    pub anchor_period: usize,
    pub anchor_lr: f64,
    /// Contexts per anchoring step.
    pub anchor_batch: usize,
    /// Composite-objective monitoring weights.
    pub eta: f64,
    pub mu: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_epsilon: 0.2,
            kl_beta: 0.05,
            gamma: 0.99,
            lr: 0.01,
            epochs: 4,
            minibatch: 64,
            batch_size: 256,
            anchor_period: 10,
            anchor_lr: 0.05,
            anchor_batch: 64,
            eta: 0.05,
            mu: 0.05,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::domain("clip epsilon must lie in (0,1)".to_string()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::domain("gamma must lie in (0,1]".to_string()));
        }
        Ok(())
    }
}

/// One PPO training item.
#[derive(Debug, Clone)]
pub struct PpoItem<C, A> {
    pub ctx: C,
    pub action: A,
    /// Log-probability recorded by the behavior policy at collection time.
    pub behavior_log_prob: Option<f64>,
    pub reward: f64,
    pub return_to_go: f64,
}

/// Per-sample clipped surrogate `min(ratio * adv, clip(ratio) * adv)`.
pub fn clipped_surrogate(ratio: f64, adv: f64, epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    (ratio * adv).min(clipped * adv)
}

/// Return-to-go minus the batch mean, then standardized.
pub fn standardized_advantages<C, A>(items: &[PpoItem<C, A>]) -> Vec<f64> {
    let n = items.len() as f64;
    let mean = items.iter().map(|i| i.return_to_go).sum::<f64>() / n;
    let centered: Vec<f64> = items.iter().map(|i| i.return_to_go - mean).collect();
    let var = centered.iter().map(|a| a * a).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        centered
    } else {
        centered.iter().map(|a| a / std).collect()
    }
}

/// Value of the full PPO objective
/// `mean(min(ratio*A, clip(ratio)*A)) - kl_beta * mean(KL(policy || old))`.
pub fn ppo_objective<P: PolicyModel>(
    policy: &P,
    old: &P,
    items: &[PpoItem<P::Ctx, P::Action>],
    advantages: &[f64],
    config: &PpoConfig,
) -> f64 {
    let n = items.len() as f64;
    let mut surrogate = 0.0;
    let mut kl = 0.0;
    for (item, &adv) in items.iter().zip(advantages) {
        let ratio = (policy.log_prob(&item.ctx, &item.action)
            - old.log_prob(&item.ctx, &item.action))
        .exp();
        surrogate += clipped_surrogate(ratio, adv, config.clip_epsilon);
        kl += policy.kl_to(old, &item.ctx);
    }
    surrogate / n - config.kl_beta * kl / n
}

/// Analytic gradient of [`ppo_objective`] with respect to the policy
/// parameters. Clipped-off samples contribute nothing, matching the
/// subgradient of the min.
pub fn ppo_objective_grad<P: PolicyModel>(
    policy: &P,
    old: &P,
    items: &[PpoItem<P::Ctx, P::Action>],
    advantages: &[f64],
    config: &PpoConfig,
) -> Vec<f64> {
    let mut grad = vec![0.0; policy.param_len()];
    let refs: Vec<&PpoItem<P::Ctx, P::Action>> = items.iter().collect();
    accumulate_objective_grad(policy, old, &refs, advantages, config, &mut grad);
    grad
}

fn accumulate_objective_grad<P: PolicyModel>(
    policy: &P,
    old: &P,
    items: &[&PpoItem<P::Ctx, P::Action>],
    advantages: &[f64],
    config: &PpoConfig,
    grad: &mut [f64],
) {
    let n = items.len() as f64;
    for (item, &adv) in items.iter().zip(advantages) {
        let ratio = (policy.log_prob(&item.ctx, &item.action)
            - old.log_prob(&item.ctx, &item.action))
        .exp();
        let clipped_off = (adv > 0.0 && ratio > 1.0 + config.clip_epsilon)
            || (adv < 0.0 && ratio < 1.0 - config.clip_epsilon);
        if !clipped_off {
            policy.add_scaled_grad_log_prob(&item.ctx, &item.action, ratio * adv / n, grad);
        }
        policy.add_scaled_grad_kl(old, &item.ctx, -config.kl_beta / n, grad);
    }
}

/// Diagnostics from one PPO update.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PpoDiagnostics {
    /// Mean importance ratio at the first gradient evaluation (identically 1).
    pub first_ratio_mean: f64,
    /// KL to the update-start snapshot at the first evaluation (identically 0).
    pub first_kl: f64,
    /// Surrogate at the first evaluation: the mean standardized advantage.
    pub first_surrogate: f64,
    pub final_ratio_mean: f64,
    pub final_kl: f64,
    pub final_clip_fraction: f64,
    pub mean_reward: f64,
}

/// One clipped PPO update over a batch: snapshot the current policy, then
/// ascend the clipped surrogate minus the KL penalty for `config.epochs`
/// passes of minibatches. Importance ratios are taken against the snapshot,
/// so they start at exactly 1.
pub fn ppo_update<P: PolicyModel, R: Rng + ?Sized>(
    policy: &mut P,
    items: &[PpoItem<P::Ctx, P::Action>],
    config: &PpoConfig,
    rng: &mut R,
) -> Result<PpoDiagnostics> {
    config.validate()?;
    if items.is_empty() {
        return Err(Error::usage("ppo_update needs a nonempty batch".to_string()));
    }
    if items.iter().any(|i| i.behavior_log_prob.is_none()) {
        return Err(Error::usage("ppo_update batch is missing stored log-probs".to_string()));
    }
    let old = policy.clone();
    let advantages = standardized_advantages(items);

    // On-policy identities at the first gradient evaluation.
    let first_ratio_mean = 1.0;
    let first_kl = 0.0;
    let first_surrogate = advantages.iter().sum::<f64>() / advantages.len() as f64;

    let mut order: Vec<usize> = (0..items.len()).collect();
    for _ in 0..config.epochs.max(1) {
        shuffle(&mut order, rng);
        for chunk in order.chunks(config.minibatch.max(1)) {
            let mb_items: Vec<&PpoItem<P::Ctx, P::Action>> =
                chunk.iter().map(|&i| &items[i]).collect();
            let mb_adv: Vec<f64> = chunk.iter().map(|&i| advantages[i]).collect();
            let mut grad = vec![0.0; policy.param_len()];
            accumulate_objective_grad(policy, &old, &mb_items, &mb_adv, config, &mut grad);
            let params = policy.params_mut();
            for (p, g) in params.iter_mut().zip(&grad) {
                *p += config.lr * g;
            }
        }
    }

    let mut ratio_sum = 0.0;
    let mut clip_count = 0usize;
    let mut kl_sum = 0.0;
    for item in items {
        let ratio = (policy.log_prob(&item.ctx, &item.action)
            - old.log_prob(&item.ctx, &item.action))
        .exp();
        ratio_sum += ratio;
        if ratio < 1.0 - config.clip_epsilon || ratio > 1.0 + config.clip_epsilon {
            clip_count += 1;
        }
        kl_sum += policy.kl_to(&old, &item.ctx);
    }
    let n = items.len() as f64;
    Ok(PpoDiagnostics {
        first_ratio_mean,
        first_kl,
        first_surrogate,
        final_ratio_mean: ratio_sum / n,
        final_kl: kl_sum / n,
        final_clip_fraction: clip_count as f64 / n,
        mean_reward: items.iter().map(|i| i.reward).sum::<f64>() / n,
    })
}

/// Group RL cache samples into episodes and attach discounted returns.
pub fn ppo_items_from_cache(
    cache: &VecDeque<RlSample>,
    gamma: f64,
) -> Result<Vec<PpoItem<RlContext, StructuredAction>>> {
    let mut items = Vec::with_capacity(cache.len());
    let samples: Vec<&RlSample> = cache.iter().collect();
    let mut start = 0usize;
    while start < samples.len() {
        let mut end = start + 1;
        while end < samples.len() && samples[end].episode == samples[start].episode {
            end += 1;
        }
        let rewards: Vec<f64> = samples[start..end].iter().map(|s| s.reward).collect();
        let returns = discounted_returns(&rewards, gamma)?;
        for (s, g) in samples[start..end].iter().zip(returns) {
            items.push(PpoItem {
                ctx: RlContext {
                    task: Arc::clone(&s.task),
                    ctx: s.ctx.clone(),
                },
                action: s.action.clone(),
                behavior_log_prob: Some(s.log_prob),
                reward: s.reward,
                return_to_go: g,
            });
        }
        start = end;
    }
    Ok(items)
}

// ---------------------------------------------------------------------------
// SFT anchoring and the composite objective
// ---------------------------------------------------------------------------

/// One gradient step on the cross-entropy toward the frozen reference
/// distribution over the anchor contexts (forward-KL projection).
pub fn sft_anchor_step<P: PolicyModel>(
    policy: &mut P,
    sft_reference: &P,
    anchor_set: &[P::Ctx],
    lr: f64,
) {
    if anchor_set.is_empty() {
        return;
    }
    let mut grad = vec![0.0; policy.param_len()];
    let n = anchor_set.len() as f64;
    for ctx in anchor_set {
        policy.add_scaled_grad_cross_entropy(sft_reference, ctx, 1.0 / n, &mut grad);
    }
    let params = policy.params_mut();
    for (p, g) in params.iter_mut().zip(&grad) {
        *p -= lr * g;
    }
}

/// Monitoring value of the composite regularized objective:
/// `mean(ratio * A) - eta * mean KL(policy || policy_t) - mu * mean KL(ref || policy)`.
pub fn composite_objective<P: PolicyModel>(
    policy: &P,
    policy_t: &P,
    sft_reference: &P,
    items: &[PpoItem<P::Ctx, P::Action>],
    eta: f64,
    mu: f64,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::usage("composite_objective needs a nonempty batch".to_string()));
    }
    let advantages = standardized_advantages(items);
    let n = items.len() as f64;
    let mut adv_term = 0.0;
    let mut rev_kl = 0.0;
    let mut fwd_kl = 0.0;
    for (item, &adv) in items.iter().zip(&advantages) {
        let ratio = (policy.log_prob(&item.ctx, &item.action)
            - policy_t.log_prob(&item.ctx, &item.action))
        .exp();
        adv_term += ratio * adv;
        rev_kl += policy.kl_to(policy_t, &item.ctx);
        fwd_kl += policy.forward_kl_from(sft_reference, &item.ctx);
    }
    Ok(adv_term / n - eta * rev_kl / n - mu * fwd_kl / n)
}

/// Supervised-fit hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            lr: 0.5,
            epochs: 8,
            batch: 64,
            seed: 0,
        }
    }
}

/// Fit an edge policy on `(context, target action)` pairs by maximizing the
/// mean log-likelihood; produces the SFT reference. Returns the mean negative
/// log-likelihood after each epoch.
pub fn sft_fit(
    policy: &mut EdgePolicy,
    dataset: &[(RlContext, StructuredAction)],
    config: &SftConfig,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::usage("sft_fit needs a nonempty dataset".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(config.batch.max(1)) {
            let mut grad = vec![0.0; PolicyModel::param_len(policy)];
            let n = chunk.len() as f64;
            for &i in chunk {
                let (ctx, action) = &dataset[i];
                PolicyModel::add_scaled_grad_log_prob(policy, ctx, action, 1.0 / n, &mut grad);
            }
            let params = PolicyModel::params_mut(policy);
            for (p, g) in params.iter_mut().zip(&grad) {
                *p += config.lr * g;
            }
        }
        let nll = -dataset
            .iter()
            .map(|(ctx, a)| PolicyModel::log_prob(policy, ctx, a))
            .sum::<f64>()
            / dataset.len() as f64;
        history.push(nll);
    }
    Ok(history)
}

/// Build the supervised dataset from task targets.
pub fn sft_dataset(tasks: &[Arc<Task>]) -> Vec<(RlContext, StructuredAction)> {
    let mut out = Vec::new();
    for task in tasks {
        for (ctx, action) in crate::world::target_contexts(task) {
            out.push((
                RlContext {
                    task: Arc::clone(task),
                    ctx,
                },
                action,
            ));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Two-stage update
// ---------------------------------------------------------------------------

/// Trajectory record of a two-stage run.
#[derive(Debug, Clone)]
pub struct TwoStageReport {
    pub diagnostics: Vec<PpoDiagnostics>,
    pub composites: Vec<f64>,
    pub anchors_applied: usize,
}

/// Run `n_updates` PPO updates from the RL cache; after every
/// `config.anchor_period` of them, apply one SFT anchoring step on contexts
/// drawn from the anchor pool. Records the composite objective after each
/// update.
pub fn two_stage_update<R: Rng + ?Sized>(
    policy: &mut EdgePolicy,
    caches: &Caches,
    sft_reference: &EdgePolicy,
    anchor_pool: &[RlContext],
    config: &PpoConfig,
    n_updates: usize,
    rng: &mut R,
) -> Result<TwoStageReport> {
    if caches.rl().is_empty() {
        return Err(Error::usage("two_stage_update needs a nonempty RL cache".to_string()));
    }
    let all_items = ppo_items_from_cache(caches.rl(), config.gamma)?;
    let mut diagnostics = Vec::with_capacity(n_updates);
    let mut composites = Vec::with_capacity(n_updates);
    let mut anchors_applied = 0usize;
    for u in 0..n_updates {
        let batch = sample_items(&all_items, config.batch_size, rng);
        let policy_t = policy.clone();
        let diag = ppo_update(policy, &batch, config, rng)?;
        diagnostics.push(diag);
        composites.push(composite_objective(
            policy,
            &policy_t,
            sft_reference,
            &batch,
            config.eta,
            config.mu,
        )?);
        if config.anchor_period > 0
            && (u + 1) % config.anchor_period == 0
            && !anchor_pool.is_empty()
        {
            let anchor_refs = sample_slice(anchor_pool, config.anchor_batch, rng);
            sft_anchor_step(policy, sft_reference, &anchor_refs, config.anchor_lr);
            anchors_applied += 1;
        }
    }
    Ok(TwoStageReport {
        diagnostics,
        composites,
        anchors_applied,
    })
}

fn sample_items<C: Clone, A: Clone, R: Rng + ?Sized>(
    items: &[PpoItem<C, A>],
    k: usize,
    rng: &mut R,
) -> Vec<PpoItem<C, A>> {
    let k = k.min(items.len());
    let mut idx: Vec<usize> = (0..items.len()).collect();
    for i in 0..k {
        let j = rng.random_range(i..idx.len());
        idx.swap(i, j);
    }
    idx[..k].iter().map(|&i| items[i].clone()).collect()
}

fn sample_slice<C: Clone, R: Rng + ?Sized>(pool: &[C], k: usize, rng: &mut R) -> Vec<C> {
    let k = k.min(pool.len());
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    for i in 0..k {
        let j = rng.random_range(i..idx.len());
        idx.swap(i, j);
    }
    idx[..k].iter().map(|&i| pool[i].clone()).collect()
}

fn shuffle<R: Rng + ?Sized>(xs: &mut [usize], rng: &mut R) {
    for i in (1..xs.len()).rev() {
        let j = rng.random_range(0..=i);
        xs.swap(i, j);
    }
}
