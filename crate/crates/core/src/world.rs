//! Synthetic tool-calling world: tasks with ground-truth tool sequences, a
//! linear-softmax edge policy, a near-oracle cloud, a schema validator, and a
//! frozen rubric evaluator.
//!
//! Tasks are stamped from a fixed pool of tools and a fixed set of pipeline
//! families (canonical stage orderings). A task exposes 10-20 of the pool's
//! tools, carries 0-8 already-completed stages, and its remaining target is
//! 1-8 actions ending in `finish()`.

use std::collections::{BTreeMap, HashMap};
use std::sync::LazyLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::econ::Decision;
use crate::error::{Error, Result};

/// Name emitted when the edge policy picks its malformed pseudo-action; it is
/// never a pool tool, so the action always fails schema validation.
pub const MALFORMED_TOOL: &str = "__malformed__";

/// Maximum summary length kept in cloud-side context entries.
pub const SUMMARY_MAX_CHARS: usize = 160;

/// One argument slot with its finite value domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgSlot {
    pub name: String,
    pub domain: Vec<String>,
}

/// A callable tool: unique name plus declared slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub arg_slots: Vec<ArgSlot>,
}

/// Schema-constrained action emitted by either agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredAction {
    #[serde(rename = "name")]
    pub tool: String,
    pub args: BTreeMap<String, String>,
    pub thought: String,
}

impl StructuredAction {
    pub fn finish() -> Self {
        StructuredAction {
            tool: "finish".to_string(),
            args: BTreeMap::new(),
            thought: "all stages complete".to_string(),
        }
    }

    pub fn is_finish(&self) -> bool {
        self.tool == "finish"
    }
}

/// One synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: u64,
    pub query: String,
    /// Pipeline family the task was stamped from.
    pub family: usize,
    pub available_tools: Vec<ToolSpec>,
    /// Tool names of the stages already executed before the task starts.
    pub completed_steps: Vec<String>,
    /// Remaining ground-truth actions, ending in finish().
    pub target: Vec<StructuredAction>,
}

impl Task {
    pub fn prior_steps(&self) -> usize {
        self.completed_steps.len()
    }

    pub fn has_tool(&self, name: &str) -> Option<&ToolSpec> {
        self.available_tools.iter().find(|t| t.name == name)
    }
}

/// One context entry; the entry kind records which path produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContextEntry {
    Edge { tool: String },
    Cloud { tool: String, summary: String },
}

impl ContextEntry {
    pub fn tool(&self) -> &str {
        match self {
            ContextEntry::Edge { tool } => tool,
            ContextEntry::Cloud { tool, .. } => tool,
        }
    }
}

/// Reasoning-trace context: completed entries plus the episode step index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Context {
    pub completed: Vec<ContextEntry>,
    /// Steps executed in this episode (excludes prior steps).
    pub k: usize,
}

impl Context {
    /// Starting context of a task: its prior stages as edge-style entries.
    pub fn initial(task: &Task) -> Self {
        Context {
            completed: task
                .completed_steps
                .iter()
                .map(|t| ContextEntry::Edge { tool: t.clone() })
                .collect(),
            k: 0,
        }
    }
}

/// Append one executed step. The edge path records only the tool id; the
/// cloud path records the id plus a summary, truncated to
/// [`SUMMARY_MAX_CHARS`] with the truncation flagged in the return value.
pub fn update_context(
    ctx: &Context,
    decision: Decision,
    tool_id: &str,
    summary: &str,
) -> (Context, bool) {
    let mut next = ctx.clone();
    let mut truncated = false;
    match decision {
        Decision::Edge => next.completed.push(ContextEntry::Edge {
            tool: tool_id.to_string(),
        }),
        Decision::Cloud => {
            let mut s: String = summary.chars().take(SUMMARY_MAX_CHARS).collect();
            if summary.chars().count() > SUMMARY_MAX_CHARS {
                truncated = true;
            } else {
                s = summary.to_string();
            }
            next.completed.push(ContextEntry::Cloud {
                tool: tool_id.to_string(),
                summary: s,
            });
        }
    }
    next.k += 1;
    (next, truncated)
}

/// Templated execution summary for cloud-side context entries.
pub fn action_summary(action: &StructuredAction) -> String {
    let digest: Vec<String> = action.args.iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!("{} ok: {}", action.tool, digest.join(" "))
}

fn tool(name: &str, slots: &[(&str, &[&str])]) -> ToolSpec {
    ToolSpec {
        name: name.to_string(),
        arg_slots: slots
            .iter()
            .map(|(n, d)| ArgSlot {
                name: n.to_string(),
                domain: d.iter().map(|v| v.to_string()).collect(),
            })
            .collect(),
    }
}

/// The fixed tool universe. Index 0 is always `finish`.
pub static TOOL_POOL: LazyLock<Vec<ToolSpec>> = LazyLock::new(|| {
    vec![
        tool("finish", &[]),
        tool("load_dataset", &[("source", &["s3", "http", "local"])]),
        tool("validate_rows", &[("mode", &["strict", "lenient"])]),
        tool("dedupe_rows", &[]),
        tool("impute_missing", &[("strategy", &["mean", "median", "drop"])]),
        tool("normalize_columns", &[("method", &["zscore", "minmax"])]),
        tool("encode_labels", &[]),
        tool("split_data", &[("ratio", &["70_30", "80_20", "90_10"])]),
        tool("select_features", &[("top_k", &["8", "16", "32"])]),
        tool(
            "train_classifier",
            &[("algo", &["svm", "tree", "mlp"]), ("epochs", &["10", "20"])],
        ),
        tool(
            "train_regressor",
            &[("algo", &["ridge", "lasso"]), ("epochs", &["10", "20"])],
        ),
        tool("tune_hyperparams", &[("budget", &["small", "large"])]),
        tool("cross_validate", &[("folds", &["3", "5"])]),
        tool("evaluate_model", &[("metric", &["accuracy", "f1", "rmse"])]),
        tool("calibrate_scores", &[]),
        tool("export_model", &[("format", &["onnx", "pickle"])]),
        tool("build_report", &[("style", &["brief", "full"])]),
        tool("publish_artifact", &[("channel", &["registry", "bucket"])]),
        tool("archive_run", &[]),
        tool("fetch_config", &[("profile", &["default", "tuned"])]),
        tool("stage_inputs", &[("mode", &["batch", "stream"])]),
        tool("profile_memory", &[]),
        tool("snapshot_state", &[("tag", &["pre", "post"])]),
        tool("notify_owner", &[("urgency", &["low", "high"])]),
    ]
});

static TOOL_INDEX: LazyLock<HashMap<String, usize>> = LazyLock::new(|| {
    TOOL_POOL
        .iter()
        .enumerate()
        .map(|(i, t)| (t.name.clone(), i))
        .collect()
});

pub fn tool_pool_index(name: &str) -> Option<usize> {
    TOOL_INDEX.get(name).copied()
}

/// Canonical stage orderings (pool indices, finish excluded).
pub static FAMILIES: LazyLock<Vec<(&'static str, Vec<usize>)>> = LazyLock::new(|| {
    vec![
        ("ingest", vec![19, 1, 20, 2, 3, 4, 5, 6]),
        ("classify", vec![1, 2, 7, 8, 9, 12, 13, 15]),
        ("regress", vec![1, 4, 7, 10, 12, 13, 16, 18]),
        ("tune", vec![19, 1, 7, 9, 11, 12, 13, 22]),
        ("report", vec![1, 2, 13, 14, 16, 17, 23, 18]),
        ("stage", vec![19, 20, 1, 2, 5, 8, 22, 21]),
        ("publish", vec![1, 9, 13, 15, 17, 16, 23, 18]),
        ("audit", vec![19, 2, 3, 12, 13, 21, 22, 18]),
    ]
});

/// Corpus generation knobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub count: usize,
    /// Inclusive bounds on the number of tools a task exposes.
    pub tool_range: (usize, usize),
    /// Inclusive bounds on the target length (finish included).
    pub target_len_range: (usize, usize),
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            count: 1000,
            tool_range: (10, 20),
            target_len_range: (1, 8),
            seed: 0,
        }
    }
}

fn sample_args<R: Rng + ?Sized>(spec: &ToolSpec, rng: &mut R) -> BTreeMap<String, String> {
    spec.arg_slots
        .iter()
        .map(|slot| {
            let v = slot.domain[rng.random_range(0..slot.domain.len())].clone();
            (slot.name.clone(), v)
        })
        .collect()
}

/// Probability that a target slot deviates from its family-canonical value.
const ARG_VARIANT_RATE: f64 = 0.10;

/// Canonical domain index of a slot for a given family and recipe stage.
/// Fixed mixing so the mapping is a stable property of the world.
fn canonical_value_index(family: usize, stage: usize, slot_idx: usize, domain_len: usize) -> usize {
    (family.wrapping_mul(7) + stage.wrapping_mul(3) + slot_idx) % domain_len
}

fn target_args<R: Rng + ?Sized>(
    spec: &ToolSpec,
    family: usize,
    stage: usize,
    rng: &mut R,
) -> BTreeMap<String, String> {
    spec.arg_slots
        .iter()
        .enumerate()
        .map(|(j, slot)| {
            let canon = canonical_value_index(family, stage, j, slot.domain.len());
            let pick = if slot.domain.len() >= 2 && rng.random_range(0.0..1.0) < ARG_VARIANT_RATE {
                // A variant task: one off-canonical value for this slot.
                let mut v = rng.random_range(0..slot.domain.len() - 1);
                if v >= canon {
                    v += 1;
                }
                v
            } else {
                canon
            };
            (slot.name.clone(), slot.domain[pick].clone())
        })
        .collect()
}

/// Deterministically generate a task corpus.
pub fn generate_tasks(config: &CorpusConfig) -> Result<Vec<Task>> {
    let pool = &*TOOL_POOL;
    if config.count == 0 {
        return Err(Error::usage("corpus count must be >= 1".to_string()));
    }
    let (t_lo, t_hi) = config.tool_range;
    if t_lo < 2 || t_lo > t_hi || t_hi > pool.len() {
        return Err(Error::usage(format!(
            "tool_range must satisfy 2 <= lo <= hi <= {}, got ({t_lo}, {t_hi})",
            pool.len()
        )));
    }
    let (l_lo, l_hi) = config.target_len_range;
    if l_lo < 1 || l_lo > l_hi || l_hi > 8 {
        return Err(Error::usage(format!(
            "target_len_range must satisfy 1 <= lo <= hi <= 8, got ({l_lo}, {l_hi})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tasks = Vec::with_capacity(config.count);
    for id in 0..config.count {
        let family = rng.random_range(0..FAMILIES.len());
        let (fam_name, stages) = &FAMILIES[family];
        let len = rng.random_range(l_lo..=l_hi);
        // Stages used by the target: positions prior..prior+len-1 of the recipe.
        let prior_max = stages.len() + 1 - len;
        let prior = rng.random_range(0..=prior_max.min(8));
        let mut target = Vec::with_capacity(len);
        for i in 0..len - 1 {
            let stage = prior + i;
            let spec = &pool[stages[stage]];
            target.push(StructuredAction {
                tool: spec.name.clone(),
                args: target_args(spec, family, stage, &mut rng),
                thought: format!("{fam_name} stage {}", stage + 1),
            });
        }
        target.push(StructuredAction::finish());

        let completed_steps: Vec<String> =
            stages[..prior].iter().map(|&g| pool[g].name.clone()).collect();

        // Toolset: finish + target tools + distractors up to the drawn count.
        let mut tool_ids: Vec<usize> = vec![0];
        for a in &target {
            let g = tool_pool_index(&a.tool).expect("target tools come from the pool");
            if !tool_ids.contains(&g) {
                tool_ids.push(g);
            }
        }
        let want = rng.random_range(t_lo..=t_hi).max(tool_ids.len());
        let mut candidates: Vec<usize> = (1..pool.len()).filter(|g| !tool_ids.contains(g)).collect();
        while tool_ids.len() < want && !candidates.is_empty() {
            let pick = rng.random_range(0..candidates.len());
            tool_ids.push(candidates.swap_remove(pick));
        }
        tool_ids.sort_unstable();
        let available_tools: Vec<ToolSpec> = tool_ids.iter().map(|&g| pool[g].clone()).collect();

        tasks.push(Task {
            id: id as u64,
            query: format!(
                "{fam_name} pipeline #{id}: execute the remaining stages and finish"
            ),
            family,
            available_tools,
            completed_steps,
            target,
        });
    }
    Ok(tasks)
}

/// Serialize tasks as JSON lines.
pub fn tasks_to_jsonl(tasks: &[Task]) -> String {
    let mut out = String::new();
    for t in tasks {
        out.push_str(&serde_json::to_string(t).expect("task serializes"));
        out.push('\n');
    }
    out
}

pub fn tasks_from_jsonl(text: &str) -> Result<Vec<Task>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::usage(format!("bad corpus line: {e}"))))
        .collect()
}

/// True iff the action names an available tool, covers exactly its declared
/// slots, and every value lies in the slot domain.
pub fn validate_schema(action: &StructuredAction, task: &Task) -> bool {
    let Some(spec) = task.has_tool(&action.tool) else {
        return false;
    };
    if action.args.len() != spec.arg_slots.len() {
        return false;
    }
    spec.arg_slots.iter().all(|slot| {
        action
            .args
            .get(&slot.name)
            .is_some_and(|v| slot.domain.contains(v))
    })
}

/// Frozen rubric evaluator: 1.0 for an exact target match, 0.5 for the right
/// tool with any wrong argument, 0.0 otherwise (including steps beyond the
/// target). Deterministic; thoughts are ignored.
pub fn evaluate_quality(action: &StructuredAction, task: &Task, step_index: usize) -> f64 {
    let Some(expect) = task.target.get(step_index) else {
        return 0.0;
    };
    if action.tool != expect.tool {
        return 0.0;
    }
    if action.args == expect.args {
        1.0
    } else {
        0.5
    }
}

/// Cloud oracle: returns the ground-truth next action with probability
/// `p_correct`, otherwise a schema-valid action that is wrong in one slot
/// value (or, for slotless targets, a different tool). Never schema-invalid.
pub fn cloud_oracle<R: Rng + ?Sized>(
    task: &Task,
    ctx: &Context,
    p_correct: f64,
    rng: &mut R,
) -> StructuredAction {
    let idx = ctx.k.min(task.target.len().saturating_sub(1));
    let target = &task.target[idx];
    if rng.random_range(0.0..1.0) < p_correct {
        return target.clone();
    }
    // Wrong but valid: flip one slot value if possible.
    let spec = task.has_tool(&target.tool).expect("target tools are available");
    let flippable: Vec<&ArgSlot> = spec.arg_slots.iter().filter(|s| s.domain.len() >= 2).collect();
    if let Some(slot) = flippable.first() {
        let current = &target.args[&slot.name];
        let alternatives: Vec<&String> = slot.domain.iter().filter(|v| *v != current).collect();
        let pick = alternatives[rng.random_range(0..alternatives.len())];
        let mut args = target.args.clone();
        args.insert(slot.name.clone(), pick.clone());
        return StructuredAction {
            tool: target.tool.clone(),
            args,
            thought: "cloud refinement".to_string(),
        };
    }
    // Slotless target: answer with some other available tool, validly argued.
    let others: Vec<&ToolSpec> = task
        .available_tools
        .iter()
        .filter(|t| t.name != target.tool)
        .collect();
    let spec = others[rng.random_range(0..others.len())];
    StructuredAction {
        tool: spec.name.clone(),
        args: sample_args(spec, rng),
        thought: "cloud refinement".to_string(),
    }
}

// ---------------------------------------------------------------------------
// Edge policy: linear-softmax heads over a fixed context encoding
// ---------------------------------------------------------------------------

/// Parameter layout of the edge policy. One row of weights per choice:
/// a tool head over the whole pool plus one malformed pseudo-row, and one
/// value head per (tool, slot) pair. Heads are masked to the task's
/// available tools at sampling time.
#[derive(Debug, Clone)]
pub struct PolicyLayout {
    /// Feature dimension.
    pub f_dim: usize,
    /// Row index of tool g's head entry (g = pool index); row `vocab` is the
    /// malformed pseudo-action.
    pub vocab: usize,
    /// slot_offsets[g][j] = first row of the value head for tool g, slot j.
    slot_offsets: Vec<Vec<usize>>,
    /// Total number of rows.
    pub rows: usize,
}

static LAYOUT: LazyLock<PolicyLayout> = LazyLock::new(|| {
    let pool = &*TOOL_POOL;
    let vocab = pool.len();
    let f_dim = vocab + 1 + FAMILIES.len() + 1 + 4 + 1;
    let mut slot_offsets = Vec::with_capacity(vocab);
    let mut next = vocab + 1;
    for spec in pool.iter() {
        let mut offsets = Vec::with_capacity(spec.arg_slots.len());
        for slot in &spec.arg_slots {
            offsets.push(next);
            next += slot.domain.len();
        }
        slot_offsets.push(offsets);
    }
    PolicyLayout {
        f_dim,
        vocab,
        slot_offsets,
        rows: next,
    }
});

pub fn policy_layout() -> &'static PolicyLayout {
    &LAYOUT
}

/// Fixed-length context encoding: one-hot of the last executed tool (plus a
/// "none" slot), the normalized trace position, a target-length bucket, and
/// a bias term.
pub fn context_features(task: &Task, ctx: &Context) -> Vec<f64> {
    let layout = policy_layout();
    let mut phi = vec![0.0; layout.f_dim];
    let last = ctx
        .completed
        .last()
        .and_then(|e| tool_pool_index(e.tool()));
    match last {
        Some(g) => phi[g] = 1.0,
        None => phi[layout.vocab] = 1.0,
    }
    phi[layout.vocab + 1] = (ctx.completed.len() as f64 / 16.0).min(1.0);
    let bucket = ((task.target.len().saturating_sub(1)) / 2).min(3);
    phi[layout.vocab + 2 + bucket] = 1.0;
    phi[layout.f_dim - 1] = 1.0;
    phi
}

/// Linear-softmax edge policy over the shared layout.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgePolicy {
    params: Vec<f64>,
}

fn softmax_from_logits(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

impl Default for EdgePolicy {
    fn default() -> Self {
        Self::zeros()
    }
}

impl EdgePolicy {
    pub fn zeros() -> Self {
        let layout = policy_layout();
        EdgePolicy {
            params: vec![0.0; layout.rows * layout.f_dim],
        }
    }

    pub fn param_len(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn row_logit(&self, row: usize, phi: &[f64]) -> f64 {
        let f = policy_layout().f_dim;
        let w = &self.params[row * f..(row + 1) * f];
        w.iter().zip(phi).map(|(a, b)| a * b).sum()
    }

    /// Pool indices of the task's tools, in task order, plus the malformed row.
    fn head_rows(task: &Task) -> Vec<usize> {
        let mut rows: Vec<usize> = task
            .available_tools
            .iter()
            .map(|t| tool_pool_index(&t.name).expect("task tools come from the pool"))
            .collect();
        rows.push(policy_layout().vocab);
        rows
    }

    fn tool_probs(&self, rows: &[usize], phi: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = rows.iter().map(|&r| self.row_logit(r, phi)).collect();
        softmax_from_logits(&logits)
    }

    fn slot_probs(&self, g: usize, j: usize, phi: &[f64]) -> (usize, Vec<f64>) {
        let layout = policy_layout();
        let base = layout.slot_offsets[g][j];
        let dom = TOOL_POOL[g].arg_slots[j].domain.len();
        let logits: Vec<f64> = (0..dom).map(|v| self.row_logit(base + v, phi)).collect();
        (base, softmax_from_logits(&logits))
    }

    /// Sample an action and return its log-probability (summed over heads).
    pub fn sample<R: Rng + ?Sized>(
        &self,
        task: &Task,
        ctx: &Context,
        rng: &mut R,
    ) -> (StructuredAction, f64) {
        let layout = policy_layout();
        let phi = context_features(task, ctx);
        let rows = Self::head_rows(task);
        let probs = self.tool_probs(&rows, &phi);
        let pick = sample_index(&probs, rng);
        let mut logp = probs[pick].ln();
        if rows[pick] == layout.vocab {
            return (
                StructuredAction {
                    tool: MALFORMED_TOOL.to_string(),
                    args: BTreeMap::new(),
                    thought: "unparseable call".to_string(),
                },
                logp,
            );
        }
        let g = rows[pick];
        let spec = &TOOL_POOL[g];
        let mut args = BTreeMap::new();
        for (j, slot) in spec.arg_slots.iter().enumerate() {
            let (_, vp) = self.slot_probs(g, j, &phi);
            let v = sample_index(&vp, rng);
            logp += vp[v].ln();
            args.insert(slot.name.clone(), slot.domain[v].clone());
        }
        (
            StructuredAction {
                tool: spec.name.clone(),
                args,
                thought: format!("try {}", spec.name),
            },
            logp,
        )
    }

    /// Log-probability of an action this policy could have produced.
    pub fn log_prob(&self, task: &Task, ctx: &Context, action: &StructuredAction) -> f64 {
        let layout = policy_layout();
        let phi = context_features(task, ctx);
        let rows = Self::head_rows(task);
        let probs = self.tool_probs(&rows, &phi);
        if action.tool == MALFORMED_TOOL {
            let pos = rows.iter().position(|&r| r == layout.vocab).unwrap();
            return probs[pos].ln();
        }
        let g = tool_pool_index(&action.tool).expect("action tool must be in the pool");
        let pos = rows
            .iter()
            .position(|&r| r == g)
            .expect("action tool must be available to the task");
        let mut logp = probs[pos].ln();
        for (j, slot) in TOOL_POOL[g].arg_slots.iter().enumerate() {
            let (_, vp) = self.slot_probs(g, j, &phi);
            let v = slot
                .domain
                .iter()
                .position(|d| action.args.get(&slot.name) == Some(d))
                .expect("action args must lie in the slot domain");
            logp += vp[v].ln();
        }
        logp
    }

    /// Accumulate `weight * grad log pi(action | ctx)` into `out`.
    pub fn add_scaled_grad_log_prob(
        &self,
        task: &Task,
        ctx: &Context,
        action: &StructuredAction,
        weight: f64,
        out: &mut [f64],
    ) {
        assert_eq!(out.len(), self.params.len());
        let layout = policy_layout();
        let f = layout.f_dim;
        let phi = context_features(task, ctx);
        let rows = Self::head_rows(task);
        let probs = self.tool_probs(&rows, &phi);
        let chosen_row = if action.tool == MALFORMED_TOOL {
            layout.vocab
        } else {
            tool_pool_index(&action.tool).expect("pool tool")
        };
        for (&row, &p) in rows.iter().zip(&probs) {
            let coef = weight * (f64::from(row == chosen_row) - p);
            let w = &mut out[row * f..(row + 1) * f];
            for (wi, xi) in w.iter_mut().zip(&phi) {
                *wi += coef * xi;
            }
        }
        if chosen_row == layout.vocab {
            return;
        }
        let g = chosen_row;
        for (j, slot) in TOOL_POOL[g].arg_slots.iter().enumerate() {
            let (base, vp) = self.slot_probs(g, j, &phi);
            let chosen_v = slot
                .domain
                .iter()
                .position(|d| action.args.get(&slot.name) == Some(d))
                .expect("action args in domain");
            for (v, &p) in vp.iter().enumerate() {
                let coef = weight * (f64::from(v == chosen_v) - p);
                let w = &mut out[(base + v) * f..(base + v + 1) * f];
                for (wi, xi) in w.iter_mut().zip(&phi) {
                    *wi += coef * xi;
                }
            }
        }
    }

    /// Exact reverse KL(self || old) of the full action tree at one context.
    pub fn kl_to(&self, old: &EdgePolicy, task: &Task, ctx: &Context) -> f64 {
        let layout = policy_layout();
        let phi = context_features(task, ctx);
        let rows = Self::head_rows(task);
        let p_tool = self.tool_probs(&rows, &phi);
        let q_tool = old.tool_probs(&rows, &phi);
        let mut kl = 0.0;
        for ((&row, &p), &q) in rows.iter().zip(&p_tool).zip(&q_tool) {
            kl += p * (p / q).ln();
            if row != layout.vocab {
                for j in 0..TOOL_POOL[row].arg_slots.len() {
                    let (_, pv) = self.slot_probs(row, j, &phi);
                    let (_, qv) = old.slot_probs(row, j, &phi);
                    let slot_kl: f64 =
                        pv.iter().zip(&qv).map(|(&a, &b)| a * (a / b).ln()).sum();
                    kl += p * slot_kl;
                }
            }
        }
        kl
    }

    /// Accumulate `weight * grad_self KL(self || old)` into `out`.
    pub fn add_scaled_grad_kl(
        &self,
        old: &EdgePolicy,
        task: &Task,
        ctx: &Context,
        weight: f64,
        out: &mut [f64],
    ) {
        assert_eq!(out.len(), self.params.len());
        let layout = policy_layout();
        let f = layout.f_dim;
        let phi = context_features(task, ctx);
        let rows = Self::head_rows(task);
        let p_tool = self.tool_probs(&rows, &phi);
        let q_tool = old.tool_probs(&rows, &phi);

        // Per-tool log ratios and per-tool subtree KLs.
        let mut log_ratio = vec![0.0; rows.len()];
        let mut subtree = vec![0.0; rows.len()];
        for (i, (&row, (&p, &q))) in rows.iter().zip(p_tool.iter().zip(&q_tool)).enumerate() {
            log_ratio[i] = (p / q).ln();
            if row != layout.vocab {
                for j in 0..TOOL_POOL[row].arg_slots.len() {
                    let (_, pv) = self.slot_probs(row, j, &phi);
                    let (_, qv) = old.slot_probs(row, j, &phi);
                    subtree[i] += pv
                        .iter()
                        .zip(&qv)
                        .map(|(&a, &b)| a * (a / b).ln())
                        .sum::<f64>();
                }
            }
        }
        let mean_lr: f64 = p_tool.iter().zip(&log_ratio).map(|(p, lr)| p * lr).sum();
        let mean_sub: f64 = p_tool.iter().zip(&subtree).map(|(p, k)| p * k).sum();

        // Tool head: d/dz_b = p_b * (log_ratio_b - mean_lr + subtree_b - mean_sub).
        for (i, &row) in rows.iter().enumerate() {
            let coef = weight * p_tool[i] * (log_ratio[i] - mean_lr + subtree[i] - mean_sub);
            let w = &mut out[row * f..(row + 1) * f];
            for (wi, xi) in w.iter_mut().zip(&phi) {
                *wi += coef * xi;
            }
        }
        // Slot heads, scaled by the tool probability.
        for (i, &row) in rows.iter().enumerate() {
            if row == layout.vocab {
                continue;
            }
            for j in 0..TOOL_POOL[row].arg_slots.len() {
                let (base, pv) = self.slot_probs(row, j, &phi);
                let (_, qv) = old.slot_probs(row, j, &phi);
                let lrs: Vec<f64> = pv.iter().zip(&qv).map(|(&a, &b)| (a / b).ln()).collect();
                let mean: f64 = pv.iter().zip(&lrs).map(|(p, lr)| p * lr).sum();
                for (v, (&p, lr)) in pv.iter().zip(&lrs).enumerate() {
                    let coef = weight * p_tool[i] * p * (lr - mean);
                    let w = &mut out[(base + v) * f..(base + v + 1) * f];
                    for (wi, xi) in w.iter_mut().zip(&phi) {
                        *wi += coef * xi;
                    }
                }
            }
        }
    }

    /// Cross-entropy H(reference, self) over the action tree at one context.
    /// Equals forward KL(reference || self) plus the reference entropy.
    pub fn cross_entropy_from(&self, reference: &EdgePolicy, task: &Task, ctx: &Context) -> f64 {
        let layout = policy_layout();
        let phi = context_features(task, ctx);
        let rows = Self::head_rows(task);
        let p_ref = reference.tool_probs(&rows, &phi);
        let p_self = self.tool_probs(&rows, &phi);
        let mut h = 0.0;
        for ((&row, &pr), &ps) in rows.iter().zip(&p_ref).zip(&p_self) {
            h -= pr * ps.ln();
            if row != layout.vocab {
                for j in 0..TOOL_POOL[row].arg_slots.len() {
                    let (_, rv) = reference.slot_probs(row, j, &phi);
                    let (_, sv) = self.slot_probs(row, j, &phi);
                    let slot_h: f64 = rv.iter().zip(&sv).map(|(&a, &b)| -a * b.ln()).sum();
                    h += pr * slot_h;
                }
            }
        }
        h
    }

    /// Forward KL(reference || self) at one context.
    pub fn forward_kl_from(&self, reference: &EdgePolicy, task: &Task, ctx: &Context) -> f64 {
        self.cross_entropy_from(reference, task, ctx) - reference.tree_entropy(task, ctx)
    }

    /// Entropy of the full action tree at one context.
    pub fn tree_entropy(&self, task: &Task, ctx: &Context) -> f64 {
        self.cross_entropy_from(self, task, ctx)
    }

    /// Accumulate `weight * grad_self H(reference, self)` into `out`.
    pub fn add_scaled_grad_cross_entropy(
        &self,
        reference: &EdgePolicy,
        task: &Task,
        ctx: &Context,
        weight: f64,
        out: &mut [f64],
    ) {
        assert_eq!(out.len(), self.params.len());
        let layout = policy_layout();
        let f = policy_layout().f_dim;
        let phi = context_features(task, ctx);
        let rows = Self::head_rows(task);
        let p_ref = reference.tool_probs(&rows, &phi);
        let p_self = self.tool_probs(&rows, &phi);
        // Tool head: grad = p_self - p_ref.
        for (i, &row) in rows.iter().enumerate() {
            let coef = weight * (p_self[i] - p_ref[i]);
            let w = &mut out[row * f..(row + 1) * f];
            for (wi, xi) in w.iter_mut().zip(&phi) {
                *wi += coef * xi;
            }
        }
        // Slot heads weighted by the reference tool probability.
        for (i, &row) in rows.iter().enumerate() {
            if row == layout.vocab {
                continue;
            }
            for j in 0..TOOL_POOL[row].arg_slots.len() {
                let (base, sv) = self.slot_probs(row, j, &phi);
                let (_, rv) = reference.slot_probs(row, j, &phi);
                for (v, (&s, &r)) in sv.iter().zip(&rv).enumerate() {
                    let coef = weight * p_ref[i] * (s - r);
                    let w = &mut out[(base + v) * f..(base + v + 1) * f];
                    for (wi, xi) in w.iter_mut().zip(&phi) {
                        *wi += coef * xi;
                    }
                }
            }
        }
    }

    /// Probability that the next sampled action is schema-invalid.
    pub fn malformed_prob(&self, task: &Task, ctx: &Context) -> f64 {
        let layout = policy_layout();
        let phi = context_features(task, ctx);
        let rows = Self::head_rows(task);
        let probs = self.tool_probs(&rows, &phi);
        rows.iter()
            .zip(&probs)
            .find(|(&r, _)| r == layout.vocab)
            .map(|(_, &p)| p)
            .unwrap_or(0.0)
    }
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Roll the target through edge-style contexts: the supervised trace
/// `(ctx_0, a_0), (ctx_1, a_1), ...` used for SFT fitting and anchoring.
pub fn target_contexts(task: &Task) -> Vec<(Context, StructuredAction)> {
    let mut out = Vec::with_capacity(task.target.len());
    let mut ctx = Context::initial(task);
    for action in &task.target {
        out.push((ctx.clone(), action.clone()));
        let (next, _) = update_context(&ctx, Decision::Edge, &action.tool, "");
        ctx = next;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(count: usize, seed: u64) -> Vec<Task> {
        generate_tasks(&CorpusConfig {
            count,
            seed,
            ..CorpusConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn minimal_task_target_is_finish_only() {
        let tasks = generate_tasks(&CorpusConfig {
            count: 1,
            tool_range: (10, 20),
            target_len_range: (1, 1),
            seed: 3,
        })
        .unwrap();
        assert_eq!(tasks[0].target.len(), 1);
        assert!(tasks[0].target[0].is_finish());
    }

    #[test]
    fn corpus_is_deterministic() {
        let a = corpus(1000, 42);
        let b = corpus(1000, 42);
        assert_eq!(a, b);
        assert_eq!(tasks_to_jsonl(&a), tasks_to_jsonl(&b));
        assert_ne!(a, corpus(1000, 43));
    }

    #[test]
    fn corpus_respects_invariants() {
        for task in corpus(300, 7) {
            assert!((10..=20).contains(&task.available_tools.len()));
            assert!((1..=8).contains(&task.target.len()));
            assert!(task.prior_steps() <= 8);
            assert!(task.target.last().unwrap().is_finish());
            for (i, action) in task.target.iter().enumerate() {
                assert!(validate_schema(action, &task), "target invalid at step {i}");
            }
            let names: Vec<&str> = task.available_tools.iter().map(|t| t.name.as_str()).collect();
            let mut dedup = names.clone();
            dedup.sort_unstable();
            dedup.dedup();
            assert_eq!(dedup.len(), names.len(), "duplicate tool names");
        }
    }

    #[test]
    fn corpus_round_trips_through_jsonl() {
        let tasks = corpus(20, 11);
        let text = tasks_to_jsonl(&tasks);
        let parsed = tasks_from_jsonl(&text).unwrap();
        assert_eq!(tasks, parsed);
        // Field names mirror the structured listing keys.
        let first = text.lines().next().unwrap();
        for key in ["\"query\"", "\"completed_steps\"", "\"available_tools\"", "\"name\"", "\"args\""] {
            assert!(first.contains(key) || text.contains(key), "missing {key}");
        }
    }

    #[test]
    fn schema_validation_cases() {
        let task = &corpus(50, 13)[0];
        let valid = task.target[0].clone();
        assert!(validate_schema(&valid, task));

        let mut unknown = valid.clone();
        unknown.tool = "no_such_tool".to_string();
        assert!(!validate_schema(&unknown, task));

        let spec = task.has_tool(&valid.tool).unwrap().clone();
        if let Some(slot) = spec.arg_slots.first() {
            let mut missing = valid.clone();
            missing.args.remove(&slot.name);
            assert!(!validate_schema(&missing, task));

            let mut bad_value = valid.clone();
            bad_value.args.insert(slot.name.clone(), "definitely_not_in_domain".to_string());
            assert!(!validate_schema(&bad_value, task));
        }
        let mut extra = valid.clone();
        extra.args.insert("bogus_slot".to_string(), "x".to_string());
        assert!(!validate_schema(&extra, task));
    }

    #[test]
    fn evaluator_rubric() {
        let tasks = corpus(200, 17);
        let task = tasks
            .iter()
            .find(|t| {
                t.target.len() >= 2
                    && t.has_tool(&t.target[0].tool).unwrap().arg_slots.iter().any(|s| s.domain.len() >= 2)
            })
            .expect("corpus has a task with a flippable first step");
        let exact = task.target[0].clone();
        assert_eq!(evaluate_quality(&exact, task, 0), 1.0);

        let spec = task.has_tool(&exact.tool).unwrap();
        let slot = spec.arg_slots.iter().find(|s| s.domain.len() >= 2).unwrap();
        let other = slot.domain.iter().find(|v| **v != exact.args[&slot.name]).unwrap();
        let mut near = exact.clone();
        near.args.insert(slot.name.clone(), other.clone());
        assert_eq!(evaluate_quality(&near, task, 0), 0.5);

        let mut wrong = exact.clone();
        wrong.tool = "finish".to_string();
        wrong.args.clear();
        assert_eq!(evaluate_quality(&wrong, task, 0), 0.0);
        // Beyond the target there is nothing left to match.
        assert_eq!(evaluate_quality(&exact, task, task.target.len()), 0.0);
    }

    #[test]
    fn context_updates_append_in_order() {
        let task = &corpus(5, 19)[0];
        let ctx = Context::initial(task);
        assert_eq!(ctx.completed.len(), task.prior_steps());
        let (c1, t1) = update_context(&ctx, Decision::Edge, "simulate_topology", "");
        assert!(!t1);
        assert_eq!(c1.k, 1);
        assert_eq!(
            c1.completed.last().unwrap(),
            &ContextEntry::Edge { tool: "simulate_topology".to_string() }
        );
        let (c2, t2) = update_context(&c1, Decision::Cloud, "load_dataset", "topology built with 5 nodes");
        assert!(!t2);
        assert_eq!(c2.k, 2);
        assert_eq!(
            c2.completed.last().unwrap(),
            &ContextEntry::Cloud {
                tool: "load_dataset".to_string(),
                summary: "topology built with 5 nodes".to_string()
            }
        );
        assert_eq!(c2.completed.len(), task.prior_steps() + 2);
        assert_eq!(c2.completed[task.prior_steps()].tool(), "simulate_topology");
    }

    #[test]
    fn oversized_summary_is_truncated_and_flagged() {
        let task = &corpus(5, 23)[0];
        let ctx = Context::initial(task);
        let long = "x".repeat(500);
        let (next, truncated) = update_context(&ctx, Decision::Cloud, "load_dataset", &long);
        assert!(truncated);
        match next.completed.last().unwrap() {
            ContextEntry::Cloud { summary, .. } => assert_eq!(summary.chars().count(), SUMMARY_MAX_CHARS),
            other => panic!("expected cloud entry, got {other:?}"),
        }
    }

    fn slotless_task(n_tools: usize) -> Task {
        let tools: Vec<ToolSpec> = (0..n_tools)
            .map(|i| ToolSpec {
                name: if i == 0 { "finish".to_string() } else { format!("tool_{i}") },
                arg_slots: vec![],
            })
            .collect();
        Task {
            id: 0,
            query: "synthetic".to_string(),
            family: 0,
            available_tools: tools,
            completed_steps: vec![],
            target: vec![StructuredAction::finish()],
        }
    }

    #[test]
    fn zero_policy_is_uniform_over_tools_plus_malformed() {
        // Only pool tools have head rows, so use pool-named slotless stand-ins.
        let task = Task {
            available_tools: vec![
                TOOL_POOL[0].clone(),
                TOOL_POOL[3].clone(),
                TOOL_POOL[6].clone(),
            ],
            ..slotless_task(1)
        };
        let policy = EdgePolicy::zeros();
        let ctx = Context::initial(&task);
        let t = task.available_tools.len();
        let expect = 1.0 / (t as f64 + 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts: HashMap<String, usize> = HashMap::new();
        let n = 40_000;
        for _ in 0..n {
            let (action, logp) = policy.sample(&task, &ctx, &mut rng);
            assert!((logp - expect.ln()).abs() < 1e-12);
            *counts.entry(action.tool).or_default() += 1;
        }
        // Multinomial 3-sigma band around the uniform probability.
        let sigma = (expect * (1.0 - expect) / n as f64).sqrt();
        for (_, c) in counts {
            let freq = c as f64 / n as f64;
            assert!((freq - expect).abs() < 3.5 * sigma, "freq {freq} vs {expect}");
        }
    }

    #[test]
    fn saturated_logit_always_samples_target() {
        let task = &corpus(5, 29)[0];
        let ctx = Context::initial(task);
        let mut policy = EdgePolicy::zeros();
        let g = tool_pool_index(&task.target[0].tool).unwrap();
        let layout = policy_layout();
        // Drive the bias feature of the target tool's head row to +inf-ish.
        let f = layout.f_dim;
        policy.params_mut()[g * f + f - 1] = 200.0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let (action, _) = policy.sample(task, &ctx, &mut rng);
            assert_eq!(action.tool, task.target[0].tool);
        }
    }

    #[test]
    fn sampling_frequencies_match_softmax() {
        let task = &corpus(5, 31)[1 % 5];
        let ctx = Context::initial(task);
        let mut policy = EdgePolicy::zeros();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for w in policy.params_mut().iter_mut() {
            *w = rng.random_range(-0.3..0.3);
        }
        let phi = context_features(task, &ctx);
        let rows = EdgePolicy::head_rows(task);
        let probs = policy.tool_probs(&rows, &phi);
        let n = 100_000;
        let mut counts = vec![0usize; rows.len()];
        for _ in 0..n {
            let (action, _) = policy.sample(task, &ctx, &mut rng);
            let row = if action.tool == MALFORMED_TOOL {
                policy_layout().vocab
            } else {
                tool_pool_index(&action.tool).unwrap()
            };
            counts[rows.iter().position(|&r| r == row).unwrap()] += 1;
        }
        for (i, &p) in probs.iter().enumerate() {
            let freq = counts[i] as f64 / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (freq - p).abs() <= 3.5 * sigma.max(1e-6),
                "head {i}: freq {freq} vs p {p}"
            );
        }
    }

    #[test]
    fn log_prob_matches_sampled_action() {
        let task = &corpus(5, 37)[2];
        let ctx = Context::initial(task);
        let mut policy = EdgePolicy::zeros();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for w in policy.params_mut().iter_mut() {
            *w = rng.random_range(-0.5..0.5);
        }
        for _ in 0..50 {
            let (action, logp) = policy.sample(task, &ctx, &mut rng);
            let recomputed = policy.log_prob(task, &ctx, &action);
            assert!((logp - recomputed).abs() < 1e-12);
        }
    }

    #[test]
    fn cloud_oracle_exactness_and_validity() {
        let tasks = corpus(100, 41);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for task in &tasks {
            let ctx = Context::initial(task);
            let exact = cloud_oracle(task, &ctx, 1.0, &mut rng);
            assert_eq!(&exact, &task.target[0]);
            let wrong = cloud_oracle(task, &ctx, 0.0, &mut rng);
            assert!(validate_schema(&wrong, task));
            assert!(evaluate_quality(&wrong, task, 0) < 1.0);
            for _ in 0..5 {
                let any = cloud_oracle(task, &ctx, 0.5, &mut rng);
                assert!(validate_schema(&any, task));
            }
        }
    }

    #[test]
    fn target_contexts_walk_the_trace() {
        let task = &corpus(30, 43)[7 % 30];
        let pairs = target_contexts(task);
        assert_eq!(pairs.len(), task.target.len());
        assert_eq!(pairs[0].0.completed.len(), task.prior_steps());
        for (i, (ctx, action)) in pairs.iter().enumerate() {
            assert_eq!(ctx.k, i);
            assert_eq!(action, &task.target[i]);
        }
    }

    #[test]
    fn malformed_action_fails_schema() {
        let task = &corpus(5, 47)[0];
        let action = StructuredAction {
            tool: MALFORMED_TOOL.to_string(),
            args: BTreeMap::new(),
            thought: String::new(),
        };
        assert!(!validate_schema(&action, task));
    }
}
