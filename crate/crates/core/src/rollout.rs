//! Tree-structured rollout with entropy–confidence branch scheduling and
//! online pruning.
//!
//! Every active branch is advanced one token per step. Before expanding, the
//! branch's [`SignalTrace`] is updated from the current next-token
//! distribution and a branch width is scheduled from the local entropy and
//! the grouped confidence. A width above one forks the branch onto the
//! top-`B` tokens; otherwise the next token is sampled from the branch's own
//! RNG stream. After expansion the pruning rules run on the updated trace.
//!
//! The number of live branches plus completed trajectories never exceeds the
//! target count `G`; pruned and truncated branches release their slot. When
//! the tree ends with fewer than `G` completions, plain chains are sampled
//! from the root until `G` complete or the hard budget of `4·G·L` tokens is
//! spent.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EchoError, Result, RolloutFailure};
use crate::policy::{named_stream, sample_token, BranchStatus, PruneReason, TokenPolicy, Trajectory};
use crate::signals::{SignalConfig, SignalTrace, TokenDistribution, TokenId};

/// Fallback entropy bounds used when warm-up is skipped or degenerate.
pub const DEFAULT_ENTROPY_LOW: f64 = 1.0;
pub const DEFAULT_ENTROPY_HIGH: f64 = 3.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// Entropy and grouped confidence jointly set the width; pruning is on.
    Hybrid,
    /// Entropy-only width (confidence weight forced to zero), no pruning.
    EntropyOnly,
    /// Never fork, never prune.
    Chain,
}

impl ScheduleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleMode::Hybrid => "hybrid",
            ScheduleMode::EntropyOnly => "entropy_only",
            ScheduleMode::Chain => "chain",
        }
    }

    pub fn prunes(self) -> bool {
        matches!(self, ScheduleMode::Hybrid)
    }
}

impl std::str::FromStr for ScheduleMode {
    type Err = EchoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hybrid" => Ok(ScheduleMode::Hybrid),
            "entropy_only" => Ok(ScheduleMode::EntropyOnly),
            "chain" => Ok(ScheduleMode::Chain),
            other => Err(EchoError::config(format!(
                "schedule_mode={other} (expected hybrid, entropy_only or chain)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchSchedulerConfig {
    pub min_branches: usize,
    pub max_branches: usize,
    /// Entropy weight `α_B`.
    pub entropy_weight: f64,
    /// Confidence weight `β_B`.
    pub confidence_weight: f64,
    pub entropy_low: f64,
    pub entropy_high: f64,
    /// Reference confidence `s_branch`.
    pub reference_confidence: f64,
    pub eps: f64,
}

impl Default for BranchSchedulerConfig {
    fn default() -> Self {
        Self {
            min_branches: 1,
            max_branches: 4,
            entropy_weight: 3.0,
            confidence_weight: 1.0,
            entropy_low: DEFAULT_ENTROPY_LOW,
            entropy_high: DEFAULT_ENTROPY_HIGH,
            reference_confidence: 1.2,
            eps: 1e-6,
        }
    }
}

impl BranchSchedulerConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.min_branches == 0 {
            problems.push("B_min must be at least 1".to_string());
        }
        if self.min_branches > self.max_branches {
            problems.push(format!(
                "B_min={} exceeds B_max={}",
                self.min_branches, self.max_branches
            ));
        }
        if !(self.entropy_low < self.entropy_high) {
            problems.push(format!(
                "H_low={} must be below H_high={}",
                self.entropy_low, self.entropy_high
            ));
        }
        if !(self.eps > 0.0) {
            problems.push("eps_stab must be positive".to_string());
        }
        if !(self.entropy_weight >= 0.0) || !(self.confidence_weight >= 0.0) {
            problems.push("alpha_B and beta_B must be nonnegative".to_string());
        }
        problems
    }

    pub fn with_bounds(mut self, low: f64, high: f64) -> Self {
        self.entropy_low = low;
        self.entropy_high = high;
        self
    }
}

/// Real-valued width before rounding and clipping.
pub fn branch_width_raw(entropy: f64, grouped_conf: f64, cfg: &BranchSchedulerConfig) -> f64 {
    let entropy_term = (entropy - cfg.entropy_low) / (cfg.entropy_high - cfg.entropy_low + cfg.eps);
    let confidence_term = (grouped_conf - cfg.reference_confidence)
        / (cfg.reference_confidence.abs() + cfg.eps);
    cfg.min_branches as f64 + cfg.entropy_weight * entropy_term
        - cfg.confidence_weight * confidence_term
}

/// Width `B_t`: the raw width rounded half away from zero, then clipped to
/// `[B_min, B_max]`. A width of one means no fork.
pub fn branch_width(entropy: f64, grouped_conf: f64, cfg: &BranchSchedulerConfig) -> usize {
    let rounded = branch_width_raw(entropy, grouped_conf, cfg).round();
    let lo = cfg.min_branches as f64;
    let hi = cfg.max_branches as f64;
    // NaN clamps to the lower bound
    if rounded.is_nan() {
        return cfg.min_branches;
    }
    rounded.clamp(lo, hi) as usize
}

/// The `B` most probable tokens, descending, lowest index first among ties.
pub fn select_branch_tokens(dist: &TokenDistribution, width: usize) -> Result<Vec<TokenId>> {
    dist.top_tokens(width)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneConfig {
    /// `τ_prune`, floor for the running minimum of grouped confidence.
    pub prune_threshold: f64,
    /// `S_tail`.
    pub tail_patience: u32,
    /// `τ_tail`.
    pub tail_threshold: f64,
    /// `δ_upper`.
    pub spike_threshold: f64,
    /// `S_Δ`.
    pub spike_patience: u32,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            prune_threshold: 0.4,
            tail_patience: 3,
            tail_threshold: 1.0,
            spike_threshold: 0.5,
            spike_patience: 3,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("tau_prune", self.prune_threshold),
            ("tau_tail", self.tail_threshold),
            ("delta_upper", self.spike_threshold),
        ] {
            if !v.is_finite() {
                problems.push(format!("{name} must be finite"));
            }
        }
        if self.tail_patience == 0 {
            problems.push("S_tail must be at least 1".to_string());
        }
        if self.spike_patience == 0 {
            problems.push("S_delta must be at least 1".to_string());
        }
        problems
    }
}

/// Pruning decision at the latest step of `trace`.
pub fn apply_pruning(trace: &SignalTrace, cfg: &PruneConfig) -> Option<PruneReason> {
    apply_pruning_at(trace, trace.len(), cfg)
}

/// Pruning decision as of 1-based step `t`. Rules are checked in the order
/// low confidence, tail decline, entropy spike.
pub fn apply_pruning_at(trace: &SignalTrace, t: usize, cfg: &PruneConfig) -> Option<PruneReason> {
    if t == 0 || t > trace.len() {
        return None;
    }
    let i = t - 1;
    if trace.running_min_seq()[i] < cfg.prune_threshold {
        return Some(PruneReason::LowConfidence);
    }
    if trace.decline_seq()[i] >= cfg.tail_patience && trace.tail_conf_seq()[i] <= cfg.tail_threshold
    {
        return Some(PruneReason::TailDecline);
    }
    if trace.spike_seq()[i] >= cfg.spike_patience {
        return Some(PruneReason::EntropySpike);
    }
    None
}

/// Linear-interpolation percentile of an ascending slice, `q ∈ [0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// 10th / 90th percentiles of the observed entropies, or the default
/// bounds when the spread is degenerate.
pub fn entropy_bounds_from_observations(observations: &[f64]) -> Result<(f64, f64)> {
    if observations.is_empty() {
        return Err(EchoError::config("warm-up observed no entropies"));
    }
    let mut sorted = observations.to_vec();
    sorted.sort_by(f64::total_cmp);
    let low = percentile(&sorted, 0.1);
    let high = percentile(&sorted, 0.9);
    if high <= low {
        log::warn!("degenerate warm-up entropy spread ({low} .. {high}); using defaults");
        return Ok((DEFAULT_ENTROPY_LOW, DEFAULT_ENTROPY_HIGH));
    }
    Ok((low, high))
}

/// Samples `warmup_steps`-token chains from every prompt without touching
/// the policy and calibrates the entropy bounds from what it saw.
pub fn warmup_entropy_bounds<P: TokenPolicy>(
    policy: &P,
    prompts: &[Vec<TokenId>],
    warmup_steps: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if warmup_steps == 0 {
        return Err(EchoError::config("warmup_steps must be at least 1"));
    }
    let eos = policy.eos_token();
    let mut observations = Vec::new();
    for (i, prompt) in prompts.iter().enumerate() {
        let mut rng = named_stream(seed, "warmup", i as u64, 0);
        let mut prefix = prompt.clone();
        for _ in 0..warmup_steps {
            let dist = policy.next_distribution(&prefix)?;
            observations.push(dist.entropy());
            let token = sample_token(&dist, &mut rng);
            if token == eos {
                break;
            }
            prefix.push(token);
        }
    }
    entropy_bounds_from_observations(&observations)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutConfig {
    pub signals: SignalConfig,
    pub scheduler: BranchSchedulerConfig,
    pub pruning: PruneConfig,
    pub mode: ScheduleMode,
    /// `G`, number of completed trajectories to collect.
    pub target_count: usize,
    /// `L`, maximum generated tokens per trajectory.
    pub max_length: usize,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            signals: SignalConfig::default(),
            scheduler: BranchSchedulerConfig::default(),
            pruning: PruneConfig::default(),
            mode: ScheduleMode::Hybrid,
            target_count: 64,
            max_length: 12,
            seed: 0,
        }
    }
}

impl RolloutConfig {
    pub fn budget_cap(&self) -> usize {
        4 * self.target_count * self.max_length
    }

    /// Width for the configured mode.
    pub fn width(&self, entropy: f64, grouped_conf: f64) -> usize {
        match self.mode {
            ScheduleMode::Hybrid => branch_width(entropy, grouped_conf, &self.scheduler),
            ScheduleMode::EntropyOnly => entropy_only_width(entropy, &self.scheduler),
            ScheduleMode::Chain => 1,
        }
    }
}

/// Width with the confidence term removed.
pub fn entropy_only_width(entropy: f64, cfg: &BranchSchedulerConfig) -> usize {
    let cfg = BranchSchedulerConfig {
        confidence_weight: 0.0,
        ..*cfg
    };
    branch_width(entropy, 0.0, &cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Root,
    Expanded,
    Active,
    Complete,
    Truncated,
    Pruned,
}

/// One generated token. `entropy`/`confidence`/`grouped_conf`/`tail_conf`
/// describe the distribution the token was drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub token: Option<TokenId>,
    #[serde(rename = "H")]
    pub entropy: Option<f64>,
    #[serde(rename = "C")]
    pub confidence: Option<f64>,
    #[serde(rename = "C_G")]
    pub grouped_conf: Option<f64>,
    #[serde(rename = "C_tail")]
    pub tail_conf: Option<f64>,
    pub status: NodeStatus,
    pub prune_reason: Option<PruneReason>,
    /// Depth in generated tokens; the root is step 0.
    pub step: usize,
    pub logprob: Option<f64>,
    /// Chosen by top-B selection at a fork rather than sampled.
    pub forked: bool,
    /// Belongs to a fallback chain launched after the tree finished.
    pub refill: bool,
    #[serde(skip)]
    pub children: Vec<usize>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty() && self.status != NodeStatus::Root
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTree {
    pub nodes: Vec<TreeNode>,
    /// Leaf node ids of completed trajectories, in completion order.
    pub completed: Vec<usize>,
    pub token_budget_used: usize,
    pub max_length: usize,
    pub target_count: usize,
    pub refill_attempts: usize,
}

impl RolloutTree {
    fn new(max_length: usize, target_count: usize) -> Self {
        Self {
            nodes: vec![TreeNode {
                id: 0,
                parent: None,
                token: None,
                entropy: None,
                confidence: None,
                grouped_conf: None,
                tail_conf: None,
                status: NodeStatus::Root,
                prune_reason: None,
                step: 0,
                logprob: None,
                forked: false,
                refill: false,
                children: Vec::new(),
            }],
            completed: Vec::new(),
            token_budget_used: 0,
            max_length,
            target_count,
            refill_attempts: 0,
        }
    }

    /// Token path from the root to `node`.
    pub fn path_tokens(&self, node: usize) -> Vec<TokenId> {
        let mut tokens = Vec::new();
        let mut cur = Some(node);
        while let Some(id) = cur {
            if let Some(t) = self.nodes[id].token {
                tokens.push(t);
            }
            cur = self.nodes[id].parent;
        }
        tokens.reverse();
        tokens
    }

    /// Nodes with more than one child.
    pub fn fork_nodes(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| n.children.len() > 1)
            .map(|n| n.id)
            .collect()
    }

    pub fn leaves(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter().filter(|n| n.is_leaf())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for node in &self.nodes {
            out.push_str(&serde_json::to_string(node)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Rebuilds a tree from node records. Child links are restored from the
    /// parent ids; the budget is the number of non-root nodes.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut nodes: Vec<TreeNode> = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            nodes.push(serde_json::from_str(line)?);
        }
        for (i, n) in nodes.iter().enumerate() {
            if n.id != i {
                return Err(EchoError::Validation(format!(
                    "node record {i} carries id {}",
                    n.id
                )));
            }
        }
        for i in 0..nodes.len() {
            if let Some(p) = nodes[i].parent {
                if p >= i {
                    return Err(EchoError::Validation(format!(
                        "node {i} has parent {p} that is not an earlier record"
                    )));
                }
                nodes[p].children.push(i);
            }
        }
        let completed = nodes
            .iter()
            .filter(|n| n.status == NodeStatus::Complete)
            .map(|n| n.id)
            .collect();
        let max_length = nodes.iter().map(|n| n.step).max().unwrap_or(0);
        Ok(Self {
            token_budget_used: nodes.len().saturating_sub(1),
            refill_attempts: nodes
                .iter()
                .filter(|n| n.refill && n.parent == Some(0))
                .count(),
            target_count: 0,
            max_length,
            completed,
            nodes,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RolloutOutcome {
    pub tree: RolloutTree,
    /// At most `G` completed trajectories, in completion order.
    pub trajectories: Vec<Trajectory>,
    /// `G` minus the number of trajectories returned.
    pub shortfall: usize,
}

struct Branch {
    node: usize,
    tokens: Vec<TokenId>,
    policy_logprobs: Vec<f64>,
    ref_logprobs: Vec<f64>,
    trace: SignalTrace,
    refill: bool,
    rng: ChaCha8Rng,
}

struct Runner<'a, P, Q> {
    policy: &'a P,
    reference: &'a Q,
    prompt: &'a [TokenId],
    cfg: &'a RolloutConfig,
    rollout_id: u64,
    tree: RolloutTree,
    completed: Vec<Trajectory>,
    next_branch: u64,
    pruned: usize,
    truncated: usize,
}

impl<'a, P: TokenPolicy, Q: TokenPolicy> Runner<'a, P, Q> {
    fn new_branch(&mut self, node: usize, refill: bool) -> Branch {
        let id = self.next_branch;
        self.next_branch += 1;
        Branch {
            node,
            tokens: Vec::new(),
            policy_logprobs: Vec::new(),
            ref_logprobs: Vec::new(),
            trace: SignalTrace::new(),
            refill,
            rng: named_stream(self.cfg.seed, "branch", self.rollout_id, id),
        }
    }

    fn fork(&mut self, parent: &Branch) -> Branch {
        let mut child = self.new_branch(parent.node, parent.refill);
        child.tokens = parent.tokens.clone();
        child.policy_logprobs = parent.policy_logprobs.clone();
        child.ref_logprobs = parent.ref_logprobs.clone();
        child.trace = parent.trace.clone();
        child
    }

    fn remaining_budget(&self) -> usize {
        self.cfg
            .budget_cap()
            .saturating_sub(self.tree.token_budget_used)
    }

    fn mark(&mut self, node: usize, status: NodeStatus, reason: Option<PruneReason>) {
        if node != 0 {
            self.tree.nodes[node].status = status;
            self.tree.nodes[node].prune_reason = reason;
        }
    }

    /// Advances `branch` by one step. `open_slots` is how many extra
    /// branches may be created by a fork. Returns the branches still active.
    fn step(&mut self, mut branch: Branch, open_slots: usize) -> Result<Vec<Branch>> {
        if self.remaining_budget() == 0 {
            self.truncated += 1;
            self.mark(branch.node, NodeStatus::Truncated, None);
            return Ok(Vec::new());
        }
        let mut prefix = self.prompt.to_vec();
        prefix.extend_from_slice(&branch.tokens);
        let dist = self.policy.next_distribution(&prefix)?;
        let entropy = dist.entropy();
        let confidence = dist.topk_confidence(self.cfg.signals.top_k)?;
        branch.trace.push(
            entropy,
            confidence,
            &self.cfg.signals,
            self.cfg.pruning.spike_threshold,
        );
        let grouped = branch.trace.last_grouped_confidence().expect("just pushed");
        let tail = branch.trace.last_tail_confidence().expect("just pushed");

        let width = if branch.refill {
            1
        } else {
            self.cfg.width(entropy, grouped)
        };
        let extra = (width - 1).min(open_slots);
        let picks: Vec<(TokenId, bool)> = if extra > 0 {
            let k = (extra + 1).min(self.remaining_budget());
            select_branch_tokens(&dist, k)?
                .into_iter()
                .map(|t| (t, true))
                .collect()
        } else {
            vec![(sample_token(&dist, &mut branch.rng), false)]
        };

        let parent_node = branch.node;
        if parent_node != 0 {
            self.tree.nodes[parent_node].status = NodeStatus::Expanded;
        }
        let mut children = Vec::with_capacity(picks.len());
        for _ in 1..picks.len() {
            children.push(self.fork(&branch));
        }
        children.insert(0, branch);

        let eos = self.policy.eos_token();
        let prune_reason = if self.cfg.mode.prunes() {
            apply_pruning(&children[0].trace, &self.cfg.pruning)
        } else {
            None
        };
        let mut still_active = Vec::new();
        for (mut child, (token, forked)) in children.into_iter().zip(picks) {
            let logprob = self.policy.log_prob(&prefix, token)?;
            let ref_logprob = self.reference.log_prob(&prefix, token)?;
            child.tokens.push(token);
            child.policy_logprobs.push(logprob);
            child.ref_logprobs.push(ref_logprob);

            let id = self.tree.nodes.len();
            self.tree.nodes.push(TreeNode {
                id,
                parent: Some(parent_node),
                token: Some(token),
                entropy: Some(entropy),
                confidence: Some(confidence),
                grouped_conf: Some(grouped),
                tail_conf: Some(tail),
                status: NodeStatus::Active,
                prune_reason: None,
                step: child.tokens.len(),
                logprob: Some(logprob),
                forked,
                refill: child.refill,
                children: Vec::new(),
            });
            self.tree.nodes[parent_node].children.push(id);
            self.tree.token_budget_used += 1;
            child.node = id;

            let status = if let Some(reason) = prune_reason {
                BranchStatus::Pruned(reason)
            } else if token == eos {
                BranchStatus::Complete
            } else if child.tokens.len() >= self.cfg.max_length {
                BranchStatus::Truncated
            } else {
                BranchStatus::Active
            };
            match status {
                BranchStatus::Active => still_active.push(child),
                BranchStatus::Complete => {
                    self.mark(id, NodeStatus::Complete, None);
                    self.tree.completed.push(id);
                    self.completed.push(Trajectory {
                        prompt: self.prompt.to_vec(),
                        tokens: child.tokens,
                        policy_logprobs: child.policy_logprobs,
                        ref_logprobs: child.ref_logprobs,
                        trace: child.trace,
                        status,
                        leaf_node: id,
                    });
                }
                BranchStatus::Truncated => {
                    self.truncated += 1;
                    self.mark(id, NodeStatus::Truncated, None);
                }
                BranchStatus::Pruned(reason) => {
                    self.pruned += 1;
                    self.mark(id, NodeStatus::Pruned, Some(reason));
                }
            }
        }
        Ok(still_active)
    }
}

/// Runs one tree rollout for `prompt`, recording reference log-probs along
/// the way. `rollout_id` selects the RNG streams.
pub fn rollout<P: TokenPolicy, Q: TokenPolicy>(
    policy: &P,
    reference: &Q,
    prompt: &[TokenId],
    cfg: &RolloutConfig,
    rollout_id: u64,
) -> Result<RolloutOutcome> {
    if cfg.target_count < 2 {
        return Err(EchoError::config(format!("G={} must be at least 2", cfg.target_count)));
    }
    if cfg.max_length == 0 {
        return Err(EchoError::config("L must be at least 1"));
    }
    let mut runner = Runner {
        policy,
        reference,
        prompt,
        cfg,
        rollout_id,
        tree: RolloutTree::new(cfg.max_length, cfg.target_count),
        completed: Vec::new(),
        next_branch: 0,
        pruned: 0,
        truncated: 0,
    };

    let root = runner.new_branch(0, false);
    let mut active = vec![root];
    while !active.is_empty() {
        let mut live = active.len();
        let mut next = Vec::new();
        for branch in active {
            let open = cfg
                .target_count
                .saturating_sub(live + runner.completed.len());
            let survivors = runner.step(branch, open)?;
            // the parent's slot moves to its survivors
            live = live - 1 + survivors.len();
            next.extend(survivors);
        }
        active = next;
    }

    while runner.completed.len() < cfg.target_count && runner.remaining_budget() > 0 {
        runner.tree.refill_attempts += 1;
        let mut chain = vec![runner.new_branch(0, true)];
        while let Some(branch) = chain.pop() {
            chain = runner.step(branch, 0)?;
        }
    }

    if runner.completed.is_empty() {
        return Err(EchoError::RolloutFailure(RolloutFailure {
            tokens_used: runner.tree.token_budget_used,
            pruned: runner.pruned,
            truncated: runner.truncated,
            refill_attempts: runner.tree.refill_attempts,
        }));
    }
    let mut trajectories = runner.completed;
    trajectories.truncate(cfg.target_count);
    Ok(RolloutOutcome {
        shortfall: cfg.target_count - trajectories.len(),
        tree: runner.tree,
        trajectories,
    })
}
