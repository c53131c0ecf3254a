//! Rollout-collapse statistics: high-entropy continuity, per-trajectory
//! budget attribution and top-3 budget share, plus the paired comparison of
//! two runs and label-aware evaluation kept away from the training path.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{EchoError, Result};
use crate::rewards::Answer;
use crate::rollout::{entropy_only_width, BranchSchedulerConfig, NodeStatus, RolloutTree};

pub const DEFAULT_MIN_RUN: usize = 3;

/// Fraction of steps inside maximal runs of at least `min_run` consecutive
/// steps with entropy `>= threshold`.
pub fn high_entropy_continuity(entropies: &[f64], threshold: f64, min_run: usize) -> f64 {
    if entropies.is_empty() {
        return 0.0;
    }
    let mut covered = 0usize;
    let mut run = 0usize;
    for &h in entropies {
        if h >= threshold {
            run += 1;
        } else {
            if run >= min_run {
                covered += run;
            }
            run = 0;
        }
    }
    if run >= min_run {
        covered += run;
    }
    covered as f64 / entropies.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollapseStats {
    /// Leaf node ids, one per trajectory, in tree order.
    pub leaves: Vec<usize>,
    /// Tokens attributed to each leaf's trajectory.
    pub per_trajectory_budget: Vec<f64>,
    /// High-entropy continuity along each leaf's path.
    pub high_entropy_continuity: Vec<f64>,
    pub effective_branch_count: usize,
    pub top3_budget_share: f64,
    pub token_budget_used: usize,
}

impl CollapseStats {
    /// Continuity averaged over trajectories.
    pub fn mean_continuity(&self) -> f64 {
        if self.high_entropy_continuity.is_empty() {
            return 0.0;
        }
        self.high_entropy_continuity.iter().sum::<f64>() / self.high_entropy_continuity.len() as f64
    }
}

/// Attributes every generated token to the trajectories passing through it.
///
/// A trajectory is any root-to-leaf path, whether it ended complete,
/// truncated or pruned, so the shares always sum to the full budget. A
/// token shared by `k` leaves costs each of them `1/k`. The effective branch
/// count is the number of completed leaves grown by the tree search itself;
/// fallback chains launched afterwards are not counted.
pub fn budget_allocation(tree: &RolloutTree, threshold: f64, min_run: usize) -> CollapseStats {
    let n = tree.nodes.len();
    // children always carry larger ids than their parent
    let mut leaf_count = vec![0usize; n];
    for id in (0..n).rev() {
        let node = &tree.nodes[id];
        if node.is_leaf() {
            leaf_count[id] = 1;
        }
        if let Some(p) = node.parent {
            leaf_count[p] += leaf_count[id];
        }
    }

    let mut leaves = Vec::new();
    let mut budgets = Vec::new();
    let mut continuity = Vec::new();
    for leaf in tree.leaves() {
        let mut share = 0.0;
        let mut comp = 0.0;
        let mut entropies = Vec::new();
        let mut cur = Some(leaf.id);
        while let Some(id) = cur {
            let node = &tree.nodes[id];
            if node.status != NodeStatus::Root {
                // Kahan summation keeps the total exact to rounding
                let y = 1.0 / leaf_count[id] as f64 - comp;
                let t = share + y;
                comp = (t - share) - y;
                share = t;
                if let Some(h) = node.entropy {
                    entropies.push(h);
                }
            }
            cur = node.parent;
        }
        entropies.reverse();
        leaves.push(leaf.id);
        budgets.push(share);
        continuity.push(high_entropy_continuity(&entropies, threshold, min_run));
    }

    let total: f64 = budgets.iter().sum();
    let mut sorted = budgets.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top3: f64 = sorted.iter().take(3).sum();
    let top3_budget_share = if total > 0.0 { (top3 / total).min(1.0) } else { 0.0 };

    let effective_branch_count = tree
        .nodes
        .iter()
        .filter(|n| n.status == NodeStatus::Complete && !n.refill)
        .count();

    CollapseStats {
        leaves,
        per_trajectory_budget: budgets,
        high_entropy_continuity: continuity,
        effective_branch_count,
        top3_budget_share,
        token_budget_used: tree.token_budget_used,
    }
}

/// Branch width with the confidence term dropped.
pub fn entropy_only_schedule(entropy: f64, cfg: &BranchSchedulerConfig) -> usize {
    entropy_only_width(entropy, cfg)
}

/// One row of the collapse-statistics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRow {
    pub run_id: String,
    pub prompt_id: usize,
    pub continuity: f64,
    pub effective_branches: f64,
    pub top3_share: f64,
}

impl DiagnosticRow {
    pub fn from_stats(run_id: &str, prompt_id: usize, stats: &CollapseStats) -> Self {
        Self {
            run_id: run_id.to_string(),
            prompt_id,
            continuity: stats.mean_continuity(),
            effective_branches: stats.effective_branch_count as f64,
            top3_share: stats.top3_budget_share,
        }
    }
}

pub const DIAGNOSTIC_HEADER: &str = "run_id,prompt_id,continuity,effective_branches,top3_share";

pub fn diagnostics_csv(rows: &[DiagnosticRow]) -> String {
    let mut out = String::from(DIAGNOSTIC_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.run_id, r.prompt_id, r.continuity, r.effective_branches, r.top3_share
        );
    }
    out
}

/// Paired differences `b - a` for one prompt, averaged over its rollouts.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub prompt_id: usize,
    pub continuity_diff: f64,
    pub effective_branches_diff: f64,
    pub top3_share_diff: f64,
}

pub const COMPARISON_HEADER: &str =
    "prompt_id,continuity_diff,effective_branches_diff,top3_share_diff";

fn per_prompt_means(rows: &[DiagnosticRow]) -> BTreeMap<usize, (usize, [f64; 3])> {
    let mut acc: BTreeMap<usize, (usize, [f64; 3])> = BTreeMap::new();
    for r in rows {
        let e = acc.entry(r.prompt_id).or_insert((0, [0.0; 3]));
        e.0 += 1;
        e.1[0] += r.continuity;
        e.1[1] += r.effective_branches;
        e.1[2] += r.top3_share;
    }
    for (count, sums) in acc.values_mut() {
        for s in sums.iter_mut() {
            *s /= *count as f64;
        }
    }
    acc
}

/// Paired per-prompt comparison. Both runs must cover the same prompts with
/// the same number of rollouts each.
pub fn compare_runs(a: &[DiagnosticRow], b: &[DiagnosticRow]) -> Result<Vec<ComparisonRow>> {
    let ma = per_prompt_means(a);
    let mb = per_prompt_means(b);
    let shape_a: Vec<(usize, usize)> = ma.iter().map(|(k, v)| (*k, v.0)).collect();
    let shape_b: Vec<(usize, usize)> = mb.iter().map(|(k, v)| (*k, v.0)).collect();
    if shape_a != shape_b {
        return Err(EchoError::Validation(format!(
            "runs are not paired: (prompt, rollouts) {shape_a:?} vs {shape_b:?}"
        )));
    }
    Ok(ma
        .iter()
        .zip(&mb)
        .map(|((&prompt_id, (_, x)), (_, (_, y)))| ComparisonRow {
            prompt_id,
            continuity_diff: y[0] - x[0],
            effective_branches_diff: y[1] - x[1],
            top3_share_diff: y[2] - x[2],
        })
        .collect())
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from(COMPARISON_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.prompt_id, r.continuity_diff, r.effective_branches_diff, r.top3_share_diff
        );
    }
    out
}

/// Tree dump file name for a (step, task) pair.
pub fn tree_file_name(step: usize, task: usize) -> String {
    format!("step{step:04}_task{task}.jsonl")
}

fn parse_tree_file_name(name: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix("step")?.strip_suffix(".jsonl")?;
    let (step, task) = rest.split_once("_task")?;
    Some((step.parse().ok()?, task.parse().ok()?))
}

/// Lists `(step, task, path)` for every tree dump in a run directory,
/// ordered by step then task. Errors name whatever is missing.
pub fn list_tree_dumps(run_dir: &Path) -> Result<Vec<(usize, usize, PathBuf)>> {
    let trees = run_dir.join("trees");
    if !trees.is_dir() {
        return Err(EchoError::MissingFiles(vec![trees]));
    }
    let mut found = Vec::new();
    let entries = std::fs::read_dir(&trees).map_err(|e| EchoError::io(&trees, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| EchoError::io(&trees, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some((step, task)) = parse_tree_file_name(&name) {
            found.push((step, task, entry.path()));
        }
    }
    if found.is_empty() {
        return Err(EchoError::MissingFiles(vec![trees.join("step*_task*.jsonl")]));
    }
    found.sort();
    Ok(found)
}

/// Collapse statistics for every tree dump of a run, one row per dump.
pub fn diagnose_run(run_dir: &Path, run_id: &str, threshold: f64, min_run: usize) -> Result<Vec<DiagnosticRow>> {
    let mut rows = Vec::new();
    for (_, task, path) in list_tree_dumps(run_dir)? {
        let text = std::fs::read_to_string(&path).map_err(|e| EchoError::io(&path, e))?;
        let tree = RolloutTree::from_jsonl(&text)?;
        let stats = budget_allocation(&tree, threshold, min_run);
        rows.push(DiagnosticRow::from_stats(run_id, task, &stats));
    }
    Ok(rows)
}

/// Ground-truth answer of a toy task. Only this module can read it, so the
/// training path cannot turn it into a reward.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth(Answer);

impl GroundTruth {
    pub fn new(answer: Answer) -> Self {
        Self(answer)
    }
}

/// Fraction of `answers` equal to the ground truth. An unparseable answer
/// is never correct, even against an unparseable truth.
pub fn evaluation_accuracy(truth: &GroundTruth, answers: &[Answer]) -> f64 {
    if answers.is_empty() || truth.0.is_sentinel() {
        return 0.0;
    }
    answers.iter().filter(|a| **a == truth.0).count() as f64 / answers.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::TreeNode;

    fn node(id: usize, parent: Option<usize>, status: NodeStatus, h: f64) -> TreeNode {
        TreeNode {
            id,
            parent,
            token: parent.map(|_| 0),
            entropy: parent.map(|_| h),
            confidence: parent.map(|_| 0.5),
            grouped_conf: parent.map(|_| 0.5),
            tail_conf: parent.map(|_| 0.5),
            status,
            prune_reason: None,
            step: 0,
            logprob: None,
            forked: false,
            refill: false,
            children: Vec::new(),
        }
    }

    fn tree(nodes: Vec<TreeNode>) -> RolloutTree {
        let text: String = nodes
            .iter()
            .map(|n| serde_json::to_string(n).unwrap() + "\n")
            .collect();
        RolloutTree::from_jsonl(&text).unwrap()
    }

    #[test]
    fn continuity_examples() {
        assert_eq!(high_entropy_continuity(&[0.1, 0.2], 1.0, 3), 0.0);
        assert_eq!(high_entropy_continuity(&[2.0; 4], 1.0, 3), 1.0);
        let pattern = [2.0, 2.0, 2.0, 0.0, 2.0];
        assert!((high_entropy_continuity(&pattern, 1.0, 3) - 0.6).abs() < 1e-15);
        assert_eq!(high_entropy_continuity(&[2.0, 2.0, 0.0, 2.0, 2.0], 1.0, 3), 0.0);
    }

    #[test]
    fn balanced_binary_tree_share() {
        use NodeStatus::*;
        let t = tree(vec![
            node(0, None, Root, 0.0),
            node(1, Some(0), Expanded, 1.0),
            node(2, Some(0), Expanded, 1.0),
            node(3, Some(1), Complete, 1.0),
            node(4, Some(1), Complete, 1.0),
            node(5, Some(2), Complete, 1.0),
            node(6, Some(2), Complete, 1.0),
        ]);
        let s = budget_allocation(&t, 3.5, 3);
        assert_eq!(s.per_trajectory_budget, vec![1.5; 4]);
        assert!((s.top3_budget_share - 0.75).abs() < 1e-15);
        assert_eq!(s.effective_branch_count, 4);
    }

    #[test]
    fn refill_chains_own_their_paths() {
        use NodeStatus::*;
        let mut nodes = vec![node(0, None, Root, 0.0)];
        // three chains of lengths 2, 3 and 1
        let mut id = 1;
        for len in [2usize, 3, 1] {
            let mut parent = 0;
            for k in 0..len {
                let status = if k + 1 == len { Complete } else { Expanded };
                let mut n = node(id, Some(parent), status, 0.0);
                n.refill = true;
                nodes.push(n);
                parent = id;
                id += 1;
            }
        }
        let s = budget_allocation(&tree(nodes), 3.5, 3);
        assert_eq!(s.per_trajectory_budget, vec![2.0, 3.0, 1.0]);
        assert_eq!(s.top3_budget_share, 1.0);
        assert_eq!(s.effective_branch_count, 0);
    }

    #[test]
    fn single_trajectory_share_is_one() {
        use NodeStatus::*;
        let t = tree(vec![
            node(0, None, Root, 0.0),
            node(1, Some(0), Expanded, 0.0),
            node(2, Some(1), Complete, 0.0),
        ]);
        let s = budget_allocation(&t, 3.5, 3);
        assert_eq!(s.top3_budget_share, 1.0);
        assert_eq!(s.per_trajectory_budget.iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn entropy_only_ignores_confidence() {
        let cfg = BranchSchedulerConfig::default();
        assert_eq!(entropy_only_schedule(3.5, &cfg), 4);
        assert_eq!(entropy_only_schedule(1.0, &cfg), 1);
    }

    #[test]
    fn compare_identical_and_mismatched() {
        let row = |p, t| DiagnosticRow {
            run_id: "a".into(),
            prompt_id: p,
            continuity: 0.2,
            effective_branches: 3.0,
            top3_share: t,
        };
        let a = vec![row(0, 0.5), row(1, 0.7), row(0, 0.3)];
        let diffs = compare_runs(&a, &a).unwrap();
        assert_eq!(diffs.len(), 2);
        assert!(diffs.iter().all(|d| d.continuity_diff == 0.0
            && d.effective_branches_diff == 0.0
            && d.top3_share_diff == 0.0));
        assert!(compare_runs(&a, &a[..2]).is_err());
        assert_eq!(comparison_csv(&diffs).lines().count(), 3);
    }

    #[test]
    fn tree_file_names_round_trip() {
        assert_eq!(tree_file_name(3, 1), "step0003_task1.jsonl");
        assert_eq!(parse_tree_file_name("step0003_task1.jsonl"), Some((3, 1)));
        assert_eq!(parse_tree_file_name("notes.txt"), None);
    }

    #[test]
    fn accuracy_counts_matches() {
        let truth = GroundTruth::new(Answer::Tokens(vec![3]));
        let answers = [Answer::Tokens(vec![3]), Answer::NoAnswer, Answer::Tokens(vec![4]), Answer::Tokens(vec![3])];
        assert_eq!(evaluation_accuracy(&truth, &answers), 0.5);
    }
}
