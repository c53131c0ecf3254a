//! The test-time training loop: warm-up, rollout, vote, advantage, update.
//!
//! Rewards come only from majority voting over the policy's own answers.
//! Ground truth is read by [`crate::diagnostics::evaluation_accuracy`] for
//! the metrics column and nowhere else.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::config::EchoConfig;
use crate::diagnostics::{budget_allocation, evaluation_accuracy, tree_file_name, DEFAULT_MIN_RUN};
use crate::error::{EchoError, Result};
use crate::optimizer::{echo_gradient, evaluate_objective, ObjectiveReport, UpdateBatch};
use crate::policy::{apply_update, named_stream, PolicyParams, ReferencePolicy};
use crate::rewards::{downsample_for_training, extract_answer, majority_vote, Answer, VoteResult};
use crate::rollout::{rollout, warmup_entropy_bounds, RolloutTree};

pub use crate::toy::{build_world, ToyTask, ToyWorld};

/// Live policy, the fixed reference and the calibrated entropy bounds.
#[derive(Debug, Clone)]
pub struct EngineState {
    pub policy: PolicyParams,
    pub reference: ReferencePolicy,
    pub cfg: EchoConfig,
    /// Rollouts performed so far; also the id of the next rollout's RNG
    /// streams.
    pub rollouts_done: u64,
}

impl EngineState {
    /// Snapshots the reference from `policy`; it stays fixed from here on.
    pub fn new(policy: PolicyParams, cfg: EchoConfig) -> Self {
        let reference = policy.snapshot_reference();
        Self {
            policy,
            reference,
            cfg,
            rollouts_done: 0,
        }
    }

    /// Replaces the configured entropy bounds with warm-up estimates drawn
    /// from the current policy. Parameters are not touched. With
    /// `warmup_steps = 0` the configured bounds stay.
    pub fn calibrate(&mut self, tasks: &[ToyTask]) -> Result<(f64, f64)> {
        if self.cfg.warmup_steps > 0 {
            let prompts: Vec<_> = tasks.iter().map(|t| t.prompt.clone()).collect();
            let (low, high) =
                warmup_entropy_bounds(&self.policy, &prompts, self.cfg.warmup_steps, self.cfg.seed)?;
            self.cfg.scheduler = self.cfg.scheduler.with_bounds(low, high);
        }
        Ok((self.cfg.scheduler.entropy_low, self.cfg.scheduler.entropy_high))
    }
}

/// What happened to one (step, task) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    Updated,
    VoteFailure,
    RolloutFailure,
}

impl StepStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            StepStatus::Updated => "updated",
            StepStatus::VoteFailure => "vote_failure",
            StepStatus::RolloutFailure => "rollout_failure",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub task: usize,
    pub status: StepStatus,
    pub vote: Option<VoteResult>,
    pub completions: usize,
    pub shortfall: usize,
    pub tokens_used: usize,
    /// Objective, KL and clipping statistics at the pre-update parameters.
    pub report: Option<ObjectiveReport>,
    pub eval_accuracy: f64,
    pub top3_share: f64,
    pub effective_branches: usize,
}

pub const METRICS_HEADER: &str = "step,task,status,label,counts,rewards,completions,shortfall,\
tokens_used,loss,mean_kl,mean_eps,gate_fraction,mean_abs_adv,eval_accuracy,top3_share,\
effective_branches";

fn answer_field(a: &Answer) -> String {
    a.to_string()
}

impl StepMetrics {
    /// One CSV line. Floats use the shortest representation that round
    /// trips, so identical runs give identical bytes.
    pub fn csv_row(&self) -> String {
        let (label, counts, rewards) = match &self.vote {
            Some(v) => (
                answer_field(&v.label),
                v.counts
                    .iter()
                    .map(|(a, c)| format!("{}={c}", answer_field(a)))
                    .collect::<Vec<_>>()
                    .join("|"),
                v.rewards
                    .iter()
                    .map(|r| if *r > 0.0 { '1' } else { '0' })
                    .collect::<String>(),
            ),
            None => (String::new(), String::new(), String::new()),
        };
        let stats = match &self.report {
            Some(r) => format!(
                "{},{},{},{},{}",
                r.loss, r.mean_kl, r.mean_eps, r.gate_fraction, r.mean_abs_adv
            ),
            None => ",,,,".to_string(),
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.task,
            self.status.as_str(),
            label,
            counts,
            rewards,
            self.completions,
            self.shortfall,
            self.tokens_used,
            stats,
            self.eval_accuracy,
            self.top3_share,
            self.effective_branches
        )
    }
}

/// Result of one step: its metrics and, if the rollout succeeded, the tree.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub metrics: StepMetrics,
    pub tree: Option<RolloutTree>,
}

/// One rollout and one update for `task`.
///
/// A rollout that completes nothing or a vote where every answer is
/// unparseable skips the update; the step is recorded with that status.
pub fn run_step(state: &mut EngineState, task: &ToyTask, step: usize) -> Result<StepOutcome> {
    let rollout_id = state.rollouts_done;
    state.rollouts_done += 1;
    let cfg = state.cfg.clone();
    let mut metrics = StepMetrics {
        step,
        task: task.id,
        status: StepStatus::Updated,
        vote: None,
        completions: 0,
        shortfall: cfg.group_size,
        tokens_used: 0,
        report: None,
        eval_accuracy: 0.0,
        top3_share: 0.0,
        effective_branches: 0,
    };

    let outcome = match rollout(
        &state.policy,
        &state.reference,
        &task.prompt,
        &cfg.rollout_config(),
        rollout_id,
    ) {
        Ok(o) => o,
        Err(EchoError::RolloutFailure(f)) => {
            log::warn!("step {step} task {}: rollout failed: {f:?}", task.id);
            metrics.status = StepStatus::RolloutFailure;
            metrics.tokens_used = f.tokens_used;
            return Ok(StepOutcome { metrics, tree: None });
        }
        Err(e) => return Err(e),
    };
    metrics.completions = outcome.trajectories.len();
    metrics.shortfall = outcome.shortfall;
    metrics.tokens_used = outcome.tree.token_budget_used;
    let stats = budget_allocation(&outcome.tree, cfg.scheduler.entropy_high, DEFAULT_MIN_RUN);
    metrics.top3_share = stats.top3_budget_share;
    metrics.effective_branches = stats.effective_branch_count;

    let answers = outcome
        .trajectories
        .iter()
        .map(|t| extract_answer(t, &cfg.answer_rule))
        .collect::<Result<Vec<_>>>()?;
    metrics.eval_accuracy = evaluation_accuracy(task.ground_truth(), &answers);

    let vote = match majority_vote(&answers) {
        Ok(v) => v,
        Err(EchoError::VoteFailure(n)) => {
            log::warn!("step {step} task {}: all {n} answers unparseable, skipping update", task.id);
            metrics.status = StepStatus::VoteFailure;
            return Ok(StepOutcome {
                metrics,
                tree: Some(outcome.tree),
            });
        }
        Err(e) => return Err(e),
    };

    let mut rng = named_stream(cfg.seed, "downsample", rollout_id, 0);
    let picked = downsample_for_training(outcome.trajectories.len(), cfg.train_size, &mut rng);
    let trajs: Vec<_> = picked.iter().map(|&i| outcome.trajectories[i].clone()).collect();
    let rewards: Vec<f64> = picked.iter().map(|&i| vote.rewards[i]).collect();

    let batch = UpdateBatch::from_trajectories(&trajs, &rewards, &cfg.update_config())?;
    let kl_coef = cfg.effective_kl_coef();
    let report = evaluate_objective(&batch, &state.policy, &state.reference, kl_coef)?;
    let grad = echo_gradient(&batch, &state.policy, &state.reference, kl_coef)?;
    state.policy = apply_update(&state.policy, &grad, cfg.optimizer.learning_rate)?;

    log::info!(
        "step {step} task {}: label {} ({}/{}), loss {:.6}, kl {:.3e}",
        task.id,
        vote.label,
        vote.winning_count(),
        answers.len(),
        report.loss,
        report.mean_kl
    );
    metrics.vote = Some(vote);
    metrics.report = Some(report);
    Ok(StepOutcome {
        metrics,
        tree: Some(outcome.tree),
    })
}

/// Tasks visited at `step`: `train_batch` of them, cycling through the list.
pub fn tasks_for_step(step: usize, train_batch: usize, num_tasks: usize) -> Vec<usize> {
    (0..train_batch)
        .map(|k| (step * train_batch + k) % num_tasks)
        .collect()
}

const ARTIFACTS: &[&str] = &["config.cfg", "calibration.cfg", "metrics.csv", "policy.json"];

/// Prepares `out_dir`: creates it, refuses a non-empty one unless `force`,
/// and with `force` removes only files this engine writes.
fn prepare_output(out_dir: &Path, force: bool) -> Result<()> {
    if out_dir.exists() {
        let mut entries = fs::read_dir(out_dir).map_err(|e| EchoError::io(out_dir, e))?;
        let non_empty = entries.next().is_some();
        if non_empty && !force {
            return Err(EchoError::OutputExists(out_dir.to_path_buf()));
        }
        if non_empty {
            for name in ARTIFACTS {
                let p = out_dir.join(name);
                if p.exists() {
                    fs::remove_file(&p).map_err(|e| EchoError::io(&p, e))?;
                }
            }
            let trees = out_dir.join("trees");
            if trees.is_dir() {
                for entry in fs::read_dir(&trees).map_err(|e| EchoError::io(&trees, e))? {
                    let path = entry.map_err(|e| EchoError::io(&trees, e))?.path();
                    if path.extension().is_some_and(|x| x == "jsonl") {
                        fs::remove_file(&path).map_err(|e| EchoError::io(&path, e))?;
                    }
                }
            }
        }
    } else {
        fs::create_dir_all(out_dir).map_err(|e| EchoError::io(out_dir, e))?;
    }
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| EchoError::io(path, e))
}

/// Config snapshot text, noting how the reference policy was chosen.
pub fn config_snapshot(cfg: &EchoConfig) -> String {
    let mut out = String::from(
        "# reference policy: snapshot of the initial policy, fixed for the whole run\n",
    );
    out.push_str(&cfg.to_cfg_string());
    out
}

/// Paths of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub steps: usize,
    pub rows: usize,
    pub entropy_bounds: Option<(f64, f64)>,
}

/// Runs `cfg.steps` steps on the world the config describes, writing the
/// config snapshot, calibration, metrics, tree dumps and final policy into
/// `out_dir`.
pub fn run_experiment(cfg: &EchoConfig, out_dir: &Path, force: bool) -> Result<RunSummary> {
    cfg.validate()?;
    let world = build_world(cfg)?;
    run_experiment_with(cfg, world, out_dir, force)
}

/// Like [`run_experiment`] with an explicit world.
pub fn run_experiment_with(
    cfg: &EchoConfig,
    world: ToyWorld,
    out_dir: &Path,
    force: bool,
) -> Result<RunSummary> {
    cfg.validate()?;
    prepare_output(out_dir, force)?;
    // the snapshot doubles as the writability check before any compute
    write_file(&out_dir.join("config.cfg"), &config_snapshot(cfg))?;
    if cfg.steps == 0 {
        return Ok(RunSummary {
            out_dir: out_dir.to_path_buf(),
            steps: 0,
            rows: 0,
            entropy_bounds: None,
        });
    }

    let mut state = EngineState::new(world.policy, cfg.clone());
    let bounds = state.calibrate(&world.tasks)?;
    write_file(
        &out_dir.join("calibration.cfg"),
        &format!("H_low={}\nH_high={}\n", bounds.0, bounds.1),
    )?;

    let trees_dir = out_dir.join("trees");
    fs::create_dir_all(&trees_dir).map_err(|e| EchoError::io(&trees_dir, e))?;
    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = File::create(&metrics_path).map_err(|e| EchoError::io(&metrics_path, e))?;
    writeln!(metrics, "{METRICS_HEADER}").map_err(|e| EchoError::io(&metrics_path, e))?;

    let mut rows = 0;
    for step in 0..cfg.steps {
        for idx in tasks_for_step(step, cfg.optimizer.train_batch, world.tasks.len()) {
            let task = &world.tasks[idx];
            let outcome = run_step(&mut state, task, step)?;
            if let Some(tree) = &outcome.tree {
                let path = trees_dir.join(tree_file_name(step, task.id));
                write_file(&path, &tree.to_jsonl()?)?;
            }
            let mut line = outcome.metrics.csv_row();
            line.push('\n');
            metrics
                .write_all(line.as_bytes())
                .map_err(|e| EchoError::io(&metrics_path, e))?;
            rows += 1;
        }
    }
    metrics.flush().map_err(|e| EchoError::io(&metrics_path, e))?;
    state.policy.save(&out_dir.join("policy.json"))?;
    Ok(RunSummary {
        out_dir: out_dir.to_path_buf(),
        steps: cfg.steps,
        rows,
        entropy_bounds: Some(bounds),
    })
}

/// Reads back the H_high written at calibration time, if present.
pub fn read_calibrated_high(run_dir: &Path) -> Result<Option<f64>> {
    let path = run_dir.join("calibration.cfg");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| EchoError::io(&path, e))?;
    for line in text.lines() {
        if let Some(v) = line.trim().strip_prefix("H_high=") {
            return v
                .parse()
                .map(Some)
                .map_err(|_| EchoError::Validation(format!("bad H_high in {}", path.display())));
        }
    }
    Ok(None)
}

/// Summary line for logs.
pub fn describe(summary: &RunSummary) -> String {
    let mut s = String::new();
    let _ = write!(s, "{} rows over {} steps in {}", summary.rows, summary.steps, summary.out_dir.display());
    if let Some((lo, hi)) = summary.entropy_bounds {
        let _ = write!(s, " (H_low={lo:.4}, H_high={hi:.4})");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_cycling() {
        assert_eq!(tasks_for_step(0, 5, 5), vec![0, 1, 2, 3, 4]);
        assert_eq!(tasks_for_step(1, 2, 3), vec![2, 0]);
    }

    #[test]
    fn steps_zero_writes_only_the_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let cfg = EchoConfig {
            steps: 0,
            ..EchoConfig::default()
        };
        run_experiment(&cfg, &out, false).unwrap();
        let names: Vec<_> = fs::read_dir(&out)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(names, vec!["config.cfg".to_string()]);
        assert!(matches!(
            run_experiment(&cfg, &out, false),
            Err(EchoError::OutputExists(_))
        ));
        run_experiment(&cfg, &out, true).unwrap();
    }
}
