//! Finite-difference check of the analytic update gradient.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{EchoError, Result};
use crate::optimizer::{
    clip_gate, echo_gradient, evaluate_objective, AdvantageMode, UpdateBatch, UpdateConfig,
};
use crate::policy::{named_stream, PolicyParams, ReferencePolicy, TokenPolicy};
use crate::rewards::AnswerRule;
use crate::rollout::{rollout, RolloutConfig, ScheduleMode};
use crate::signals::TokenId;
use crate::toy::random_world;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub vocab_size: usize,
    pub context_order: usize,
    /// Coordinates to check; all of them when this exceeds the table size.
    pub coordinates: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so coordinates whose
    /// gradient is zero on both sides compare in absolute terms.
    pub rel_floor: f64,
    pub kl_coef: f64,
    pub group_size: usize,
    pub max_length: usize,
    /// Std of the Gaussian offset between live and reference logits.
    pub drift: f64,
    pub advantage_mode: AdvantageMode,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            context_order: 1,
            coordinates: 256,
            step: 1e-5,
            tolerance: 1e-4,
            rel_floor: 1e-6,
            kl_coef: 0.001,
            group_size: 8,
            max_length: 12,
            drift: 0.3,
            advantage_mode: AdvantageMode::Hybrid,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub checked: usize,
    /// Coordinates skipped because a perturbation moved some token across a
    /// clip boundary.
    pub excluded: usize,
    pub max_rel_err: f64,
    pub worst: Option<(Vec<TokenId>, usize)>,
    /// Valid tokens in the batch and how many of them have a closed gate.
    pub tokens: usize,
    pub gated_tokens: usize,
    pub tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} max_rel_err={:.3e} tol={:.1e} checked={} excluded={} tokens={} gated={}",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.tolerance,
            self.checked,
            self.excluded,
            self.tokens,
            self.gated_tokens
        )
    }
}

/// Which side of the trust region each token's ratio sits on.
pub fn token_regimes<P: TokenPolicy, Q: TokenPolicy>(
    batch: &UpdateBatch,
    policy: &P,
    reference: &Q,
) -> Result<Vec<Vec<i8>>> {
    let ratios = batch.importance_ratios(policy, reference)?;
    Ok(ratios
        .iter()
        .zip(&batch.clip_radii)
        .map(|(rs, &eps)| {
            rs.iter()
                .map(|&r| {
                    if r < 1.0 - eps {
                        -1
                    } else if r > 1.0 + eps {
                        1
                    } else {
                        0
                    }
                })
                .collect()
        })
        .collect())
}

/// Live policy, reference and update batch for the check.
pub fn gradcheck_fixture(cfg: &GradcheckConfig) -> Result<(PolicyParams, ReferencePolicy, UpdateBatch)> {
    let world = random_world(
        cfg.vocab_size,
        cfg.context_order,
        1,
        1.0,
        cfg.seed,
        cfg.max_length,
        &AnswerRule::LastToken,
    )?;
    let reference = world.policy.snapshot_reference();
    let mut policy = world.policy;
    let mut rng = named_stream(cfg.seed, "gradcheck-drift", 0, 0);
    let coords: Vec<(Vec<TokenId>, usize)> = policy
        .rows()
        .flat_map(|(ctx, row)| (0..row.len()).map(move |j| (ctx.clone(), j)))
        .collect();
    for (ctx, j) in coords {
        policy.perturb(&ctx, j, cfg.drift * rng.sample::<f64, _>(StandardNormal));
    }

    let rollout_cfg = RolloutConfig {
        mode: ScheduleMode::Chain,
        target_count: cfg.group_size,
        max_length: cfg.max_length,
        seed: cfg.seed,
        ..RolloutConfig::default()
    };
    let prompt = world.tasks[0].prompt.clone();
    let outcome = rollout(&policy, &reference, &prompt, &rollout_cfg, 0)?;
    let n = outcome.trajectories.len();
    if n < 2 {
        return Err(EchoError::Validation(format!(
            "gradcheck fixture produced {n} trajectories, need at least 2"
        )));
    }
    let mut rng = named_stream(cfg.seed, "gradcheck-rewards", 0, 0);
    let mut rewards: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.5))).collect();
    rewards[0] = 1.0;
    rewards[1] = 0.0;
    let update_cfg = UpdateConfig {
        advantage_mode: cfg.advantage_mode,
        ..UpdateConfig::default()
    };
    let batch = UpdateBatch::from_trajectories(&outcome.trajectories, &rewards, &update_cfg)?;
    Ok((policy, reference, batch))
}

/// Compares [`echo_gradient`] with central differences of the objective on
/// `cfg.coordinates` randomly chosen logits.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let (policy, reference, batch) = gradcheck_fixture(cfg)?;
    check_batch(cfg, &policy, &reference, &batch)
}

pub fn check_batch(
    cfg: &GradcheckConfig,
    policy: &PolicyParams,
    reference: &ReferencePolicy,
    batch: &UpdateBatch,
) -> Result<GradcheckReport> {
    let analytic = echo_gradient(batch, policy, reference, cfg.kl_coef)?;
    let base_regimes = token_regimes(batch, policy, reference)?;

    let adv = batch.advantage_batch(policy, reference)?;
    let mut tokens = 0;
    let mut gated = 0;
    for i in 0..adv.mask.len() {
        for t in 0..adv.mask[i].len() {
            if adv.mask[i][t] {
                tokens += 1;
                if clip_gate(adv.shaped_advantages[i][t], adv.ratios[i][t], adv.clip_radii[i]) == 0.0 {
                    gated += 1;
                }
            }
        }
    }

    let mut coords: Vec<(Vec<TokenId>, usize)> = policy
        .rows()
        .flat_map(|(ctx, row)| (0..row.len()).map(move |j| (ctx.clone(), j)))
        .collect();
    let mut rng = named_stream(cfg.seed, "gradcheck-coords", 0, 0);
    coords.shuffle(&mut rng);
    coords.truncate(cfg.coordinates);

    let h = cfg.step;
    let mut checked = 0;
    let mut excluded = 0;
    let mut max_rel = 0.0f64;
    let mut worst = None;
    for (ctx, j) in coords {
        let mut plus = policy.clone();
        plus.perturb(&ctx, j, h);
        let mut minus = policy.clone();
        minus.perturb(&ctx, j, -h);
        if token_regimes(batch, &plus, reference)? != base_regimes
            || token_regimes(batch, &minus, reference)? != base_regimes
        {
            excluded += 1;
            continue;
        }
        let lp = evaluate_objective(batch, &plus, reference, cfg.kl_coef)?.loss;
        let lm = evaluate_objective(batch, &minus, reference, cfg.kl_coef)?.loss;
        let fd = (lp - lm) / (2.0 * h);
        let a = analytic.get(&ctx, j);
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(cfg.rel_floor);
        checked += 1;
        if rel > max_rel || worst.is_none() {
            max_rel = max_rel.max(rel);
            worst = Some((ctx, j));
        }
    }
    Ok(GradcheckReport {
        checked,
        excluded,
        max_rel_err: max_rel,
        worst,
        tokens,
        gated_tokens: gated,
        tolerance: cfg.tolerance,
        passed: checked > 0 && max_rel < cfg.tolerance,
    })
}
