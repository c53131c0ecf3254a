//! Advantages, confidence-adaptive clipping and the clipped policy objective.
//!
//! The objective maximized per update is
//!
//! ```text
//! J(θ) = 1/G Σ_i 1/|o_i| Σ_t [ min(r A, clip(r, 1-ε_i, 1+ε_i) A) - β_KL KL_t ]
//! ```
//!
//! with `r = π_θ / π_ref` per token, `A` the shaped advantage and `ε_i` the
//! trajectory's clip radius. Advantages and radii are detached: they are
//! computed once from the rollout and held fixed while `θ` moves. The KL
//! term is the exact divergence between the next-token distributions of
//! the live and reference policies after each prefix.

use crate::error::{EchoError, Result};
use crate::policy::{softmax, PolicyGradient, PolicyParams, TokenPolicy, Trajectory};
use crate::signals::TokenId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipConfig {
    pub eps_min: f64,
    pub eps_max: f64,
    pub kappa: f64,
    /// Tokens averaged for the trajectory-level tail confidence.
    pub tail_window: usize,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            eps_min: 0.1,
            eps_max: 0.3,
            kappa: 4.0,
            tail_window: 16,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if !(self.eps_min > 0.0 && self.eps_min <= self.eps_max) {
            problems.push(format!(
                "need 0 < eps_min ({}) <= eps_max ({})",
                self.eps_min, self.eps_max
            ));
        }
        if !(self.kappa > 0.0) {
            problems.push("kappa must be positive".to_string());
        }
        if self.tail_window == 0 {
            problems.push("W_tail must be at least 1".to_string());
        }
        problems
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapingConfig {
    /// Weight on whitened entropy.
    pub alpha: f64,
    /// Weight on whitened inverse confidence.
    pub beta: f64,
    /// Multiplicative scale `a`.
    pub scale: f64,
    pub eps: f64,
}

impl Default for ShapingConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            scale: 0.1,
            eps: 1e-6,
        }
    }
}

impl ShapingConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if !(self.scale >= 0.0) {
            problems.push("a_scale must be nonnegative".to_string());
        }
        if !(self.eps > 0.0) {
            problems.push("eps_stab must be positive".to_string());
        }
        problems
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kl_coef: f64,
    pub learning_rate: f64,
    pub train_batch: usize,
    pub mini_batch: usize,
    pub micro_batch: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kl_coef: 0.001,
            learning_rate: 0.05,
            train_batch: 5,
            mini_batch: 1,
            micro_batch: 1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if !(self.kl_coef >= 0.0) {
            problems.push("kl_coef must be nonnegative".to_string());
        }
        if !(self.learning_rate > 0.0) {
            problems.push("lr must be positive".to_string());
        }
        if self.train_batch == 0 {
            problems.push("train_batch must be at least 1".to_string());
        }
        if self.mini_batch != 1 || self.micro_batch != 1 {
            problems.push("only mini_batch=1 and micro_batch=1 are supported".to_string());
        }
        problems
    }
}

/// Whether the update uses shaped or plain group advantages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvantageMode {
    Hybrid,
    Group,
}

impl AdvantageMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AdvantageMode::Hybrid => "hybrid",
            AdvantageMode::Group => "group",
        }
    }
}

impl std::str::FromStr for AdvantageMode {
    type Err = EchoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hybrid" => Ok(AdvantageMode::Hybrid),
            "group" => Ok(AdvantageMode::Group),
            other => Err(EchoError::config(format!(
                "advantage_mode={other} (expected hybrid or group)"
            ))),
        }
    }
}

/// `(R_i - mean) / (std + eps)` with the population standard deviation.
pub fn group_advantage(rewards: &[f64], eps: f64) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    // a uniform group carries no signal; skip the rounding noise of the mean
    if rewards.iter().all(|r| *r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    rewards.iter().map(|r| (r - mean) / (std + eps)).collect()
}

/// Whitens the unmasked entries; masked entries come back as zero. With
/// fewer than two valid entries there is nothing to whiten and the result is
/// all zeros.
pub fn masked_whiten(values: &[f64], mask: &[bool], eps: f64) -> Vec<f64> {
    assert_eq!(values.len(), mask.len(), "values and mask differ in length");
    let valid: Vec<f64> = values
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| *v)
        .collect();
    if valid.len() < 2 {
        log::warn!("masked whitening over {} valid token(s); returning zeros", valid.len());
        return vec![0.0; values.len()];
    }
    let n = valid.len() as f64;
    let mean = valid.iter().sum::<f64>() / n;
    let std = (valid.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    values
        .iter()
        .zip(mask)
        .map(|(v, &m)| if m { (v - mean) / (std + eps) } else { 0.0 })
        .collect()
}

/// `S = α·H̃ + β·(1-C)~` on already-whitened inputs.
pub fn hybrid_signal(
    entropy_whitened: &[f64],
    inv_conf_whitened: &[f64],
    cfg: &ShapingConfig,
) -> Vec<f64> {
    assert_eq!(entropy_whitened.len(), inv_conf_whitened.len());
    entropy_whitened
        .iter()
        .zip(inv_conf_whitened)
        .map(|(h, c)| cfg.alpha * h + cfg.beta * c)
        .collect()
}

/// `A^hyb_{i,t} = A^grp_i (1 + a S_{i,t})`.
pub fn hybrid_advantage(group_adv: &[f64], signal: &[Vec<f64>], scale: f64) -> Vec<Vec<f64>> {
    assert_eq!(group_adv.len(), signal.len());
    group_adv
        .iter()
        .zip(signal)
        .map(|(a, s)| s.iter().map(|s| a * (1.0 + scale * s)).collect())
        .collect()
}

/// Mean of the tail-smoothed confidence over the last `min(W, |o_i|)` tokens.
pub fn trajectory_tail_confidence(traj: &Trajectory, window: usize) -> f64 {
    let tail = traj.trace.tail_conf_seq();
    if tail.is_empty() {
        return 1.0;
    }
    let w = window.min(tail.len()).max(1);
    tail[tail.len() - w..].iter().sum::<f64>() / w as f64
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `ε(o) = ε_min + (ε_max - ε_min)·σ(κ(1 - C_tail(o)))`.
pub fn adaptive_epsilon(tail_conf: f64, cfg: &ClipConfig) -> f64 {
    cfg.eps_min + (cfg.eps_max - cfg.eps_min) * sigmoid(cfg.kappa * (1.0 - tail_conf))
}

/// Clipping gate: zero exactly where the surrogate is saturated.
pub fn clip_gate(advantage: f64, ratio: f64, eps: f64) -> f64 {
    if (advantage > 0.0 && ratio > 1.0 + eps) || (advantage < 0.0 && ratio < 1.0 - eps) {
        0.0
    } else {
        1.0
    }
}

/// `min(r A, clip(r, 1-ε, 1+ε) A)`.
pub fn clipped_surrogate(advantage: f64, ratio: f64, eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    (ratio * advantage).min(clipped * advantage)
}

/// Derivative of the clipped surrogate with respect to `log r`, read off
/// the branch `min` selects: the unclipped term contributes `r A`, a
/// clipped term that is strictly smaller is constant in `θ`.
pub fn surrogate_grad_factor(advantage: f64, ratio: f64, eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    if ratio * advantage <= clipped * advantage {
        ratio * advantage
    } else {
        0.0
    }
}

/// `KL(p || q)` from log-probabilities.
pub fn kl_from_logprobs(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .map(|(lp, lq)| lp.exp() * (lp - lq))
        .sum()
}

/// Token ids of a trajectory plus which positions count toward the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub prompt: Vec<TokenId>,
    pub tokens: Vec<TokenId>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn from_trajectory(traj: &Trajectory) -> Self {
        Self {
            prompt: traj.prompt.clone(),
            tokens: traj.tokens.clone(),
            mask: vec![true; traj.tokens.len()],
        }
    }

    fn prefix(&self, t: usize) -> Vec<TokenId> {
        let mut p = self.prompt.clone();
        p.extend_from_slice(&self.tokens[..t]);
        p
    }

    fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Per-trajectory and per-token quantities entering the objective at one
/// parameter setting.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageBatch {
    pub group_advantages: Vec<f64>,
    pub shaped_advantages: Vec<Vec<f64>>,
    pub clip_radii: Vec<f64>,
    pub ratios: Vec<Vec<f64>>,
    pub mask: Vec<Vec<bool>>,
}

impl AdvantageBatch {
    fn check_shapes(&self, kl_terms: &[Vec<f64>]) -> Result<()> {
        let n = self.group_advantages.len();
        let lens = [
            self.shaped_advantages.len(),
            self.clip_radii.len(),
            self.ratios.len(),
            self.mask.len(),
            kl_terms.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(EchoError::Validation(format!(
                "batch has {n} trajectories but component lengths {lens:?}"
            )));
        }
        for i in 0..n {
            let m = self.mask[i].len();
            if self.shaped_advantages[i].len() != m
                || self.ratios[i].len() != m
                || kl_terms[i].len() != m
            {
                return Err(EchoError::Validation(format!(
                    "trajectory {i} has inconsistent token lengths"
                )));
            }
        }
        Ok(())
    }
}

/// The clipped objective with the KL penalty, averaged per token within a
/// trajectory and then across trajectories. Trajectories without valid
/// tokens are skipped.
pub fn echo_loss(batch: &AdvantageBatch, kl_terms: &[Vec<f64>], kl_coef: f64) -> Result<f64> {
    batch.check_shapes(kl_terms)?;
    let mut total = 0.0;
    let mut counted = 0usize;
    for i in 0..batch.mask.len() {
        let valid = batch.mask[i].iter().filter(|&&m| m).count();
        if valid == 0 {
            continue;
        }
        let mut sum = 0.0;
        for t in 0..batch.mask[i].len() {
            if !batch.mask[i][t] {
                continue;
            }
            sum += clipped_surrogate(
                batch.shaped_advantages[i][t],
                batch.ratios[i][t],
                batch.clip_radii[i],
            ) - kl_coef * kl_terms[i][t];
        }
        total += sum / valid as f64;
        counted += 1;
    }
    Ok(if counted == 0 { 0.0 } else { total / counted as f64 })
}

/// How the update's advantages and clip radii are formed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateConfig {
    pub clip: ClipConfig,
    pub shaping: ShapingConfig,
    pub advantage_mode: AdvantageMode,
    /// Stabilizer in the group-advantage denominator.
    pub adv_eps: f64,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        let shaping = ShapingConfig::default();
        Self {
            clip: ClipConfig::default(),
            shaping,
            advantage_mode: AdvantageMode::Hybrid,
            adv_eps: shaping.eps,
        }
    }
}

/// Detached training batch: sequences with their shaped advantages and
/// clip radii. Ratios and KL terms are evaluated on demand for any `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateBatch {
    pub sequences: Vec<TokenSequence>,
    pub group_advantages: Vec<f64>,
    pub shaped_advantages: Vec<Vec<f64>>,
    pub clip_radii: Vec<f64>,
}

impl UpdateBatch {
    /// Builds advantages for `trajs` rewarded with `rewards`. Entropy and
    /// inverse confidence are whitened over every valid token in the batch.
    pub fn from_trajectories(trajs: &[Trajectory], rewards: &[f64], cfg: &UpdateConfig) -> Result<Self> {
        if trajs.len() != rewards.len() {
            return Err(EchoError::Validation(format!(
                "{} trajectories but {} rewards",
                trajs.len(),
                rewards.len()
            )));
        }
        let sequences: Vec<TokenSequence> = trajs.iter().map(TokenSequence::from_trajectory).collect();
        let group_advantages = group_advantage(rewards, cfg.adv_eps);
        let shaped_advantages = match cfg.advantage_mode {
            AdvantageMode::Group => sequences
                .iter()
                .zip(&group_advantages)
                .map(|(s, a)| vec![*a; s.tokens.len()])
                .collect(),
            AdvantageMode::Hybrid => {
                let mut entropy = Vec::new();
                let mut inv_conf = Vec::new();
                let mut mask = Vec::new();
                for (traj, seq) in trajs.iter().zip(&sequences) {
                    entropy.extend_from_slice(traj.trace.entropy_seq());
                    inv_conf.extend(traj.trace.confidence_seq().iter().map(|c| 1.0 - c));
                    mask.extend_from_slice(&seq.mask);
                }
                let h = masked_whiten(&entropy, &mask, cfg.shaping.eps);
                let c = masked_whiten(&inv_conf, &mask, cfg.shaping.eps);
                let flat = hybrid_signal(&h, &c, &cfg.shaping);
                let mut signal = Vec::with_capacity(trajs.len());
                let mut offset = 0;
                for (seq, _) in sequences.iter().zip(trajs) {
                    let n = seq.tokens.len();
                    let s: Vec<f64> = flat[offset..offset + n]
                        .iter()
                        .zip(&seq.mask)
                        .map(|(v, &m)| if m { *v } else { 0.0 })
                        .collect();
                    signal.push(s);
                    offset += n;
                }
                let mut shaped = hybrid_advantage(&group_advantages, &signal, cfg.shaping.scale);
                for (row, seq) in shaped.iter_mut().zip(&sequences) {
                    for (a, &m) in row.iter_mut().zip(&seq.mask) {
                        if !m {
                            *a = 0.0;
                        }
                    }
                }
                shaped
            }
        };
        let clip_radii = trajs
            .iter()
            .map(|t| adaptive_epsilon(trajectory_tail_confidence(t, cfg.clip.tail_window), &cfg.clip))
            .collect();
        Ok(Self {
            sequences,
            group_advantages,
            shaped_advantages,
            clip_radii,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Importance ratios `π_θ / π_ref` for every token.
    pub fn importance_ratios<P: TokenPolicy, Q: TokenPolicy>(
        &self,
        policy: &P,
        reference: &Q,
    ) -> Result<Vec<Vec<f64>>> {
        self.sequences
            .iter()
            .map(|seq| importance_ratio(seq, policy, reference))
            .collect()
    }

    /// Exact per-prefix KL terms.
    pub fn kl_terms<P: TokenPolicy, Q: TokenPolicy>(
        &self,
        policy: &P,
        reference: &Q,
    ) -> Result<Vec<Vec<f64>>> {
        self.sequences
            .iter()
            .map(|seq| {
                (0..seq.tokens.len())
                    .map(|t| {
                        let prefix = seq.prefix(t);
                        Ok(kl_from_logprobs(
                            &policy.log_probs(&prefix)?,
                            &reference.log_probs(&prefix)?,
                        ))
                    })
                    .collect()
            })
            .collect()
    }

    pub fn advantage_batch<P: TokenPolicy, Q: TokenPolicy>(
        &self,
        policy: &P,
        reference: &Q,
    ) -> Result<AdvantageBatch> {
        Ok(AdvantageBatch {
            group_advantages: self.group_advantages.clone(),
            shaped_advantages: self.shaped_advantages.clone(),
            clip_radii: self.clip_radii.clone(),
            ratios: self.importance_ratios(policy, reference)?,
            mask: self.sequences.iter().map(|s| s.mask.clone()).collect(),
        })
    }
}

/// `exp(log π_θ - log π_ref)` per token of `seq`.
pub fn importance_ratio<P: TokenPolicy, Q: TokenPolicy>(
    seq: &TokenSequence,
    policy: &P,
    reference: &Q,
) -> Result<Vec<f64>> {
    (0..seq.tokens.len())
        .map(|t| {
            let prefix = seq.prefix(t);
            let tok = seq.tokens[t];
            Ok((policy.log_prob(&prefix, tok)? - reference.log_prob(&prefix, tok)?).exp())
        })
        .collect()
}

/// Objective value together with the per-step training metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveReport {
    pub loss: f64,
    pub mean_kl: f64,
    pub mean_eps: f64,
    /// Fraction of valid tokens whose clipping gate is open.
    pub gate_fraction: f64,
    pub mean_abs_adv: f64,
}

pub fn evaluate_objective<P: TokenPolicy, Q: TokenPolicy>(
    batch: &UpdateBatch,
    policy: &P,
    reference: &Q,
    kl_coef: f64,
) -> Result<ObjectiveReport> {
    let adv = batch.advantage_batch(policy, reference)?;
    let kl = batch.kl_terms(policy, reference)?;
    let loss = echo_loss(&adv, &kl, kl_coef)?;
    let mut tokens = 0usize;
    let (mut kl_sum, mut open, mut abs_adv) = (0.0, 0usize, 0.0);
    for i in 0..adv.mask.len() {
        for t in 0..adv.mask[i].len() {
            if !adv.mask[i][t] {
                continue;
            }
            tokens += 1;
            kl_sum += kl[i][t];
            abs_adv += adv.shaped_advantages[i][t].abs();
            if clip_gate(adv.shaped_advantages[i][t], adv.ratios[i][t], adv.clip_radii[i]) > 0.0 {
                open += 1;
            }
        }
    }
    let denom = tokens.max(1) as f64;
    let mean_eps = if adv.clip_radii.is_empty() {
        0.0
    } else {
        adv.clip_radii.iter().sum::<f64>() / adv.clip_radii.len() as f64
    };
    Ok(ObjectiveReport {
        loss,
        mean_kl: kl_sum / denom,
        mean_eps,
        gate_fraction: open as f64 / denom,
        mean_abs_adv: abs_adv / denom,
    })
}

/// Analytic gradient of [`echo_loss`] with respect to the policy logits.
///
/// Each valid token contributes `F·A·r·∇log π_θ(y_t)` minus `β_KL` times the
/// exact KL gradient `Σ_v π_θ(v)(log π_θ(v)/π_ref(v) + 1)∇log π_θ(v)`,
/// weighted by `1/(G·|o_i|)` like the loss.
pub fn echo_gradient<Q: TokenPolicy>(
    batch: &UpdateBatch,
    policy: &PolicyParams,
    reference: &Q,
    kl_coef: f64,
) -> Result<PolicyGradient> {
    let mut grad = PolicyGradient::zeros_like(policy);
    let contributing: Vec<usize> = (0..batch.len())
        .filter(|&i| batch.sequences[i].valid_count() > 0)
        .collect();
    if contributing.is_empty() {
        return Ok(grad);
    }
    let g = contributing.len() as f64;
    for &i in &contributing {
        let seq = &batch.sequences[i];
        let weight = 1.0 / (g * seq.valid_count() as f64);
        let eps = batch.clip_radii[i];
        for t in 0..seq.tokens.len() {
            if !seq.mask[t] {
                continue;
            }
            let prefix = seq.prefix(t);
            let Some((ctx, row)) = policy.active_row(&prefix)? else {
                continue;
            };
            let ctx = ctx.to_vec();
            let probs = softmax(row);
            let log_p = policy.log_probs(&prefix)?;
            let token = seq.tokens[t];
            let ratio = (log_p[token] - reference.log_prob(&prefix, token)?).exp();
            let factor = surrogate_grad_factor(batch.shaped_advantages[i][t], ratio, eps);

            let out = grad.row_mut(&ctx).expect("row exists");
            if factor != 0.0 {
                for (j, p) in probs.iter().enumerate() {
                    let dlog = if j == token { 1.0 - p } else { -p };
                    out[j] += weight * factor * dlog;
                }
            }
            if kl_coef != 0.0 {
                let log_q = reference.log_probs(&prefix)?;
                // s_v = π(v)(log π(v)/π_ref(v) + 1); ∂/∂θ_j = s_j - π(j) Σ_v s_v
                let s: Vec<f64> = probs
                    .iter()
                    .zip(log_p.iter().zip(&log_q))
                    .map(|(p, (lp, lq))| p * (lp - lq + 1.0))
                    .collect();
                let s_total: f64 = s.iter().sum();
                for j in 0..probs.len() {
                    out[j] -= weight * kl_coef * (s[j] - probs[j] * s_total);
                }
            }
        }
    }
    Ok(grad)
}
