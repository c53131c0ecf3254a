//! Autoregressive token policies.
//!
//! [`TokenPolicy`] is the interface the rollout and optimizer consume.
//! [`PolicyParams`] is the differentiable toy realization: a context table
//! (n-gram) of logit rows, softmaxed per step. Because every parameter is a
//! logit of a single row, `∇ log π` has a closed form and the whole update
//! can be checked against finite differences.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EchoError, Result};
use crate::signals::{SignalTrace, TokenDistribution, TokenId};

pub type Context = Vec<TokenId>;

/// Anything that can produce a next-token distribution for a prefix.
pub trait TokenPolicy {
    fn vocab_size(&self) -> usize;

    fn eos_token(&self) -> TokenId;

    fn next_distribution(&self, prefix: &[TokenId]) -> Result<TokenDistribution>;

    fn log_prob(&self, prefix: &[TokenId], token: TokenId) -> Result<f64> {
        if token >= self.vocab_size() {
            return Err(EchoError::Validation(format!("token id {token} >= V")));
        }
        Ok(self.next_distribution(prefix)?.prob(token).ln())
    }

    /// Log-probabilities of every token after `prefix`.
    fn log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self
            .next_distribution(prefix)?
            .probs()
            .iter()
            .map(|p| p.ln())
            .collect())
    }
}

/// Context-table softmax policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab_size: usize,
    context_order: usize,
    eos_token: TokenId,
    logits: BTreeMap<Context, Vec<f64>>,
}

impl PolicyParams {
    pub fn new(vocab_size: usize, context_order: usize, eos_token: TokenId) -> Result<Self> {
        if vocab_size < 2 {
            return Err(EchoError::Validation("vocabulary needs at least 2 tokens".into()));
        }
        if eos_token >= vocab_size {
            return Err(EchoError::Validation(format!(
                "eos token {eos_token} outside vocabulary of {vocab_size}"
            )));
        }
        Ok(Self {
            vocab_size,
            context_order,
            eos_token,
            logits: BTreeMap::new(),
        })
    }

    pub fn context_order(&self) -> usize {
        self.context_order
    }

    pub fn rows(&self) -> impl Iterator<Item = (&Context, &Vec<f64>)> {
        self.logits.iter()
    }

    pub fn num_rows(&self) -> usize {
        self.logits.len()
    }

    pub fn row(&self, context: &[TokenId]) -> Option<&[f64]> {
        self.logits.get(context).map(|r| r.as_slice())
    }

    pub fn set_row(&mut self, context: Context, logits: Vec<f64>) -> Result<()> {
        if context.len() > self.context_order {
            return Err(EchoError::Validation(format!(
                "context {context:?} longer than order {}",
                self.context_order
            )));
        }
        if let Some(&t) = context.iter().find(|&&t| t >= self.vocab_size) {
            return Err(EchoError::Validation(format!("context token {t} >= V")));
        }
        if logits.len() != self.vocab_size {
            return Err(EchoError::Validation(format!(
                "row for {context:?} has {} logits, expected {}",
                logits.len(),
                self.vocab_size
            )));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(EchoError::Validation(format!(
                "non-finite logit in row {context:?}"
            )));
        }
        self.logits.insert(context, logits);
        Ok(())
    }

    /// Adds `delta` to a single logit; used by finite-difference checks.
    pub fn perturb(&mut self, context: &[TokenId], index: usize, delta: f64) {
        if let Some(row) = self.logits.get_mut(context) {
            row[index] += delta;
        }
    }

    /// The trailing `min(n, |prefix|)` tokens.
    pub fn context_of<'a>(&self, prefix: &'a [TokenId]) -> &'a [TokenId] {
        let n = self.context_order.min(prefix.len());
        &prefix[prefix.len() - n..]
    }

    fn check_prefix(&self, prefix: &[TokenId]) -> Result<()> {
        match prefix.iter().find(|&&t| t >= self.vocab_size) {
            Some(t) => Err(EchoError::Validation(format!(
                "prefix token {t} >= V = {}",
                self.vocab_size
            ))),
            None => Ok(()),
        }
    }

    /// Active logit row for `prefix`, or `None` when the context is unseen.
    pub fn active_row(&self, prefix: &[TokenId]) -> Result<Option<(&[TokenId], &[f64])>> {
        self.check_prefix(prefix)?;
        let ctx = self.context_of(prefix);
        Ok(self
            .logits
            .get_key_value(ctx)
            .map(|(k, row)| (k.as_slice(), row.as_slice())))
    }

    /// `∇_θ log π(token | prefix)`: `1{j = token} - p_j` on the active row,
    /// zero everywhere else. Unseen contexts have no parameters, so the
    /// gradient is empty.
    pub fn grad_log_prob(&self, prefix: &[TokenId], token: TokenId) -> Result<PolicyGradient> {
        if token >= self.vocab_size {
            return Err(EchoError::Validation(format!("token id {token} >= V")));
        }
        let mut grad = PolicyGradient::zeros_like(self);
        if let Some((ctx, row)) = self.active_row(prefix)? {
            let probs = softmax(row);
            let g = grad.row_mut(ctx).expect("row exists in zeros_like");
            for (j, p) in probs.iter().enumerate() {
                g[j] = if j == token { 1.0 - p } else { -p };
            }
        }
        Ok(grad)
    }

    pub fn snapshot_reference(&self) -> ReferencePolicy {
        ReferencePolicy(self.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&PolicyFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: PolicyFile = serde_json::from_str(text)?;
        file.try_into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| EchoError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EchoError::io(path, e))?;
        Self::from_json(&text)
    }
}

impl TokenPolicy for PolicyParams {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn eos_token(&self) -> TokenId {
        self.eos_token
    }

    fn next_distribution(&self, prefix: &[TokenId]) -> Result<TokenDistribution> {
        Ok(match self.active_row(prefix)? {
            Some((_, row)) => TokenDistribution::new(softmax(row))?,
            None => TokenDistribution::uniform(self.vocab_size),
        })
    }

    fn log_prob(&self, prefix: &[TokenId], token: TokenId) -> Result<f64> {
        if token >= self.vocab_size {
            return Err(EchoError::Validation(format!("token id {token} >= V")));
        }
        Ok(match self.active_row(prefix)? {
            Some((_, row)) => row[token] - log_sum_exp(row),
            None => -(self.vocab_size as f64).ln(),
        })
    }

    fn log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok(match self.active_row(prefix)? {
            Some((_, row)) => {
                let lse = log_sum_exp(row);
                row.iter().map(|l| l - lse).collect()
            }
            None => vec![-(self.vocab_size as f64).ln(); self.vocab_size],
        })
    }
}

/// Frozen copy of a policy, used as `π_ref`. Exposes no mutation.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePolicy(PolicyParams);

impl ReferencePolicy {
    pub fn params(&self) -> &PolicyParams {
        &self.0
    }
}

impl TokenPolicy for ReferencePolicy {
    fn vocab_size(&self) -> usize {
        self.0.vocab_size
    }

    fn eos_token(&self) -> TokenId {
        self.0.eos_token
    }

    fn next_distribution(&self, prefix: &[TokenId]) -> Result<TokenDistribution> {
        self.0.next_distribution(prefix)
    }

    fn log_prob(&self, prefix: &[TokenId], token: TokenId) -> Result<f64> {
        self.0.log_prob(prefix, token)
    }

    fn log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        self.0.log_probs(prefix)
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Gradient with the same row layout as a [`PolicyParams`] table.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGradient {
    rows: BTreeMap<Context, Vec<f64>>,
}

impl PolicyGradient {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        Self {
            rows: params
                .logits
                .keys()
                .map(|k| (k.clone(), vec![0.0; params.vocab_size]))
                .collect(),
        }
    }

    pub fn row(&self, context: &[TokenId]) -> Option<&[f64]> {
        self.rows.get(context).map(|r| r.as_slice())
    }

    pub fn row_mut(&mut self, context: &[TokenId]) -> Option<&mut Vec<f64>> {
        self.rows.get_mut(context)
    }

    pub fn get(&self, context: &[TokenId], index: usize) -> f64 {
        self.rows.get(context).map_or(0.0, |r| r[index])
    }

    pub fn rows(&self) -> impl Iterator<Item = (&Context, &Vec<f64>)> {
        self.rows.iter()
    }

    pub fn max_abs(&self) -> f64 {
        self.rows
            .values()
            .flat_map(|r| r.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.rows.values().all(|r| r.iter().all(|&v| v == 0.0))
    }
}

/// Gradient-ascent step `θ ← θ + lr · ∇`. Rejects non-finite gradients and
/// rows that do not exist in `params`.
pub fn apply_update(
    params: &PolicyParams,
    gradient: &PolicyGradient,
    learning_rate: f64,
) -> Result<PolicyParams> {
    for (ctx, row) in &gradient.rows {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(EchoError::NonFiniteGradient(ctx.clone()));
        }
        match params.logits.get(ctx) {
            Some(p) if p.len() == row.len() => {}
            _ => {
                return Err(EchoError::Validation(format!(
                    "gradient row {ctx:?} does not match the parameter table"
                )))
            }
        }
    }
    let mut updated = params.clone();
    for (ctx, row) in &gradient.rows {
        let target = updated.logits.get_mut(ctx).expect("checked above");
        for (p, g) in target.iter_mut().zip(row) {
            *p += learning_rate * g;
        }
    }
    Ok(updated)
}

#[derive(Serialize, Deserialize)]
struct PolicyFile {
    vocab_size: usize,
    context_order: usize,
    eos_token: TokenId,
    /// Context key is the comma-joined token ids, `""` for the empty context.
    logits: BTreeMap<String, Vec<f64>>,
}

impl From<&PolicyParams> for PolicyFile {
    fn from(p: &PolicyParams) -> Self {
        Self {
            vocab_size: p.vocab_size,
            context_order: p.context_order,
            eos_token: p.eos_token,
            logits: p
                .logits
                .iter()
                .map(|(k, v)| (context_key(k), v.clone()))
                .collect(),
        }
    }
}

impl TryFrom<PolicyFile> for PolicyParams {
    type Error = EchoError;

    fn try_from(file: PolicyFile) -> Result<Self> {
        let mut params = PolicyParams::new(file.vocab_size, file.context_order, file.eos_token)?;
        for (key, row) in file.logits {
            params.set_row(parse_context_key(&key)?, row)?;
        }
        Ok(params)
    }
}

pub fn context_key(ctx: &[TokenId]) -> String {
    ctx.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
}

pub fn parse_context_key(key: &str) -> Result<Context> {
    if key.is_empty() {
        return Ok(Vec::new());
    }
    key.split(',')
        .map(|s| {
            s.trim()
                .parse::<TokenId>()
                .map_err(|_| EchoError::Validation(format!("bad context key {key:?}")))
        })
        .collect()
}

/// Inverse-CDF sampling for an explicit uniform draw `u ∈ [0, 1)`: the first
/// token whose cumulative mass exceeds `u`.
pub fn sample_with_uniform(dist: &TokenDistribution, u: f64) -> TokenId {
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (i, &p) in dist.probs().iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        cumulative += p;
        if u < cumulative {
            return i;
        }
    }
    // rounding left the total just under 1
    last_positive
}

pub fn sample_token<R: Rng + ?Sized>(dist: &TokenDistribution, rng: &mut R) -> TokenId {
    sample_with_uniform(dist, rng.random::<f64>())
}

/// Seeded RNG stream identified by a name and two indices, e.g.
/// `("branch", rollout_id, branch_id)`. Streams never share state, so the
/// draws of one branch do not depend on how many other branches ran.
pub fn named_stream(seed: u64, name: &str, major: u64, minor: u64) -> ChaCha8Rng {
    // FNV-1a over the name keeps stream identities stable across builds
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(h ^ major)));
    rng.set_stream(minor);
    rng
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Why a branch was stopped early.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneReason {
    LowConfidence,
    TailDecline,
    EntropySpike,
}

impl PruneReason {
    pub fn as_str(self) -> &'static str {
        match self {
            PruneReason::LowConfidence => "low_confidence",
            PruneReason::TailDecline => "tail_decline",
            PruneReason::EntropySpike => "entropy_spike",
        }
    }
}

/// Lifecycle of a branch. `Complete` (ended with end-of-sequence) and
/// `Pruned` are mutually exclusive by construction; `Truncated` means the
/// branch hit the length limit or the token budget without an answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchStatus {
    Active,
    Complete,
    Truncated,
    Pruned(PruneReason),
}

impl BranchStatus {
    pub fn is_terminal(self) -> bool {
        !matches!(self, BranchStatus::Active)
    }
}

/// One generated response `o_i` with everything the update needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt: Vec<TokenId>,
    pub tokens: Vec<TokenId>,
    pub policy_logprobs: Vec<f64>,
    pub ref_logprobs: Vec<f64>,
    pub trace: SignalTrace,
    pub status: BranchStatus,
    /// Tree node holding the final token.
    pub leaf_node: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.status == BranchStatus::Complete
    }

    pub fn prune_reason(&self) -> Option<PruneReason> {
        match self.status {
            BranchStatus::Pruned(r) => Some(r),
            _ => None,
        }
    }

    /// Prompt followed by the first `t` generated tokens.
    pub fn prefix(&self, t: usize) -> Vec<TokenId> {
        let mut p = self.prompt.clone();
        p.extend_from_slice(&self.tokens[..t]);
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_row(logits: Vec<f64>) -> PolicyParams {
        let mut p = PolicyParams::new(logits.len(), 1, logits.len() - 1).unwrap();
        p.set_row(vec![0], logits).unwrap();
        p
    }

    #[test]
    fn softmax_examples() {
        let p = single_row(vec![0.0; 4]);
        let d = p.next_distribution(&[0]).unwrap();
        assert!(d.probs().iter().all(|&x| (x - 0.25).abs() < 1e-15));

        let p = single_row(vec![1.0, 1.0, 1.0, 1.0 + 3f64.ln()]);
        let d = p.next_distribution(&[0]).unwrap();
        let want = [1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0, 0.5];
        for (a, b) in d.probs().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((p.log_prob(&[0], 3).unwrap() - 0.5f64.ln()).abs() < 1e-12);

        // context 2 has no row
        let d = p.next_distribution(&[2]).unwrap();
        assert_eq!(d, TokenDistribution::uniform(4));
        assert!((p.log_prob(&[2], 1).unwrap() - 0.25f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn invalid_ids_rejected() {
        let p = single_row(vec![0.0; 4]);
        assert!(p.next_distribution(&[7]).is_err());
        assert!(p.log_prob(&[0], 4).is_err());
        assert!(p.grad_log_prob(&[0], 9).is_err());
        let mut q = p.clone();
        assert!(q.set_row(vec![0], vec![0.0; 3]).is_err());
        assert!(q.set_row(vec![0], vec![f64::INFINITY, 0.0, 0.0, 0.0]).is_err());
        assert!(q.set_row(vec![0, 1], vec![0.0; 4]).is_err());
    }

    #[test]
    fn context_uses_trailing_tokens() {
        let mut p = PolicyParams::new(4, 2, 3).unwrap();
        p.set_row(vec![], vec![5.0, 0.0, 0.0, 0.0]).unwrap();
        p.set_row(vec![1], vec![0.0, 5.0, 0.0, 0.0]).unwrap();
        p.set_row(vec![1, 2], vec![0.0, 0.0, 5.0, 0.0]).unwrap();
        assert_eq!(p.context_of(&[0, 1, 2]), &[1, 2]);
        assert_eq!(p.next_distribution(&[]).unwrap().top_tokens(1).unwrap(), vec![0]);
        assert_eq!(p.next_distribution(&[1]).unwrap().top_tokens(1).unwrap(), vec![1]);
        assert_eq!(p.next_distribution(&[0, 1, 2]).unwrap().top_tokens(1).unwrap(), vec![2]);
    }

    #[test]
    fn grad_log_prob_examples() {
        let p = single_row(vec![0.0, 0.0]);
        let g = p.grad_log_prob(&[0], 0).unwrap();
        assert_eq!(g.row(&[0]).unwrap(), &[0.5, -0.5]);

        let p = single_row(vec![60.0, 0.0, 0.0]);
        let g = p.grad_log_prob(&[0], 0).unwrap();
        assert!(g.max_abs() < 1e-20);

        // unseen context carries no parameters
        let g = p.grad_log_prob(&[1], 0).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn inverse_cdf_sampling() {
        let u = TokenDistribution::uniform(4);
        assert_eq!(sample_with_uniform(&u, 0.6), 2);
        assert_eq!(sample_with_uniform(&u, 0.0), 0);
        assert_eq!(sample_with_uniform(&u, 0.999_999), 3);
        let hot = TokenDistribution::one_hot(5, 3);
        let mut rng = named_stream(11, "branch", 0, 0);
        for _ in 0..50 {
            assert_eq!(sample_token(&hot, &mut rng), 3);
        }
    }

    #[test]
    fn named_streams_are_deterministic_and_distinct() {
        let draw = |name: &str, a, b| named_stream(5, name, a, b).random::<u64>();
        assert_eq!(draw("branch", 1, 2), draw("branch", 1, 2));
        assert_ne!(draw("branch", 1, 2), draw("branch", 1, 3));
        assert_ne!(draw("branch", 1, 2), draw("branch", 2, 2));
        assert_ne!(draw("branch", 1, 2), draw("warmup", 1, 2));
    }

    #[test]
    fn snapshot_is_isolated_from_updates() {
        let live = single_row(vec![0.3, -0.2, 0.1]);
        let reference = live.snapshot_reference();
        assert_eq!(reference.params(), &live);
        let grad = live.grad_log_prob(&[0], 1).unwrap();
        let updated = apply_update(&live, &grad, 0.5).unwrap();
        assert_ne!(updated, live);
        assert_eq!(
            reference.next_distribution(&[0]).unwrap(),
            live.next_distribution(&[0]).unwrap()
        );
        let again = reference.params().snapshot_reference();
        assert_eq!(again, reference);
        let r = (live.log_prob(&[0], 2).unwrap() - reference.log_prob(&[0], 2).unwrap()).exp();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn apply_update_contract() {
        let p = single_row(vec![0.3, -0.2, 0.1]);
        let g = p.grad_log_prob(&[0], 1).unwrap();
        assert_eq!(apply_update(&p, &g, 0.0).unwrap(), p);
        assert_eq!(apply_update(&p, &g, 0.1).unwrap(), apply_update(&p, &g, 0.1).unwrap());

        let mut bad = g.clone();
        bad.row_mut(&[0]).unwrap()[0] = f64::NAN;
        assert!(matches!(
            apply_update(&p, &bad, 0.1),
            Err(EchoError::NonFiniteGradient(_))
        ));
    }

    #[test]
    fn json_layout_round_trip() {
        let mut p = PolicyParams::new(3, 2, 2).unwrap();
        p.set_row(vec![], vec![0.1, 0.2, 0.3]).unwrap();
        p.set_row(vec![0, 1], vec![-1.0, 0.0, 1.0]).unwrap();
        let text = p.to_json().unwrap();
        assert!(text.contains("\"0,1\""));
        assert!(text.contains("\"\""));
        assert_eq!(PolicyParams::from_json(&text).unwrap(), p);
    }
}
