//! Token-level uncertainty signals and their windowed statistics.
//!
//! A [`SignalTrace`] is the per-branch record of everything the rollout needs
//! to decide where to fork and when to prune: raw entropy and top-k
//! confidence per step, the grouped / tail moving averages of confidence, the
//! historical entropy mean and its increment, and the three pruning counters
//! (running minimum, tail-decline run, entropy-spike run).
//!
//! Steps are 1-based throughout the public API, matching the way the
//! windowed statistics are usually written down.

use serde::{Deserialize, Serialize};

use crate::error::{EchoError, Result};

pub type TokenId = usize;

const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Probability vector over a finite vocabulary at one decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(EchoError::Validation("empty distribution".into()));
        }
        if let Some((i, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0 || **p > 1.0)
        {
            return Err(EchoError::Validation(format!(
                "probability {p} at index {i} outside [0, 1]"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(EchoError::Validation(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn uniform(vocab_size: usize) -> Self {
        assert!(vocab_size > 0, "vocabulary must be non-empty");
        Self {
            probs: vec![1.0 / vocab_size as f64; vocab_size],
        }
    }

    pub fn one_hot(vocab_size: usize, token: TokenId) -> Self {
        assert!(token < vocab_size, "token {token} outside vocabulary");
        let mut probs = vec![0.0; vocab_size];
        probs[token] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs[token]
    }

    /// Shannon entropy in nats, with `0 ln 0 = 0`.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    /// Token ids of the `k` most probable tokens, most probable first.
    /// Equal probabilities keep ascending index order.
    pub fn top_tokens(&self, k: usize) -> Result<Vec<TokenId>> {
        if k == 0 || k > self.probs.len() {
            return Err(EchoError::Validation(format!(
                "k = {k} outside [1, {}]",
                self.probs.len()
            )));
        }
        let mut order: Vec<TokenId> = (0..self.probs.len()).collect();
        // stable sort keeps the lower index first among ties
        order.sort_by(|&a, &b| self.probs[b].total_cmp(&self.probs[a]));
        order.truncate(k);
        Ok(order)
    }

    /// Mean probability mass of the top-k tokens.
    pub fn topk_confidence(&self, k: usize) -> Result<f64> {
        let top = self.top_tokens(k)?;
        Ok(top.iter().map(|&t| self.probs[t]).sum::<f64>() / k as f64)
    }
}

pub fn token_entropy(dist: &TokenDistribution) -> f64 {
    dist.entropy()
}

pub fn topk_confidence(dist: &TokenDistribution, k: usize) -> Result<f64> {
    dist.topk_confidence(k)
}

/// Top-k size and the three smoothing windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalConfig {
    pub top_k: usize,
    pub group_window: usize,
    pub tail_window: usize,
    pub entropy_window: usize,
}

impl Default for SignalConfig {
    fn default() -> Self {
        Self {
            top_k: 1,
            group_window: 4,
            tail_window: 8,
            entropy_window: 4,
        }
    }
}

impl SignalConfig {
    pub fn validate(&self, vocab_size: usize) -> Vec<String> {
        let mut problems = Vec::new();
        if self.top_k == 0 || self.top_k > vocab_size {
            problems.push(format!("top_k={} must lie in [1, {vocab_size}]", self.top_k));
        }
        for (name, w) in [
            ("W_G", self.group_window),
            ("W_T", self.tail_window),
            ("W_H", self.entropy_window),
        ] {
            if w == 0 {
                problems.push(format!("{name} must be at least 1"));
            }
        }
        problems
    }
}

/// Mean of `values[t - min(window, t) .. t]`, i.e. the last `min(window, t)`
/// entries ending at 1-based step `t`.
pub fn trailing_mean(values: &[f64], t: usize, window: usize) -> Result<f64> {
    if t == 0 || t > values.len() {
        return Err(EchoError::Index(format!(
            "step {t} outside [1, {}]",
            values.len()
        )));
    }
    if window == 0 {
        return Err(EchoError::Validation("window must be at least 1".into()));
    }
    let w = window.min(t);
    Ok(values[t - w..t].iter().sum::<f64>() / w as f64)
}

/// Grouped confidence `C^G_t` from a raw confidence sequence.
pub fn grouped_confidence(confidence: &[f64], t: usize, group_window: usize) -> Result<f64> {
    trailing_mean(confidence, t, group_window)
}

/// Tail confidence `C^tail_t` from a raw confidence sequence.
pub fn tail_confidence(confidence: &[f64], t: usize, tail_window: usize) -> Result<f64> {
    trailing_mean(confidence, t, tail_window)
}

/// Historical mean entropy `H̄_{t-1}`: the mean over the `min(W_H, t-1)`
/// steps ending at `t - 1`. Needs `t >= 2`.
pub fn mean_entropy(entropy: &[f64], t: usize, entropy_window: usize) -> Result<f64> {
    if t < 2 {
        return Err(EchoError::Index(format!(
            "historical entropy mean needs t >= 2, got {t}"
        )));
    }
    trailing_mean(entropy, t - 1, entropy_window)
}

/// `ΔH_t = H̄_t - H̄_{t-1}`, zero at the first step.
pub fn entropy_increment(entropy: &[f64], t: usize, entropy_window: usize) -> Result<f64> {
    if t == 0 || t > entropy.len() {
        return Err(EchoError::Index(format!(
            "step {t} outside [1, {}]",
            entropy.len()
        )));
    }
    if t == 1 {
        return Ok(0.0);
    }
    Ok(trailing_mean(entropy, t, entropy_window)? - mean_entropy(entropy, t, entropy_window)?)
}

/// Derived sequences supplied directly, used to build fixtures expressed in
/// terms of smoothed statistics rather than raw distributions.
#[derive(Debug, Clone, Default)]
pub struct TraceSequences {
    pub entropy: Vec<f64>,
    pub confidence: Vec<f64>,
    pub grouped_conf: Vec<f64>,
    pub tail_conf: Vec<f64>,
    pub mean_entropy: Vec<f64>,
    pub increment: Vec<f64>,
}

/// Per-branch time series of signals and pruning counters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SignalTrace {
    entropy_seq: Vec<f64>,
    confidence_seq: Vec<f64>,
    grouped_conf_seq: Vec<f64>,
    tail_conf_seq: Vec<f64>,
    /// `H̄_t`, the entropy mean over the window ending at `t`.
    mean_entropy_seq: Vec<f64>,
    increment_seq: Vec<f64>,
    running_min_seq: Vec<f64>,
    decline_seq: Vec<u32>,
    spike_seq: Vec<u32>,
}

impl SignalTrace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends one decoding step and updates every derived statistic.
    pub fn push(&mut self, entropy: f64, confidence: f64, cfg: &SignalConfig, spike_threshold: f64) {
        self.entropy_seq.push(entropy);
        self.confidence_seq.push(confidence);
        let t = self.entropy_seq.len();
        let grouped = trailing_mean(&self.confidence_seq, t, cfg.group_window)
            .expect("window validated");
        let tail =
            trailing_mean(&self.confidence_seq, t, cfg.tail_window).expect("window validated");
        let mean_h =
            trailing_mean(&self.entropy_seq, t, cfg.entropy_window).expect("window validated");
        let increment = match self.mean_entropy_seq.last() {
            Some(prev) => mean_h - prev,
            None => 0.0,
        };
        self.grouped_conf_seq.push(grouped);
        self.tail_conf_seq.push(tail);
        self.mean_entropy_seq.push(mean_h);
        self.increment_seq.push(increment);
        self.push_counters(spike_threshold);
    }

    pub fn from_sequences(seqs: TraceSequences, spike_threshold: f64) -> Result<Self> {
        let n = seqs.entropy.len();
        let lengths = [
            seqs.confidence.len(),
            seqs.grouped_conf.len(),
            seqs.tail_conf.len(),
            seqs.mean_entropy.len(),
            seqs.increment.len(),
        ];
        if lengths.iter().any(|&l| l != n) {
            return Err(EchoError::Validation(format!(
                "trace sequences have unequal lengths: {n} vs {lengths:?}"
            )));
        }
        let mut trace = Self {
            entropy_seq: seqs.entropy,
            confidence_seq: seqs.confidence,
            grouped_conf_seq: Vec::with_capacity(n),
            tail_conf_seq: Vec::with_capacity(n),
            mean_entropy_seq: seqs.mean_entropy,
            increment_seq: Vec::with_capacity(n),
            ..Self::default()
        };
        for i in 0..n {
            trace.grouped_conf_seq.push(seqs.grouped_conf[i]);
            trace.tail_conf_seq.push(seqs.tail_conf[i]);
            trace.increment_seq.push(seqs.increment[i]);
            trace.push_counters(spike_threshold);
        }
        Ok(trace)
    }

    fn push_counters(&mut self, spike_threshold: f64) {
        let t = self.running_min_seq.len() + 1;
        let grouped = self.grouped_conf_seq[t - 1];
        let tail = self.tail_conf_seq[t - 1];
        let increment = self.increment_seq[t - 1];

        let running_min = match self.running_min_seq.last() {
            Some(&m) => m.min(grouped),
            None => grouped,
        };
        let decline = if t > 1 && tail < self.tail_conf_seq[t - 2] {
            self.decline_seq[t - 2] + 1
        } else {
            0
        };
        let spike = if increment > spike_threshold {
            self.spike_seq.last().copied().unwrap_or(0) + 1
        } else {
            0
        };
        self.running_min_seq.push(running_min);
        self.decline_seq.push(decline);
        self.spike_seq.push(spike);
    }

    pub fn len(&self) -> usize {
        self.entropy_seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entropy_seq.is_empty()
    }

    pub fn entropy_seq(&self) -> &[f64] {
        &self.entropy_seq
    }

    pub fn confidence_seq(&self) -> &[f64] {
        &self.confidence_seq
    }

    pub fn grouped_conf_seq(&self) -> &[f64] {
        &self.grouped_conf_seq
    }

    pub fn tail_conf_seq(&self) -> &[f64] {
        &self.tail_conf_seq
    }

    pub fn mean_entropy_seq(&self) -> &[f64] {
        &self.mean_entropy_seq
    }

    pub fn increment_seq(&self) -> &[f64] {
        &self.increment_seq
    }

    pub fn running_min_seq(&self) -> &[f64] {
        &self.running_min_seq
    }

    pub fn decline_seq(&self) -> &[u32] {
        &self.decline_seq
    }

    pub fn spike_seq(&self) -> &[u32] {
        &self.spike_seq
    }

    pub fn running_min(&self) -> Option<f64> {
        self.running_min_seq.last().copied()
    }

    pub fn decline_counter(&self) -> u32 {
        self.decline_seq.last().copied().unwrap_or(0)
    }

    pub fn spike_counter(&self) -> u32 {
        self.spike_seq.last().copied().unwrap_or(0)
    }

    pub fn last_grouped_confidence(&self) -> Option<f64> {
        self.grouped_conf_seq.last().copied()
    }

    pub fn last_tail_confidence(&self) -> Option<f64> {
        self.tail_conf_seq.last().copied()
    }

    pub fn grouped_confidence(&self, t: usize, group_window: usize) -> Result<f64> {
        grouped_confidence(&self.confidence_seq, t, group_window)
    }

    pub fn tail_confidence(&self, t: usize, tail_window: usize) -> Result<f64> {
        tail_confidence(&self.confidence_seq, t, tail_window)
    }

    pub fn mean_entropy(&self, t: usize, entropy_window: usize) -> Result<f64> {
        mean_entropy(&self.entropy_seq, t, entropy_window)
    }

    pub fn entropy_increment(&self, t: usize, entropy_window: usize) -> Result<f64> {
        entropy_increment(&self.entropy_seq, t, entropy_window)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(TokenDistribution::one_hot(8, 3).entropy(), 0.0);
        assert!(close(TokenDistribution::uniform(8).entropy(), 8f64.ln(), 1e-12));
        let d = TokenDistribution::new(vec![0.5, 0.25, 0.25]).unwrap();
        // 0.5 ln 2 + 0.5 ln 4
        assert!(close(d.entropy(), 1.5 * 2f64.ln(), 1e-12));
        assert!(close(d.entropy(), 1.0397, 1e-4));
    }

    #[test]
    fn confidence_examples() {
        let hot = TokenDistribution::one_hot(5, 2);
        assert_eq!(hot.topk_confidence(1).unwrap(), 1.0);
        let u = TokenDistribution::uniform(8);
        for k in 1..=8 {
            assert!(close(u.topk_confidence(k).unwrap(), 0.125, 1e-15));
        }
        let d = TokenDistribution::new(vec![0.5, 0.3, 0.2]).unwrap();
        assert!(close(d.topk_confidence(2).unwrap(), 0.4, 1e-15));
        assert!(d.topk_confidence(0).is_err());
        assert!(d.topk_confidence(4).is_err());
    }

    #[test]
    fn invalid_distributions_rejected() {
        assert!(TokenDistribution::new(vec![0.5, 0.4]).is_err());
        assert!(TokenDistribution::new(vec![1.2, -0.2]).is_err());
        assert!(TokenDistribution::new(vec![f64::NAN, 1.0]).is_err());
        assert!(TokenDistribution::new(vec![]).is_err());
    }

    #[test]
    fn top_tokens_tie_break_by_index() {
        let u = TokenDistribution::uniform(6);
        assert_eq!(u.top_tokens(3).unwrap(), vec![0, 1, 2]);
        let d = TokenDistribution::new(vec![0.1, 0.4, 0.3, 0.2]).unwrap();
        assert_eq!(d.top_tokens(2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn window_examples() {
        let c = [0.2, 0.4, 0.6, 0.8];
        assert!(close(grouped_confidence(&[0.7], 1, 4).unwrap(), 0.7, 1e-15));
        assert!(close(grouped_confidence(&c, 4, 4).unwrap(), 0.5, 1e-15));
        assert!(close(grouped_confidence(&c, 4, 2).unwrap(), 0.7, 1e-15));
        assert!(close(tail_confidence(&[0.9], 1, 8).unwrap(), 0.9, 1e-15));
        assert!(close(tail_confidence(&[1.0, 0.0], 2, 8).unwrap(), 0.5, 1e-15));
        assert!(grouped_confidence(&c, 0, 4).is_err());
        assert!(grouped_confidence(&c, 5, 4).is_err());
    }

    #[test]
    fn mean_entropy_examples() {
        assert!(close(mean_entropy(&[1.3; 6], 5, 4).unwrap(), 1.3, 1e-15));
        assert!(close(mean_entropy(&[1.0, 3.0, 0.0], 3, 4).unwrap(), 2.0, 1e-15));
        assert!(close(mean_entropy(&[1.0, 3.0, 5.0, 9.0], 4, 2).unwrap(), 4.0, 1e-15));
        assert!(mean_entropy(&[1.0], 1, 4).is_err());
        assert!(mean_entropy(&[1.0], 0, 4).is_err());
    }

    #[test]
    fn increment_examples() {
        for t in 1..=5 {
            assert!(close(entropy_increment(&[0.8; 5], t, 3).unwrap(), 0.0, 1e-15));
        }
        assert!(close(entropy_increment(&[1.0, 2.0], 2, 1).unwrap(), 1.0, 1e-15));
        assert_eq!(entropy_increment(&[1.0, 2.0], 1, 1).unwrap(), 0.0);
    }

    #[test]
    fn trace_push_tracks_counters() {
        let cfg = SignalConfig {
            top_k: 1,
            group_window: 1,
            tail_window: 1,
            entropy_window: 1,
        };
        let mut trace = SignalTrace::new();
        // confidence falls for two steps, then recovers
        for (h, c) in [(0.1, 0.9), (0.8, 0.8), (1.5, 0.7), (1.5, 0.75)] {
            trace.push(h, c, &cfg, 0.5);
        }
        assert_eq!(trace.decline_seq(), &[0, 1, 2, 0]);
        assert_eq!(trace.spike_seq(), &[0, 1, 2, 0]);
        assert_eq!(trace.running_min(), Some(0.7));
        assert_eq!(trace.len(), 4);
    }

    #[test]
    fn from_sequences_rejects_ragged_input() {
        let seqs = TraceSequences {
            entropy: vec![1.0, 2.0],
            confidence: vec![0.5],
            ..Default::default()
        };
        assert!(SignalTrace::from_sequences(seqs, 0.5).is_err());
    }
}
