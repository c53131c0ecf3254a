//! Answer extraction, majority-vote pseudo-labels and binary rewards.

use std::fmt;

use rand::Rng;

use crate::error::{EchoError, Result};
use crate::policy::Trajectory;
use crate::signals::TokenId;

/// How the final answer is read off a completed trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnswerRule {
    /// The final token before end-of-sequence.
    LastToken,
    /// Everything after the last occurrence of the separator token.
    AfterSeparator(TokenId),
}

impl AnswerRule {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        match *self {
            AnswerRule::AfterSeparator(sep) if sep >= vocab_size => Err(EchoError::Validation(
                format!("separator {sep} outside vocabulary of {vocab_size}"),
            )),
            _ => Ok(()),
        }
    }
}

/// Extracted answer. `NoAnswer` never wins a vote and never equals a real
/// answer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Answer {
    Tokens(Vec<TokenId>),
    NoAnswer,
}

impl Answer {
    pub fn is_sentinel(&self) -> bool {
        matches!(self, Answer::NoAnswer)
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Answer::Tokens(t) => {
                let parts: Vec<String> = t.iter().map(|x| x.to_string()).collect();
                write!(f, "{}", parts.join(" "))
            }
            Answer::NoAnswer => write!(f, "none"),
        }
    }
}

pub fn extract_answer(traj: &Trajectory, rule: &AnswerRule) -> Result<Answer> {
    if !traj.is_complete() {
        return Err(EchoError::Validation(
            "answers are only extracted from completed trajectories".into(),
        ));
    }
    // a completed trajectory always ends with end-of-sequence
    let body = &traj.tokens[..traj.tokens.len().saturating_sub(1)];
    Ok(answer_from_tokens(body, rule))
}

/// Answer for a token body that has already had its end-of-sequence removed.
pub fn answer_from_tokens(body: &[TokenId], rule: &AnswerRule) -> Answer {
    match *rule {
        AnswerRule::LastToken => match body.last() {
            Some(&t) => Answer::Tokens(vec![t]),
            None => Answer::NoAnswer,
        },
        AnswerRule::AfterSeparator(sep) => match body.iter().rposition(|&t| t == sep) {
            Some(pos) if pos + 1 < body.len() => Answer::Tokens(body[pos + 1..].to_vec()),
            _ => Answer::NoAnswer,
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoteResult {
    /// The pseudo-label `ŷ`.
    pub label: Answer,
    /// Tally per distinct answer, in order of first occurrence. Sentinels are
    /// tallied too, so the counts sum to the number of votes.
    pub counts: Vec<(Answer, usize)>,
    /// `R_i ∈ {0, 1}` per voted trajectory.
    pub rewards: Vec<f64>,
}

impl VoteResult {
    pub fn count_of(&self, answer: &Answer) -> usize {
        self.counts
            .iter()
            .find(|(a, _)| a == answer)
            .map_or(0, |(_, c)| *c)
    }

    pub fn winning_count(&self) -> usize {
        self.count_of(&self.label)
    }
}

/// Majority vote; ties go to the answer that appeared first.
pub fn majority_vote(answers: &[Answer]) -> Result<VoteResult> {
    if answers.is_empty() {
        return Err(EchoError::Validation("majority vote needs at least one answer".into()));
    }
    let mut counts: Vec<(Answer, usize)> = Vec::new();
    for a in answers {
        match counts.iter_mut().find(|(seen, _)| seen == a) {
            Some((_, c)) => *c += 1,
            None => counts.push((a.clone(), 1)),
        }
    }
    let mut best: Option<(&Answer, usize)> = None;
    for (a, c) in counts.iter().filter(|(a, _)| !a.is_sentinel()) {
        // strict comparison keeps the earliest answer on ties
        if best.is_none_or(|(_, bc)| *c > bc) {
            best = Some((a, *c));
        }
    }
    let label = match best {
        Some((a, _)) => a.clone(),
        None => return Err(EchoError::VoteFailure(answers.len())),
    };
    let rewards = answers
        .iter()
        .map(|a| if *a == label { 1.0 } else { 0.0 })
        .collect();
    Ok(VoteResult {
        label,
        counts,
        rewards,
    })
}

/// Indices of `m` trajectories drawn uniformly without replacement, in
/// ascending order. Asking for more than are available returns every index.
pub fn downsample_for_training<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Vec<usize> {
    if m >= n {
        if m > n {
            log::warn!("requested {m} training trajectories but only {n} available; using all");
        }
        return (0..n).collect();
    }
    let mut picked = rand::seq::index::sample(rng, n, m).into_vec();
    picked.sort_unstable();
    picked
}

/// Chance that each answer wins a vote of `g` independent draws, and the
/// chance that every draw is unparseable.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteOdds {
    pub win: Vec<f64>,
    pub failure: f64,
}

/// Largest number of distinct answers [`vote_win_probabilities`] enumerates.
pub const MAX_EXACT_ANSWERS: usize = 6;

fn check_answer_probs(answer_probs: &[f64], no_answer: f64) -> Result<()> {
    if answer_probs.is_empty() {
        return Err(EchoError::Validation("need at least one answer probability".into()));
    }
    let all = answer_probs.iter().chain(std::iter::once(&no_answer));
    if all.clone().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(EchoError::Validation("answer probabilities must be finite and >= 0".into()));
    }
    let total: f64 = all.sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(EchoError::Validation(format!(
            "answer probabilities sum to {total}, expected 1"
        )));
    }
    Ok(())
}

/// Exact win probabilities by enumerating every tally of `g` draws.
///
/// Answer `i` is drawn with probability `answer_probs[i]` and the sentinel
/// with `no_answer`. Given a tally, the draw order is a uniform shuffle, so
/// among tied leaders the one with `n` votes appears first with probability
/// `n / Σ n_tied`; that is how first-occurrence ties are split.
pub fn vote_win_probabilities(answer_probs: &[f64], no_answer: f64, g: usize) -> Result<VoteOdds> {
    check_answer_probs(answer_probs, no_answer)?;
    if g == 0 {
        return Err(EchoError::Validation("vote size must be positive".into()));
    }
    let k = answer_probs.len();
    if k > MAX_EXACT_ANSWERS {
        return Err(EchoError::Validation(format!(
            "exact odds support at most {MAX_EXACT_ANSWERS} answers, got {k}"
        )));
    }
    let mut ln_fact = vec![0.0f64; g + 1];
    for n in 1..=g {
        ln_fact[n] = ln_fact[n - 1] + (n as f64).ln();
    }
    let mut odds = VoteOdds {
        win: vec![0.0; k],
        failure: 0.0,
    };
    let mut counts = vec![0usize; k];
    enumerate_tallies(answer_probs, no_answer, g, 0, g, &mut counts, &ln_fact, &mut odds);
    Ok(odds)
}

#[allow(clippy::too_many_arguments)]
fn enumerate_tallies(
    probs: &[f64],
    no_answer: f64,
    g: usize,
    idx: usize,
    left: usize,
    counts: &mut Vec<usize>,
    ln_fact: &[f64],
    odds: &mut VoteOdds,
) {
    if idx == probs.len() {
        // the remaining draws are sentinels
        let mut ln_p = ln_fact[g] - ln_fact[left];
        if left > 0 {
            if no_answer == 0.0 {
                return;
            }
            ln_p += left as f64 * no_answer.ln();
        }
        for (&c, &p) in counts.iter().zip(probs) {
            if c > 0 {
                if p == 0.0 {
                    return;
                }
                ln_p += c as f64 * p.ln() - ln_fact[c];
            }
        }
        let prob = ln_p.exp();
        let top = counts.iter().copied().max().unwrap_or(0);
        if top == 0 {
            odds.failure += prob;
            return;
        }
        let tied: usize = counts.iter().filter(|&&c| c == top).sum();
        for (i, &c) in counts.iter().enumerate() {
            if c == top {
                odds.win[i] += prob * c as f64 / tied as f64;
            }
        }
        return;
    }
    for c in 0..=left {
        counts[idx] = c;
        enumerate_tallies(probs, no_answer, g, idx + 1, left - c, counts, ln_fact, odds);
    }
    counts[idx] = 0;
}

/// Empirical counterpart of [`vote_win_probabilities`]: runs `trials`
/// votes of `g` draws through [`majority_vote`].
pub fn simulate_votes<R: Rng + ?Sized>(
    answer_probs: &[f64],
    no_answer: f64,
    g: usize,
    trials: usize,
    rng: &mut R,
) -> Result<VoteOdds> {
    check_answer_probs(answer_probs, no_answer)?;
    let k = answer_probs.len();
    let mut wins = vec![0usize; k];
    let mut failures = 0usize;
    let mut draws = Vec::with_capacity(g);
    for _ in 0..trials {
        draws.clear();
        for _ in 0..g {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = Answer::NoAnswer;
            for (i, p) in answer_probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = Answer::Tokens(vec![i]);
                    break;
                }
            }
            draws.push(pick);
        }
        match majority_vote(&draws) {
            Ok(v) => match v.label {
                Answer::Tokens(t) => wins[t[0]] += 1,
                Answer::NoAnswer => unreachable!("sentinel never wins"),
            },
            Err(EchoError::VoteFailure(_)) => failures += 1,
            Err(e) => return Err(e),
        }
    }
    let n = trials.max(1) as f64;
    Ok(VoteOdds {
        win: wins.into_iter().map(|w| w as f64 / n).collect(),
        failure: failures as f64 / n,
    })
}
