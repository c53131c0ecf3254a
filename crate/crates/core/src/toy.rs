//! Synthetic task worlds for the toy policy.
//!
//! A world is an initial logit table plus a list of prompts. Each prompt
//! carries a ground-truth answer that only the evaluation code can read.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{EchoConfig, WorldKind};
use crate::diagnostics::GroundTruth;
use crate::error::{EchoError, Result};
use crate::policy::{log_sum_exp, named_stream, PolicyParams, TokenPolicy};
use crate::rewards::{answer_from_tokens, Answer, AnswerRule};
use crate::signals::TokenId;

/// A prompt to run test-time updates on.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    pub id: usize,
    pub prompt: Vec<TokenId>,
    pub(crate) truth: GroundTruth,
}

impl ToyTask {
    pub fn new(id: usize, prompt: Vec<TokenId>, truth: Answer) -> Self {
        Self {
            id,
            prompt,
            truth: GroundTruth::new(truth),
        }
    }

    pub fn ground_truth(&self) -> &GroundTruth {
        &self.truth
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyWorld {
    pub policy: PolicyParams,
    pub tasks: Vec<ToyTask>,
}

pub fn build_world(cfg: &EchoConfig) -> Result<ToyWorld> {
    match cfg.world {
        WorldKind::Random => random_world(
            cfg.vocab_size,
            cfg.context_order,
            cfg.num_tasks,
            cfg.init_scale,
            cfg.policy_seed,
            cfg.max_length,
            &cfg.answer_rule,
        ),
        WorldKind::Corridor => {
            if cfg.vocab_size != CORRIDOR_VOCAB || cfg.context_order != 1 {
                return Err(EchoError::config(format!(
                    "world=corridor needs vocab_size={CORRIDOR_VOCAB} and context_order=1"
                )));
            }
            corridor_world(&CorridorSpec::default(), cfg.num_tasks)
        }
    }
}

/// Every context of length `0..=order` over the non-EOS tokens.
fn all_contexts(vocab_size: usize, order: usize, eos: TokenId) -> Vec<Vec<TokenId>> {
    let symbols: Vec<TokenId> = (0..vocab_size).filter(|&t| t != eos).collect();
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..order {
        let mut next = Vec::new();
        for ctx in &frontier {
            for &s in &symbols {
                let mut c: Vec<TokenId> = ctx.clone();
                c.push(s);
                next.push(c);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Log-odds added to each row's preferred successor.
const PEAK_BOOST: f64 = 3.5;
/// Minimum log-odds of a prompt row's preferred token against the rest.
const PROMPT_PEAK_LOGODDS: f64 = 0.0;
/// Chance that a row's preferred successor is end-of-sequence.
const EOS_PEAK_RATE: f64 = 0.25;

/// Gaussian logit tables where every row has one preferred successor, so
/// the policy is confident without being deterministic. Prompts are the
/// single tokens `0..num_tasks` (cycling through the non-EOS tokens); their
/// rows never prefer end-of-sequence and give their preferred token at
/// least half the mass. Each ground truth is the answer the
/// initial policy gives under greedy decoding.
pub fn random_world(
    vocab_size: usize,
    context_order: usize,
    num_tasks: usize,
    init_scale: f64,
    seed: u64,
    max_length: usize,
    rule: &AnswerRule,
) -> Result<ToyWorld> {
    if vocab_size < 3 {
        return Err(EchoError::config("random world needs vocab_size >= 3"));
    }
    let eos = vocab_size - 1;
    let mut policy = PolicyParams::new(vocab_size, context_order, eos)?;
    let mut rng = named_stream(seed, "world", 0, 0);
    let prompts: Vec<TokenId> = (0..num_tasks).map(|i| i % (vocab_size - 1)).collect();
    for ctx in all_contexts(vocab_size, context_order, eos) {
        let mut row: Vec<f64> = (0..vocab_size)
            .map(|_| init_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let is_prompt_row = ctx.len() == 1 && prompts.contains(&ctx[0]);
        let peak = if !is_prompt_row && rng.random_bool(EOS_PEAK_RATE) {
            eos
        } else {
            rng.random_range(0..vocab_size - 1)
        };
        row[peak] += PEAK_BOOST;
        if is_prompt_row {
            // the first step must clear the low-confidence pruning threshold
            let others = log_sum_exp(
                &row.iter()
                    .enumerate()
                    .filter(|&(j, _)| j != peak)
                    .map(|(_, &x)| x)
                    .collect::<Vec<_>>(),
            );
            row[peak] = row[peak].max(others + PROMPT_PEAK_LOGODDS);
        }
        policy.set_row(ctx, row)?;
    }
    let tasks = prompts
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let prompt = vec![p];
            let truth = greedy_answer(&policy, &prompt, max_length, rule)?;
            Ok(ToyTask::new(i, prompt, truth))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ToyWorld { policy, tasks })
}

/// Answer reached by always taking the most likely token. A decode that hits
/// the length limit is read as if it had ended there.
pub fn greedy_answer<P: TokenPolicy>(
    policy: &P,
    prompt: &[TokenId],
    max_length: usize,
    rule: &AnswerRule,
) -> Result<Answer> {
    let eos = policy.eos_token();
    let mut prefix = prompt.to_vec();
    let mut body = Vec::new();
    for _ in 0..max_length {
        let dist = policy.next_distribution(&prefix)?;
        let token = dist.top_tokens(1)?[0];
        if token == eos {
            break;
        }
        body.push(token);
        prefix.push(token);
    }
    Ok(answer_from_tokens(&body, rule))
}

pub const CORRIDOR_VOCAB: usize = 16;
pub const CORRIDOR_EOS: TokenId = 15;

/// Layout of the corridor fixture (`V = 16`, bigram contexts).
///
/// * token 0 is the prompt;
/// * tokens `1..=3` are answers and tokens `10..=14` are filler answers,
///   all followed almost surely by EOS;
/// * tokens `4..=9` form the corridor: from any corridor token the next
///   token is spread evenly over the corridor, so entropy stays high and
///   confidence low for as long as a branch remains inside. Token 4 is the
///   only way in from the prompt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorridorSpec {
    /// Mass on the top answer after the prompt.
    pub prompt_top: f64,
    /// Mass on the corridor entrance after the prompt.
    pub corridor_entry: f64,
    /// Mass on each of the two other answers after the prompt.
    pub prompt_other_answers: f64,
    /// Mass on end-of-sequence after an answer or filler token.
    pub answer_eos: f64,
    /// Mass on leaving the corridor (EOS or any answer) per step.
    pub corridor_leak: f64,
}

impl Default for CorridorSpec {
    fn default() -> Self {
        Self {
            prompt_top: 0.42,
            corridor_entry: 0.08,
            prompt_other_answers: 0.07,
            answer_eos: 0.97,
            corridor_leak: 1e-5,
        }
    }
}

const ANSWERS: [TokenId; 3] = [1, 2, 3];
const CORRIDOR: std::ops::RangeInclusive<TokenId> = 4..=9;
const FILLER: std::ops::RangeInclusive<TokenId> = 10..=14;
const TINY: f64 = 1e-6;

fn logits_from_probs(probs: &[f64]) -> Vec<f64> {
    probs.iter().map(|p| p.max(TINY).ln()).collect()
}

pub fn corridor_policy(spec: &CorridorSpec) -> Result<PolicyParams> {
    let v = CORRIDOR_VOCAB;
    let eos = CORRIDOR_EOS;
    let mut policy = PolicyParams::new(v, 1, eos)?;

    // after the prompt
    let mut p = vec![0.0; v];
    p[ANSWERS[0]] = spec.prompt_top;
    p[ANSWERS[1]] = spec.prompt_other_answers;
    p[ANSWERS[2]] = spec.prompt_other_answers;
    p[*CORRIDOR.start()] = spec.corridor_entry;
    let rest = 1.0 - spec.prompt_top - 2.0 * spec.prompt_other_answers - spec.corridor_entry;
    for t in FILLER {
        p[t] = rest / FILLER.count() as f64;
    }
    policy.set_row(vec![0], logits_from_probs(&p))?;

    // after an answer or filler token
    for a in ANSWERS.into_iter().chain(FILLER) {
        let mut p = vec![(1.0 - spec.answer_eos) / (v - 1) as f64; v];
        p[eos] = spec.answer_eos;
        policy.set_row(vec![a], logits_from_probs(&p))?;
    }

    // inside the corridor
    for t in CORRIDOR {
        let mut p = vec![0.0; v];
        p[eos] = spec.corridor_leak / 2.0;
        for &a in &ANSWERS {
            p[a] = spec.corridor_leak / 2.0 / ANSWERS.len() as f64;
        }
        for c in CORRIDOR {
            p[c] = (1.0 - spec.corridor_leak) / CORRIDOR.count() as f64;
        }
        policy.set_row(vec![t], logits_from_probs(&p))?;
    }
    Ok(policy)
}

/// The corridor policy with `num_tasks` copies of the single prompt. The
/// ground truth is the top answer after the prompt.
pub fn corridor_world(spec: &CorridorSpec, num_tasks: usize) -> Result<ToyWorld> {
    let policy = corridor_policy(spec)?;
    let tasks = (0..num_tasks)
        .map(|i| ToyTask::new(i, vec![0], Answer::Tokens(vec![ANSWERS[0]])))
        .collect();
    Ok(ToyWorld { policy, tasks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_world_rows_cover_all_contexts() {
        let w = random_world(16, 1, 5, 1.5, 3, 12, &AnswerRule::LastToken).unwrap();
        assert_eq!(w.policy.num_rows(), 16);
        assert_eq!(w.tasks.len(), 5);
        assert_eq!(w.tasks[2].prompt, vec![2]);
        let again = random_world(16, 1, 5, 1.5, 3, 12, &AnswerRule::LastToken).unwrap();
        assert_eq!(w, again);
        let bigram = random_world(6, 2, 2, 1.0, 3, 12, &AnswerRule::LastToken).unwrap();
        assert_eq!(bigram.policy.num_rows(), 1 + 5 + 25);
    }

    #[test]
    fn corridor_rows_are_distributions() {
        let policy = corridor_policy(&CorridorSpec::default()).unwrap();
        let d = policy.next_distribution(&[0]).unwrap();
        assert!((d.prob(1) - 0.42).abs() < 1e-4);
        let inside = policy.next_distribution(&[0, 7]).unwrap();
        assert!(inside.entropy() > 1.7);
        assert!(inside.topk_confidence(1).unwrap() < 0.2);
    }
}
