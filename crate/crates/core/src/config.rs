//! Flat `key=value` experiment configuration.
//!
//! Lines are `key=value`; `#` starts a comment and blank lines are ignored.
//! Unknown keys, bad values and failed cross-field checks are all collected
//! and reported together.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{EchoError, Result};
use crate::optimizer::{AdvantageMode, ClipConfig, OptimizerConfig, ShapingConfig, UpdateConfig};
use crate::rewards::AnswerRule;
use crate::rollout::{BranchSchedulerConfig, PruneConfig, RolloutConfig, ScheduleMode};
use crate::signals::SignalConfig;

/// Which synthetic task world the engine builds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorldKind {
    /// Random logit tables.
    Random,
    /// Tables with one persistent high-entropy corridor per prompt.
    Corridor,
}

impl WorldKind {
    pub fn as_str(self) -> &'static str {
        match self {
            WorldKind::Random => "random",
            WorldKind::Corridor => "corridor",
        }
    }
}

impl FromStr for WorldKind {
    type Err = EchoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(WorldKind::Random),
            "corridor" => Ok(WorldKind::Corridor),
            other => Err(EchoError::config(format!(
                "world={other} (expected random or corridor)"
            ))),
        }
    }
}

fn rule_to_string(rule: &AnswerRule) -> String {
    match rule {
        AnswerRule::LastToken => "last_token".to_string(),
        AnswerRule::AfterSeparator(sep) => format!("after_separator:{sep}"),
    }
}

fn parse_rule(s: &str) -> std::result::Result<AnswerRule, String> {
    if s == "last_token" {
        return Ok(AnswerRule::LastToken);
    }
    match s.strip_prefix("after_separator:") {
        Some(id) => id
            .parse()
            .map(AnswerRule::AfterSeparator)
            .map_err(|_| format!("bad separator id in {s:?}")),
        None => Err(format!("expected last_token or after_separator:<id>, got {s:?}")),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EchoConfig {
    pub signals: SignalConfig,
    pub scheduler: BranchSchedulerConfig,
    pub pruning: PruneConfig,
    pub clip: ClipConfig,
    pub shaping: ShapingConfig,
    pub optimizer: OptimizerConfig,
    pub use_kl: bool,
    /// Rollouts per prompt that enter the vote.
    pub group_size: usize,
    /// Trajectories kept for the update.
    pub train_size: usize,
    pub max_length: usize,
    pub seed: u64,
    pub warmup_steps: usize,
    pub steps: usize,
    pub schedule_mode: ScheduleMode,
    pub advantage_mode: AdvantageMode,
    pub answer_rule: AnswerRule,
    pub world: WorldKind,
    pub vocab_size: usize,
    pub context_order: usize,
    pub num_tasks: usize,
    pub init_scale: f64,
    pub policy_seed: u64,
}

impl Default for EchoConfig {
    fn default() -> Self {
        Self {
            signals: SignalConfig::default(),
            scheduler: BranchSchedulerConfig::default(),
            pruning: PruneConfig::default(),
            clip: ClipConfig::default(),
            shaping: ShapingConfig::default(),
            optimizer: OptimizerConfig::default(),
            use_kl: true,
            group_size: 64,
            train_size: 32,
            max_length: 12,
            seed: 0,
            warmup_steps: 8,
            steps: 10,
            schedule_mode: ScheduleMode::Hybrid,
            advantage_mode: AdvantageMode::Hybrid,
            answer_rule: AnswerRule::LastToken,
            world: WorldKind::Random,
            vocab_size: 16,
            context_order: 1,
            num_tasks: 5,
            init_scale: 1.0,
            policy_seed: 1,
        }
    }
}

/// Every accepted key, in snapshot order.
pub const KEYS: &[&str] = &[
    "top_k", "W_G", "W_T", "W_H",
    "B_min", "B_max", "alpha_B", "beta_B", "H_low", "H_high", "s_branch", "eps_stab",
    "tau_prune", "S_tail", "tau_tail", "delta_upper", "S_delta",
    "eps_min", "eps_max", "kappa", "W_tail",
    "alpha_shape", "beta_shape", "a_scale",
    "use_kl", "kl_coef", "lr", "train_batch", "mini_batch", "micro_batch",
    "G", "M", "L", "seed", "warmup_steps", "steps",
    "schedule_mode", "advantage_mode", "answer_rule",
    "world", "vocab_size", "context_order", "num_tasks", "init_scale", "policy_seed",
];

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("{key}={value} is not a valid value"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "True" | "1" => Ok(true),
        "false" | "False" | "0" => Ok(false),
        _ => Err(format!("{key}={value} is not a boolean")),
    }
}

impl EchoConfig {
    /// Sets one key. Unknown keys and unparseable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key {
            "top_k" => self.signals.top_k = parse(key, v)?,
            "W_G" => self.signals.group_window = parse(key, v)?,
            "W_T" => self.signals.tail_window = parse(key, v)?,
            "W_H" => self.signals.entropy_window = parse(key, v)?,
            "B_min" => self.scheduler.min_branches = parse(key, v)?,
            "B_max" => self.scheduler.max_branches = parse(key, v)?,
            "alpha_B" => self.scheduler.entropy_weight = parse(key, v)?,
            "beta_B" => self.scheduler.confidence_weight = parse(key, v)?,
            "H_low" => self.scheduler.entropy_low = parse(key, v)?,
            "H_high" => self.scheduler.entropy_high = parse(key, v)?,
            "s_branch" => self.scheduler.reference_confidence = parse(key, v)?,
            "eps_stab" => {
                let eps: f64 = parse(key, v)?;
                self.scheduler.eps = eps;
                self.shaping.eps = eps;
            }
            "tau_prune" => self.pruning.prune_threshold = parse(key, v)?,
            "S_tail" => self.pruning.tail_patience = parse(key, v)?,
            "tau_tail" => self.pruning.tail_threshold = parse(key, v)?,
            "delta_upper" => self.pruning.spike_threshold = parse(key, v)?,
            "S_delta" => self.pruning.spike_patience = parse(key, v)?,
            "eps_min" => self.clip.eps_min = parse(key, v)?,
            "eps_max" => self.clip.eps_max = parse(key, v)?,
            "kappa" => self.clip.kappa = parse(key, v)?,
            "W_tail" => self.clip.tail_window = parse(key, v)?,
            "alpha_shape" => self.shaping.alpha = parse(key, v)?,
            "beta_shape" => self.shaping.beta = parse(key, v)?,
            "a_scale" => self.shaping.scale = parse(key, v)?,
            "use_kl" => self.use_kl = parse_bool(key, v)?,
            "kl_coef" => self.optimizer.kl_coef = parse(key, v)?,
            "lr" => self.optimizer.learning_rate = parse(key, v)?,
            "train_batch" => self.optimizer.train_batch = parse(key, v)?,
            "mini_batch" => self.optimizer.mini_batch = parse(key, v)?,
            "micro_batch" => self.optimizer.micro_batch = parse(key, v)?,
            "G" => self.group_size = parse(key, v)?,
            "M" => self.train_size = parse(key, v)?,
            "L" => self.max_length = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "schedule_mode" => self.schedule_mode = v.parse().map_err(|e: EchoError| e.to_string())?,
            "advantage_mode" => self.advantage_mode = v.parse().map_err(|e: EchoError| e.to_string())?,
            "answer_rule" => self.answer_rule = parse_rule(v)?,
            "world" => self.world = v.parse().map_err(|e: EchoError| e.to_string())?,
            "vocab_size" => self.vocab_size = parse(key, v)?,
            "context_order" => self.context_order = parse(key, v)?,
            "num_tasks" => self.num_tasks = parse(key, v)?,
            "init_scale" => self.init_scale = parse(key, v)?,
            "policy_seed" => self.policy_seed = parse(key, v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Current value of `key` as it would be written to a snapshot.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "top_k" => self.signals.top_k.to_string(),
            "W_G" => self.signals.group_window.to_string(),
            "W_T" => self.signals.tail_window.to_string(),
            "W_H" => self.signals.entropy_window.to_string(),
            "B_min" => self.scheduler.min_branches.to_string(),
            "B_max" => self.scheduler.max_branches.to_string(),
            "alpha_B" => self.scheduler.entropy_weight.to_string(),
            "beta_B" => self.scheduler.confidence_weight.to_string(),
            "H_low" => self.scheduler.entropy_low.to_string(),
            "H_high" => self.scheduler.entropy_high.to_string(),
            "s_branch" => self.scheduler.reference_confidence.to_string(),
            "eps_stab" => self.scheduler.eps.to_string(),
            "tau_prune" => self.pruning.prune_threshold.to_string(),
            "S_tail" => self.pruning.tail_patience.to_string(),
            "tau_tail" => self.pruning.tail_threshold.to_string(),
            "delta_upper" => self.pruning.spike_threshold.to_string(),
            "S_delta" => self.pruning.spike_patience.to_string(),
            "eps_min" => self.clip.eps_min.to_string(),
            "eps_max" => self.clip.eps_max.to_string(),
            "kappa" => self.clip.kappa.to_string(),
            "W_tail" => self.clip.tail_window.to_string(),
            "alpha_shape" => self.shaping.alpha.to_string(),
            "beta_shape" => self.shaping.beta.to_string(),
            "a_scale" => self.shaping.scale.to_string(),
            "use_kl" => self.use_kl.to_string(),
            "kl_coef" => self.optimizer.kl_coef.to_string(),
            "lr" => self.optimizer.learning_rate.to_string(),
            "train_batch" => self.optimizer.train_batch.to_string(),
            "mini_batch" => self.optimizer.mini_batch.to_string(),
            "micro_batch" => self.optimizer.micro_batch.to_string(),
            "G" => self.group_size.to_string(),
            "M" => self.train_size.to_string(),
            "L" => self.max_length.to_string(),
            "seed" => self.seed.to_string(),
            "warmup_steps" => self.warmup_steps.to_string(),
            "steps" => self.steps.to_string(),
            "schedule_mode" => self.schedule_mode.as_str().to_string(),
            "advantage_mode" => self.advantage_mode.as_str().to_string(),
            "answer_rule" => rule_to_string(&self.answer_rule),
            "world" => self.world.as_str().to_string(),
            "vocab_size" => self.vocab_size.to_string(),
            "context_order" => self.context_order.to_string(),
            "num_tasks" => self.num_tasks.to_string(),
            "init_scale" => self.init_scale.to_string(),
            "policy_seed" => self.policy_seed.to_string(),
            _ => return None,
        })
    }

    /// Applies `key=value` pairs, collecting every problem.
    pub fn apply_pairs<'a, I>(&mut self, pairs: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut problems = Vec::new();
        for (k, v) in pairs {
            if let Err(e) = self.set(k.trim(), v) {
                problems.push(e);
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(EchoError::Config(problems))
        }
    }

    /// Applies `KEY=VALUE` strings such as command-line overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        let mut pairs = Vec::new();
        let mut problems = Vec::new();
        for o in overrides {
            match o.split_once('=') {
                Some(pair) => pairs.push(pair),
                None => problems.push(format!("override {o:?} is not KEY=VALUE")),
            }
        }
        if let Err(EchoError::Config(more)) = self.apply_pairs(pairs) {
            problems.extend(more);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(EchoError::Config(problems))
        }
    }

    /// Parses config text on top of the defaults and validates the result.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut problems = Vec::new();
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some(pair) => pairs.push(pair),
                None => problems.push(format!("line {}: expected key=value, got {line:?}", lineno + 1)),
            }
        }
        if let Err(EchoError::Config(more)) = cfg.apply_pairs(pairs) {
            problems.extend(more);
        }
        if !problems.is_empty() {
            return Err(EchoError::Config(problems));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EchoError::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        problems.extend(self.signals.validate(self.vocab_size));
        problems.extend(self.scheduler.validate());
        problems.extend(self.pruning.validate());
        problems.extend(self.clip.validate());
        problems.extend(self.shaping.validate());
        problems.extend(self.optimizer.validate());
        if self.group_size < 2 {
            problems.push(format!("G={} must be at least 2", self.group_size));
        }
        if self.train_size == 0 || self.train_size > self.group_size {
            problems.push(format!("need 1 <= M ({}) <= G ({})", self.train_size, self.group_size));
        }
        if self.max_length == 0 {
            problems.push("L must be at least 1".to_string());
        }
        if self.vocab_size < 3 {
            problems.push(format!("vocab_size={} must be at least 3", self.vocab_size));
        }
        if self.num_tasks == 0 {
            problems.push("num_tasks must be at least 1".to_string());
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            problems.push("init_scale must be finite and nonnegative".to_string());
        }
        if self.scheduler.max_branches > self.vocab_size {
            problems.push(format!(
                "B_max={} exceeds vocab_size={}",
                self.scheduler.max_branches, self.vocab_size
            ));
        }
        if let Err(e) = self.answer_rule.validate(self.vocab_size) {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(EchoError::Config(problems))
        }
    }

    /// KL coefficient in effect, zero when the KL term is switched off.
    pub fn effective_kl_coef(&self) -> f64 {
        if self.use_kl {
            self.optimizer.kl_coef
        } else {
            0.0
        }
    }

    pub fn rollout_config(&self) -> RolloutConfig {
        RolloutConfig {
            signals: self.signals,
            scheduler: self.scheduler,
            pruning: self.pruning,
            mode: self.schedule_mode,
            target_count: self.group_size,
            max_length: self.max_length,
            seed: self.seed,
        }
    }

    pub fn update_config(&self) -> UpdateConfig {
        UpdateConfig {
            clip: self.clip,
            shaping: self.shaping,
            advantage_mode: self.advantage_mode,
            adv_eps: self.shaping.eps,
        }
    }

    /// Every key with its value, one per line, in a fixed order.
    pub fn to_cfg_string(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key}={}", self.get(key).expect("listed key"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_tables() {
        let c = EchoConfig::default();
        assert_eq!(c.scheduler.entropy_high, 3.5);
        assert_eq!(c.scheduler.entropy_low, 1.0);
        assert_eq!(c.scheduler.reference_confidence, 1.2);
        assert_eq!((c.scheduler.min_branches, c.scheduler.max_branches), (1, 4));
        assert_eq!(c.pruning.prune_threshold, 0.4);
        assert_eq!(c.signals.tail_window, 8);
        assert_eq!(c.signals.entropy_window, 4);
        assert_eq!(c.pruning.tail_threshold, 1.0);
        assert_eq!((c.pruning.spike_patience, c.pruning.tail_patience), (3, 3));
        assert_eq!(c.pruning.spike_threshold, 0.5);
        assert_eq!((c.group_size, c.train_size), (64, 32));
        assert_eq!(c.optimizer.kl_coef, 0.001);
        assert_eq!(c.optimizer.train_batch, 5);
        assert_eq!(c.clip.tail_window, 16);
        c.validate().unwrap();
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = EchoConfig::default();
        c.apply_overrides(&["schedule_mode=entropy_only".into(), "seed=7".into(), "lr=0.125".into()])
            .unwrap();
        let text = c.to_cfg_string();
        assert!(text.contains("schedule_mode=entropy_only\n"));
        let back = EchoConfig::parse_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(text.lines().count(), KEYS.len());
    }

    #[test]
    fn unknown_keys_are_all_reported() {
        let err = EchoError::to_string(
            &EchoConfig::parse_str("tau_prune=0.4\ntau_prnue=0.3\nBmax=4 # typo\n").unwrap_err(),
        );
        assert!(err.contains("tau_prnue") && err.contains("Bmax"), "{err}");
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = EchoConfig::parse_str("# header\n\nG = 8 # rollouts\nM=4\n").unwrap();
        assert_eq!((c.group_size, c.train_size), (8, 4));
    }

    #[test]
    fn cross_field_checks() {
        assert!(EchoConfig::parse_str("G=4\nM=8\n").is_err());
        assert!(EchoConfig::parse_str("mini_batch=2\n").is_err());
        assert!(EchoConfig::parse_str("H_low=3\nH_high=2\n").is_err());
        let mut c = EchoConfig::default();
        assert!(c.apply_overrides(&["nonsense".into()]).is_err());
        assert!(c.set("answer_rule", "after_separator:14").is_ok());
        assert_eq!(c.answer_rule, AnswerRule::AfterSeparator(14));
    }
}
