use proptest::prelude::*;

use echo_core::optimizer::{
    adaptive_epsilon, clip_gate, clipped_surrogate, group_advantage, surrogate_grad_factor,
    AdvantageMode, ClipConfig, ShapingConfig, UpdateBatch, UpdateConfig,
};
use echo_core::policy::{apply_update, BranchStatus, PolicyGradient, Trajectory};
use echo_core::signals::{SignalTrace, TraceSequences};
use echo_core::toy::random_world;
use echo_core::rewards::AnswerRule;

fn trajectory(entropy: Vec<f64>, confidence: Vec<f64>) -> Trajectory {
    let n = entropy.len();
    let seqs = TraceSequences {
        tail_conf: confidence.clone(),
        grouped_conf: confidence.clone(),
        mean_entropy: entropy.clone(),
        increment: vec![0.0; n],
        entropy,
        confidence,
    };
    Trajectory {
        prompt: vec![0],
        tokens: vec![1; n],
        policy_logprobs: vec![-0.5; n],
        ref_logprobs: vec![-0.5; n],
        trace: SignalTrace::from_sequences(seqs, 0.5).unwrap(),
        status: BranchStatus::Complete,
        leaf_node: 0,
    }
}

/// Independent hybrid advantage: pooled two-pass whitening written out
/// with explicit loops over the flattened batch.
fn oracle_hybrid(
    entropy: &[Vec<f64>],
    confidence: &[Vec<f64>],
    rewards: &[f64],
    shaping: &ShapingConfig,
    adv_eps: f64,
) -> Vec<Vec<f64>> {
    let g = rewards.len() as f64;
    let rm = rewards.iter().sum::<f64>() / g;
    let rs = (rewards.iter().map(|r| (r - rm) * (r - rm)).sum::<f64>() / g).sqrt();

    let flat_h: Vec<f64> = entropy.iter().flatten().copied().collect();
    let flat_u: Vec<f64> = confidence.iter().flatten().map(|c| 1.0 - c).collect();
    let stats = |xs: &[f64]| {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let s = (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
        (m, s)
    };
    let (hm, hs) = stats(&flat_h);
    let (um, us) = stats(&flat_u);

    let mut out = Vec::new();
    for i in 0..rewards.len() {
        let a = (rewards[i] - rm) / (rs + adv_eps);
        let mut row = Vec::new();
        for t in 0..entropy[i].len() {
            let h = (entropy[i][t] - hm) / (hs + shaping.eps);
            let u = (1.0 - confidence[i][t] - um) / (us + shaping.eps);
            let s = shaping.alpha * h + shaping.beta * u;
            row.push(a * (1.0 + shaping.scale * s));
        }
        out.push(row);
    }
    out
}

fn ragged(max_len: usize) -> impl Strategy<Value = Vec<(Vec<f64>, Vec<f64>, f64)>> {
    prop::collection::vec(
        (1..=max_len).prop_flat_map(|n| {
            (
                prop::collection::vec(0.0f64..3.0, n),
                prop::collection::vec(0.0f64..1.0, n),
                prop_oneof![Just(0.0), Just(1.0)],
            )
        }),
        2..7,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn hybrid_advantages_match_brute_force(rows in ragged(9), scale in 0.0f64..1.0) {
        let entropy: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
        let confidence: Vec<Vec<f64>> = rows.iter().map(|r| r.1.clone()).collect();
        let rewards: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let trajs: Vec<Trajectory> = entropy
            .iter()
            .zip(&confidence)
            .map(|(h, c)| trajectory(h.clone(), c.clone()))
            .collect();
        let cfg = UpdateConfig {
            shaping: ShapingConfig { scale, ..ShapingConfig::default() },
            ..UpdateConfig::default()
        };
        let batch = UpdateBatch::from_trajectories(&trajs, &rewards, &cfg).unwrap();
        let want = oracle_hybrid(&entropy, &confidence, &rewards, &cfg.shaping, cfg.adv_eps);
        for (got_row, want_row) in batch.shaped_advantages.iter().zip(&want) {
            prop_assert_eq!(got_row.len(), want_row.len());
            for (g, w) in got_row.iter().zip(want_row) {
                prop_assert!((g - w).abs() <= 1e-9 * (1.0 + w.abs()), "{} vs {}", g, w);
            }
        }
        // group mode broadcasts the group advantage unchanged
        let group_cfg = UpdateConfig { advantage_mode: AdvantageMode::Group, ..cfg };
        let flat = UpdateBatch::from_trajectories(&trajs, &rewards, &group_cfg).unwrap();
        for (row, a) in flat.shaped_advantages.iter().zip(&flat.group_advantages) {
            prop_assert!(row.iter().all(|x| x == a));
        }
    }

    #[test]
    fn clip_radius_follows_tail_confidence(rows in ragged(20)) {
        let trajs: Vec<Trajectory> = rows
            .iter()
            .map(|(h, c, _)| trajectory(h.clone(), c.clone()))
            .collect();
        let rewards: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let cfg = UpdateConfig::default();
        let batch = UpdateBatch::from_trajectories(&trajs, &rewards, &cfg).unwrap();
        for ((_, c, _), eps) in rows.iter().zip(&batch.clip_radii) {
            let w = cfg.clip.tail_window.min(c.len());
            let tail = c[c.len() - w..].iter().sum::<f64>() / w as f64;
            let z = cfg.clip.kappa * (1.0 - tail);
            let want = cfg.clip.eps_min + (cfg.clip.eps_max - cfg.clip.eps_min) / (1.0 + (-z).exp());
            prop_assert!((eps - want).abs() < 1e-12);
        }
    }

    #[test]
    fn group_advantage_is_centred(rewards in prop::collection::vec(0.0f64..1.0, 1..40)) {
        let adv = group_advantage(&rewards, 1e-6);
        let mean = adv.iter().sum::<f64>() / adv.len() as f64;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!(adv.iter().all(|a| a.abs() <= (rewards.len() as f64).sqrt() + 1e-9));
    }

    #[test]
    fn equal_rewards_give_zero_advantage(r in 0.0f64..1.0, n in 1usize..30) {
        prop_assert!(group_advantage(&vec![r; n], 1e-6).iter().all(|a| *a == 0.0));
    }

    #[test]
    fn epsilon_is_bounded_and_nonincreasing(a in 0.0f64..1.0, b in 0.0f64..1.0, kappa in 0.0f64..20.0) {
        let cfg = ClipConfig { kappa, ..ClipConfig::default() };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let e_lo = adaptive_epsilon(lo, &cfg);
        let e_hi = adaptive_epsilon(hi, &cfg);
        prop_assert!(e_lo >= cfg.eps_min && e_lo <= cfg.eps_max);
        prop_assert!(e_hi >= cfg.eps_min && e_hi <= cfg.eps_max);
        prop_assert!(e_hi <= e_lo + 1e-15);
    }

    #[test]
    fn surrogate_never_exceeds_unclipped(adv in -3.0f64..3.0, ratio in 0.2f64..3.0, eps in 0.01f64..0.5) {
        prop_assert!(clipped_surrogate(adv, ratio, eps) <= ratio * adv + 1e-15);
        let factor = surrogate_grad_factor(adv, ratio, eps);
        if clip_gate(adv, ratio, eps) == 0.0 {
            prop_assert_eq!(factor, 0.0);
        } else {
            prop_assert_eq!(factor, ratio * adv);
        }
    }

    #[test]
    fn zero_gradient_update_is_identity(seed in 0u64..500, lr in 0.0f64..1.0) {
        let world = random_world(6, 1, 1, 1.0, seed, 6, &AnswerRule::LastToken).unwrap();
        let zero = PolicyGradient::zeros_like(&world.policy);
        prop_assert_eq!(apply_update(&world.policy, &zero, lr).unwrap(), world.policy);
    }
}

#[test]
fn mismatched_rewards_are_rejected() {
    let t = trajectory(vec![1.0, 2.0], vec![0.5, 0.5]);
    assert!(UpdateBatch::from_trajectories(&[t], &[1.0, 0.0], &UpdateConfig::default()).is_err());
}

#[test]
fn non_finite_gradient_is_rejected() {
    let world = random_world(6, 1, 1, 1.0, 0, 6, &AnswerRule::LastToken).unwrap();
    let mut grad = PolicyGradient::zeros_like(&world.policy);
    let ctx = world.policy.rows().next().unwrap().0.clone();
    grad.row_mut(&ctx).unwrap()[0] = f64::NAN;
    assert!(apply_update(&world.policy, &grad, 0.05).is_err());
}
