//! Central finite-difference check of the analytic objective gradient on tiny
//! random instances.

use rand::Rng;

use crate::config::TrainConfig;
use crate::error::Result;
use crate::grpo::{grpo_objective, grpo_objective_value, GroupSample};
use crate::policy::{PolicySnapshot, Role, Rollout};
use crate::r3::{RewardVector, Variant};
use crate::rng;
use crate::sequence::{split_output, Prompt, ReferenceOutcome};
use crate::vocab::{TokenId, Vocabulary};

pub const FD_STEP: f64 = 1e-5;

/// A random group on a five-token vocabulary: two outputs of at most four
/// tokens, old and reference log-probabilities that differ from the policy,
/// and a KL weight large enough to matter.
pub fn tiny_instance(seed: u64) -> Result<(PolicySnapshot, GroupSample, TrainConfig)> {
    let vocab = Vocabulary::tiny(1);
    let v = vocab.len();
    let mut rng = rng::stream(seed, "gradcheck", &[]);
    let n = PolicySnapshot::param_count(&vocab);
    let params: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let reference: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let policy = PolicySnapshot::from_params(&vocab, params, Role::Actor, 0)?;
    let reference = PolicySnapshot::from_params(&vocab, reference, Role::Reference, 0)?;
    let prompt = Prompt::new(vec![TokenId(0)], &vocab)?;
    let non_eos: Vec<TokenId> = (0..v)
        .map(TokenId::from)
        .filter(|&t| t != vocab.eos())
        .collect();

    let rollouts: Vec<Rollout> = (0..2)
        .map(|_| {
            let len = rng.gen_range(1..=4);
            let mut tokens: Vec<TokenId> = (0..len - 1)
                .map(|_| non_eos[rng.gen_range(0..non_eos.len())])
                .collect();
            tokens.push(vocab.eos());
            Rollout {
                tokens,
                truncated: false,
            }
        })
        .collect();
    let outputs = rollouts
        .iter()
        .map(|r| split_output(&r.tokens, r.truncated, &vocab))
        .collect();
    let old_logp = rollouts
        .iter()
        .map(|r| {
            policy
                .sequence_logps(prompt.tokens(), &r.tokens)
                .into_iter()
                .map(|l| l + rng.gen_range(-0.3..0.3))
                .collect()
        })
        .collect();
    let ref_logp = rollouts
        .iter()
        .map(|r| reference.sequence_logps(prompt.tokens(), &r.tokens))
        .collect();
    let a = rng.gen_range(0.2..1.5);
    let group = GroupSample {
        prompt,
        reference: ReferenceOutcome::new(vec![TokenId(0)], &vocab)?,
        rollouts,
        outputs,
        old_logp,
        ref_logp,
        rewards: RewardVector {
            r: vec![a, -a],
            variant: Variant::Vanilla,
        },
        advantages: vec![1.0, -1.0],
    };
    let config = TrainConfig {
        group_size: 2,
        beta_kl: 0.1,
        epsilon_low: 0.2,
        epsilon_high: 0.28,
        length_normalize_loss: seed % 2 == 1,
        ..TrainConfig::default()
    };
    Ok((policy, group, config))
}

/// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-7)` over all
/// parameters.
pub fn check_instance(seed: u64) -> Result<f64> {
    let (policy, group, config) = tiny_instance(seed)?;
    let (_, grad) = grpo_objective(&group, &policy, &config)?;
    let base = policy.params().to_vec();
    let vocab = policy.vocab().clone();
    let mut worst: f64 = 0.0;
    for k in 0..base.len() {
        let eval = |delta: f64| -> Result<f64> {
            let mut p = base.clone();
            p[k] += delta;
            let snap = PolicySnapshot::from_params(&vocab, p, Role::Actor, 0)?;
            Ok(grpo_objective_value(&group, &snap, &config)?.objective)
        };
        let numeric = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP);
        let analytic = grad.0[k];
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    pub instances: usize,
    pub max_rel_error: f64,
    pub worst_seed: u64,
}

/// Check `instances` seeds derived from `seed`.
pub fn run_gradcheck(instances: usize, seed: u64) -> Result<GradcheckReport> {
    let mut report = GradcheckReport {
        instances,
        max_rel_error: 0.0,
        worst_seed: seed,
    };
    for i in 0..instances {
        let s = rng::stream_seed(seed, "instance", &[i as u64]);
        let err = check_instance(s)?;
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_seed = s;
        }
    }
    Ok(report)
}
