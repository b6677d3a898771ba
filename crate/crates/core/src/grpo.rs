//! Group-relative advantages, the clipped surrogate with a KL penalty, the
//! outcome length reward and reward mixing.
//!
//! The objective for one group of `G` outputs is
//!
//! ```text
//! J = 1/G Σ_i [ Σ_t m_i min(ρ_it Â_i, clip(ρ_it, 1 − ε_lo, 1 + ε_hi) Â_i) / n_i ] − β_kl · KL
//! ```
//!
//! where `ρ_it` is the new/old probability ratio of token `t`, `m_i` masks
//! truncated outputs, `n_i` is `|o_i|` when length normalization is on and 1
//! otherwise, and `KL` is the mean over unmasked tokens of the per-token
//! estimator `e^{x} − x − 1` with `x = log π_ref − log π_θ`.

use crate::config::TrainConfig;
use crate::error::{DroError, Result};
use crate::policy::{log_softmax_at, softmax_in_place, Gradient, PolicySnapshot, Rollout};
use crate::r3::RewardVector;
use crate::sequence::{Prompt, ReferenceOutcome, SampledOutput};

/// One prompt with its sampled outputs and everything the update needs.
#[derive(Debug, Clone)]
pub struct GroupSample {
    pub prompt: Prompt,
    pub reference: ReferenceOutcome,
    pub rollouts: Vec<Rollout>,
    pub outputs: Vec<SampledOutput>,
    /// Per-token log-probabilities under the sampling policy.
    pub old_logp: Vec<Vec<f64>>,
    /// Per-token log-probabilities under the reference policy.
    pub ref_logp: Vec<Vec<f64>>,
    pub rewards: RewardVector,
    pub advantages: Vec<f64>,
}

impl GroupSample {
    pub fn group_size(&self) -> usize {
        self.rollouts.len()
    }
}

/// Scalars reported by [`grpo_objective`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveReport {
    pub objective: f64,
    pub surrogate: f64,
    pub kl: f64,
    /// Fraction of optimized tokens where the clipped branch is selected.
    pub clip_frac: f64,
    pub tokens: usize,
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `Â_i = (r_i − mean) / std` with population std; all zero when `std < epsilon_std`.
pub fn group_advantage(rewards: &[f64], epsilon_std: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(DroError::OutOfRange(format!(
            "group advantage needs at least two rewards, got {}",
            rewards.len()
        )));
    }
    let (mean, std) = mean_and_std(rewards);
    if !(std >= epsilon_std) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let scale = std.max(epsilon_std);
    Ok(rewards.iter().map(|r| (r - mean) / scale).collect())
}

/// `1 − β · ||y| − |ŷ|| / |y|`, unclamped.
pub fn length_penalty(outcome_len: usize, reference_len: usize, beta_len: f64) -> Result<f64> {
    if reference_len == 0 {
        return Err(DroError::OutOfRange("reference length must be >= 1".into()));
    }
    let gap = outcome_len.abs_diff(reference_len) as f64;
    Ok(1.0 - beta_len * gap / reference_len as f64)
}

fn standardize(values: &[f64]) -> Vec<f64> {
    if values.len() < 2 {
        return vec![0.0; values.len()];
    }
    let (mean, std) = mean_and_std(values);
    let scale = mean.abs().max(1.0) * 1e-12;
    if std <= scale {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / std).collect()
}

/// `r_i = λ z(r3)_i + (1 − λ) len_i`; with `standardize_r3 = false` the raw
/// reflection reward is mixed instead of its within-group z-score.
pub fn mix_rewards(
    r3: &RewardVector,
    len_pen: &[f64],
    lambda_mix: f64,
    standardize_r3: bool,
) -> Result<RewardVector> {
    if r3.r.len() != len_pen.len() {
        return Err(DroError::DimensionMismatch {
            what: "length penalties",
            expected: r3.r.len(),
            got: len_pen.len(),
        });
    }
    if !(0.0..=1.0).contains(&lambda_mix) {
        return Err(DroError::OutOfRange(format!("lambda_mix {lambda_mix} outside [0, 1]")));
    }
    let z = if standardize_r3 {
        standardize(&r3.r)
    } else {
        r3.r.clone()
    };
    let r = z
        .iter()
        .zip(len_pen)
        .map(|(z, l)| lambda_mix * z + (1.0 - lambda_mix) * l)
        .collect();
    Ok(RewardVector {
        r,
        variant: r3.variant,
    })
}

/// `exp(new − old)` per token.
pub fn token_ratio_terms(new_logp: &[f64], old_logp: &[f64]) -> Result<Vec<f64>> {
    if new_logp.len() != old_logp.len() {
        return Err(DroError::DimensionMismatch {
            what: "old log-probabilities",
            expected: new_logp.len(),
            got: old_logp.len(),
        });
    }
    Ok(new_logp.iter().zip(old_logp).map(|(n, o)| (n - o).exp()).collect())
}

#[inline]
fn surrogate_term(ratio: f64, advantage: f64, epsilon_low: f64, epsilon_high: f64) -> (f64, bool) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - epsilon_low, 1.0 + epsilon_high) * advantage;
    if unclipped <= clipped {
        (unclipped, false)
    } else {
        (clipped, true)
    }
}

/// `min(ρ Â, clip(ρ, 1 − ε_lo, 1 + ε_hi) Â)` per token.
pub fn clipped_surrogate(ratios: &[f64], advantage: f64, epsilon_low: f64, epsilon_high: f64) -> Vec<f64> {
    ratios
        .iter()
        .map(|&r| surrogate_term(r, advantage, epsilon_low, epsilon_high).0)
        .collect()
}

#[inline]
fn kl_estimator(policy_logp: f64, ref_logp: f64) -> f64 {
    let x = ref_logp - policy_logp;
    x.exp_m1() - x
}

/// Mean over tokens of `e^{x} − x − 1`, `x = ref − policy`.
pub fn kl_term(policy_logp: &[f64], ref_logp: &[f64]) -> Result<f64> {
    if policy_logp.len() != ref_logp.len() {
        return Err(DroError::DimensionMismatch {
            what: "reference log-probabilities",
            expected: policy_logp.len(),
            got: ref_logp.len(),
        });
    }
    if policy_logp.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = policy_logp
        .iter()
        .zip(ref_logp)
        .map(|(&p, &r)| kl_estimator(p, r))
        .sum();
    Ok(total / policy_logp.len() as f64)
}

fn check_group(group: &GroupSample) -> Result<()> {
    let g = group.group_size();
    for (what, len) in [
        ("advantages", group.advantages.len()),
        ("old log-probabilities", group.old_logp.len()),
        ("reference log-probabilities", group.ref_logp.len()),
    ] {
        if len != g {
            return Err(DroError::DimensionMismatch { what, expected: g, got: len });
        }
    }
    for (i, rollout) in group.rollouts.iter().enumerate() {
        let n = rollout.tokens.len();
        if group.old_logp[i].len() != n || group.ref_logp[i].len() != n {
            return Err(DroError::DimensionMismatch {
                what: "per-token log-probabilities",
                expected: n,
                got: group.old_logp[i].len().min(group.ref_logp[i].len()),
            });
        }
    }
    Ok(())
}

/// Objective value only; no gradient work.
pub fn grpo_objective_value(group: &GroupSample, policy: &PolicySnapshot, config: &TrainConfig) -> Result<ObjectiveReport> {
    evaluate(group, policy, config, None)
}

/// Objective and its exact gradient with respect to every policy logit.
pub fn grpo_objective(
    group: &GroupSample,
    policy: &PolicySnapshot,
    config: &TrainConfig,
) -> Result<(ObjectiveReport, Gradient)> {
    let mut grad = Gradient::zeros(policy.params().len());
    let report = evaluate(group, policy, config, Some(&mut grad))?;
    Ok((report, grad))
}

/// Like [`grpo_objective`] but adds the gradient into a caller-owned buffer.
pub fn accumulate_grpo(
    group: &GroupSample,
    policy: &PolicySnapshot,
    config: &TrainConfig,
    grad: &mut Gradient,
) -> Result<ObjectiveReport> {
    if grad.0.len() != policy.params().len() {
        return Err(DroError::DimensionMismatch {
            what: "gradient buffer",
            expected: policy.params().len(),
            got: grad.0.len(),
        });
    }
    evaluate(group, policy, config, Some(grad))
}

fn evaluate(
    group: &GroupSample,
    policy: &PolicySnapshot,
    config: &TrainConfig,
    mut grad: Option<&mut Gradient>,
) -> Result<ObjectiveReport> {
    check_group(group)?;
    let g = group.group_size() as f64;
    let tokens: usize = group
        .rollouts
        .iter()
        .filter(|r| !r.truncated)
        .map(|r| r.tokens.len())
        .sum();
    if tokens == 0 {
        return Err(DroError::NoOptimizableTokens);
    }
    let n_tok = tokens as f64;
    let prompt = group.prompt.tokens();
    let v = policy.vocab().len();
    let mut surrogate = 0.0;
    let mut kl = 0.0;
    let mut clipped = 0usize;
    let mut probs = vec![0.0; v];

    for (i, rollout) in group.rollouts.iter().enumerate() {
        if rollout.truncated {
            continue;
        }
        let advantage = group.advantages[i];
        let norm = if config.length_normalize_loss {
            rollout.tokens.len() as f64
        } else {
            1.0
        };
        for (t, &token) in rollout.tokens.iter().enumerate() {
            let row = policy.row_for(prompt, &rollout.tokens[..t]);
            let logits = &policy.params()[row..row + v];
            let new_logp = log_softmax_at(logits, token.index());
            let ratio = (new_logp - group.old_logp[i][t]).exp();
            let (term, is_clipped) = surrogate_term(ratio, advantage, config.epsilon_low, config.epsilon_high);
            surrogate += term / norm / g;
            clipped += is_clipped as usize;
            let ref_logp = group.ref_logp[i][t];
            kl += kl_estimator(new_logp, ref_logp) / n_tok;

            if let Some(grad) = grad.as_deref_mut() {
                let d_surrogate = if is_clipped { 0.0 } else { ratio * advantage };
                let d_kl = 1.0 - (ref_logp - new_logp).exp();
                let coef = d_surrogate / norm / g - config.beta_kl * d_kl / n_tok;
                if coef == 0.0 {
                    continue;
                }
                probs.copy_from_slice(logits);
                softmax_in_place(&mut probs);
                let slot = &mut grad.0[row..row + v];
                for (k, p) in probs.iter().enumerate() {
                    slot[k] -= coef * p;
                }
                slot[token.index()] += coef;
            }
        }
    }
    Ok(ObjectiveReport {
        objective: surrogate - config.beta_kl * kl,
        surrogate,
        kl,
        clip_frac: clipped as f64 / n_tok,
        tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantage(&[3.0, 3.0, 3.0], 1e-8).unwrap(), vec![0.0; 3]);
        assert_eq!(group_advantage(&[0.0, 1.0], 1e-8).unwrap(), vec![-1.0, 1.0]);
        assert!(group_advantage(&[1.0], 1e-8).is_err());
    }

    #[test]
    fn length_penalty_examples() {
        assert_eq!(length_penalty(7, 7, 0.9).unwrap(), 1.0);
        assert_eq!(length_penalty(3, 7, 0.0).unwrap(), 1.0);
        assert_eq!(length_penalty(50, 100, 1.0).unwrap(), 0.5);
        assert_eq!(length_penalty(300, 100, 1.0).unwrap(), -1.0);
        assert!(length_penalty(1, 0, 1.0).is_err());
    }

    #[test]
    fn mix_examples() {
        let r3 = RewardVector {
            r: vec![0.0, 0.0],
            variant: crate::r3::Variant::Masked,
        };
        assert_eq!(mix_rewards(&r3, &[1.0, 0.5], 0.5, true).unwrap().r, vec![0.5, 0.25]);
        let r3 = RewardVector {
            r: vec![-3.0, 2.0, 0.5],
            variant: crate::r3::Variant::Weighted,
        };
        let only_len = mix_rewards(&r3, &[0.1, 0.2, 0.3], 0.0, true).unwrap();
        assert_eq!(only_len.r, vec![0.1, 0.2, 0.3]);
        let only_r3 = mix_rewards(&r3, &[0.1, 0.2, 0.3], 1.0, true).unwrap();
        assert_eq!(crate::r3::ranking(&only_r3.r), crate::r3::ranking(&r3.r));
        assert!(mix_rewards(&r3, &[0.1], 0.5, true).is_err());
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(token_ratio_terms(&[-1.0, -2.0], &[-1.0, -2.0]).unwrap(), vec![1.0, 1.0]);
        let r = token_ratio_terms(&[-1.0 + 2f64.ln()], &[-1.0]).unwrap();
        assert!((r[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clipped_surrogate(&[1.0], 0.7, 0.2, 0.2), vec![0.7]);
        assert_eq!(clipped_surrogate(&[1.0 + 0.2 + 0.5], 2.0, 0.2, 0.2), vec![(1.0 + 0.2) * 2.0]);
        assert_eq!(clipped_surrogate(&[0.5], -1.0, 0.2, 0.2), vec![-0.8]);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_term(&[-1.0, -2.0], &[-1.0, -2.0]).unwrap(), 0.0);
        let k = kl_term(&[-2.0], &[-2.0 + 2f64.ln()]).unwrap();
        assert!((k - (2.0 - 2f64.ln() - 1.0)).abs() < 1e-15);
        assert!((k - 0.306_852_819_440_054_7).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn advantages_are_standardized(r in proptest::collection::vec(-50.0f64..50.0, 2..20)) {
            let a = group_advantage(&r, 1e-8).unwrap();
            if mean_and_std(&r).1 > 1e-6 {
                let (am, asd) = mean_and_std(&a);
                prop_assert!(am.abs() < 1e-9);
                prop_assert!((asd - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn advantages_are_affine_invariant(r in proptest::collection::vec(-5.0f64..5.0, 2..10),
                                           scale in 0.1f64..10.0, shift in -10.0f64..10.0) {
            let a = group_advantage(&r, 1e-8).unwrap();
            let moved: Vec<f64> = r.iter().map(|x| scale * x + shift).collect();
            let b = group_advantage(&moved, 1e-8).unwrap();
            if mean_and_std(&r).1 > 1e-3 {
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() < 1e-8);
                }
            }
        }

        #[test]
        fn clip_is_monotone(adv in 0.01f64..5.0, r1 in 0.0f64..3.0, r2 in 0.0f64..3.0) {
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            let t = |r: f64, a: f64| clipped_surrogate(&[r], a, 0.2, 0.28)[0];
            prop_assert!(t(lo, adv) <= t(hi, adv));
            if lo > 1.28 {
                prop_assert_eq!(t(lo, adv), t(hi, adv));
            }
            // mirrored for negative advantages below 1 - eps_low
            prop_assert!(t(lo, -adv) >= t(hi, -adv));
            if hi < 0.8 {
                prop_assert_eq!(t(lo, -adv), t(hi, -adv));
            }
        }

        #[test]
        fn kl_terms_are_nonnegative(p in proptest::collection::vec(-10.0f64..0.0, 1..20),
                                    shift in proptest::collection::vec(-3.0f64..3.0, 20)) {
            let r: Vec<f64> = p.iter().zip(&shift).map(|(a, b)| a + b).collect();
            for (x, y) in p.iter().zip(&r) {
                let k = kl_estimator(*x, *y);
                prop_assert!(k >= 0.0);
                if x == y {
                    prop_assert_eq!(k, 0.0);
                }
            }
        }

        #[test]
        fn ratios_match_elementwise(a in proptest::collection::vec(-6.0f64..0.0, 1..30),
                                    d in proptest::collection::vec(-2.0f64..2.0, 30)) {
            let b: Vec<f64> = a.iter().zip(&d).map(|(x, y)| x + y).collect();
            let r = token_ratio_terms(&b, &a).unwrap();
            for i in 0..a.len() {
                let want = (b[i] - a[i]).exp();
                prop_assert!((r[i] - want).abs() <= 1e-12 * want);
            }
        }
    }
}
