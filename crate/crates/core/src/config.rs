//! Run configuration. The JSON config file mirrors these field names; any
//! field left out takes its default.

use serde::{Deserialize, Serialize};

use crate::error::{DroError, Result};
use crate::r3::Variant;
use crate::tasks::{TaskKind, TaskKnobs};
use crate::vocab::TokenId;

/// Which snapshot scores the reflection reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardPolicyMode {
    /// The frozen initial policy.
    StaticRef,
    /// The live actor.
    Synced,
    /// A copy of the actor refreshed every `lag_steps` steps.
    Lagged { lag_steps: usize },
}

/// Synthetic pool the trainer generates when no task file is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    pub kind: TaskKind,
    pub size: usize,
    pub knobs: TaskKnobs,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            kind: TaskKind::CopyEdit,
            size: 256,
            knobs: TaskKnobs::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Outputs sampled per prompt.
    pub group_size: usize,
    /// Tasks per step.
    pub batch_size: usize,
    pub total_steps: usize,
    /// Stop after this many passes over the active set, if set.
    pub max_epochs: Option<usize>,
    pub learning_rate: f64,

    pub epsilon_low: f64,
    pub epsilon_high: f64,
    pub beta_kl: f64,
    /// Divide each output's token sum by its length.
    pub length_normalize_loss: bool,

    pub variant: Variant,
    pub reward_policy_mode: RewardPolicyMode,
    pub beta_len: f64,
    /// Weight of the reflection reward against the length reward.
    pub lambda_mix: f64,
    /// Standardize the reflection reward within the group before mixing.
    pub standardize_before_mix: bool,
    pub gamma: f64,
    pub quantile: f64,
    pub sigma_floor: f64,
    pub epsilon_std: f64,
    pub masked_trace: Vec<TokenId>,

    pub temperature: f64,
    pub top_p: f64,
    pub max_len: usize,

    pub filter_enabled: bool,
    pub filter_interval: usize,
    /// Traces sampled per task in a filter round.
    pub filter_traces: usize,
    pub rho: f64,
    pub rank_threshold_k: f64,
    pub variation_cut: f64,
    pub carry_forward: f64,

    /// Strength of the copying prior added to the initial policy (0 disables it).
    pub copy_prior: f64,
    pub pool: PoolConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            group_size: 16,
            batch_size: 16,
            total_steps: 200,
            max_epochs: None,
            learning_rate: 0.05,
            epsilon_low: 0.2,
            epsilon_high: 0.2,
            beta_kl: 0.001,
            length_normalize_loss: false,
            variant: Variant::Masked,
            reward_policy_mode: RewardPolicyMode::Synced,
            beta_len: 0.5,
            lambda_mix: 0.9,
            standardize_before_mix: true,
            gamma: 0.5,
            quantile: 0.1,
            sigma_floor: 0.01,
            epsilon_std: 1e-8,
            masked_trace: Vec::new(),
            temperature: 1.0,
            top_p: 0.95,
            max_len: 64,
            filter_enabled: true,
            filter_interval: 8,
            filter_traces: 16,
            rho: 0.1,
            rank_threshold_k: 5.0,
            variation_cut: 0.25,
            carry_forward: 0.10,
            copy_prior: 6.0,
            pool: PoolConfig::default(),
            seed: 0,
        }
    }
}

fn require(ok: bool, what: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(DroError::Config(what()))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        require(self.group_size >= 2, || format!("group_size {} < 2", self.group_size))?;
        require(self.batch_size >= 1, || "batch_size must be >= 1".into())?;
        require(self.epsilon_low > 0.0 && self.epsilon_high > 0.0, || {
            "clip bounds must be positive".into()
        })?;
        require((0.0..=1.0).contains(&self.lambda_mix), || {
            format!("lambda_mix {} outside [0, 1]", self.lambda_mix)
        })?;
        require(self.beta_kl >= 0.0, || "beta_kl must be >= 0".into())?;
        require(self.gamma > 0.0, || "gamma must be > 0".into())?;
        require(self.quantile > 0.0 && self.quantile <= 1.0, || {
            "quantile must be in (0, 1]".into()
        })?;
        require(self.sigma_floor >= 0.0, || "sigma_floor must be >= 0".into())?;
        require(self.epsilon_std > 0.0, || "epsilon_std must be > 0".into())?;
        require(self.temperature > 0.0, || "temperature must be > 0".into())?;
        require(self.top_p > 0.0 && self.top_p <= 1.0, || "top_p must be in (0, 1]".into())?;
        require(self.max_len >= 1, || "max_len must be >= 1".into())?;
        require(self.filter_interval >= 1, || "filter_interval must be >= 1".into())?;
        require(self.filter_traces >= 2, || "filter_traces must be >= 2".into())?;
        require(self.rho > 0.0 && self.rho <= 1.0, || "rho must be in (0, 1]".into())?;
        require(self.rank_threshold_k > 0.0, || "rank_threshold_k must be > 0".into())?;
        require((0.0..1.0).contains(&self.variation_cut), || {
            "variation_cut must be in [0, 1)".into()
        })?;
        require((0.0..1.0).contains(&self.carry_forward), || {
            "carry_forward must be in [0, 1)".into()
        })?;
        if let RewardPolicyMode::Lagged { lag_steps } = self.reward_policy_mode {
            require(lag_steps >= 1, || "lag_steps must be >= 1".into())?;
        }
        self.pool.knobs.validate()?;
        require(self.pool.size >= 1, || "pool size must be >= 1".into())?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: TrainConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn sampling(&self) -> crate::policy::SamplingParams {
        crate::policy::SamplingParams {
            temperature: self.temperature,
            top_p: self.top_p,
            max_len: self.max_len,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        let json = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(TrainConfig::from_json(&json).unwrap(), c);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c = TrainConfig::from_json(r#"{"group_size": 8, "reward_policy_mode": {"lagged": {"lag_steps": 3}}}"#)
            .unwrap();
        assert_eq!(c.group_size, 8);
        assert_eq!(c.reward_policy_mode, RewardPolicyMode::Lagged { lag_steps: 3 });
        assert_eq!(c.beta_kl, 0.001);
        let c = TrainConfig::from_json(r#"{"reward_policy_mode": "static_ref", "variant": "propagated"}"#).unwrap();
        assert_eq!(c.reward_policy_mode, RewardPolicyMode::StaticRef);
        assert_eq!(c.variant, Variant::Propagated);
    }

    #[test]
    fn rejects_unknown_fields_and_bad_values() {
        assert!(TrainConfig::from_json(r#"{"group_sise": 8}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"group_size": 1}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"lambda_mix": 1.5}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"epsilon_low": 0.0}"#).is_err());
    }
}
