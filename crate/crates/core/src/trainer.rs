//! The training loop: sample groups from the actor, score the reference under
//! the reward policy, mix rewards, take one GRPO step per batch, and re-filter
//! the task pool on a fixed schedule.

use std::collections::{HashMap, HashSet, VecDeque};
use std::ops::ControlFlow;
use std::path::Path;

use log::{debug, info};
use rand::seq::index::sample;
use rand::seq::SliceRandom;

use crate::certainty::{build_certainty_matrix, BaselineCache};
use crate::config::{RewardPolicyMode, TrainConfig};
use crate::error::{DroError, Result};
use crate::filtering::{filter_round, TaskPoolEntry, TaskStatus};
use crate::grpo::{accumulate_grpo, group_advantage, length_penalty, mix_rewards, GroupSample, ObjectiveReport};
use crate::policy::{init_policy, Gradient, PolicySnapshot, Role};
use crate::r3::{reward, ReflectionStats, Variant};
use crate::records::{write_json, write_jsonl, Checkpoint, FilterReportRecord, StepMetrics};
use crate::rng;
use crate::sequence::{split_output, MaskedTrace};
use crate::tasks::{generate_pool, instruction_tokens, Task};
use crate::vocab::Vocabulary;

/// The initial policy: small random logits plus the copying prior.
pub fn base_policy(vocab: &Vocabulary, config: &TrainConfig) -> PolicySnapshot {
    init_policy(vocab, config.seed)
        .with_copy_prior(config.copy_prior, &instruction_tokens(vocab))
        .with_role(Role::Reference)
}

/// `count` tasks of the configured kind from a stream disjoint from the
/// training pool, with ids prefixed `ho`.
pub fn held_out_pool(vocab: &Vocabulary, config: &TrainConfig, count: usize) -> Result<Vec<Task>> {
    Ok(generate_pool(
        config.pool.kind,
        count,
        rng::stream_seed(config.seed, "held_out", &[]),
        &config.pool.knobs,
        vocab,
        "ho",
    )?
    .into_iter()
    .map(|t| t.task)
    .collect())
}

/// The synthetic pool described by `config.pool`.
pub fn config_pool(vocab: &Vocabulary, config: &TrainConfig) -> Result<Vec<Task>> {
    let prefix = match config.pool.kind {
        crate::tasks::TaskKind::CopyEdit => "ce",
        crate::tasks::TaskKind::ArithmeticChain => "ac",
    };
    Ok(generate_pool(
        config.pool.kind,
        config.pool.size,
        rng::stream_seed(config.seed, "pool", &[]),
        &config.pool.knobs,
        vocab,
        prefix,
    )?
    .into_iter()
    .map(|t| t.task)
    .collect())
}

pub struct RunState {
    /// Number of completed steps.
    pub step: usize,
    pub actor: PolicySnapshot,
    pub old: PolicySnapshot,
    pub reference: PolicySnapshot,
    pub reward: PolicySnapshot,
    pub pool: Vec<TaskPoolEntry>,
    /// Ids of the tasks currently eligible for batches, in pool order.
    pub active: Vec<String>,
    pub metrics: Vec<StepMetrics>,
    pub filter_reports: Vec<FilterReportRecord>,
    pub filter_rounds: usize,
    /// Sum of batch sizes over all steps.
    pub task_steps: usize,
    pub seed: u64,
    index: HashMap<String, usize>,
    queue: VecDeque<String>,
    epoch: usize,
    baselines: BaselineCache,
}

impl RunState {
    pub fn new(base: PolicySnapshot, tasks: Vec<Task>, config: &TrainConfig) -> Result<Self> {
        if tasks.is_empty() {
            return Err(DroError::Config("task pool is empty".into()));
        }
        let mut index = HashMap::with_capacity(tasks.len());
        for (i, t) in tasks.iter().enumerate() {
            if index.insert(t.id.clone(), i).is_some() {
                return Err(DroError::Config(format!("duplicate task id {:?}", t.id)));
            }
        }
        let reference = base.with_role(Role::Reference);
        Ok(RunState {
            step: 0,
            actor: reference.with_role(Role::Actor),
            old: reference.with_role(Role::Old),
            reward: reference.with_role(Role::Reward),
            reference,
            active: tasks.iter().map(|t| t.id.clone()).collect(),
            pool: tasks.into_iter().map(TaskPoolEntry::new).collect(),
            metrics: Vec::new(),
            filter_reports: Vec::new(),
            filter_rounds: 0,
            task_steps: 0,
            seed: config.seed,
            index,
            queue: VecDeque::new(),
            epoch: 0,
            baselines: BaselineCache::new(),
        })
    }

    pub fn task(&self, id: &str) -> Option<&Task> {
        self.index.get(id).map(|&i| &self.pool[i].task)
    }

    /// Completed passes over the active set (epoch mode only).
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        Checkpoint {
            vocab: self.actor.vocab().clone(),
            config: config.clone(),
            version: self.actor.version(),
            params: self.actor.params().to_vec(),
        }
    }

    /// Run one filter round over the whole pool and replace the active set.
    pub fn filter(&mut self, config: &TrainConfig) -> Result<()> {
        let round = self.filter_rounds;
        // nothing has been trained on before the first round, so nothing carries over
        let previous: &[String] = if round == 0 { &[] } else { &self.active };
        let outcome = filter_round(
            &self.actor,
            &self.reward,
            &mut self.pool,
            previous,
            config,
            round,
            self.seed,
        )?;
        let kept: HashSet<&str> = outcome.active.iter().map(String::as_str).collect();
        self.active = self
            .pool
            .iter()
            .map(|e| e.task.id.as_str())
            .filter(|id| kept.contains(id))
            .map(str::to_string)
            .collect();
        self.queue.retain(|id| kept.contains(id.as_str()));
        info!(
            "filter round {round}: {} of {} tasks active ({} carried)",
            self.active.len(),
            self.pool.len(),
            self.pool.iter().filter(|e| e.status == TaskStatus::CarriedForward).count()
        );
        self.filter_reports.extend(outcome.reports);
        self.filter_rounds += 1;
        Ok(())
    }

    fn next_batch(&mut self, config: &TrainConfig, step: usize) -> Vec<usize> {
        let ids: Vec<String> = match config.max_epochs {
            None => {
                let n = self.active.len();
                let mut rng = rng::stream(self.seed, "batch", &[step as u64]);
                let mut picks = sample(&mut rng, n, config.batch_size.min(n)).into_vec();
                picks.sort_unstable();
                picks.into_iter().map(|i| self.active[i].clone()).collect()
            }
            Some(max_epochs) => {
                let mut ids = Vec::with_capacity(config.batch_size);
                while ids.len() < config.batch_size {
                    if self.queue.is_empty() {
                        if self.epoch >= max_epochs {
                            break;
                        }
                        let mut order = self.active.clone();
                        order.shuffle(&mut rng::stream(self.seed, "epoch", &[self.epoch as u64]));
                        self.queue.extend(order);
                        self.epoch += 1;
                    }
                    ids.extend(self.queue.pop_front());
                }
                ids
            }
        };
        ids.iter().map(|id| self.index[id]).collect()
    }
}

/// One prompt's group with everything the metrics need.
pub struct GroupRollout {
    pub sample: GroupSample,
    pub r3: Vec<f64>,
}

/// Sample a group from `state.actor` and score it under `state.reward`.
fn rollout_group(
    state: &RunState,
    task: &Task,
    config: &TrainConfig,
    rng: &mut impl rand::Rng,
) -> Result<GroupRollout> {
    let vocab = state.actor.vocab();
    let params = config.sampling();
    let rollouts: Vec<_> = (0..config.group_size)
        .map(|_| state.actor.sample_output(&task.prompt, &params, rng))
        .collect();
    let outputs: Vec<_> = rollouts
        .iter()
        .map(|r| split_output(&r.tokens, r.truncated, vocab))
        .collect();
    let traces: Vec<&[_]> = outputs.iter().map(|o| o.reasoning.as_slice()).collect();
    let matrix = build_certainty_matrix(&state.reward, &task.prompt, &traces, &task.reference)?;
    let stats = ReflectionStats::compute(&matrix, config.sigma_floor, config.quantile)?;
    let baseline = if config.variant == Variant::Masked {
        let mask = MaskedTrace::new(config.masked_trace.clone(), vocab)?;
        Some(state.baselines.get_or_compute(&state.reward, &task.prompt, &mask, &task.reference)?)
    } else {
        None
    };
    let r3 = reward(config.variant, &matrix, &stats, baseline.as_ref(), config.gamma)?;
    let len_pen = outputs
        .iter()
        .map(|o| length_penalty(o.outcome.len(), task.reference.len(), config.beta_len))
        .collect::<Result<Vec<_>>>()?;
    let mixed = mix_rewards(&r3, &len_pen, config.lambda_mix, config.standardize_before_mix)?;
    let advantages = group_advantage(&mixed.r, config.epsilon_std)?;
    let old_logp = rollouts
        .iter()
        .map(|r| state.actor.sequence_logps(task.prompt.tokens(), &r.tokens))
        .collect();
    let ref_logp = rollouts
        .iter()
        .map(|r| state.reference.sequence_logps(task.prompt.tokens(), &r.tokens))
        .collect();
    Ok(GroupRollout {
        r3: r3.r.clone(),
        sample: GroupSample {
            prompt: task.prompt.clone(),
            reference: task.reference.clone(),
            rollouts,
            outputs,
            old_logp,
            ref_logp,
            rewards: mixed,
            advantages,
        },
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

/// One update on the next batch, with per-task gradients summed. Returns
/// `None` once epoch mode runs out of tasks.
pub fn train_step(state: &mut RunState, config: &TrainConfig) -> Result<Option<StepMetrics>> {
    if state.active.is_empty() {
        return Err(DroError::EmptyActiveSet);
    }
    let step = state.step + 1;
    let batch = state.next_batch(config, step);
    if batch.is_empty() {
        return Ok(None);
    }
    let mut grad = Gradient::zeros(state.actor.params().len());
    let mut r3_all = Vec::new();
    let (mut len_r, mut len_o, mut n_out) = (0.0, 0.0, 0usize);
    let mut reports: Vec<ObjectiveReport> = Vec::new();
    for &i in &batch {
        let task = &state.pool[i].task;
        let mut rng = rng::stream(state.seed, "rollout", &[step as u64, rng::id_part(&task.id)]);
        let group = rollout_group(state, task, config, &mut rng)
            .map_err(|e| e.context(format!("step {step}, task {}", task.id)))?;
        r3_all.extend_from_slice(&group.r3);
        for o in &group.sample.outputs {
            len_r += o.reasoning.len() as f64;
            len_o += o.outcome.len() as f64;
            n_out += 1;
        }
        match accumulate_grpo(&group.sample, &state.actor, config, &mut grad) {
            Ok(report) => reports.push(report),
            Err(DroError::NoOptimizableTokens) => debug!("step {step}: task {} has no optimizable tokens", task.id),
            Err(e) => return Err(e.context(format!("step {step}, task {}", task.id))),
        }
    }
    let updated = state
        .actor
        .apply_gradient(&grad, config.learning_rate)
        .map_err(|e| e.context(format!("step {step}")))?;
    state.old = std::mem::replace(&mut state.actor, updated).with_role(Role::Old);
    let refresh = match config.reward_policy_mode {
        RewardPolicyMode::StaticRef => false,
        RewardPolicyMode::Synced => true,
        RewardPolicyMode::Lagged { lag_steps } => step.is_multiple_of(lag_steps),
    };
    if refresh {
        state.reward = state.actor.with_role(Role::Reward);
        state.baselines = BaselineCache::new();
    }
    state.step = step;
    state.task_steps += batch.len();

    let (mean_r3, std_r3) = mean_std(&r3_all);
    let groups = reports.len().max(1) as f64;
    let metrics = StepMetrics {
        step,
        mean_r3,
        std_r3,
        mean_len_reasoning: len_r / n_out as f64,
        mean_len_outcome: len_o / n_out as f64,
        kl: reports.iter().map(|r| r.kl).sum::<f64>() / groups,
        objective: reports.iter().map(|r| r.objective).sum::<f64>() / groups,
        clip_frac: reports.iter().map(|r| r.clip_frac).sum::<f64>() / groups,
    };
    state.metrics.push(metrics.clone());
    Ok(Some(metrics))
}

/// Initial filter round, then steps interleaved with filter rounds every
/// `filter_interval` steps, until `total_steps` (or the epoch budget) is spent.
pub fn run_training(config: &TrainConfig, tasks: Vec<Task>) -> Result<RunState> {
    run_training_with(config, tasks, None, &mut |_, _| ControlFlow::Continue(()))
}

/// [`run_training`] with an explicit base policy and a per-step observer
/// that may stop the run early.
pub fn run_training_with(
    config: &TrainConfig,
    tasks: Vec<Task>,
    base: Option<PolicySnapshot>,
    observer: &mut dyn FnMut(&RunState, &StepMetrics) -> ControlFlow<()>,
) -> Result<RunState> {
    config.validate()?;
    let base = base.unwrap_or_else(|| base_policy(&Vocabulary::default_toy(), config));
    let mut state = RunState::new(base, tasks, config)?;
    if config.filter_enabled {
        state.filter(config)?;
    }
    for step in 1..=config.total_steps {
        if config.filter_enabled && step > 1 && (step - 1) % config.filter_interval == 0 {
            state.filter(config)?;
        }
        match train_step(&mut state, config)? {
            Some(m) => {
                debug!("step {step}: mean_r3 {:.4} kl {:.5}", m.mean_r3, m.kl);
                if observer(&state, &m).is_break() {
                    break;
                }
            }
            None => break,
        }
    }
    Ok(state)
}

/// Greedy exact-match accuracy and mean reflection reward on held-out tasks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_r3: f64,
}

/// Fraction of tasks whose greedy outcome equals the reference exactly.
pub fn greedy_accuracy(policy: &PolicySnapshot, tasks: &[Task], max_len: usize) -> f64 {
    let hits = tasks
        .iter()
        .filter(|task| {
            let g = policy.greedy_output(&task.prompt, max_len);
            !g.truncated && split_output(&g.tokens, false, policy.vocab()).outcome == task.reference.tokens()
        })
        .count();
    hits as f64 / tasks.len().max(1) as f64
}

/// Score `policy` on `tasks`: greedy decoding for accuracy, and
/// `config.group_size` sampled traces per task (scored by the policy itself)
/// for the configured reward variant.
pub fn evaluate(policy: &PolicySnapshot, tasks: &[Task], config: &TrainConfig, seed: u64) -> Result<EvalReport> {
    if tasks.is_empty() {
        return Err(DroError::Config("no evaluation tasks".into()));
    }
    let vocab = policy.vocab();
    let params = config.sampling();
    let mask = MaskedTrace::new(config.masked_trace.clone(), vocab)?;
    let mut r3_sum = 0.0;
    let mut r3_n = 0usize;
    for task in tasks {
        let mut rng = rng::stream(seed, "eval", &[rng::id_part(&task.id)]);
        let traces: Vec<Vec<_>> = (0..config.group_size)
            .map(|_| {
                let r = policy.sample_output(&task.prompt, &params, &mut rng);
                split_output(&r.tokens, r.truncated, vocab).reasoning
            })
            .collect();
        let matrix = build_certainty_matrix(policy, &task.prompt, &traces, &task.reference)?;
        let stats = ReflectionStats::compute(&matrix, config.sigma_floor, config.quantile)?;
        let baseline = match config.variant {
            Variant::Masked => Some(crate::certainty::masked_baseline(policy, &task.prompt, &mask, &task.reference)?),
            _ => None,
        };
        let r = reward(config.variant, &matrix, &stats, baseline.as_ref(), config.gamma)?;
        r3_sum += r.r.iter().sum::<f64>();
        r3_n += r.r.len();
    }
    Ok(EvalReport {
        accuracy: greedy_accuracy(policy, tasks, config.max_len),
        mean_r3: r3_sum / r3_n as f64,
    })
}

/// Write metrics.jsonl, filter_reports.jsonl, checkpoint.json and config_echo.json.
pub fn write_run(state: &RunState, config: &TrainConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| DroError::from(e).context(out.display().to_string()))?;
    write_jsonl(&out.join("metrics.jsonl"), &state.metrics)?;
    write_jsonl(&out.join("filter_reports.jsonl"), &state.filter_reports)?;
    write_json(&out.join("checkpoint.json"), &state.checkpoint(config))?;
    write_json(&out.join("config_echo.json"), config)?;
    Ok(())
}
