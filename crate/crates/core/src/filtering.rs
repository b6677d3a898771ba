//! Two-stage task filtering: drop tasks whose reference stays unpredictable
//! under every sampled reasoning trace, then drop the tasks whose reference
//! certainty varies least across traces.

use std::collections::HashSet;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::certainty::{build_certainty_matrix, CertaintyMatrix, CertaintyRow};
use crate::config::TrainConfig;
use crate::error::{DroError, Result};
use crate::policy::PolicySnapshot;
use crate::r3::token_std;
use crate::records::FilterReportRecord;
use crate::rng;
use crate::sequence::split_output;
use crate::tasks::Task;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Active,
    DroppedDifficult,
    DroppedLowVariation,
    CarriedForward,
}

impl TaskStatus {
    pub fn name(self) -> &'static str {
        match self {
            TaskStatus::Active => "active",
            TaskStatus::DroppedDifficult => "dropped_difficult",
            TaskStatus::DroppedLowVariation => "dropped_low_variation",
            TaskStatus::CarriedForward => "carried_forward",
        }
    }

    pub fn is_active(self) -> bool {
        matches!(self, TaskStatus::Active | TaskStatus::CarriedForward)
    }
}

/// Per-task statistics from the latest round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    /// Per-trace difficulty scores.
    pub difficulty: Vec<f64>,
    pub max_sigma: f64,
}

impl TaskStats {
    pub fn from_matrix(matrix: &CertaintyMatrix, rho: f64) -> Result<Self> {
        let difficulty = matrix
            .rows()
            .iter()
            .map(|r| difficulty_score(r, rho))
            .collect::<Result<Vec<_>>>()?;
        let max_sigma = token_std(matrix)?.max_sigma();
        Ok(TaskStats { difficulty, max_sigma })
    }

    pub fn min_difficulty(&self) -> f64 {
        self.difficulty.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskPoolEntry {
    pub task: Task,
    pub last_stats: Option<TaskStats>,
    pub status: TaskStatus,
}

impl TaskPoolEntry {
    pub fn new(task: Task) -> Self {
        TaskPoolEntry {
            task,
            last_stats: None,
            status: TaskStatus::Active,
        }
    }
}

/// Mean of the `⌈ρ·|y|⌉` largest ranks in the row.
pub fn difficulty_score(row: &CertaintyRow, rho: f64) -> Result<f64> {
    if row.rank.is_empty() {
        return Err(DroError::InvalidSequence("empty certainty row".into()));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(DroError::OutOfRange(format!("rho {rho} outside (0, 1]")));
    }
    let n = row.rank.len();
    let take = ((rho * n as f64 - 1e-12).ceil() as usize).clamp(1, n);
    let mut ranks = row.rank.clone();
    ranks.sort_unstable_by(|a, b| b.cmp(a));
    Ok(ranks[..take].iter().map(|&r| f64::from(r)).sum::<f64>() / take as f64)
}

/// Keep iff some trace makes the reference predictable within `k`.
pub fn difficulty_filter(scores: &[f64], rank_threshold_k: f64) -> Result<bool> {
    if scores.is_empty() {
        return Err(DroError::InvalidSequence("no traces to judge difficulty".into()));
    }
    Ok(scores.iter().copied().fold(f64::INFINITY, f64::min) <= rank_threshold_k)
}

/// Drop the `⌊cut·n⌋` lowest-σ tasks; survivors keep their input order.
pub fn variation_filter(pool: &[(String, f64)], cut_fraction: f64) -> Result<Vec<String>> {
    if !(0.0..1.0).contains(&cut_fraction) {
        return Err(DroError::OutOfRange(format!("cut fraction {cut_fraction} outside [0, 1)")));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| {
        pool[b]
            .1
            .total_cmp(&pool[a].1)
            .then_with(|| pool[a].0.cmp(&pool[b].0))
    });
    let drop = (cut_fraction * pool.len() as f64 + 1e-12).floor() as usize;
    let mut keep = vec![false; pool.len()];
    for &i in &order[..pool.len() - drop] {
        keep[i] = true;
    }
    Ok(pool
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|((id, _), _)| id.clone())
        .collect())
}

/// Kept ids followed by a seeded sample of `⌈carry·|previous|⌉` previous ids
/// not already kept. Returns `(active, carried)`.
pub fn refresh_dataset(
    previous_active: &[String],
    kept: &[String],
    carry_forward: f64,
    seed: u64,
) -> Result<(Vec<String>, Vec<String>)> {
    if !(0.0..1.0).contains(&carry_forward) {
        return Err(DroError::OutOfRange(format!("carry_forward {carry_forward} outside [0, 1)")));
    }
    let quota = ((carry_forward * previous_active.len() as f64) - 1e-12).ceil().max(0.0) as usize;
    let mut rng = rng::stream(seed, "carry", &[]);
    let mut picks: Vec<usize> = sample(&mut rng, previous_active.len(), quota).into_vec();
    picks.sort_unstable();
    let mut seen: HashSet<&str> = kept.iter().map(String::as_str).collect();
    let mut active = kept.to_vec();
    let mut carried = Vec::new();
    for i in picks {
        let id = previous_active[i].as_str();
        if seen.insert(id) {
            active.push(id.to_string());
            carried.push(id.to_string());
        }
    }
    Ok((active, carried))
}

/// Statuses for every task after both stages, in input order.
pub fn judge(stats: &[(String, TaskStats)], config: &TrainConfig) -> Result<Vec<TaskStatus>> {
    let mut status = Vec::with_capacity(stats.len());
    let mut survivors = Vec::new();
    for (id, s) in stats {
        if difficulty_filter(&s.difficulty, config.rank_threshold_k)? {
            survivors.push((id.clone(), s.max_sigma));
            status.push(TaskStatus::Active);
        } else {
            status.push(TaskStatus::DroppedDifficult);
        }
    }
    let kept: HashSet<String> = variation_filter(&survivors, config.variation_cut)?.into_iter().collect();
    for ((id, _), st) in stats.iter().zip(status.iter_mut()) {
        if *st == TaskStatus::Active && !kept.contains(id) {
            *st = TaskStatus::DroppedLowVariation;
        }
    }
    Ok(status)
}

/// Outcome of one round over the pool.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub active: Vec<String>,
    pub reports: Vec<FilterReportRecord>,
}

/// Verdicts, carry-forward and reports from per-task statistics. `named`
/// lists every task in pool order.
pub fn decide(
    named: &[(String, TaskStats)],
    previous_active: &[String],
    config: &TrainConfig,
    round: usize,
    seed: u64,
) -> Result<(FilterOutcome, Vec<TaskStatus>)> {
    let mut status = judge(named, config)?;
    let kept: Vec<String> = named
        .iter()
        .zip(&status)
        .filter(|(_, s)| **s == TaskStatus::Active)
        .map(|((id, _), _)| id.clone())
        .collect();
    let (active, carried) = refresh_dataset(
        previous_active,
        &kept,
        config.carry_forward,
        rng::stream_seed(seed, "round", &[round as u64]),
    )?;
    if active.is_empty() {
        return Err(DroError::EmptyActiveSet);
    }
    let carried: HashSet<String> = carried.into_iter().collect();
    let mut reports = Vec::with_capacity(named.len());
    for ((id, s), st) in named.iter().zip(status.iter_mut()) {
        if carried.contains(id) {
            *st = TaskStatus::CarriedForward;
        }
        reports.push(FilterReportRecord {
            round,
            task_id: id.clone(),
            min_difficulty: s.min_difficulty(),
            max_sigma: s.max_sigma,
            verdict: st.name().to_string(),
        });
    }
    Ok((FilterOutcome { active, reports }, status))
}

/// Apply verdicts and carry-forward to `pool` in place.
pub fn apply_round(
    pool: &mut [TaskPoolEntry],
    stats: Vec<TaskStats>,
    previous_active: &[String],
    config: &TrainConfig,
    round: usize,
    seed: u64,
) -> Result<FilterOutcome> {
    let named: Vec<(String, TaskStats)> = pool.iter().map(|e| e.task.id.clone()).zip(stats).collect();
    let (outcome, status) = decide(&named, previous_active, config, round, seed)?;
    for ((entry, (_, s)), st) in pool.iter_mut().zip(named).zip(status) {
        entry.status = st;
        entry.last_stats = Some(s);
    }
    Ok(outcome)
}

/// Sample `filter_traces` outputs per task from `sampler`, score the
/// reference under `scorer`, and judge the whole pool.
pub fn filter_round(
    sampler: &PolicySnapshot,
    scorer: &PolicySnapshot,
    pool: &mut [TaskPoolEntry],
    previous_active: &[String],
    config: &TrainConfig,
    round: usize,
    seed: u64,
) -> Result<FilterOutcome> {
    let params = config.sampling();
    let stats = pool
        .iter()
        .map(|entry| {
            let task = &entry.task;
            let mut rng = rng::stream(seed, "filter", &[round as u64, rng::id_part(&task.id)]);
            let traces: Vec<Vec<_>> = (0..config.filter_traces)
                .map(|_| {
                    let r = sampler.sample_output(&task.prompt, &params, &mut rng);
                    split_output(&r.tokens, r.truncated, sampler.vocab()).reasoning
                })
                .collect();
            let matrix = build_certainty_matrix(scorer, &task.prompt, &traces, &task.reference)?;
            TaskStats::from_matrix(&matrix, config.rho)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.context(format!("filter round {round}")))?;
    apply_round(pool, stats, previous_active, config, round, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(rank: &[u32]) -> CertaintyRow {
        CertaintyRow {
            logp: vec![-1.0; rank.len()],
            rank: rank.to_vec(),
        }
    }

    fn ids(n: usize, prefix: &str) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i:03}")).collect()
    }

    #[test]
    fn difficulty_examples() {
        assert_eq!(difficulty_score(&row(&[1, 1, 1]), 0.1).unwrap(), 1.0);
        assert_eq!(difficulty_score(&row(&[1, 9, 5, 3]), 0.5).unwrap(), 7.0);
        assert_eq!(difficulty_score(&row(&[1, 9, 5, 3]), 1.0).unwrap(), 4.5);
        assert!(difficulty_score(&row(&[]), 0.5).is_err());
        assert!(difficulty_filter(&[1.0, 40.0], 1.0).unwrap());
        assert!(!difficulty_filter(&[6.0, 40.0], 5.0).unwrap());
        assert!(difficulty_filter(&[12.0, 4.0, 30.0], 5.0).unwrap());
    }

    #[test]
    fn variation_examples() {
        let pool: Vec<(String, f64)> = ["t0", "t1", "t2", "t3"]
            .iter()
            .zip([5.0, 0.1, 3.0, 0.2])
            .map(|(id, s)| (id.to_string(), s))
            .collect();
        assert_eq!(variation_filter(&pool, 0.0).unwrap().len(), 4);
        assert_eq!(variation_filter(&pool, 0.5).unwrap(), ["t0", "t2"]);
        let flat: Vec<(String, f64)> = ids(5, "t").into_iter().map(|id| (id, 1.0)).collect();
        assert_eq!(variation_filter(&flat, 0.4).unwrap(), ["t000", "t001", "t002"]);
    }

    #[test]
    fn refresh_examples() {
        let prev = ids(20, "p");
        let kept = ids(50, "k");
        assert_eq!(refresh_dataset(&prev, &kept, 0.10, 1).unwrap().0.len(), 52);
        assert_eq!(refresh_dataset(&prev, &kept, 0.0, 1).unwrap().0, kept);
        assert_eq!(refresh_dataset(&kept, &kept, 0.1, 1).unwrap().0, kept);
        assert_eq!(refresh_dataset(&prev, &kept, 0.1, 7).unwrap(), refresh_dataset(&prev, &kept, 0.1, 7).unwrap());
    }

    fn stats(min_rank: f64, sigma: f64) -> TaskStats {
        TaskStats {
            difficulty: vec![min_rank, min_rank + 3.0],
            max_sigma: sigma,
        }
    }

    #[test]
    fn stages_run_in_order() {
        let config = TrainConfig {
            rank_threshold_k: 5.0,
            variation_cut: 0.5,
            ..TrainConfig::default()
        };
        // the hard task has the largest sigma but is removed before stage 2
        let input = vec![
            ("a".to_string(), stats(9.0, 10.0)),
            ("b".to_string(), stats(1.0, 0.5)),
            ("c".to_string(), stats(2.0, 2.0)),
        ];
        assert_eq!(
            judge(&input, &config).unwrap(),
            [
                TaskStatus::DroppedDifficult,
                TaskStatus::DroppedLowVariation,
                TaskStatus::Active
            ]
        );
    }

    #[test]
    fn empty_active_set_is_an_error() {
        let config = TrainConfig {
            rank_threshold_k: 1.0,
            ..TrainConfig::default()
        };
        let v = crate::vocab::Vocabulary::default_toy();
        let t = |s: &str| v.tokenize(s).unwrap();
        let task = Task {
            id: "x".into(),
            prompt: crate::sequence::Prompt::new(t("ab"), &v).unwrap(),
            reference: crate::sequence::ReferenceOutcome::new(t("ab"), &v).unwrap(),
        };
        let mut pool = vec![TaskPoolEntry::new(task)];
        let err = apply_round(&mut pool, vec![stats(3.0, 1.0)], &[], &config, 0, 0).unwrap_err();
        assert_eq!(err.to_string(), "filter removed all tasks; relax thresholds");
    }

    proptest! {
        #[test]
        fn raising_k_never_drops(scores in prop::collection::vec(1.0f64..30.0, 1..10), k in 1.0f64..30.0, dk in 0.0f64..10.0) {
            if difficulty_filter(&scores, k).unwrap() {
                prop_assert!(difficulty_filter(&scores, k + dk).unwrap());
            }
        }

        #[test]
        fn variation_keeps_ceil_count(sig in prop::collection::vec(0.0f64..3.0, 1..40), cut in 0.0f64..0.99) {
            let pool: Vec<(String, f64)> = sig.iter().enumerate().map(|(i, &s)| (format!("t{i:03}"), s)).collect();
            let kept = variation_filter(&pool, cut).unwrap();
            let n = pool.len() as f64;
            prop_assert_eq!(kept.len(), ((1.0 - cut) * n - 1e-9).ceil() as usize);
            prop_assert_eq!(&kept, &variation_filter(&pool, cut).unwrap());
            // survivors dominate every dropped task in sigma
            let min_kept = kept.iter().map(|id| pool.iter().find(|p| &p.0 == id).unwrap().1).fold(f64::INFINITY, f64::min);
            for (id, s) in &pool {
                if !kept.contains(id) {
                    prop_assert!(*s <= min_kept);
                }
            }
        }

        #[test]
        fn difficulty_between_mean_and_max(rank in prop::collection::vec(1u32..25, 1..30), rho in 0.01f64..1.0) {
            let r = row(&rank);
            let d = difficulty_score(&r, rho).unwrap();
            let mean = rank.iter().map(|&x| f64::from(x)).sum::<f64>() / rank.len() as f64;
            let max = f64::from(*rank.iter().max().unwrap());
            prop_assert!(d >= mean - 1e-12 && d <= max + 1e-12);
        }
    }
}
