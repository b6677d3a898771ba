//! Command-line driver. [`run`] never exits the process; it returns the exit
//! code so the commands can be tested in-process.

use std::collections::HashMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::certainty::{build_certainty_matrix, masked_baseline, CertaintyMatrix};
use crate::config::TrainConfig;
use crate::demo::{find_instance, render};
use crate::error::DroError;
use crate::filtering::{decide, TaskStats};
use crate::gradcheck::run_gradcheck;
use crate::policy::{PolicySnapshot, Role};
use crate::r3::{reward, ReflectionStats, Variant};
use crate::records::{
    read_jsonl, read_tasks, to_jsonl, write_jsonl, ActiveRecord, CertaintyRecord, Checkpoint, RewardRecord,
    TaskRecord, TraceRecord,
};
use crate::sequence::MaskedTrace;
use crate::tasks::{generate_pool, TaskKind, TaskKnobs};
use crate::trainer::{base_policy, config_pool, run_training, write_run};
use crate::vocab::Vocabulary;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

/// Gradient checks pass below this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "dro", version, about = "Reflection rewards, GRPO training and reward-driven task filtering on a toy policy")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    All,
    Vanilla,
    Weighted,
    Propagated,
    Masked,
}

impl VariantArg {
    fn variants(self) -> Vec<Variant> {
        match self {
            VariantArg::All => Variant::ALL.to_vec(),
            VariantArg::Vanilla => vec![Variant::Vanilla],
            VariantArg::Weighted => vec![Variant::Weighted],
            VariantArg::Propagated => vec![Variant::Propagated],
            VariantArg::Masked => vec![Variant::Masked],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    CopyEdit,
    ArithmeticChain,
}

impl From<KindArg> for TaskKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::CopyEdit => TaskKind::CopyEdit,
            KindArg::ArithmeticChain => TaskKind::ArithmeticChain,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a task pool. Writes metrics.jsonl, filter_reports.jsonl,
    /// checkpoint.json and config_echo.json into --out.
    Train {
        /// JSON config; omitted fields take their defaults (see config_echo.json).
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Task JSON-lines file; without it the pool described in the config is generated.
        #[arg(long)]
        tasks: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score reasoning traces against task references; writes certainty.jsonl and rewards.jsonl.
    Score {
        /// Task JSON-lines file.
        #[arg(long)]
        tasks: PathBuf,
        /// Trace JSON-lines file ({"task_id", "trace_id", "reasoning"}); at least two traces per task.
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reward variants to emit.
        #[arg(long, value_enum, default_value = "all")]
        variant: VariantArg,
        /// Scoring policy checkpoint; defaults to the base policy built from --seed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// JSON config for reward settings (sigma_floor, quantile, gamma, masked_trace, copy_prior).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Judge tasks from certainty dumps; writes filter_reports.jsonl and active.jsonl.
    Filter {
        /// Certainty dump JSON-lines file.
        #[arg(long)]
        dumps: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON config for filter settings (rho, rank_threshold_k, variation_cut, carry_forward).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Previous active set ({"task_id"} per line) to carry tasks forward from.
        #[arg(long)]
        previous: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        round: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate synthetic tasks as JSON lines.
    GenTasks {
        #[arg(long, value_enum, default_value = "copy-edit")]
        kind: KindArg,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Edits per copy_edit task, `N` or `MIN-MAX`.
        #[arg(long, default_value = "1-3")]
        edits: String,
        /// Base length of copy_edit tasks, `N` or `MIN-MAX`.
        #[arg(long, default_value = "12-24")]
        base_len: String,
        /// Additions per arithmetic_chain task, `N` or `MIN-MAX`.
        #[arg(long, default_value = "2-4")]
        additions: String,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a two-trace instance where the summed and the σ-weighted rewards disagree.
    DemoRanking {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// σ floor used by the weighted reward.
        #[arg(long, default_value_t = 0.01)]
        sigma_floor: f64,
    },
    /// Compare analytic objective gradients with central finite differences.
    Gradcheck {
        /// Number of random instances.
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
}

impl From<DroError> for Failure {
    fn from(e: DroError) -> Self {
        Failure::Data(e.to_string())
    }
}

type CliResult = std::result::Result<i32, Failure>;

/// Parse `args` (including the program name) and run the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}\n\nFor more information, try '--help'.");
            EXIT_USAGE
        }
        Err(Failure::Data(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_DATA
        }
    }
}

fn require_file(path: &Path, what: &str) -> std::result::Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn load_config(path: Option<&Path>) -> std::result::Result<TrainConfig, Failure> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            require_file(p, "config file")?;
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            TrainConfig::from_json(&text).map_err(|e| Failure::Usage(format!("invalid config {}: {e}", p.display())))
        }
    }
}

fn parse_range(text: &str, flag: &str) -> std::result::Result<[usize; 2], Failure> {
    let bad = || Failure::Usage(format!("--{flag} expects N or MIN-MAX, got {text:?}"));
    let parts: Vec<&str> = text.split('-').collect();
    let nums = parts
        .iter()
        .map(|p| p.trim().parse::<usize>().map_err(|_| bad()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    match nums.as_slice() {
        [n] => Ok([*n, *n]),
        [lo, hi] => Ok([*lo, *hi]),
        _ => Err(bad()),
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> CliResult {
    match command {
        Command::Train {
            config,
            out: dir,
            tasks,
            seed,
        } => {
            let mut config = load_config(Some(&config))?;
            if let Some(s) = seed {
                config.seed = s;
            }
            let vocab = Vocabulary::default_toy();
            let pool = match tasks {
                Some(p) => {
                    require_file(&p, "task file")?;
                    read_tasks(&p, &vocab)?
                }
                None => config_pool(&vocab, &config)?,
            };
            let state = run_training(&config, pool)?;
            write_run(&state, &config, &dir)?;
            let last = state.metrics.last();
            writeln!(
                out,
                "trained {} steps ({} task-steps, {} filter rounds); final mean_r3 {}",
                state.step,
                state.task_steps,
                state.filter_rounds,
                last.map_or("n/a".to_string(), |m| format!("{:.4}", m.mean_r3))
            )
            .map_err(DroError::from)?;
            Ok(EXIT_OK)
        }
        Command::Score {
            tasks,
            traces,
            out: dir,
            variant,
            checkpoint,
            config,
            seed,
        } => score(&tasks, &traces, &dir, variant, checkpoint.as_deref(), config.as_deref(), seed, out),
        Command::Filter {
            dumps,
            out: dir,
            config,
            previous,
            round,
            seed,
        } => filter(&dumps, &dir, config.as_deref(), previous.as_deref(), round, seed, out),
        Command::GenTasks {
            kind,
            count,
            seed,
            edits,
            base_len,
            additions,
            out: path,
        } => {
            let knobs = TaskKnobs {
                edits: parse_range(&edits, "edits")?,
                base_len: parse_range(&base_len, "base-len")?,
                additions: parse_range(&additions, "additions")?,
            };
            knobs.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let kind = TaskKind::from(kind);
            let prefix = match kind {
                TaskKind::CopyEdit => "ce",
                TaskKind::ArithmeticChain => "ac",
            };
            let vocab = Vocabulary::default_toy();
            let records: Vec<TaskRecord> = generate_pool(kind, count, seed, &knobs, &vocab, prefix)?
                .iter()
                .map(|t| TaskRecord::from_task(&t.task))
                .collect();
            match path {
                Some(p) => write_jsonl(&p, &records)?,
                None => out.write_all(to_jsonl(&records)?.as_bytes()).map_err(DroError::from)?,
            }
            Ok(EXIT_OK)
        }
        Command::DemoRanking { seed, sigma_floor } => {
            if !(sigma_floor >= 0.0) {
                return Err(Failure::Usage("--sigma-floor must be >= 0".into()));
            }
            let demo = find_instance(seed, sigma_floor)?;
            write!(out, "{}", render(&demo)).map_err(DroError::from)?;
            Ok(EXIT_OK)
        }
        Command::Gradcheck { seeds, seed } => {
            if seeds == 0 {
                return Err(Failure::Usage("--seeds must be >= 1".into()));
            }
            let report = run_gradcheck(seeds, seed)?;
            let pass = report.max_rel_error < GRADCHECK_TOLERANCE;
            writeln!(
                out,
                "instances {} max relative error {:.3e} ({})",
                report.instances,
                report.max_rel_error,
                if pass { "ok" } else { "FAILED" }
            )
            .map_err(DroError::from)?;
            Ok(if pass { EXIT_OK } else { EXIT_DATA })
        }
    }
}

/// Group records by task id, keeping first-appearance order.
fn group_by_task<T>(records: Vec<T>, id: impl Fn(&T) -> &str) -> Vec<(String, Vec<T>)> {
    let mut order: Vec<(String, Vec<T>)> = Vec::new();
    let mut slot: HashMap<String, usize> = HashMap::new();
    for r in records {
        let key = id(&r).to_string();
        let i = *slot.entry(key.clone()).or_insert_with(|| {
            order.push((key, Vec::new()));
            order.len() - 1
        });
        order[i].1.push(r);
    }
    order
}

#[allow(clippy::too_many_arguments)]
fn score(
    tasks: &Path,
    traces: &Path,
    dir: &Path,
    variant: VariantArg,
    checkpoint: Option<&Path>,
    config: Option<&Path>,
    seed: u64,
    out: &mut dyn Write,
) -> CliResult {
    require_file(tasks, "task file")?;
    require_file(traces, "trace file")?;
    let mut config = load_config(config)?;
    config.seed = seed;
    let policy = match checkpoint {
        Some(p) => {
            require_file(p, "checkpoint")?;
            let text = std::fs::read_to_string(p).map_err(DroError::from)?;
            let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| DroError::from(e).context(p.display().to_string()))?;
            PolicySnapshot::from_params(&ck.vocab, ck.params, Role::Reward, ck.version)?
        }
        None => base_policy(&Vocabulary::default_toy(), &config).with_role(Role::Reward),
    };
    let vocab = policy.vocab().clone();
    let task_list = read_tasks(tasks, &vocab)?;
    let by_id: HashMap<&str, _> = task_list.iter().map(|t| (t.id.as_str(), t)).collect();
    let trace_records: Vec<TraceRecord> = read_jsonl(traces)?;
    let mask = MaskedTrace::new(config.masked_trace.clone(), &vocab)?;
    let variants = variant.variants();

    let mut dumps = Vec::new();
    let mut rewards = Vec::new();
    for (task_id, group) in group_by_task(trace_records, |r| r.task_id.as_str()) {
        let task = by_id
            .get(task_id.as_str())
            .ok_or_else(|| DroError::Config(format!("trace refers to unknown task {task_id:?}")))?;
        let reasoning: Vec<&[_]> = group.iter().map(|r| r.reasoning.as_slice()).collect();
        let matrix = build_certainty_matrix(&policy, &task.prompt, &reasoning, &task.reference)
            .map_err(|e| e.context(format!("task {task_id}")))?;
        let stats = ReflectionStats::compute(&matrix, config.sigma_floor, config.quantile)
            .map_err(|e| e.context(format!("task {task_id}")))?;
        let baseline = masked_baseline(&policy, &task.prompt, &mask, &task.reference)?;
        let mut per_variant: HashMap<Variant, Vec<f64>> = HashMap::new();
        for &v in &variants {
            per_variant.insert(v, reward(v, &matrix, &stats, Some(&baseline), config.gamma)?.r);
        }
        for (i, (rec, row)) in group.iter().zip(matrix.rows()).enumerate() {
            dumps.push(CertaintyRecord {
                task_id: task_id.clone(),
                trace_id: rec.trace_id,
                logp: row.logp.clone(),
                rank: row.rank.clone(),
            });
            let get = |v: Variant| per_variant.get(&v).map(|r| r[i]);
            rewards.push(RewardRecord {
                task_id: task_id.clone(),
                trace_id: rec.trace_id,
                vanilla: get(Variant::Vanilla),
                weighted: get(Variant::Weighted),
                propagated: get(Variant::Propagated),
                masked: get(Variant::Masked),
            });
        }
    }
    std::fs::create_dir_all(dir).map_err(DroError::from)?;
    write_jsonl(&dir.join("certainty.jsonl"), &dumps)?;
    write_jsonl(&dir.join("rewards.jsonl"), &rewards)?;
    writeln!(out, "scored {} traces", dumps.len()).map_err(DroError::from)?;
    Ok(EXIT_OK)
}

fn filter(
    dumps: &Path,
    dir: &Path,
    config: Option<&Path>,
    previous: Option<&Path>,
    round: usize,
    seed: u64,
    out: &mut dyn Write,
) -> CliResult {
    require_file(dumps, "certainty dump")?;
    let config = load_config(config)?;
    let previous: Vec<String> = match previous {
        Some(p) => {
            require_file(p, "previous active set")?;
            read_jsonl::<ActiveRecord>(p)?.into_iter().map(|r| r.task_id).collect()
        }
        None => Vec::new(),
    };
    let records: Vec<CertaintyRecord> = read_jsonl(dumps)?;
    let named = group_by_task(records, |r| r.task_id.as_str())
        .into_iter()
        .map(|(id, rows)| {
            let matrix = CertaintyMatrix::new(rows.iter().map(CertaintyRecord::row).collect())
                .and_then(|m| TaskStats::from_matrix(&m, config.rho))
                .map_err(|e| e.context(format!("task {id}")))?;
            Ok((id, matrix))
        })
        .collect::<crate::error::Result<Vec<_>>>()?;
    if named.is_empty() {
        return Err(Failure::Data("certainty dump has no records".into()));
    }
    let (outcome, _) = decide(&named, &previous, &config, round, seed)?;
    std::fs::create_dir_all(dir).map_err(DroError::from)?;
    write_jsonl(&dir.join("filter_reports.jsonl"), &outcome.reports)?;
    let active: Vec<ActiveRecord> = outcome
        .active
        .iter()
        .map(|id| ActiveRecord { task_id: id.clone() })
        .collect();
    write_jsonl(&dir.join("active.jsonl"), &active)?;
    writeln!(out, "{} of {} tasks active", active.len(), named.len()).map_err(DroError::from)?;
    Ok(EXIT_OK)
}
