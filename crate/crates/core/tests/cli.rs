use std::path::Path;
use std::process::{Command, Output};

use dro::records::{parse_jsonl, ActiveRecord, CertaintyRecord, FilterReportRecord, RewardRecord, StepMetrics, TaskRecord, TraceRecord};
use dro::vocab::Vocabulary;

fn dro(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dro")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = dro(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Two identical traces per task plus one different trace.
fn write_traces(tasks: &[TaskRecord], path: &Path) {
    let v = Vocabulary::default_toy();
    let a = v.id_of("a").unwrap();
    let b = v.id_of("b").unwrap();
    let mut lines = String::new();
    for t in tasks {
        for (trace_id, reasoning) in [vec![a, b], vec![a, b], vec![b, b, a]].into_iter().enumerate() {
            let rec = TraceRecord {
                task_id: t.id.clone(),
                trace_id,
                reasoning,
            };
            lines.push_str(&serde_json::to_string(&rec).unwrap());
            lines.push('\n');
        }
    }
    std::fs::write(path, lines).unwrap();
}

#[test]
fn gen_score_filter_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let tasks_path = dir.path().join("tasks.jsonl");
    ok(&["gen-tasks", "--count", "6", "--seed", "3", "--out", s(&tasks_path)]);
    let tasks: Vec<TaskRecord> = parse_jsonl(&read(&tasks_path)).unwrap();
    assert_eq!(tasks.len(), 6);

    let traces = dir.path().join("traces.jsonl");
    write_traces(&tasks, &traces);
    let scored = dir.path().join("scored");
    ok(&["score", "--tasks", s(&tasks_path), "--traces", s(&traces), "--out", s(&scored)]);

    let certainty: Vec<CertaintyRecord> = parse_jsonl(&read(&scored.join("certainty.jsonl"))).unwrap();
    let rewards: Vec<RewardRecord> = parse_jsonl(&read(&scored.join("rewards.jsonl"))).unwrap();
    assert_eq!(certainty.len(), 18);
    assert_eq!(rewards.len(), 18);
    for (c, r) in certainty.iter().zip(&rewards) {
        assert_eq!((&c.task_id, c.trace_id), (&r.task_id, r.trace_id));
        let task = tasks.iter().find(|t| t.id == c.task_id).unwrap();
        assert_eq!(c.logp.len(), task.reference.len());
        assert!(c.rank.iter().all(|&k| k >= 1));
        let sum: f64 = c.logp.iter().sum();
        assert!((r.vanilla.unwrap() - sum).abs() < 1e-9);
        assert!(r.weighted.is_some() && r.propagated.is_some() && r.masked.is_some());
    }

    let dumps = scored.join("certainty.jsonl");
    let filtered = dir.path().join("filtered");
    // Random traces rank the references poorly: the default threshold drops everything.
    let strict = dro(&["filter", "--dumps", s(&dumps), "--out", s(&filtered)]);
    assert_eq!(strict.status.code(), Some(2));

    let relaxed = dir.path().join("filter.json");
    std::fs::write(&relaxed, r#"{"rank_threshold_k": 30.0, "variation_cut": 0.34}"#).unwrap();
    ok(&["filter", "--dumps", s(&dumps), "--out", s(&filtered), "--config", s(&relaxed)]);
    let reports: Vec<FilterReportRecord> = parse_jsonl(&read(&filtered.join("filter_reports.jsonl"))).unwrap();
    let active: Vec<ActiveRecord> = parse_jsonl(&read(&filtered.join("active.jsonl"))).unwrap();
    assert_eq!(reports.len(), 6);
    let n_active = reports.iter().filter(|r| r.verdict == "active").count();
    assert_eq!(active.len(), n_active);
    assert_eq!(reports.iter().filter(|r| r.verdict == "dropped_low_variation").count(), 2);
}

#[test]
fn identical_traces_weighted_equals_vanilla() {
    // Two copies of the same trace: every column has zero spread, so the
    // weights are uniform and the weighted reward reduces to the plain sum.
    let dir = tempfile::tempdir().unwrap();
    let tasks_path = dir.path().join("tasks.jsonl");
    ok(&["gen-tasks", "--count", "4", "--seed", "9", "--out", s(&tasks_path)]);
    let tasks: Vec<TaskRecord> = parse_jsonl(&read(&tasks_path)).unwrap();
    let v = Vocabulary::default_toy();
    let c = v.id_of("c").unwrap();
    let mut lines = String::new();
    for t in &tasks {
        for trace_id in 0..2 {
            let rec = TraceRecord {
                task_id: t.id.clone(),
                trace_id,
                reasoning: vec![c, c],
            };
            lines.push_str(&serde_json::to_string(&rec).unwrap());
            lines.push('\n');
        }
    }
    let traces = dir.path().join("traces.jsonl");
    std::fs::write(&traces, lines).unwrap();
    let out = dir.path().join("out");
    ok(&["score", "--tasks", s(&tasks_path), "--traces", s(&traces), "--out", s(&out), "--variant", "all"]);
    let rewards: Vec<RewardRecord> = parse_jsonl(&read(&out.join("rewards.jsonl"))).unwrap();
    for r in rewards {
        assert!((r.weighted.unwrap() - r.vanilla.unwrap()).abs() < 1e-9, "{r:?}");
    }
}

#[test]
fn single_variant_emits_only_that_field() {
    let dir = tempfile::tempdir().unwrap();
    let tasks_path = dir.path().join("tasks.jsonl");
    ok(&["gen-tasks", "--count", "2", "--out", s(&tasks_path)]);
    let tasks: Vec<TaskRecord> = parse_jsonl(&read(&tasks_path)).unwrap();
    let traces = dir.path().join("traces.jsonl");
    write_traces(&tasks, &traces);
    let out = dir.path().join("out");
    ok(&["score", "--tasks", s(&tasks_path), "--traces", s(&traces), "--out", s(&out), "--variant", "weighted"]);
    let text = read(&out.join("rewards.jsonl"));
    assert!(text.contains("\"weighted\""));
    assert!(!text.contains("\"vanilla\""));
}

#[test]
fn train_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"group_size": 4, "batch_size": 4, "total_steps": 6, "filter_interval": 3, "rank_threshold_k": 12.0, "pool": {"size": 24}}"#,
    )
    .unwrap();
    let runs = [dir.path().join("a"), dir.path().join("b")];
    for out in &runs {
        ok(&["train", "--config", s(&config), "--out", s(out), "--seed", "2"]);
    }
    for f in ["metrics.jsonl", "filter_reports.jsonl", "checkpoint.json", "config_echo.json"] {
        assert_eq!(std::fs::read(runs[0].join(f)).unwrap(), std::fs::read(runs[1].join(f)).unwrap(), "{f}");
    }
    let metrics: Vec<StepMetrics> = parse_jsonl(&read(&runs[0].join("metrics.jsonl"))).unwrap();
    assert_eq!(metrics.len(), 6);
    assert!(read(&runs[0].join("config_echo.json")).contains("\"seed\": 2"));

    // A checkpoint from training is accepted by the scorer.
    let tasks_path = dir.path().join("tasks.jsonl");
    ok(&["gen-tasks", "--count", "2", "--out", s(&tasks_path)]);
    let tasks: Vec<TaskRecord> = parse_jsonl(&read(&tasks_path)).unwrap();
    let traces = dir.path().join("traces.jsonl");
    write_traces(&tasks, &traces);
    let ckpt = runs[0].join("checkpoint.json");
    ok(&["score", "--tasks", s(&tasks_path), "--traces", s(&traces), "--out", s(&dir.path().join("sc")), "--checkpoint", s(&ckpt)]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dro(&["bogus"]).status.code(), Some(1));
    assert_eq!(dro(&["train", "--config", "/no/such/file.json", "--out", s(dir.path())]).status.code(), Some(1));

    let bad_config = dir.path().join("bad.json");
    std::fs::write(&bad_config, r#"{"group_size": 1}"#).unwrap();
    assert_eq!(dro(&["train", "--config", s(&bad_config), "--out", s(dir.path())]).status.code(), Some(1));

    // Malformed records are a data error.
    let tasks = dir.path().join("tasks.jsonl");
    std::fs::write(&tasks, "{\"id\": \"x\"\n").unwrap();
    let out = dro(&["score", "--tasks", s(&tasks), "--traces", s(&tasks), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));

    let out = ok(&["gradcheck", "--seeds", "3"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("max relative error"));
    let out = ok(&["demo-ranking", "--seed", "1"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("weighted: A"));
}
