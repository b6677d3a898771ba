//! JSON-lines record types and readers.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::certainty::CertaintyRow;
use crate::config::TrainConfig;
use crate::error::{DroError, Result};
use crate::sequence::{Prompt, ReferenceOutcome};
use crate::tasks::Task;
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRecord {
    pub id: String,
    pub prompt: Vec<TokenId>,
    pub reference: Vec<TokenId>,
}

impl TaskRecord {
    pub fn from_task(task: &Task) -> Self {
        TaskRecord {
            id: task.id.clone(),
            prompt: task.prompt.tokens().to_vec(),
            reference: task.reference.tokens().to_vec(),
        }
    }

    pub fn into_task(self, vocab: &Vocabulary) -> Result<Task> {
        Ok(Task {
            prompt: Prompt::new(self.prompt, vocab)?,
            reference: ReferenceOutcome::new(self.reference, vocab)?,
            id: self.id,
        })
    }
}

/// A reasoning trace to score against a task's reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub task_id: String,
    pub trace_id: usize,
    pub reasoning: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertaintyRecord {
    pub task_id: String,
    pub trace_id: usize,
    pub logp: Vec<f64>,
    pub rank: Vec<u32>,
}

impl CertaintyRecord {
    pub fn row(&self) -> CertaintyRow {
        CertaintyRow {
            logp: self.logp.clone(),
            rank: self.rank.clone(),
        }
    }
}

/// Every reward variant for one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub task_id: String,
    pub trace_id: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vanilla: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weighted: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub propagated: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masked: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_r3: f64,
    pub std_r3: f64,
    pub mean_len_reasoning: f64,
    pub mean_len_outcome: f64,
    pub kl: f64,
    pub objective: f64,
    pub clip_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReportRecord {
    pub round: usize,
    pub task_id: String,
    pub min_difficulty: f64,
    pub max_sigma: f64,
    pub verdict: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActiveRecord {
    pub task_id: String,
}

/// Final policy with everything needed to reload it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub vocab: Vocabulary,
    pub config: TrainConfig,
    pub version: u64,
    pub params: Vec<f64>,
}

/// Parse one record per non-blank line; errors carry the 1-based line number.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DroError::Record {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| DroError::from(e).context(path.display().to_string()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| DroError::Record {
            line: i + 1,
            message: e.to_string(),
        });
        out.push(record.map_err(|e| e.context(path.display().to_string()))?);
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| DroError::from(e).context(path.display().to_string()))?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| DroError::from(e).context(path.display().to_string()))
}

pub fn read_tasks(path: &Path, vocab: &Vocabulary) -> Result<Vec<Task>> {
    read_jsonl::<TaskRecord>(path)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            r.into_task(vocab).map_err(|e| DroError::Record {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_record_round_trip() {
        let v = Vocabulary::default_toy();
        let line = r#"{"id":"t1","prompt":[10,18,12],"reference":[10,11,12]}"#;
        let recs: Vec<TaskRecord> = parse_jsonl(line).unwrap();
        let task = recs[0].clone().into_task(&v).unwrap();
        assert_eq!(v.detokenize(task.prompt.tokens()).unwrap(), "a+c");
        assert_eq!(serde_json::to_string(&TaskRecord::from_task(&task)).unwrap(), line);
    }

    #[test]
    fn malformed_line_reports_number() {
        let text = "{\"task_id\":\"a\",\"trace_id\":0,\"logp\":[-1.0],\"rank\":[1]}\n\nnot json\n";
        match parse_jsonl::<CertaintyRecord>(text) {
            Err(DroError::Record { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let extra = r#"{"task_id":"a","trace_id":0,"logp":[],"rank":[],"x":1}"#;
        assert!(parse_jsonl::<CertaintyRecord>(extra).is_err());
    }

    #[test]
    fn metrics_schema_is_stable() {
        let m = StepMetrics {
            step: 1,
            mean_r3: -1.5,
            std_r3: 0.5,
            mean_len_reasoning: 3.0,
            mean_len_outcome: 2.0,
            kl: 0.0,
            objective: 0.25,
            clip_frac: 0.0,
        };
        let value: serde_json::Value = serde_json::to_value(&m).unwrap();
        let keys: Vec<&str> = value.as_object().unwrap().keys().map(String::as_str).collect();
        let mut expected = [
            "step",
            "mean_r3",
            "std_r3",
            "mean_len_reasoning",
            "mean_len_outcome",
            "kl",
            "objective",
            "clip_frac",
        ];
        expected.sort_unstable();
        assert_eq!(keys, expected);
    }
}
