use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::prompt::{assemble_prompt, extract_answer, ANSWER_MARKER};
use super::tokenizer::{Tokenizer, EOS};
use crate::error::{Error, Result};
use crate::training::Example;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerMode {
    Direct,
    #[serde(rename = "cot")]
    CoT,
}

impl AnswerMode {
    pub fn label(self) -> &'static str {
        match self {
            AnswerMode::Direct => "Direct",
            AnswerMode::CoT => "CoT",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exemplar {
    pub input: String,
    pub target: String,
}

/// One line of a task file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRecord {
    pub task_name: String,
    pub instruction: String,
    pub input: String,
    pub target: String,
    #[serde(default)]
    pub exemplars: Vec<Exemplar>,
    pub answer_mode: AnswerMode,
}

impl TaskRecord {
    pub fn validate(&self) -> Result<()> {
        if self.target.trim().is_empty() {
            return Err(Error::Format(format!("{}: empty target", self.task_name)));
        }
        if self.answer_mode == AnswerMode::CoT && extract_answer(&self.target, AnswerMode::CoT).is_empty() {
            return Err(Error::Format(format!(
                "{}: chain-of-thought target has no \"{ANSWER_MARKER}\" answer",
                self.task_name
            )));
        }
        Ok(())
    }
}

/// Parses JSON lines; blank lines are skipped and errors name the line.
pub fn parse_jsonl(text: &str, source: &str) -> Result<Vec<TaskRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TaskRecord =
            serde_json::from_str(line).map_err(|e| Error::Format(format!("{source}:{}: {e}", i + 1)))?;
        rec.validate()
            .map_err(|e| Error::Format(format!("{source}:{}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TaskRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, &path.display().to_string())
}

pub fn to_jsonl(records: &[TaskRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("task records serialize"));
        s.push('\n');
    }
    s
}

pub fn write_jsonl(path: &Path, records: &[TaskRecord]) -> Result<()> {
    fs::write(path, to_jsonl(records)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteTask {
    pub name: String,
    /// Accuracy (%) of random guessing, in `[0, 100)`.
    pub random_baseline: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    pub name: String,
    pub tasks: Vec<SuiteTask>,
    pub k_shot: usize,
}

impl SuiteSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config(format!("suite {} has no tasks", self.name)));
        }
        for t in &self.tasks {
            if !(0.0..100.0).contains(&t.random_baseline) {
                return Err(Error::Config(format!(
                    "suite {}: baseline of {} must be in [0, 100), got {}",
                    self.name, t.name, t.random_baseline
                )));
            }
        }
        Ok(())
    }
}

pub fn read_suites(path: &Path) -> Result<Vec<SuiteSpec>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let suites: Vec<SuiteSpec> =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for s in &suites {
        s.validate()?;
    }
    Ok(suites)
}

/// Training examples for `records`: the `k`-shot prompt as prefix and the
/// target followed by the end token.
pub fn to_examples(records: &[TaskRecord], tok: &Tokenizer, task: usize, k: usize) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            let mut target = tok.encode(&r.target);
            target.push(EOS);
            Ok(Example {
                prompt: tok.encode(&assemble_prompt(r, k)?),
                target,
                task,
            })
        })
        .collect()
}
