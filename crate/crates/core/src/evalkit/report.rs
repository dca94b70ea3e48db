use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::prompt::{assemble_prompt, exact_match_with, extract_answer_with, normalized_score, ANSWER_MARKER};
use super::task::{AnswerMode, SuiteSpec, TaskRecord};
use super::tokenizer::{Tokenizer, EOS};
use crate::error::{Error, Result};
use crate::model::{greedy_decode, ModelParams};
use crate::numerics::Real;

/// Anything that maps prompts to generations.
pub trait Generator {
    fn generate(&mut self, prompts: &[String], max_new_tokens: usize) -> Result<Vec<String>>;
}

/// Greedy decoding with a trained model. Prompts keep their last
/// `max_input_len` tokens and generations stop at `max_target_len` tokens.
pub struct ModelGenerator<'a, F: Real> {
    pub params: &'a ModelParams<F>,
    pub tokenizer: &'a Tokenizer,
    /// Prompts decoded per forward batch.
    pub batch_size: usize,
}

impl<F: Real> Generator for ModelGenerator<'_, F> {
    fn generate(&mut self, prompts: &[String], max_new_tokens: usize) -> Result<Vec<String>> {
        let cfg = self.params.config();
        let max_new = max_new_tokens.min(cfg.max_target_len);
        let ids: Vec<Vec<usize>> = prompts
            .iter()
            .map(|p| {
                let ids = self.tokenizer.encode(p);
                ids[ids.len().saturating_sub(cfg.max_input_len)..].to_vec()
            })
            .collect();
        if let Some(id) = ids.iter().flatten().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::Config(format!(
                "token id {id} outside the model vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let mut out = Vec::with_capacity(prompts.len());
        for chunk in ids.chunks(self.batch_size.max(1)) {
            for g in greedy_decode(self.params, chunk, max_new, EOS)? {
                out.push(self.tokenizer.decode(&g));
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    pub answer_marker: String,
    pub case_insensitive: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 32,
            answer_marker: ANSWER_MARKER.to_string(),
            case_insensitive: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    pub count: usize,
    pub correct: usize,
    /// Exact-match accuracy in percent.
    pub accuracy: f64,
    pub random_baseline: f64,
    pub normalized: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub suite: String,
    /// "Direct", "CoT", or "Mixed" when the suite's records disagree.
    pub mode: String,
    pub k_shot: usize,
    /// Unweighted mean of task accuracies.
    pub accuracy: f64,
    /// Unweighted mean of task normalized scores.
    pub normalized: f64,
    pub tasks: Vec<TaskResult>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub model_id: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub suites: Vec<SuiteResult>,
    /// Macro-mean of the suites' normalized scores.
    pub normalized_average: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Scores `generator` on every suite. Gold answers go through the same
/// extraction as generations, so a chain-of-thought target is compared by
/// its stated answer.
pub fn evaluate(
    generator: &mut impl Generator,
    suites: &[SuiteSpec],
    records: &[TaskRecord],
    decode: &DecodeConfig,
    meta: ReportMeta,
) -> Result<EvalReport> {
    if suites.is_empty() {
        return Err(Error::Config("no suites to evaluate".into()));
    }
    let mut by_task: BTreeMap<&str, Vec<&TaskRecord>> = BTreeMap::new();
    for r in records {
        by_task.entry(r.task_name.as_str()).or_default().push(r);
    }
    let mut results = Vec::with_capacity(suites.len());
    for suite in suites {
        suite.validate()?;
        let mut tasks = Vec::with_capacity(suite.tasks.len());
        let mut modes = Vec::new();
        for t in &suite.tasks {
            let recs = by_task
                .get(t.name.as_str())
                .ok_or_else(|| Error::Config(format!("suite {}: no records for task {}", suite.name, t.name)))?;
            let prompts = recs
                .iter()
                .map(|r| assemble_prompt(r, suite.k_shot))
                .collect::<Result<Vec<_>>>()?;
            let generated = generator.generate(&prompts, decode.max_new_tokens)?;
            if generated.len() != recs.len() {
                return Err(Error::Shape {
                    op: "evaluate",
                    left: vec![recs.len()],
                    right: vec![generated.len()],
                });
            }
            let mut correct = 0;
            for (r, g) in recs.iter().zip(&generated) {
                let pred = extract_answer_with(g, r.answer_mode, &decode.answer_marker);
                let gold = extract_answer_with(&r.target, r.answer_mode, &decode.answer_marker);
                correct += exact_match_with(&pred, &gold, decode.case_insensitive) as usize;
                modes.push(r.answer_mode);
            }
            let accuracy = 100.0 * correct as f64 / recs.len() as f64;
            tasks.push(TaskResult {
                task: t.name.clone(),
                count: recs.len(),
                correct,
                accuracy,
                random_baseline: t.random_baseline,
                normalized: normalized_score(accuracy, t.random_baseline)?,
            });
        }
        let mode = if modes.iter().all(|&m| m == AnswerMode::Direct) {
            "Direct"
        } else if modes.iter().all(|&m| m == AnswerMode::CoT) {
            "CoT"
        } else {
            "Mixed"
        };
        results.push(SuiteResult {
            suite: suite.name.clone(),
            mode: mode.to_string(),
            k_shot: suite.k_shot,
            accuracy: mean(tasks.iter().map(|t| t.accuracy)),
            normalized: mean(tasks.iter().map(|t| t.normalized)),
            tasks,
        });
    }
    Ok(EvalReport {
        meta,
        normalized_average: mean(results.iter().map(|s| s.normalized)),
        suites: results,
    })
}

/// Plain-text table, one row per labelled report: the first column holds
/// the label, then one `{suite} {mode}` accuracy column per suite of the
/// first report, then the normalized average. Numbers have one decimal.
pub fn render_table(label_header: &str, rows: &[(String, &EvalReport)]) -> String {
    let mut header = vec![label_header.to_string()];
    if let Some((_, first)) = rows.first() {
        header.extend(first.suites.iter().map(|s| format!("{} {}", s.suite, s.mode)));
    }
    header.push("Norm. Avg.".to_string());
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(label, r)| {
            let mut cells = vec![label.clone()];
            cells.extend(r.suites.iter().map(|s| format!("{:.1}", s.accuracy)));
            cells.push(format!("{:.1}", r.normalized_average));
            cells
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| -> String {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = line(&header);
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in &body {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}
