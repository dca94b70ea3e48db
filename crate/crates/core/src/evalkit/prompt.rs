use super::task::{AnswerMode, TaskRecord};
use crate::error::{Error, Result};

/// Marker after which a chain-of-thought generation states its answer.
pub const ANSWER_MARKER: &str = "The answer is";

/// Renders a record as
///
/// ```text
/// {instruction}
///
/// Input: {exemplar input}
/// Output: {exemplar target}
///
/// Input: {input}
/// Output:
/// ```
///
/// with one `Input:`/`Output:` block per exemplar (the first `k`, in stored
/// order) and no trailing newline.
pub fn assemble_prompt(record: &TaskRecord, k: usize) -> Result<String> {
    if record.exemplars.len() < k {
        return Err(Error::Config(format!(
            "{}: {k}-shot prompt needs {k} exemplars, record has {}",
            record.task_name,
            record.exemplars.len()
        )));
    }
    let mut s = format!("{}\n\n", record.instruction.trim());
    for ex in &record.exemplars[..k] {
        s.push_str(&format!("Input: {}\nOutput: {}\n\n", ex.input.trim(), ex.target.trim()));
    }
    s.push_str(&format!("Input: {}\nOutput:", record.input.trim()));
    Ok(s)
}

pub fn extract_answer(generated: &str, mode: AnswerMode) -> String {
    extract_answer_with(generated, mode, ANSWER_MARKER)
}

/// Direct: the trimmed generation. Chain-of-thought: the trimmed text after
/// the last `marker`, minus one trailing period; empty without a marker.
pub fn extract_answer_with(generated: &str, mode: AnswerMode, marker: &str) -> String {
    match mode {
        AnswerMode::Direct => generated.trim().to_string(),
        AnswerMode::CoT => match generated.rfind(marker) {
            None => String::new(),
            Some(i) => {
                let rest = generated[i + marker.len()..].trim();
                rest.strip_suffix('.').unwrap_or(rest).trim().to_string()
            }
        },
    }
}

/// 1 iff the trimmed strings are identical (case-sensitive).
pub fn exact_match(pred: &str, target: &str) -> u8 {
    exact_match_with(pred, target, false)
}

pub fn exact_match_with(pred: &str, target: &str, case_insensitive: bool) -> u8 {
    let (p, t) = (pred.trim(), target.trim());
    let same = if case_insensitive {
        p.to_lowercase() == t.to_lowercase()
    } else {
        p == t
    };
    u8::from(same)
}

/// `100 · (raw − baseline) / (100 − baseline)`.
pub fn normalized_score(raw: f64, baseline: f64) -> Result<f64> {
    if !(baseline < 100.0) {
        return Err(Error::Config(format!("random baseline must be below 100, got {baseline}")));
    }
    Ok(100.0 * (raw - baseline) / (100.0 - baseline))
}
