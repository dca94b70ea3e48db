//! Task files, prompt assembly, answer extraction, exact-match scoring,
//! normalized aggregation and synthetic task generators.
//!
//! Prompts follow one fixed grammar (see [`assemble_prompt`]) and text is
//! tokenized word by word (see [`Tokenizer`]), so a task file fully
//! determines what the model sees.

mod prompt;
mod report;
mod synth;
mod task;
mod tokenizer;

pub use prompt::{
    assemble_prompt, exact_match, exact_match_with, extract_answer, extract_answer_with, normalized_score,
    ANSWER_MARKER,
};
pub use report::{
    evaluate, render_table, DecodeConfig, EvalReport, Generator, ModelGenerator, ReportMeta, SuiteResult,
    TaskResult,
};
pub use synth::{gen_synthetic_tasks, SynthSpec, SyntheticCorpus, HELD_IN_TASKS};
pub use task::{
    parse_jsonl, read_jsonl, read_suites, to_examples, to_jsonl, write_jsonl, AnswerMode, Exemplar, SuiteSpec,
    SuiteTask, TaskRecord,
};
pub use tokenizer::{Tokenizer, EOS, NL, PAD, UNK};
