//! Command-line entry points: corpus generation, training (from scratch or
//! from a checkpoint), evaluation, routing traces, the finetuning ablation
//! grid, checkpoint averaging and report tables.

mod commands;
pub mod config;
pub mod pipeline;

pub use commands::{run, Cli, Command, Common};

/// One-line JSON error record: `{"error":{"kind":...,"message":...}}`.
pub fn error_record(err: &moelab::Error) -> String {
    serde_json::json!({ "error": { "kind": err.kind(), "message": err.to_string() } }).to_string()
}
