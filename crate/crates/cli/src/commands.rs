use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use moelab::evalkit::{gen_synthetic_tasks, render_table, EvalReport};
use moelab::model::{load_checkpoint, save_checkpoint, transformer_stack, ForwardCtx, ModelParams, StackInput};
use moelab::numerics::Tape;
use moelab::routing::{route, route_trace_lines, RouterConfig, Strategy};
use moelab::training::average_checkpoints;
use moelab::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{resolve, RunConfig};
use crate::pipeline::{ablation_config, evaluate_model, train_model, Corpus, ABLATION_ROWS};

#[derive(Debug, Parser)]
#[command(name = "moelab", version, about = "Desk-scale sparse mixture-of-experts experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set model.d_model=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Run seed (overrides the config's `seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic task corpus.
    GenTasks(Common),
    /// Train on the configured task mixture, optionally starting from a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the configured split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        from: PathBuf,
    },
    /// Trace routing decisions for a probability fixture (JSON) or a checkpoint.
    RouteTrace {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Run the freezing and auxiliary-loss ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Average checkpoints elementwise.
    AverageCkpt {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true, num_args = 1..)]
        from: Vec<PathBuf>,
    },
    /// Combine evaluation reports into one table.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true, num_args = 1..)]
        from: Vec<PathBuf>,
    },
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

/// Resolves the configuration, writes its snapshot and returns it.
fn prepare(common: &Common, base: Option<&ModelParams<f32>>) -> Result<RunConfig> {
    let cfg = resolve(common.config.as_deref(), &common.sets, common.seed, base.map(|p| p.config()))?;
    create_dir(&common.out)?;
    cfg.write_snapshot(&common.out)?;
    Ok(cfg)
}

fn write_eval(dir: &Path, label: &str, report: &EvalReport) -> Result<()> {
    write(&dir.join("report.json"), &to_json(report))?;
    write(&dir.join("report.txt"), &render_table("Model", &[(label.to_string(), report)]))
}

/// Runs one command. Every command writes `config.resolved.toml` and a
/// `timing.json` sidecar (the only file with wall-clock data) to `--out`.
pub fn run(cli: Cli) -> Result<()> {
    let started = Instant::now();
    let unix_ms = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let out = match &cli.command {
        Command::GenTasks(c) => c.out.clone(),
        Command::Train { common, .. }
        | Command::Eval { common, .. }
        | Command::RouteTrace { common, .. }
        | Command::Ablate { common, .. }
        | Command::AverageCkpt { common, .. }
        | Command::Report { common, .. } => common.out.clone(),
    };
    match cli.command {
        Command::GenTasks(common) => gen_tasks(&common)?,
        Command::Train { common, from } => train_cmd(&common, from.as_deref())?,
        Command::Eval { common, from } => eval_cmd(&common, &from)?,
        Command::RouteTrace { common, from } => route_trace_cmd(&common, from.as_deref())?,
        Command::Ablate { common, from } => ablate_cmd(&common, from.as_deref())?,
        Command::AverageCkpt { common, from } => average_cmd(&common, &from)?,
        Command::Report { common, from } => report_cmd(&common, &from)?,
    }
    let timing = serde_json::json!({
        "started_unix_ms": unix_ms as u64,
        "elapsed_ms": started.elapsed().as_millis() as u64,
    });
    write(&out.join("timing.json"), &to_json(&timing))
}

fn load(path: &Path) -> Result<ModelParams<f32>> {
    load_checkpoint::<f32>(path)
}

fn gen_tasks(common: &Common) -> Result<()> {
    let cfg = prepare(common, None)?;
    gen_synthetic_tasks(cfg.seed, &cfg.synth)?.write(&common.out)
}

fn train_cmd(common: &Common, from: Option<&Path>) -> Result<()> {
    let init = from.map(load).transpose()?;
    let cfg = prepare(common, init.as_ref())?;
    let corpus = Corpus::open(&cfg)?;
    write(&common.out.join("vocab.txt"), &corpus.tokenizer()?.to_vocab_text())?;
    train_model(&cfg, &corpus, init.as_ref(), Some(&common.out))?;
    Ok(())
}

fn eval_cmd(common: &Common, from: &Path) -> Result<()> {
    let params = load(from)?;
    let cfg = prepare(common, Some(&params))?;
    let corpus = Corpus::open(&cfg)?;
    let label = from.display().to_string();
    let report = evaluate_model(&cfg, &corpus, &params, &label)?;
    write_eval(&common.out, &label, &report)
}

/// Probability fixture for `route-trace`: row-major `[T, E]` probabilities
/// and optionally the router settings to route them with.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProbFixture {
    probs: Vec<Vec<f64>>,
    router: Option<RouterConfig>,
}

fn builtin_fixture() -> ProbFixture {
    ProbFixture {
        probs: vec![vec![0.7, 0.3], vec![0.2, 0.8], vec![0.6, 0.4]],
        router: Some(RouterConfig {
            strategy: Strategy::TokenChoiceTop1,
            num_experts: 2,
            top_k: 1,
            capacity_factor: 1.0,
            ..RouterConfig::default()
        }),
    }
}

fn route_trace_cmd(common: &Common, from: Option<&Path>) -> Result<()> {
    let is_ckpt = from.is_some_and(|p| p.extension().is_some_and(|e| e == "ckpt"));
    if is_ckpt {
        return model_trace(common, from.expect("checked"));
    }
    let cfg = prepare(common, None)?;
    let fixture = match from {
        None => builtin_fixture(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?
        }
    };
    let router = fixture.router.unwrap_or(cfg.model.router);
    let e = router.num_experts;
    if fixture.probs.iter().any(|row| row.len() != e) {
        return Err(Error::Config(format!("every probability row must have {e} entries")));
    }
    let flat: Vec<f64> = fixture.probs.concat();
    let plan = route(&flat, fixture.probs.len(), &router)?;
    let mut lines = route_trace_lines(&plan, None).join("\n");
    lines.push('\n');
    write(&common.out.join("route-trace.jsonl"), &lines)?;
    write(&common.out.join("plan.json"), &to_json(&plan))
}

/// Routing of a trained model on the first record of every task in the
/// evaluation split; each line names its task and MoE block.
fn model_trace(common: &Common, ckpt: &Path) -> Result<()> {
    let params = load(ckpt)?;
    let cfg = prepare(common, Some(&params))?;
    let corpus = Corpus::open(&cfg)?;
    let tok = corpus.tokenizer()?;
    let mut out = String::new();
    for suite in corpus.suites(&cfg.eval.split)? {
        for t in &suite.tasks {
            let Some(rec) = corpus.records(&cfg.eval.split, &t.name)?.into_iter().next() else {
                continue;
            };
            let ids = tok.encode(&moelab::evalkit::assemble_prompt(&rec, suite.k_shot)?);
            let ids = ids[ids.len().saturating_sub(cfg.model.max_input_len)..].to_vec();
            let mut tape = Tape::new();
            let vars = params.leaves(&mut tape);
            let input = StackInput {
                ids: &ids,
                batch: 1,
                seq: ids.len(),
                prefix_lens: &[ids.len()],
            };
            let fwd = transformer_stack(&mut tape, params.architecture(), &vars, &input, &mut ForwardCtx::eval())?;
            for (block, plan) in &fwd.plans {
                for line in route_trace_lines(plan, Some(*block)) {
                    let task = serde_json::to_string(&t.name).expect("string");
                    out.push_str(&format!("{{\"task\":{task},{}\n", &line[1..]));
                }
            }
        }
    }
    write(&common.out.join("route-trace.jsonl"), &out)
}

#[derive(Serialize)]
struct AblationRow<'a> {
    label: &'a str,
    report: &'a EvalReport,
}

fn slug(label: &str) -> String {
    label.to_lowercase().replace(' ', "-")
}

fn ablate_cmd(common: &Common, from: Option<&Path>) -> Result<()> {
    let init = from.map(load).transpose()?;
    let cfg = prepare(common, init.as_ref())?;
    let corpus = Corpus::open(&cfg)?;
    let mut reports = Vec::new();
    for (label, freeze, aux) in ABLATION_ROWS {
        let row_cfg = ablation_config(&cfg, freeze, aux);
        let dir = common.out.join(slug(label));
        create_dir(&dir)?;
        row_cfg.write_snapshot(&dir)?;
        let run = train_model(&row_cfg, &corpus, init.as_ref(), Some(&dir))?;
        let report = evaluate_model(&row_cfg, &corpus, &run.params, label)?;
        write_eval(&dir, label, &report)?;
        reports.push((label.to_string(), report));
    }
    let rows: Vec<(String, &EvalReport)> = reports.iter().map(|(l, r)| (l.clone(), r)).collect();
    write(&common.out.join("ablation.txt"), &render_table("Finetuning Strategy", &rows))?;
    let json: Vec<AblationRow> = reports
        .iter()
        .map(|(label, report)| AblationRow { label, report })
        .collect();
    write(&common.out.join("ablation.json"), &to_json(&json))
}

fn average_cmd(common: &Common, from: &[PathBuf]) -> Result<()> {
    prepare(common, None)?;
    let avg = average_checkpoints::<f32>(from)?;
    save_checkpoint(&avg, &common.out.join("averaged.ckpt"))
}

fn report_cmd(common: &Common, from: &[PathBuf]) -> Result<()> {
    prepare(common, None)?;
    let mut reports = Vec::new();
    for p in from {
        let path = if p.is_dir() { p.join("report.json") } else { p.clone() };
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let r: EvalReport =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        reports.push(r);
    }
    let rows: Vec<(String, &EvalReport)> = reports.iter().map(|r| (r.meta.model_id.clone(), r)).collect();
    write(&common.out.join("report.txt"), &render_table("Model", &rows))?;
    write(&common.out.join("report.json"), &to_json(&reports))
}
