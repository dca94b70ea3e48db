//! The pieces every command is built from: corpus access, training on a
//! task mixture, evaluation and the ablation grid.

use std::fs;
use std::path::{Path, PathBuf};

use moelab::evalkit::{
    evaluate, gen_synthetic_tasks, parse_jsonl, to_examples, EvalReport, ModelGenerator, ReportMeta, SuiteSpec,
    SyntheticCorpus, TaskRecord, Tokenizer,
};
use moelab::model::{ModelConfig, ModelParams};
use moelab::routing::AuxLoss;
use moelab::training::{train, FreezeMode, RunArtifacts, TaskMixture};
use moelab::{Error, Result};

use crate::config::RunConfig;

/// A task corpus on disk or generated in memory.
pub enum Corpus {
    Dir(PathBuf),
    Memory(SyntheticCorpus),
}

impl Corpus {
    /// `data.corpus` when set, otherwise the synthetic corpus of the run seed.
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        match &cfg.data.corpus {
            Some(dir) => Ok(Corpus::Dir(dir.clone())),
            None => Ok(Corpus::Memory(gen_synthetic_tasks(cfg.seed, &cfg.synth)?)),
        }
    }

    pub fn text(&self, rel: &str) -> Result<String> {
        match self {
            Corpus::Dir(dir) => {
                let path = dir.join(rel);
                fs::read_to_string(&path).map_err(|e| Error::Io { path, source: e })
            }
            Corpus::Memory(c) => c
                .files
                .get(rel)
                .cloned()
                .ok_or_else(|| Error::Config(format!("corpus has no file {rel}"))),
        }
    }

    pub fn tokenizer(&self) -> Result<Tokenizer> {
        Tokenizer::from_vocab_text(&self.text("vocab.txt")?)
    }

    pub fn records(&self, split: &str, task: &str) -> Result<Vec<TaskRecord>> {
        let rel = format!("{split}/{task}.jsonl");
        parse_jsonl(&self.text(&rel)?, &rel)
    }

    pub fn suites(&self, split: &str) -> Result<Vec<SuiteSpec>> {
        let rel = format!("{split}/suites.json");
        let suites: Vec<SuiteSpec> =
            serde_json::from_str(&self.text(&rel)?).map_err(|e| Error::Format(format!("{rel}: {e}")))?;
        for s in &suites {
            s.validate()?;
        }
        Ok(suites)
    }
}

pub fn check_vocab(model: &ModelConfig, tok: &Tokenizer) -> Result<()> {
    if model.vocab_size < tok.len() {
        return Err(Error::Config(format!(
            "model.vocab_size {} is smaller than the corpus vocabulary ({} tokens)",
            model.vocab_size,
            tok.len()
        )));
    }
    Ok(())
}

pub fn mixture(corpus: &Corpus, tasks: &[String], tok: &Tokenizer, k: usize) -> Result<TaskMixture> {
    let tasks = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| Ok((t.clone(), to_examples(&corpus.records("train", t)?, tok, i, k)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskMixture { tasks })
}

/// Rebinds parameters to `model` (same architecture, possibly different
/// router or dropout settings).
pub fn retarget(params: &ModelParams<f32>, model: &ModelConfig) -> Result<ModelParams<f32>> {
    ModelParams::from_parts(model, params.params().to_vec())
}

pub fn train_model(
    cfg: &RunConfig,
    corpus: &Corpus,
    init: Option<&ModelParams<f32>>,
    out: Option<&Path>,
) -> Result<RunArtifacts<f32>> {
    let tok = corpus.tokenizer()?;
    check_vocab(&cfg.model, &tok)?;
    let mix = mixture(corpus, &cfg.data.train_tasks, &tok, cfg.data.k_shot)?;
    let init = init.map(|p| retarget(p, &cfg.model)).transpose()?;
    train(&cfg.model, &cfg.train, &mix, init, out)
}

pub fn evaluate_model(
    cfg: &RunConfig,
    corpus: &Corpus,
    params: &ModelParams<f32>,
    model_id: &str,
) -> Result<EvalReport> {
    let tok = corpus.tokenizer()?;
    check_vocab(params.config(), &tok)?;
    let suites = corpus.suites(&cfg.eval.split)?;
    let mut records = Vec::new();
    let mut seen = Vec::new();
    for s in &suites {
        for t in &s.tasks {
            if !seen.contains(&t.name) {
                records.extend(corpus.records(&cfg.eval.split, &t.name)?);
                seen.push(t.name.clone());
            }
        }
    }
    let mut generator = ModelGenerator {
        params,
        tokenizer: &tok,
        batch_size: cfg.eval.batch_size,
    };
    let meta = ReportMeta {
        model_id: model_id.to_string(),
        seed: cfg.seed,
    };
    evaluate(&mut generator, &suites, &records, &cfg.eval.decode, meta)
}

/// Rows of the finetuning-strategy ablation: label, freeze mode, auxiliary loss.
pub const ABLATION_ROWS: [(&str, FreezeMode, AuxLoss); 6] = [
    ("Baseline", FreezeMode::None, AuxLoss::None),
    ("Freeze-Gate", FreezeMode::FreezeGate, AuxLoss::None),
    ("Freeze-Expert", FreezeMode::FreezeExpert, AuxLoss::None),
    ("Freeze-MoE", FreezeMode::FreezeMoe, AuxLoss::None),
    ("Z-loss", FreezeMode::None, AuxLoss::ZLoss),
    ("Balance-loss", FreezeMode::None, AuxLoss::Balance),
];

pub fn ablation_config(cfg: &RunConfig, freeze: FreezeMode, aux: AuxLoss) -> RunConfig {
    let mut c = cfg.clone();
    c.train.freeze_mode = freeze;
    c.model.router.aux_loss = aux;
    c
}
