use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::batch::{loss_fn, Batch, TaskMixture};
use super::optim::{adam_step, freeze_mask, AdamState};
use super::{average_params, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, transformer_stack, ForwardCtx, ModelConfig, ModelParams, StackInput};
use crate::numerics::{Real, Rng, Tape};

/// Routing statistics of one MoE block at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerUsage {
    pub layer: usize,
    pub active_fraction: f64,
    pub normalized_entropy: f64,
    pub dropped_fraction: f64,
    pub load: Vec<usize>,
}

/// One line of `metrics.jsonl`. Losses are measured on the step's batch
/// before its update is applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lm_loss: f64,
    pub aux_loss: f64,
    /// Mean over MoE blocks of the share of tokens no expert processed.
    pub dropped_fraction: f64,
    pub per_layer_usage: Vec<LayerUsage>,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts<F: Real> {
    /// The model to use: the average of the last checkpoints when averaging
    /// is configured, otherwise the parameters after the last step.
    pub params: ModelParams<F>,
    pub last: ModelParams<F>,
    pub metrics: Vec<StepMetrics>,
    /// Saved checkpoint files, oldest first (empty without an output dir).
    pub checkpoints: Vec<PathBuf>,
}

/// The batch of step `step`: `batch_size` draws, each picking a task
/// uniformly and then an example of that task uniformly.
pub fn sample_batch(
    mixture: &TaskMixture,
    model: &ModelConfig,
    cfg: &TrainConfig,
    run: &Rng,
    step: usize,
) -> Result<Batch> {
    let mut rng = run.derive_indexed("data", step as u64);
    let picks: Vec<_> = (0..cfg.batch_size)
        .map(|_| {
            let (_, ex) = &mixture.tasks[rng.below(mixture.tasks.len())];
            &ex[rng.below(ex.len())]
        })
        .collect();
    Batch::from_examples(&picks, model.pad_id, model.max_input_len, model.max_target_len)
}

struct StepResult<F: Real> {
    metrics: StepMetrics,
    grads: Vec<Option<Vec<F>>>,
}

fn forward_backward<F: Real>(
    params: &ModelParams<F>,
    batch: &Batch,
    ctx: &mut ForwardCtx,
    step: usize,
    frozen: &[bool],
    want_grads: bool,
) -> Result<StepResult<F>> {
    let mut tape = Tape::new();
    let vars = params.leaves(&mut tape);
    let input = StackInput {
        ids: &batch.inputs,
        batch: batch.batch,
        seq: batch.seq,
        prefix_lens: &batch.prefix_lens,
    };
    let fwd = transformer_stack(&mut tape, params.architecture(), &vars, &input, ctx)?;
    let parts = loss_fn(&mut tape, fwd.logits, batch, fwd.aux)?;
    let loss = tape.scalar(parts.total).to_f64_lossy();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss at step {step}")));
    }
    let per_layer_usage: Vec<LayerUsage> = fwd
        .usage
        .iter()
        .map(|(l, u)| LayerUsage {
            layer: *l,
            active_fraction: u.active_fraction,
            normalized_entropy: u.normalized_entropy,
            dropped_fraction: u.dropped_fraction,
            load: u.per_expert_load.clone(),
        })
        .collect();
    let dropped_fraction = if per_layer_usage.is_empty() {
        0.0
    } else {
        per_layer_usage.iter().map(|u| u.dropped_fraction).sum::<f64>() / per_layer_usage.len() as f64
    };
    let metrics = StepMetrics {
        step,
        loss,
        lm_loss: tape.scalar(parts.lm).to_f64_lossy(),
        aux_loss: tape.scalar(fwd.aux).to_f64_lossy(),
        dropped_fraction,
        per_layer_usage,
    };
    let mut grads = Vec::new();
    if want_grads {
        tape.backward(parts.total)?;
        grads = vars
            .as_slice()
            .iter()
            .zip(frozen)
            .map(|(v, &f)| if f { None } else { tape.grad(*v).map(|g| g.to_vec()) })
            .collect();
    }
    Ok(StepResult { metrics, grads })
}

/// Loss of step `step` recomputed for `params` (the parameters after
/// `step - 1` updates): (total, lm).
pub fn replay_loss<F: Real>(
    params: &ModelParams<F>,
    cfg: &TrainConfig,
    mixture: &TaskMixture,
    step: usize,
) -> Result<(f64, f64)> {
    let run = Rng::new(cfg.seed);
    let batch = sample_batch(mixture, params.config(), cfg, &run, step)?;
    let mut ctx = ForwardCtx::train(&run, step as u64);
    let r = forward_backward(params, &batch, &mut ctx, step, &vec![false; params.len()], false)?;
    Ok((r.metrics.loss, r.metrics.lm_loss))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    fn create(path: PathBuf) -> Result<Self> {
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
            path,
        })
    }

    fn write(&mut self, value: &impl Serialize) -> Result<()> {
        let line = serde_json::to_string(value).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Serialize)]
struct UsageLine<'a> {
    step: usize,
    #[serde(flatten)]
    usage: &'a LayerUsage,
}

/// Trains `init` (or a fresh model from the run seed) on `mixture`.
///
/// With an output directory this writes `metrics.jsonl`, `usage.jsonl`,
/// `checkpoints/step-NNNNNN.ckpt` every `checkpoint_every` steps and after
/// the last step, and `final.ckpt` (the averaged model when
/// `average_last_n > 1`).
pub fn train<F: Real>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mixture: &TaskMixture,
    init: Option<ModelParams<F>>,
    out_dir: Option<&Path>,
) -> Result<RunArtifacts<F>> {
    cfg.validate()?;
    model_cfg.validate()?;
    mixture.validate()?;
    let run = Rng::new(cfg.seed);
    let mut params = match init {
        Some(p) if p.config() != model_cfg => {
            return Err(Error::Config(
                "initial parameters were built for a different model config".into(),
            ))
        }
        Some(p) => p,
        None => ModelParams::init(model_cfg, &run.derive("init"))?,
    };
    let frozen_names = freeze_mask(&params, cfg.freeze_mode);
    let frozen: Vec<bool> = params.params().iter().map(|p| frozen_names.contains(&p.name)).collect();
    for (p, &f) in params.params_mut().iter_mut().zip(&frozen) {
        p.tensor.set_requires_grad(!f);
    }

    let mut logs = None;
    let ckpt_dir = out_dir.map(|d| d.join("checkpoints"));
    if let (Some(dir), Some(ck)) = (out_dir, &ckpt_dir) {
        create_dir(dir)?;
        create_dir(ck)?;
        logs = Some((
            JsonLines::create(dir.join("metrics.jsonl"))?,
            JsonLines::create(dir.join("usage.jsonl"))?,
        ));
    }

    let mut state = AdamState::new(&params);
    let mut metrics = Vec::with_capacity(cfg.steps);
    let mut checkpoints = Vec::new();
    let mut pool: Vec<ModelParams<F>> = Vec::new();
    let mut keep = |params: &ModelParams<F>, step: usize, checkpoints: &mut Vec<PathBuf>| -> Result<()> {
        let mut snapshot = params.clone();
        for p in snapshot.params_mut() {
            p.tensor.set_requires_grad(true);
        }
        if let Some(ck) = &ckpt_dir {
            let path = ck.join(format!("step-{step:06}.ckpt"));
            save_checkpoint(&snapshot, &path)?;
            checkpoints.push(path);
        }
        pool.push(snapshot);
        if pool.len() > cfg.average_last_n {
            pool.remove(0);
        }
        Ok(())
    };

    for step in 1..=cfg.steps {
        let batch = sample_batch(mixture, model_cfg, cfg, &run, step)?;
        let mut ctx = ForwardCtx::train(&run, step as u64);
        let r = forward_backward(&params, &batch, &mut ctx, step, &frozen, true)?;
        adam_step(&mut params, &r.grads, &mut state, &cfg.adam, cfg.learning_rate, &frozen)?;
        if let Some((m, u)) = &mut logs {
            m.write(&r.metrics)?;
            for usage in &r.metrics.per_layer_usage {
                u.write(&UsageLine { step, usage })?;
            }
        }
        metrics.push(r.metrics);
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            keep(&params, step, &mut checkpoints)?;
        }
    }
    let saved_last = cfg.checkpoint_every > 0 && cfg.steps > 0 && cfg.steps % cfg.checkpoint_every == 0;
    if !saved_last {
        keep(&params, cfg.steps, &mut checkpoints)?;
    }
    if let Some((m, u)) = logs {
        m.finish()?;
        u.finish()?;
    }
    for p in params.params_mut() {
        p.tensor.set_requires_grad(true);
    }
    let chosen = if cfg.average_last_n > 1 && pool.len() > 1 {
        average_params(&pool)?
    } else {
        params.clone()
    };
    if let Some(dir) = out_dir {
        save_checkpoint(&chosen, &dir.join("final.ckpt"))?;
    }
    Ok(RunArtifacts {
        params: chosen,
        last: params,
        metrics,
        checkpoints,
    })
}
