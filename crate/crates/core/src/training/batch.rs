use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Var};

/// Target id that the loss skips.
pub const IGNORE: usize = usize::MAX;

/// One tokenized training example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub prompt: Vec<usize>,
    /// Target tokens, normally ending with the end-of-sequence id.
    pub target: Vec<usize>,
    pub task: usize,
}

/// Named tasks with their tokenized examples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskMixture {
    pub tasks: Vec<(String, Vec<Example>)>,
}

impl TaskMixture {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config("task mixture is empty".into()));
        }
        for (name, ex) in &self.tasks {
            if ex.is_empty() {
                return Err(Error::Config(format!("task {name} has no examples")));
            }
            if ex.iter().any(|e| e.prompt.is_empty() || e.target.is_empty()) {
                return Err(Error::Config(format!("task {name} has an empty prompt or target")));
            }
        }
        Ok(())
    }
}

/// A right-padded prefix-LM batch. Position `t` of row `b` reads
/// `inputs[b, t]` and is trained to predict `targets[b, t]` when
/// `loss_mask[b, t]`; the mask covers exactly the target tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub batch: usize,
    pub seq: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub loss_mask: Vec<bool>,
    pub prefix_lens: Vec<usize>,
    pub task_ids: Vec<usize>,
}

impl Batch {
    /// Builds a batch from `prompt ++ target` sequences. Prompts longer
    /// than `max_input` keep their last `max_input` tokens; targets are cut
    /// to `max_target`.
    pub fn from_examples(
        examples: &[&Example],
        pad_id: usize,
        max_input: usize,
        max_target: usize,
    ) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::DegenerateBatch("no examples".into()));
        }
        let seqs: Vec<(Vec<usize>, usize)> = examples
            .iter()
            .map(|e| {
                let p = &e.prompt[e.prompt.len().saturating_sub(max_input)..];
                let t = &e.target[..e.target.len().min(max_target)];
                let mut s = p.to_vec();
                s.extend_from_slice(t);
                (s, p.len())
            })
            .collect();
        let seq = seqs.iter().map(|(s, _)| s.len() - 1).max().unwrap_or(0);
        if seq == 0 {
            return Err(Error::DegenerateBatch("sequences of length one".into()));
        }
        let b_n = examples.len();
        let mut inputs = vec![pad_id; b_n * seq];
        let mut targets = vec![IGNORE; b_n * seq];
        let mut loss_mask = vec![false; b_n * seq];
        let mut prefix_lens = Vec::with_capacity(b_n);
        for (b, (s, plen)) in seqs.iter().enumerate() {
            let n = s.len() - 1;
            inputs[b * seq..b * seq + n].copy_from_slice(&s[..n]);
            for t in 0..n {
                if t + 1 >= *plen {
                    targets[b * seq + t] = s[t + 1];
                    loss_mask[b * seq + t] = true;
                }
            }
            prefix_lens.push((*plen).min(n));
        }
        Ok(Self {
            batch: b_n,
            seq,
            inputs,
            targets,
            loss_mask,
            prefix_lens,
            task_ids: examples.iter().map(|e| e.task).collect(),
        })
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|m| **m).count()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    /// `lm + aux`.
    pub total: Var,
    pub lm: Var,
}

/// Mean cross-entropy over the masked positions of `logits: [B, S, V]`
/// plus the auxiliary loss.
pub fn loss_fn<F: Real>(tape: &mut Tape<F>, logits: Var, batch: &Batch, aux: Var) -> Result<LossParts> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 3 || shape[0] != batch.batch || shape[1] != batch.seq {
        return Err(Error::Shape {
            op: "loss_fn",
            left: shape,
            right: vec![batch.batch, batch.seq],
        });
    }
    if batch.masked_count() == 0 {
        return Err(Error::DegenerateBatch("loss mask is empty".into()));
    }
    let targets: Vec<usize> = batch
        .targets
        .iter()
        .zip(&batch.loss_mask)
        .map(|(&t, &m)| if m { t } else { IGNORE })
        .collect();
    let flat = tape.reshape(logits, &[batch.batch * batch.seq, shape[2]])?;
    let lm = tape.cross_entropy(flat, &targets, IGNORE)?;
    let total = tape.add(lm, aux)?;
    Ok(LossParts { total, lm })
}
