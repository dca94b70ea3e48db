use super::layers::{dense_ffn_layer, moe_layer, FfnVars, MoeVars};
use super::params::{Architecture, FeedForwardIds, ModelParams, ParamVars};
use crate::error::{Error, Result};
use crate::numerics::{Real, Rng, Tape, Var};
use crate::routing::{DispatchPlan, UsageStats};

/// Mode and randomness of one forward pass.
pub struct ForwardCtx {
    pub training: bool,
    pub dropout: Rng,
    /// Router-noise stream; only read when training with `noise_std > 0`.
    pub noise: Rng,
}

impl ForwardCtx {
    /// Dropout-free, noise-free inference.
    pub fn eval() -> Self {
        Self {
            training: false,
            dropout: Rng::new(0),
            noise: Rng::new(0),
        }
    }

    /// Training mode for optimizer step `step` of a run whose root stream is
    /// `run`; each step gets its own dropout and noise sub-streams.
    pub fn train(run: &Rng, step: u64) -> Self {
        Self {
            training: true,
            dropout: run.derive_indexed("dropout", step),
            noise: run.derive_indexed("routing-noise", step),
        }
    }
}

/// A right-padded batch of token ids.
#[derive(Clone, Copy, Debug)]
pub struct StackInput<'a> {
    /// Row-major `[batch, seq]`.
    pub ids: &'a [usize],
    pub batch: usize,
    pub seq: usize,
    /// Per row, the number of leading positions attended bidirectionally.
    pub prefix_lens: &'a [usize],
}

#[derive(Clone, Debug)]
pub struct StackOutput {
    /// `[batch, seq, vocab]`.
    pub logits: Var,
    /// Sum of the MoE layers' weighted auxiliary losses.
    pub aux: Var,
    /// Per MoE block: (block index, usage).
    pub usage: Vec<(usize, UsageStats)>,
    pub plans: Vec<(usize, DispatchPlan)>,
}

/// Bidirectional bucketed relative position: half the buckets for keys at
/// or before the query, half for keys after it; exact buckets for small
/// distances, logarithmic up to `max_distance`, then saturated.
pub fn relative_bucket(rel: isize, num_buckets: usize, max_distance: usize) -> usize {
    let half = num_buckets / 2;
    let base = if rel > 0 { half } else { 0 };
    let dist = rel.unsigned_abs();
    let exact = (half / 2).max(1);
    if dist < exact {
        return base + dist;
    }
    if max_distance <= exact || dist >= max_distance {
        return base + half - 1;
    }
    let span = (half - exact) as f64;
    let scaled = ((dist as f64 / exact as f64).ln() / (max_distance as f64 / exact as f64).ln() * span)
        .floor() as usize;
    base + (exact + scaled).min(half - 1)
}

pub fn transformer_stack<F: Real>(
    tape: &mut Tape<F>,
    arch: &Architecture,
    vars: &ParamVars,
    input: &StackInput,
    ctx: &mut ForwardCtx,
) -> Result<StackOutput> {
    let cfg = arch.config();
    let (b_n, s_n) = (input.batch, input.seq);
    if input.ids.len() != b_n * s_n || input.prefix_lens.len() != b_n {
        return Err(Error::Shape {
            op: "transformer_stack",
            left: vec![b_n, s_n],
            right: vec![input.ids.len(), input.prefix_lens.len()],
        });
    }
    if s_n > cfg.max_seq_len() {
        return Err(Error::Length {
            len: s_n,
            limit: cfg.max_seq_len(),
        });
    }
    if let Some(&bad) = input.ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::Index {
            op: "transformer_stack ids",
            index: bad,
            bound: cfg.vocab_size,
        });
    }
    let lay = &arch.layout;
    let (d, heads) = (cfg.d_model, cfg.num_heads);
    let eps = F::from_f64_lossy(cfg.layer_norm_eps);
    let active: Vec<bool> = input.ids.iter().map(|&i| i != cfg.pad_id).collect();
    let mut allowed = vec![false; b_n * s_n * s_n];
    for b in 0..b_n {
        let prefix = input.prefix_lens[b];
        for i in 0..s_n {
            for j in 0..s_n {
                allowed[(b * s_n + i) * s_n + j] =
                    j == i || (active[b * s_n + j] && (j < prefix || j <= i));
            }
        }
    }
    let buckets: Vec<usize> = (0..s_n * s_n)
        .map(|ij| {
            let (i, j) = (ij / s_n, ij % s_n);
            relative_bucket(j as isize - i as isize, cfg.rel_buckets, cfg.rel_max_distance)
        })
        .collect();
    let bias = tape.embedding(vars.get(lay.rel_bias), &buckets, &[s_n, s_n])?;

    let mut h = tape.embedding(vars.get(lay.tokens), input.ids, &[b_n, s_n])?;
    h = tape.dropout(h, cfg.dropout, ctx.training, &mut ctx.dropout)?;
    let mut aux: Option<Var> = None;
    let mut usage = Vec::new();
    let mut plans = Vec::new();
    for (l, block) in lay.blocks.iter().enumerate() {
        let at = &block.attn;
        let v = |i: usize| vars.get(i);
        let a = tape.layer_norm(h, v(at.ln_gain), v(at.ln_bias), eps)?;
        let q = tape.affine(a, v(at.wq), Some(v(at.bq)))?;
        let k = tape.affine(a, v(at.wk), Some(v(at.bk)))?;
        let vv = tape.affine(a, v(at.wv), Some(v(at.bv)))?;
        let att = tape.attention(q, k, vv, Some(bias), &allowed, heads)?;
        let o = tape.affine(att, v(at.wo), Some(v(at.bo)))?;
        let o = tape.dropout(o, cfg.dropout, ctx.training, &mut ctx.dropout)?;
        h = tape.add(h, o)?;
        let flat = tape.reshape(h, &[b_n * s_n, d])?;
        let flat = match &block.ff {
            FeedForwardIds::Dense {
                ln_gain,
                ln_bias,
                ffn,
            } => {
                let f = FfnVars::from_ids(ffn, vars);
                dense_ffn_layer(tape, flat, (v(*ln_gain), v(*ln_bias)), &f, cfg, ctx)?
            }
            FeedForwardIds::Moe {
                ln_gain,
                ln_bias,
                router,
                experts,
            } => {
                let mv = MoeVars {
                    ln_gain: v(*ln_gain),
                    ln_bias: v(*ln_bias),
                    router: v(*router),
                    experts: experts.iter().map(|e| FfnVars::from_ids(e, vars)).collect(),
                };
                let out = moe_layer(tape, flat, &mv, cfg, ctx, Some(&active))?;
                aux = Some(match aux {
                    None => out.aux,
                    Some(prev) => tape.add(prev, out.aux)?,
                });
                usage.push((l, out.usage));
                plans.push((l, out.plan));
                out.y
            }
        };
        h = tape.reshape(flat, &[b_n, s_n, d])?;
    }
    let h = tape.layer_norm(h, vars.get(lay.final_gain), vars.get(lay.final_bias), eps)?;
    let logits = tape.affine(h, vars.get(lay.out_w), Some(vars.get(lay.out_b)))?;
    let aux = match aux {
        Some(a) => a,
        None => tape.constant(&[], vec![F::zero()])?,
    };
    Ok(StackOutput {
        logits,
        aux,
        usage,
        plans,
    })
}

/// Greedy decoding in eval mode. All unfinished prompts advance together one
/// token per forward pass; a sequence stops at `eos` (not included in the
/// output), after `max_new` tokens, or when it reaches the model's length
/// limit.
pub fn greedy_decode<F: Real>(
    params: &ModelParams<F>,
    prompts: &[Vec<usize>],
    max_new: usize,
    eos: usize,
) -> Result<Vec<Vec<usize>>> {
    let cfg = params.config();
    let limit = cfg.max_seq_len();
    for p in prompts {
        if p.is_empty() {
            return Err(Error::Config("greedy_decode: empty prompt".into()));
        }
        if p.len() > limit {
            return Err(Error::Length {
                len: p.len(),
                limit,
            });
        }
    }
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); prompts.len()];
    let mut done: Vec<bool> = prompts.iter().map(|p| p.len() >= limit).collect();
    for _ in 0..max_new {
        let live: Vec<usize> = (0..prompts.len()).filter(|&i| !done[i]).collect();
        if live.is_empty() {
            break;
        }
        let lens: Vec<usize> = live.iter().map(|&i| prompts[i].len() + out[i].len()).collect();
        let seq = *lens.iter().max().unwrap();
        let mut ids = vec![cfg.pad_id; live.len() * seq];
        for (r, &i) in live.iter().enumerate() {
            let row = &mut ids[r * seq..];
            row[..prompts[i].len()].copy_from_slice(&prompts[i]);
            row[prompts[i].len()..lens[r]].copy_from_slice(&out[i]);
        }
        let prefix: Vec<usize> = live.iter().map(|&i| prompts[i].len()).collect();
        let mut tape = Tape::new();
        let vars = params.leaves(&mut tape);
        let input = StackInput {
            ids: &ids,
            batch: live.len(),
            seq,
            prefix_lens: &prefix,
        };
        let fwd = transformer_stack(&mut tape, params.architecture(), &vars, &input, &mut ForwardCtx::eval())?;
        let logits = tape.value(fwd.logits);
        let v = cfg.vocab_size;
        for (r, &i) in live.iter().enumerate() {
            let at = (r * seq + lens[r] - 1) * v;
            let row = &logits[at..at + v];
            let mut best = 0;
            for (j, x) in row.iter().enumerate() {
                if *x > row[best] {
                    best = j;
                }
            }
            if best == eos {
                done[i] = true;
            } else {
                out[i].push(best);
                if lens[r] + 1 >= limit {
                    done[i] = true;
                }
            }
        }
    }
    Ok(out)
}
