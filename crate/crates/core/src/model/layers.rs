use super::params::{FfnIds, ParamVars};
use super::stack::ForwardCtx;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{CustomOp, Real, Tape, Var};
use crate::routing::{
    balance_loss, combine, expert_usage, gate_weights, route, router_logits, router_z_loss,
    DispatchPlan, UsageStats,
};

/// Tape handles of one feed-forward network.
#[derive(Clone, Copy, Debug)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl FfnVars {
    pub(crate) fn from_ids(ids: &FfnIds, vars: &ParamVars) -> Self {
        Self {
            w1: vars.get(ids.w1),
            b1: vars.get(ids.b1),
            w2: vars.get(ids.w2),
            b2: vars.get(ids.b2),
        }
    }
}

/// Tape handles of one MoE sublayer.
#[derive(Clone, Debug)]
pub struct MoeVars {
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub router: Var,
    pub experts: Vec<FfnVars>,
}

/// `affine(D→F) → gelu → dropout(rate) → affine(F→D)` over the rows of `x`.
pub fn expert_ffn<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    p: &FfnVars,
    rate: f64,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let rows = tape.shape(x).first().copied().unwrap_or(0);
    if rows == 0 {
        let d_out = tape.shape(p.w2).get(1).copied().unwrap_or(0);
        return tape.constant(&[0, d_out], Vec::new());
    }
    let h = tape.affine(x, p.w1, Some(p.b1))?;
    let h = tape.gelu(h);
    let h = tape.dropout(h, rate, ctx.training, &mut ctx.dropout)?;
    tape.affine(h, p.w2, Some(p.b2))
}

/// Dense residual sublayer `x + dropout(ffn(LN(x)))` for `x: [T, D]`.
pub fn dense_ffn_layer<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    ln: (Var, Var),
    ffn: &FfnVars,
    cfg: &ModelConfig,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let xn = tape.layer_norm(x, ln.0, ln.1, F::from_f64_lossy(cfg.layer_norm_eps))?;
    let h = expert_ffn(tape, xn, ffn, cfg.dropout, ctx)?;
    let h = tape.dropout(h, cfg.dropout, ctx.training, &mut ctx.dropout)?;
    tape.add(x, h)
}

#[derive(Clone, Debug)]
pub struct MoeOutput {
    /// `x + dropout(combined expert output)`, `[T, D]`.
    pub y: Var,
    /// Weighted auxiliary loss (a constant zero when disabled).
    pub aux: Var,
    pub usage: UsageStats,
    pub plan: DispatchPlan,
}

/// MoE residual sublayer over `x: [T, D]`.
///
/// Rows with `active[t] == false` (padding) are neither routed nor counted
/// against capacity; they pass through on the residual path. Plan token
/// indices refer to the active rows in order.
pub fn moe_layer<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    p: &MoeVars,
    cfg: &ModelConfig,
    ctx: &mut ForwardCtx,
    active: Option<&[bool]>,
) -> Result<MoeOutput> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != cfg.d_model {
        return Err(Error::Shape {
            op: "moe_layer",
            left: shape,
            right: vec![0, cfg.d_model],
        });
    }
    let (t_all, d) = (shape[0], shape[1]);
    let rcfg = &cfg.router;
    let xn = tape.layer_norm(x, p.ln_gain, p.ln_bias, F::from_f64_lossy(cfg.layer_norm_eps))?;
    let rows: Option<Vec<usize>> = match active {
        Some(mask) if mask.len() != t_all => {
            return Err(Error::Shape {
                op: "moe_layer mask",
                left: vec![t_all],
                right: vec![mask.len()],
            })
        }
        Some(mask) if mask.iter().any(|a| !a) => {
            Some((0..t_all).filter(|&t| mask[t]).collect())
        }
        _ => None,
    };
    let (xa, t_n) = match &rows {
        Some(r) => (tape.embedding(xn, r, &[r.len()])?, r.len()),
        None => (xn, t_all),
    };
    let logits = router_logits(tape, p.router, xa)?;
    let scored = if ctx.training && rcfg.noise_std > 0.0 {
        let noise = ctx.noise.normal_vec::<F>(t_n * rcfg.num_experts, rcfg.noise_std);
        tape.add_const(logits, &noise)?
    } else {
        logits
    };
    let probs = tape.softmax(scored)?;
    let pv: Vec<f64> = tape.value(probs).iter().map(|v| v.to_f64_lossy()).collect();
    let plan = route(&pv, t_n, rcfg)?;
    let gates = gate_weights(tape, probs, &plan)?;
    let mut outs = Vec::with_capacity(rcfg.num_experts);
    for (e, ffn) in p.experts.iter().enumerate() {
        let toks = plan.expert_tokens(e);
        if toks.is_empty() {
            outs.push(None);
            continue;
        }
        let xe = tape.embedding(xa, &toks, &[toks.len()])?;
        outs.push(Some(expert_ffn(tape, xe, ffn, cfg.expert_dropout, ctx)?));
    }
    let mut mixed = combine(tape, &plan, gates, &outs, d)?;
    if let Some(r) = &rows {
        mixed = scatter_rows(tape, mixed, r, t_all)?;
    }
    let mixed = tape.dropout(mixed, cfg.dropout, ctx.training, &mut ctx.dropout)?;
    let y = tape.add(x, mixed)?;

    let mut aux = tape.constant(&[], vec![F::zero()])?;
    if rcfg.aux_loss.uses_balance() && t_n > 0 {
        let b = balance_loss(tape, probs, &plan)?;
        let b = tape.scale(b, F::from_f64_lossy(rcfg.aux_weight_balance));
        aux = tape.add(aux, b)?;
    }
    if rcfg.aux_loss.uses_z() && t_n > 0 {
        let z = router_z_loss(tape, logits)?;
        let z = tape.scale(z, F::from_f64_lossy(rcfg.aux_weight_z));
        aux = tape.add(aux, z)?;
    }
    let usage = expert_usage(&plan, rcfg.num_experts);
    Ok(MoeOutput { y, aux, usage, plan })
}

struct ScatterRows {
    rows: Vec<usize>,
    d: usize,
}

impl<F: Real> CustomOp<F> for ScatterRows {
    fn name(&self) -> &'static str {
        "scatter_rows"
    }

    fn backward(&self, _inputs: &[&[F]], _output: &[F], g: &[F], grads: &mut [Vec<F>]) {
        let d = self.d;
        for (i, &r) in self.rows.iter().enumerate() {
            let dst = &mut grads[0][i * d..(i + 1) * d];
            for (a, b) in dst.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                *a = *a + *b;
            }
        }
    }
}

/// Places row `i` of `x: [n, D]` at row `rows[i]` of a zero `[total, D]`
/// output. `rows` must be distinct.
pub fn scatter_rows<F: Real>(tape: &mut Tape<F>, x: Var, rows: &[usize], total: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[0] != rows.len() {
        return Err(Error::Shape {
            op: "scatter_rows",
            left: shape,
            right: vec![rows.len()],
        });
    }
    let d = shape[1];
    let mut seen = vec![false; total];
    let mut out = vec![F::zero(); total * d];
    let xv = tape.value(x);
    for (i, &r) in rows.iter().enumerate() {
        if r >= total {
            return Err(Error::Index {
                op: "scatter_rows",
                index: r,
                bound: total,
            });
        }
        if std::mem::replace(&mut seen[r], true) {
            return Err(Error::Config(format!("scatter_rows: row {r} repeated")));
        }
        out[r * d..(r + 1) * d].copy_from_slice(&xv[i * d..(i + 1) * d]);
    }
    tape.custom(
        &[x],
        vec![total, d],
        out,
        Box::new(ScatterRows {
            rows: rows.to_vec(),
            d,
        }),
    )
}
