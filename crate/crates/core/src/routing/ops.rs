//! Differentiable routing ops.

use super::{DispatchPlan, Strategy};
use crate::error::{Error, Result};
use crate::numerics::{CustomOp, Real, Tape, Var};

/// Router scores `tokens·router_weights` for `tokens: [T, D]`,
/// `router_weights: [D, E]`.
pub fn router_logits<F: Real>(tape: &mut Tape<F>, router_weights: Var, tokens: Var) -> Result<Var> {
    if tape.shape(tokens).len() != 2 {
        return Err(Error::Shape {
            op: "router_logits",
            left: tape.shape(tokens).to_vec(),
            right: tape.shape(router_weights).to_vec(),
        });
    }
    tape.affine(tokens, router_weights, None)
}

/// `softmax(tokens·router_weights)` row-wise: a distribution over experts per token.
pub fn gate_probs<F: Real>(tape: &mut Tape<F>, router_weights: Var, tokens: Var) -> Result<Var> {
    let logits = router_logits(tape, router_weights, tokens)?;
    tape.softmax(logits)
}

fn check_plan_shape<F: Real>(tape: &Tape<F>, v: Var, plan: &DispatchPlan, op: &'static str) -> Result<()> {
    if tape.shape(v) != [plan.num_tokens, plan.num_experts] {
        return Err(Error::Shape {
            op,
            left: tape.shape(v).to_vec(),
            right: vec![plan.num_tokens, plan.num_experts],
        });
    }
    Ok(())
}

struct GateWeightsOp {
    experts: usize,
    /// Per token: assigned experts and the top-k set used for renormalization
    /// (empty when the gate is the raw probability).
    rows: Vec<(Vec<usize>, Vec<usize>)>,
}

impl<F: Real> CustomOp<F> for GateWeightsOp {
    fn name(&self) -> &'static str {
        "gate_weights"
    }

    fn backward(&self, inputs: &[&[F]], _output: &[F], g: &[F], grads: &mut [Vec<F>]) {
        let (p, dp) = (inputs[0], &mut grads[0]);
        let e_n = self.experts;
        for (t, (assigned, norm_set)) in self.rows.iter().enumerate() {
            let base = t * e_n;
            if norm_set.is_empty() {
                for &e in assigned {
                    dp[base + e] = dp[base + e] + g[base + e];
                }
                continue;
            }
            let s: F = norm_set.iter().map(|&e| p[base + e]).sum();
            let s2 = s * s;
            // d(p_e / S)/dp_j = δ_ej / S - p_e / S² for j in the top-k set.
            let mut cross = F::zero();
            for &e in assigned {
                dp[base + e] = dp[base + e] + g[base + e] / s;
                cross = cross + g[base + e] * p[base + e] / s2;
            }
            for &j in norm_set {
                dp[base + j] = dp[base + j] - cross;
            }
        }
    }
}

/// Dense `[T, E]` gate-weight matrix for `plan`: zero for uncomputed pairs,
/// the probability for top-1 and expert-choice, the probability renormalized
/// over the token's top-k set for top-k > 1 token-choice.
pub fn gate_weights<F: Real>(tape: &mut Tape<F>, probs: Var, plan: &DispatchPlan) -> Result<Var> {
    check_plan_shape(tape, probs, plan, "gate_weights")?;
    let e_n = plan.num_experts;
    let renorm = plan.strategy == Strategy::TokenChoiceTop2;
    let mut rows: Vec<(Vec<usize>, Vec<usize>)> = (0..plan.num_tokens)
        .map(|t| {
            let norm = if renorm { plan.choices[t].clone() } else { Vec::new() };
            (Vec::new(), norm)
        })
        .collect();
    for a in &plan.assignments {
        rows[a.token].0.push(a.expert);
    }
    let p = tape.value(probs);
    let mut out = vec![F::zero(); p.len()];
    for (t, (assigned, norm_set)) in rows.iter().enumerate() {
        let base = t * e_n;
        let s: F = if norm_set.is_empty() {
            F::one()
        } else {
            norm_set.iter().map(|&e| p[base + e]).sum()
        };
        for &e in assigned {
            out[base + e] = if norm_set.is_empty() {
                p[base + e]
            } else {
                p[base + e] / s
            };
        }
    }
    let shape = tape.shape(probs).to_vec();
    tape.custom(
        &[probs],
        shape,
        out,
        Box::new(GateWeightsOp {
            experts: e_n,
            rows,
        }),
    )
}

struct CombineOp {
    experts: usize,
    dim: usize,
    /// (token, expert, input index of that expert's output, slot)
    links: Vec<(usize, usize, usize, usize)>,
}

impl<F: Real> CustomOp<F> for CombineOp {
    fn name(&self) -> &'static str {
        "combine"
    }

    fn backward(&self, inputs: &[&[F]], _output: &[F], g: &[F], grads: &mut [Vec<F>]) {
        let d = self.dim;
        let gates = inputs[0];
        for &(t, e, input, slot) in &self.links {
            let gate = gates[t * self.experts + e];
            let y = &inputs[input][slot * d..(slot + 1) * d];
            let gt = &g[t * d..(t + 1) * d];
            let mut dg = F::zero();
            {
                let dy = &mut grads[input][slot * d..(slot + 1) * d];
                for j in 0..d {
                    dy[j] = dy[j] + gate * gt[j];
                    dg = dg + gt[j] * y[j];
                }
            }
            let dgates = &mut grads[0];
            dgates[t * self.experts + e] = dgates[t * self.experts + e] + dg;
        }
    }
}

/// `out[t] = Σ gate[t, e] · expert_outputs[e][slot]` over the plan's
/// assignments of token `t`; tokens with no assignment get zeros.
///
/// `expert_outputs[e]` is `None` for experts that received no tokens and
/// otherwise a `[load_e, D]` node whose rows follow slot order.
pub fn combine<F: Real>(
    tape: &mut Tape<F>,
    plan: &DispatchPlan,
    gates: Var,
    expert_outputs: &[Option<Var>],
    dim: usize,
) -> Result<Var> {
    check_plan_shape(tape, gates, plan, "combine")?;
    let load = plan.expert_load();
    if expert_outputs.len() != plan.num_experts {
        return Err(Error::Shape {
            op: "combine",
            left: vec![plan.num_experts],
            right: vec![expert_outputs.len()],
        });
    }
    let mut inputs = vec![gates];
    let mut input_of = vec![usize::MAX; plan.num_experts];
    for (e, out) in expert_outputs.iter().enumerate() {
        match (out, load[e]) {
            (None, 0) => {}
            (Some(v), n) if tape.shape(*v) == [n, dim] => {
                input_of[e] = inputs.len();
                inputs.push(*v);
            }
            (other, n) => {
                return Err(Error::Shape {
                    op: "combine",
                    left: vec![n, dim],
                    right: other.map(|v| tape.shape(v).to_vec()).unwrap_or_default(),
                })
            }
        }
    }
    let links: Vec<(usize, usize, usize, usize)> = plan
        .assignments
        .iter()
        .map(|a| (a.token, a.expert, input_of[a.expert], a.slot))
        .collect();
    let mut out = vec![F::zero(); plan.num_tokens * dim];
    let gv = tape.value(gates);
    for &(t, e, input, slot) in &links {
        let gate = gv[t * plan.num_experts + e];
        let y = &tape.value(inputs[input])[slot * dim..(slot + 1) * dim];
        for (o, yv) in out[t * dim..(t + 1) * dim].iter_mut().zip(y) {
            *o = *o + gate * *yv;
        }
    }
    tape.custom(
        &inputs,
        vec![plan.num_tokens, dim],
        out,
        Box::new(CombineOp {
            experts: plan.num_experts,
            dim,
            links,
        }),
    )
}

struct BalanceOp {
    experts: usize,
    tokens: usize,
    fractions: Vec<f64>,
}

impl<F: Real> CustomOp<F> for BalanceOp {
    fn name(&self) -> &'static str {
        "balance_loss"
    }

    fn backward(&self, _inputs: &[&[F]], _output: &[F], g: &[F], grads: &mut [Vec<F>]) {
        let scale = self.experts as f64 / self.tokens as f64;
        let dp = &mut grads[0];
        for t in 0..self.tokens {
            for e in 0..self.experts {
                let i = t * self.experts + e;
                dp[i] = dp[i] + g[0] * F::from_f64_lossy(scale * self.fractions[e]);
            }
        }
    }
}

/// Load-balancing loss `E · Σ_e f_e · P_e`, where `f_e` is the fraction of
/// tokens whose first choice is `e` and `P_e` the mean gate probability of
/// `e`. Differentiable through `P_e` only.
pub fn balance_loss<F: Real>(tape: &mut Tape<F>, probs: Var, plan: &DispatchPlan) -> Result<Var> {
    check_plan_shape(tape, probs, plan, "balance_loss")?;
    let (t_n, e_n) = (plan.num_tokens, plan.num_experts);
    if t_n == 0 {
        return tape.constant(&[], vec![F::zero()]);
    }
    let mut fractions = vec![0.0f64; e_n];
    for c in &plan.choices {
        fractions[c[0]] += 1.0 / t_n as f64;
    }
    let p = tape.value(probs);
    let mut mean_p = vec![0.0f64; e_n];
    for t in 0..t_n {
        for e in 0..e_n {
            mean_p[e] += p[t * e_n + e].to_f64_lossy();
        }
    }
    let value: f64 = e_n as f64
        * fractions
            .iter()
            .zip(&mean_p)
            .map(|(f, s)| f * s / t_n as f64)
            .sum::<f64>();
    tape.custom(
        &[probs],
        Vec::new(),
        vec![F::from_f64_lossy(value)],
        Box::new(BalanceOp {
            experts: e_n,
            tokens: t_n,
            fractions,
        }),
    )
}

struct ZLossOp {
    experts: usize,
    lse: Vec<f64>,
}

impl<F: Real> CustomOp<F> for ZLossOp {
    fn name(&self) -> &'static str {
        "router_z_loss"
    }

    fn backward(&self, inputs: &[&[F]], _output: &[F], g: &[F], grads: &mut [Vec<F>]) {
        let t_n = self.lse.len();
        let e_n = self.experts;
        let x = inputs[0];
        let dx = &mut grads[0];
        for t in 0..t_n {
            let coef = g[0].to_f64_lossy() * 2.0 * self.lse[t] / t_n as f64;
            for e in 0..e_n {
                let i = t * e_n + e;
                let soft = (x[i].to_f64_lossy() - self.lse[t]).exp();
                dx[i] = dx[i] + F::from_f64_lossy(coef * soft);
            }
        }
    }
}

/// `(1/T) · Σ_t (log Σ_e exp logits[t, e])²`, max-shifted.
pub fn router_z_loss<F: Real>(tape: &mut Tape<F>, logits: Var) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[1] == 0 {
        return Err(Error::Shape {
            op: "router_z_loss",
            left: shape,
            right: Vec::new(),
        });
    }
    let (t_n, e_n) = (shape[0], shape[1]);
    let x = tape.value(logits);
    let lse: Vec<f64> = x
        .chunks_exact(e_n)
        .map(|row| {
            let m = row
                .iter()
                .map(|v| v.to_f64_lossy())
                .fold(f64::NEG_INFINITY, f64::max);
            m + row
                .iter()
                .map(|v| (v.to_f64_lossy() - m).exp())
                .sum::<f64>()
                .ln()
        })
        .collect();
    let value = if t_n == 0 {
        0.0
    } else {
        lse.iter().map(|l| l * l).sum::<f64>() / t_n as f64
    };
    tape.custom(
        &[logits],
        Vec::new(),
        vec![F::from_f64_lossy(value)],
        Box::new(ZLossOp { experts: e_n, lse }),
    )
}
