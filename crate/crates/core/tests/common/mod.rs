//! Independent oracles shared by the integration suites. Nothing here calls
//! into the routing implementation.
#![allow(dead_code)]

use moelab::numerics::Rng;

/// Random row-stochastic `t × e` matrix from softmax of scaled normals.
pub fn random_probs(rng: &mut Rng, t: usize, e: usize, temperature: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(t * e);
    for _ in 0..t {
        let logits: Vec<f64> = (0..e).map(|_| rng.normal() * temperature).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        out.extend(logits.iter().map(|l| (l - m).exp() / z));
    }
    out
}

/// Top-k indices of `row` by repeated linear max scans (ties to lower index).
pub fn scan_top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; row.len()];
    let mut out = Vec::new();
    for _ in 0..k.min(row.len()) {
        let mut best: Option<usize> = None;
        for (i, &v) in row.iter().enumerate() {
            if taken[i] {
                continue;
            }
            match best {
                None => best = Some(i),
                Some(b) if v > row[b] => best = Some(i),
                _ => {}
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    out
}

/// Token-choice outcome computed by walking tokens in order with a per-expert
/// counter: `(token, expert, slot, gate)` tuples and the dropped tokens.
pub fn sequential_claim(
    probs: &[f64],
    t_n: usize,
    e_n: usize,
    k: usize,
    cap: usize,
) -> (Vec<(usize, usize, usize, f64)>, Vec<usize>) {
    let mut used = vec![0usize; e_n];
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for t in 0..t_n {
        let row = &probs[t * e_n..(t + 1) * e_n];
        let top = scan_top_k(row, k);
        let denom: f64 = top.iter().map(|&e| row[e]).sum();
        let mut any = false;
        for &e in &top {
            if used[e] < cap {
                let gate = if k == 1 { row[e] } else { row[e] / denom };
                kept.push((t, e, used[e], gate));
                used[e] += 1;
                any = true;
            }
        }
        if !any {
            dropped.push(t);
        }
    }
    kept.sort_by_key(|a| (a.1, a.2));
    (kept, dropped)
}

/// Tokens each expert selects under expert-choice, by full sort of the column.
pub fn sort_oracle_expert_choice(scores: &[f64], t_n: usize, e_n: usize, cap: usize) -> Vec<Vec<usize>> {
    (0..e_n)
        .map(|e| {
            let mut col: Vec<(usize, f64)> = (0..t_n).map(|t| (t, scores[t * e_n + e])).collect();
            // Stable sort on descending score keeps lower token indices first on ties.
            col.sort_by(|a, b| b.1.total_cmp(&a.1));
            col.into_iter().take(cap.min(t_n)).map(|(t, _)| t).collect()
        })
        .collect()
}

/// Direct evaluation of `E · Σ_e f_e · P_e`.
pub fn balance_oracle(probs: &[f64], t_n: usize, e_n: usize) -> f64 {
    let mut total = 0.0;
    for e in 0..e_n {
        let f = (0..t_n)
            .filter(|&t| scan_top_k(&probs[t * e_n..(t + 1) * e_n], 1)[0] == e)
            .count() as f64
            / t_n as f64;
        let p = (0..t_n).map(|t| probs[t * e_n + e]).sum::<f64>() / t_n as f64;
        total += f * p;
    }
    e_n as f64 * total
}

/// Shannon entropy of a load vector over `ln E`.
pub fn entropy_oracle(load: &[usize]) -> f64 {
    let total: usize = load.iter().sum();
    if total == 0 {
        return 0.0;
    }
    if load.len() == 1 {
        return 1.0;
    }
    let mut h = 0.0;
    for &l in load {
        if l > 0 {
            let q = l as f64 / total as f64;
            h -= q * q.ln();
        }
    }
    h / (load.len() as f64).ln()
}

pub fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    assert!((a - b).abs() <= tol, "{what}: {a} vs {b} (tol {tol})");
}

use moelab::numerics::{check_program, DiffTensor, GradCheckConfig, Real, Tape, TapeProgram, Var};
use moelab::routing::{DispatchPlan, Strategy};

pub fn param(shape: &[usize], rng: &mut Rng) -> DiffTensor<f64> {
    DiffTensor::randn(shape, 1.0, rng).requires_grad()
}

/// Reduces a node to a scalar with fixed pseudo-random weights so every
/// output coordinate gets a distinct upstream gradient.
pub fn weighted_sum<F: Real>(tape: &mut Tape<F>, v: Var) -> moelab::Result<Var> {
    let n = tape.value(v).len();
    let mut rng = Rng::new(0xfeed);
    let w = rng.normal_vec(n, 1.0);
    let m = tape.mul_const(v, w)?;
    Ok(tape.sum(m))
}

/// Runs the 64-bit (rel. err < 1e-6) and 32-bit (< 1e-4) checks; returns
/// the two maximum errors.
pub fn assert_grads<P: TapeProgram>(p: &P, inputs: &[DiffTensor<f64>]) -> (f64, f64) {
    let r64 = check_program::<f64, _>(p, inputs, &GradCheckConfig::f64()).unwrap();
    assert!(r64.passed, "f64: {r64:?}");
    let r32 = check_program::<f32, _>(p, inputs, &GradCheckConfig::f32()).unwrap();
    assert!(r32.passed, "f32: {r32:?}");
    (r64.max_rel_err, r32.max_rel_err)
}

/// Checks every structural invariant of a plan, plus agreement with the
/// sequential-claim oracle (token-choice) or the sort oracle (expert-choice).
pub fn check_plan(plan: &DispatchPlan, probs: &[f64], k: usize) -> Result<(), String> {
    let (t_n, e_n, cap) = (plan.num_tokens, plan.num_experts, plan.capacity);
    if cap < 1 {
        return Err("capacity below 1".into());
    }
    let mut slots = vec![vec![false; cap]; e_n];
    for a in &plan.assignments {
        if a.expert >= e_n || a.token >= t_n {
            return Err(format!("out of range assignment {a:?}"));
        }
        if a.slot >= cap {
            return Err(format!("slot {} >= capacity {cap}", a.slot));
        }
        if std::mem::replace(&mut slots[a.expert][a.slot], true) {
            return Err(format!("slot reused: {a:?}"));
        }
        if !(0.0..=1.0).contains(&a.gate) {
            return Err(format!("gate outside [0,1]: {a:?}"));
        }
    }
    match plan.strategy {
        Strategy::ExpertChoice => {
            let want = sort_oracle_expert_choice(probs, t_n, e_n, cap);
            for (e, w) in want.iter().enumerate() {
                let got = plan.expert_tokens(e);
                if got.len() != cap.min(t_n) {
                    return Err(format!("expert {e} took {} tokens", got.len()));
                }
                if &got != w {
                    return Err(format!("expert {e}: {got:?} vs oracle {w:?}"));
                }
            }
        }
        _ => {
            for t in 0..t_n {
                let mine: Vec<_> = plan.assignments.iter().filter(|a| a.token == t).collect();
                let mut experts: Vec<usize> = mine.iter().map(|a| a.expert).collect();
                experts.sort_unstable();
                experts.dedup();
                if experts.len() != mine.len() || mine.len() > k {
                    return Err(format!("token {t} has {} assignments", mine.len()));
                }
                let total: f64 = mine.iter().map(|a| a.gate).sum();
                if total > 1.0 + 1e-9 {
                    return Err(format!("token {t} gates sum to {total}"));
                }
                let in_dropped = plan.dropped.contains(&t);
                if in_dropped == !mine.is_empty() {
                    return Err(format!("token {t} accounted {} times", mine.len().min(1) + in_dropped as usize));
                }
            }
            let (kept, dropped) = sequential_claim(probs, t_n, e_n, k, cap);
            if dropped != plan.dropped {
                return Err(format!("dropped {:?} vs oracle {dropped:?}", plan.dropped));
            }
            if kept.len() != plan.assignments.len() {
                return Err("assignment count differs from oracle".into());
            }
            for (o, a) in kept.iter().zip(&plan.assignments) {
                if (o.0, o.1, o.2) != (a.token, a.expert, a.slot) || (o.3 - a.gate).abs() > 1e-12 {
                    return Err(format!("{a:?} vs oracle {o:?}"));
                }
            }
        }
    }
    Ok(())
}
