use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{RouterConfig, Strategy};
use crate::error::{Error, Result};

/// One computed (token, expert) pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub token: usize,
    pub expert: usize,
    /// Row of the expert's input batch; unique per expert and `< capacity`.
    pub slot: usize,
    pub gate: f64,
}

/// The routing decision for one group of `num_tokens` tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispatchPlan {
    pub strategy: Strategy,
    pub num_tokens: usize,
    pub num_experts: usize,
    pub capacity: usize,
    /// Sorted by expert, then slot.
    pub assignments: Vec<Assignment>,
    /// Tokens left with no computed expert, ascending.
    pub dropped: Vec<usize>,
    /// Token-choice: each token's ranked top-k experts before capacity is
    /// applied. Expert-choice: each token's single highest-probability expert.
    pub choices: Vec<Vec<usize>>,
    /// (token, expert) claims refused because the expert was full.
    pub dropped_pairs: usize,
    /// Row-major `num_tokens × num_experts` gate probabilities.
    pub gate_probs: Vec<f64>,
}

impl DispatchPlan {
    /// Tokens routed to expert `e`, in slot order.
    pub fn expert_tokens(&self, e: usize) -> Vec<usize> {
        self.assignments
            .iter()
            .filter(|a| a.expert == e)
            .map(|a| a.token)
            .collect()
    }

    pub fn expert_load(&self) -> Vec<usize> {
        let mut load = vec![0; self.num_experts];
        for a in &self.assignments {
            load[a.expert] += 1;
        }
        load
    }

    /// Surviving assignments of token `t`: in rank order for token-choice,
    /// by expert index for expert-choice.
    pub fn token_assignments(&self, t: usize) -> Vec<Assignment> {
        let mut mine: Vec<Assignment> = self
            .assignments
            .iter()
            .filter(|a| a.token == t)
            .copied()
            .collect();
        if self.strategy.is_token_choice() {
            let rank = |e: usize| self.choices[t].iter().position(|&c| c == e);
            mine.sort_by_key(|a| rank(a.expert));
        } else {
            mine.sort_by_key(|a| a.expert);
        }
        mine
    }

    pub fn prob(&self, t: usize, e: usize) -> f64 {
        self.gate_probs[t * self.num_experts + e]
    }
}

/// Per-expert slot budget `max(1, ceil(capacity_factor · K · T / E))`.
pub fn capacity(num_tokens: usize, cfg: &RouterConfig) -> usize {
    let raw = cfg.capacity_factor * (cfg.top_k * num_tokens) as f64 / cfg.num_experts as f64;
    // Guard against products like 1.1·10 = 11.000000000000002 rounding up.
    let c = (raw - 1e-9).ceil();
    (c.max(1.0)) as usize
}

fn check_probs(probs: &[f64], num_tokens: usize, num_experts: usize) -> Result<()> {
    if num_experts == 0 || probs.len() != num_tokens * num_experts {
        return Err(Error::Shape {
            op: "route",
            left: vec![num_tokens, num_experts],
            right: vec![probs.len()],
        });
    }
    if let Some(i) = probs.iter().position(|p| !p.is_finite()) {
        return Err(Error::NonFinite(format!("routing score at index {i}")));
    }
    Ok(())
}

/// Descending by score, ties to the lower index.
fn ranked(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let mut idx: Vec<(usize, f64)> = scores.enumerate().collect();
    idx.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    idx.into_iter().map(|(i, _)| i).collect()
}

/// Token-choice dispatch: every token ranks experts by probability and
/// claims slots in ascending token order; claims on full experts are refused.
pub fn route_token_choice(
    probs: &[f64],
    num_tokens: usize,
    num_experts: usize,
    k: usize,
    capacity: usize,
) -> Result<DispatchPlan> {
    check_probs(probs, num_tokens, num_experts)?;
    if capacity < 1 {
        return Err(Error::Config("capacity must be at least 1".into()));
    }
    if k == 0 || k > num_experts {
        return Err(Error::Config(format!(
            "top_k {k} not in [1, {num_experts}]"
        )));
    }
    let strategy = if k == 1 {
        Strategy::TokenChoiceTop1
    } else {
        Strategy::TokenChoiceTop2
    };
    let mut load = vec![0usize; num_experts];
    let mut assignments = Vec::new();
    let mut dropped = Vec::new();
    let mut choices = Vec::with_capacity(num_tokens);
    let mut dropped_pairs = 0;
    for t in 0..num_tokens {
        let row = &probs[t * num_experts..(t + 1) * num_experts];
        let top: Vec<usize> = ranked(row.iter().copied()).into_iter().take(k).collect();
        let norm: f64 = top.iter().map(|&e| row[e]).sum();
        let mut kept = 0;
        for &e in &top {
            if load[e] >= capacity {
                dropped_pairs += 1;
                continue;
            }
            let gate = if k == 1 {
                row[e]
            } else if norm > 0.0 {
                row[e] / norm
            } else {
                0.0
            };
            assignments.push(Assignment {
                token: t,
                expert: e,
                slot: load[e],
                gate,
            });
            load[e] += 1;
            kept += 1;
        }
        if kept == 0 {
            dropped.push(t);
        }
        choices.push(top);
    }
    assignments.sort_by_key(|a| (a.expert, a.slot));
    Ok(DispatchPlan {
        strategy,
        num_tokens,
        num_experts,
        capacity,
        assignments,
        dropped,
        choices,
        dropped_pairs,
        gate_probs: probs.to_vec(),
    })
}

/// Expert-choice dispatch: every expert independently takes its `capacity`
/// highest-scoring tokens (ties to the lower token index). Scores double as
/// gate weights.
pub fn route_expert_choice(
    scores: &[f64],
    num_tokens: usize,
    num_experts: usize,
    capacity: usize,
) -> Result<DispatchPlan> {
    check_probs(scores, num_tokens, num_experts)?;
    if capacity < 1 {
        return Err(Error::Config("capacity must be at least 1".into()));
    }
    let take = capacity.min(num_tokens);
    let mut assignments = Vec::new();
    let mut picked = vec![false; num_tokens];
    for e in 0..num_experts {
        let col = (0..num_tokens).map(|t| scores[t * num_experts + e]);
        for (slot, t) in ranked(col).into_iter().take(take).enumerate() {
            picked[t] = true;
            assignments.push(Assignment {
                token: t,
                expert: e,
                slot,
                gate: scores[t * num_experts + e],
            });
        }
    }
    let dropped = (0..num_tokens).filter(|&t| !picked[t]).collect();
    let choices = (0..num_tokens)
        .map(|t| {
            let row = &scores[t * num_experts..(t + 1) * num_experts];
            vec![ranked(row.iter().copied())[0]]
        })
        .collect();
    Ok(DispatchPlan {
        strategy: Strategy::ExpertChoice,
        num_tokens,
        num_experts,
        capacity,
        assignments,
        dropped,
        choices,
        dropped_pairs: 0,
        gate_probs: scores.to_vec(),
    })
}

/// Routes with the strategy and capacity rule of `cfg`.
pub fn route(probs: &[f64], num_tokens: usize, cfg: &RouterConfig) -> Result<DispatchPlan> {
    cfg.validate()?;
    let c = capacity(num_tokens.max(1), cfg);
    match cfg.strategy {
        Strategy::ExpertChoice => route_expert_choice(probs, num_tokens, cfg.num_experts, c),
        _ => route_token_choice(probs, num_tokens, cfg.num_experts, cfg.top_k, c),
    }
}
