use serde::{Deserialize, Serialize};

use super::DispatchPlan;

/// How routing load spread across experts for one plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsageStats {
    /// Share of experts that received at least one token.
    pub active_fraction: f64,
    /// Entropy of the load distribution divided by `ln E`: 0 when one expert
    /// takes everything, 1 when load is uniform. With `E = 1` it is 1 if the
    /// expert is used at all.
    pub normalized_entropy: f64,
    /// Computed (token, expert) pairs per expert.
    pub per_expert_load: Vec<usize>,
    /// Share of tokens that reached no expert.
    pub dropped_fraction: f64,
}

pub fn expert_usage(plan: &DispatchPlan, num_experts: usize) -> UsageStats {
    let mut load = vec![0usize; num_experts];
    for a in &plan.assignments {
        if a.expert < num_experts {
            load[a.expert] += 1;
        }
    }
    let total: usize = load.iter().sum();
    let active = load.iter().filter(|&&l| l > 0).count();
    let entropy: f64 = if total == 0 {
        0.0
    } else {
        load.iter()
            .filter(|&&l| l > 0)
            .map(|&l| {
                let q = l as f64 / total as f64;
                -q * q.ln()
            })
            .sum()
    };
    let normalized_entropy = match (num_experts, total) {
        (_, 0) => 0.0,
        (1, _) => 1.0,
        (e, _) => entropy / (e as f64).ln(),
    };
    UsageStats {
        active_fraction: if num_experts == 0 {
            0.0
        } else {
            active as f64 / num_experts as f64
        },
        normalized_entropy,
        per_expert_load: load,
        dropped_fraction: if plan.num_tokens == 0 {
            0.0
        } else {
            plan.dropped.len() as f64 / plan.num_tokens as f64
        },
    }
}

impl UsageStats {
    /// Mean of several stats (e.g. one per layer), loads summed.
    pub fn mean(stats: &[UsageStats]) -> Option<UsageStats> {
        let first = stats.first()?;
        let n = stats.len() as f64;
        let mut load = vec![0usize; first.per_expert_load.len()];
        for s in stats {
            for (a, b) in load.iter_mut().zip(&s.per_expert_load) {
                *a += b;
            }
        }
        Some(UsageStats {
            active_fraction: stats.iter().map(|s| s.active_fraction).sum::<f64>() / n,
            normalized_entropy: stats.iter().map(|s| s.normalized_entropy).sum::<f64>() / n,
            per_expert_load: load,
            dropped_fraction: stats.iter().map(|s| s.dropped_fraction).sum::<f64>() / n,
        })
    }
}
