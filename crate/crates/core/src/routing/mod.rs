//! Gating, capacity-bounded dispatch and the router auxiliary losses.
//!
//! A router scores each token against every expert (`softmax(x·W)`), a
//! [`DispatchPlan`] decides which (token, expert) pairs are computed, and
//! [`combine`] mixes the expert outputs back per token. Routing decisions are
//! made on `f64` copies of the gate probabilities; the gate weights that
//! reach the model output stay on the tape so gradients flow into the router.

mod ops;
mod plan;
mod trace;
mod usage;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ops::{balance_loss, combine, gate_probs, gate_weights, router_logits, router_z_loss};
pub use plan::{capacity, route, route_expert_choice, route_token_choice, Assignment, DispatchPlan};
pub use trace::{route_trace_line, route_trace_lines};
pub use usage::{expert_usage, UsageStats};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Each token takes its single best expert.
    TokenChoiceTop1,
    /// Each token takes its two best experts, gates renormalized.
    TokenChoiceTop2,
    /// Each expert takes its `capacity` best tokens.
    ExpertChoice,
}

impl Strategy {
    pub fn is_token_choice(self) -> bool {
        !matches!(self, Strategy::ExpertChoice)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxLoss {
    None,
    Balance,
    ZLoss,
    Both,
}

impl AuxLoss {
    pub fn uses_balance(self) -> bool {
        matches!(self, AuxLoss::Balance | AuxLoss::Both)
    }

    pub fn uses_z(self) -> bool {
        matches!(self, AuxLoss::ZLoss | AuxLoss::Both)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterConfig {
    pub strategy: Strategy,
    pub num_experts: usize,
    pub top_k: usize,
    pub capacity_factor: f64,
    pub aux_loss: AuxLoss,
    pub aux_weight_balance: f64,
    pub aux_weight_z: f64,
    /// Standard deviation of Gaussian noise added to router logits while
    /// training. Zero disables it.
    pub noise_std: f64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::TokenChoiceTop2,
            num_experts: 4,
            top_k: 2,
            capacity_factor: 1.25,
            aux_loss: AuxLoss::Balance,
            aux_weight_balance: 0.01,
            aux_weight_z: 0.001,
            noise_std: 0.0,
        }
    }
}

impl RouterConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_experts == 0 {
            return bad("router.num_experts must be positive".into());
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return bad(format!(
                "router.top_k must be in [1, {}], got {}",
                self.num_experts, self.top_k
            ));
        }
        match self.strategy {
            Strategy::TokenChoiceTop1 if self.top_k != 1 => {
                return bad("token-choice-top1 requires top_k = 1".into())
            }
            Strategy::TokenChoiceTop2 if self.top_k != 2 => {
                return bad("token-choice-top2 requires top_k = 2".into())
            }
            _ => {}
        }
        if !(self.capacity_factor > 0.0 && self.capacity_factor.is_finite()) {
            return bad(format!(
                "router.capacity_factor must be positive, got {}",
                self.capacity_factor
            ));
        }
        if self.aux_weight_balance < 0.0 || self.aux_weight_z < 0.0 || self.noise_std < 0.0 {
            return bad("router aux weights and noise_std must be non-negative".into());
        }
        Ok(())
    }
}
