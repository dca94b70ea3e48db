//! Expert feed-forward networks, the MoE layer and a decoder-only prefix-LM
//! transformer stack.
//!
//! Blocks are pre-norm: `h + attn(LN(h))` followed by either a dense
//! feed-forward sublayer or an MoE sublayer, both of the form
//! `h + f(LN(h))`. Under [`MoePattern::EveryOther`] the odd-indexed blocks
//! (0-based) carry the MoE sublayer. Attention over the prompt prefix is
//! bidirectional and causal over the rest, with a bucketed relative-position
//! score bias shared across layers.
//!
//! Parameters live in a flat, role-tagged store ([`ModelParams`]) so the
//! optimizer, freezing and checkpointing can treat them uniformly.

mod checkpoint;
mod layers;
mod params;
mod stack;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::routing::RouterConfig;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::{dense_ffn_layer, expert_ffn, moe_layer, scatter_rows, FfnVars, MoeOutput, MoeVars};
pub use params::{count_params, Architecture, ModelParams, Param, ParamCount, ParamVars, Role};
pub use stack::{greedy_decode, relative_bucket, transformer_stack, ForwardCtx, StackInput, StackOutput};

/// Which blocks replace their feed-forward sublayer with an MoE layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MoePattern {
    /// Odd-indexed blocks.
    EveryOther,
    All,
    None,
}

impl MoePattern {
    pub fn is_moe(self, block: usize) -> bool {
        match self {
            MoePattern::EveryOther => block % 2 == 1,
            MoePattern::All => true,
            MoePattern::None => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub moe_pattern: MoePattern,
    pub dropout: f64,
    pub expert_dropout: f64,
    pub max_input_len: usize,
    pub max_target_len: usize,
    pub rel_buckets: usize,
    pub rel_max_distance: usize,
    pub layer_norm_eps: f64,
    pub pad_id: usize,
    pub router: RouterConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            d_ff: 128,
            num_layers: 2,
            num_heads: 4,
            moe_pattern: MoePattern::EveryOther,
            dropout: 0.05,
            expert_dropout: 0.2,
            max_input_len: 128,
            max_target_len: 32,
            rel_buckets: 32,
            rel_max_distance: 128,
            layer_norm_eps: 1e-5,
            pad_id: 0,
            router: RouterConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.d_ff == 0 || self.num_layers == 0 {
            return bad("model.vocab_size, d_model, d_ff and num_layers must be positive".into());
        }
        if self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return bad(format!(
                "model.d_model {} must be divisible by num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        for (name, rate) in [("dropout", self.dropout), ("expert_dropout", self.expert_dropout)] {
            if !(0.0..1.0).contains(&rate) {
                return bad(format!("model.{name} must be in [0, 1), got {rate}"));
            }
        }
        if self.rel_buckets < 2 || self.rel_max_distance < 2 {
            return bad("model.rel_buckets and rel_max_distance must be at least 2".into());
        }
        if self.pad_id >= self.vocab_size {
            return bad(format!("model.pad_id {} outside vocabulary", self.pad_id));
        }
        if self.max_input_len + self.max_target_len == 0 {
            return bad("model sequence limits must be positive".into());
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("model.layer_norm_eps must be positive".into());
        }
        self.router.validate()
    }

    pub fn max_seq_len(&self) -> usize {
        self.max_input_len + self.max_target_len
    }

    pub fn moe_blocks(&self) -> Vec<usize> {
        (0..self.num_layers).filter(|&l| self.moe_pattern.is_moe(l)).collect()
    }

    /// Canonical text form used in checkpoint headers.
    pub fn to_canonical(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_canonical(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("model config: {e}")))
    }
}
