use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{DiffTensor, Real, Rng, Tape, Var};

/// What a parameter belongs to, for the freezing ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    /// Router weights of an MoE layer.
    Gate,
    /// Expert feed-forward weights of an MoE layer.
    Expert,
    /// Everything else.
    Dense,
}

impl Role {
    pub fn tag(self) -> u8 {
        match self {
            Role::Gate => 1,
            Role::Expert => 2,
            Role::Dense => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Role::Gate),
            2 => Some(Role::Expert),
            3 => Some(Role::Dense),
            _ => None,
        }
    }

    pub fn is_moe(self) -> bool {
        !matches!(self, Role::Dense)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<F: Real> {
    pub name: String,
    pub role: Role,
    pub tensor: DiffTensor<F>,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct FfnIds {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct AttnIds {
    pub ln_gain: usize,
    pub ln_bias: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum FeedForwardIds {
    Dense {
        ln_gain: usize,
        ln_bias: usize,
        ffn: FfnIds,
    },
    Moe {
        ln_gain: usize,
        ln_bias: usize,
        router: usize,
        experts: Vec<FfnIds>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BlockIds {
    pub attn: AttnIds,
    pub ff: FeedForwardIds,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Layout {
    pub tokens: usize,
    pub rel_bias: usize,
    pub blocks: Vec<BlockIds>,
    pub final_gain: usize,
    pub final_bias: usize,
    pub out_w: usize,
    pub out_b: usize,
}

struct Spec {
    name: String,
    role: Role,
    shape: Vec<usize>,
    init: Init,
}

fn layout_specs(cfg: &ModelConfig) -> (Layout, Vec<Spec>) {
    let mut specs = Vec::new();
    let mut reg = |name: String, role: Role, shape: Vec<usize>, init: Init| {
        specs.push(Spec {
            name,
            role,
            shape,
            init,
        });
        specs.len() - 1
    };
    let (v, d, f, h) = (cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.num_heads);
    let w_std = |fan_in: usize| Init::Normal(1.0 / (fan_in as f64).sqrt());
    let tokens = reg("embed.tokens".into(), Role::Dense, vec![v, d], Init::Normal(1.0));
    let rel_bias = reg("embed.rel_bias".into(), Role::Dense, vec![cfg.rel_buckets, h], Init::Normal(0.1));
    let ffn = |reg: &mut dyn FnMut(String, Role, Vec<usize>, Init) -> usize, prefix: &str, role: Role| FfnIds {
        w1: reg(format!("{prefix}.w1"), role, vec![d, f], w_std(d)),
        b1: reg(format!("{prefix}.b1"), role, vec![f], Init::Zeros),
        w2: reg(format!("{prefix}.w2"), role, vec![f, d], w_std(f)),
        b2: reg(format!("{prefix}.b2"), role, vec![d], Init::Zeros),
    };
    let mut blocks = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let p = format!("blocks.{l}");
        let dense = Role::Dense;
        let attn = AttnIds {
            ln_gain: reg(format!("{p}.attn.ln.gain"), dense, vec![d], Init::Ones),
            ln_bias: reg(format!("{p}.attn.ln.bias"), dense, vec![d], Init::Zeros),
            wq: reg(format!("{p}.attn.wq"), dense, vec![d, d], w_std(d)),
            bq: reg(format!("{p}.attn.bq"), dense, vec![d], Init::Zeros),
            wk: reg(format!("{p}.attn.wk"), dense, vec![d, d], w_std(d)),
            bk: reg(format!("{p}.attn.bk"), dense, vec![d], Init::Zeros),
            wv: reg(format!("{p}.attn.wv"), dense, vec![d, d], w_std(d)),
            bv: reg(format!("{p}.attn.bv"), dense, vec![d], Init::Zeros),
            wo: reg(format!("{p}.attn.wo"), dense, vec![d, d], w_std(d)),
            bo: reg(format!("{p}.attn.bo"), dense, vec![d], Init::Zeros),
        };
        let ff = if cfg.moe_pattern.is_moe(l) {
            let ln_gain = reg(format!("{p}.moe.ln.gain"), dense, vec![d], Init::Ones);
            let ln_bias = reg(format!("{p}.moe.ln.bias"), dense, vec![d], Init::Zeros);
            let router = reg(
                format!("{p}.moe.router"),
                Role::Gate,
                vec![d, cfg.router.num_experts],
                w_std(d),
            );
            let experts = (0..cfg.router.num_experts)
                .map(|e| ffn(&mut reg, &format!("{p}.moe.experts.{e}"), Role::Expert))
                .collect();
            FeedForwardIds::Moe {
                ln_gain,
                ln_bias,
                router,
                experts,
            }
        } else {
            FeedForwardIds::Dense {
                ln_gain: reg(format!("{p}.ffn.ln.gain"), dense, vec![d], Init::Ones),
                ln_bias: reg(format!("{p}.ffn.ln.bias"), dense, vec![d], Init::Zeros),
                ffn: ffn(&mut reg, &format!("{p}.ffn"), dense),
            }
        };
        blocks.push(BlockIds { attn, ff });
    }
    let layout = Layout {
        tokens,
        rel_bias,
        blocks,
        final_gain: reg("final_ln.gain".into(), Role::Dense, vec![d], Init::Ones),
        final_bias: reg("final_ln.bias".into(), Role::Dense, vec![d], Init::Zeros),
        out_w: reg("output.w".into(), Role::Dense, vec![d, v], w_std(d)),
        out_b: reg("output.b".into(), Role::Dense, vec![v], Init::Zeros),
    };
    (layout, specs)
}

/// A validated config together with the parameter layout it implies.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    config: ModelConfig,
    pub(crate) layout: Layout,
    names: Vec<(String, Role, Vec<usize>)>,
}

impl Architecture {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = layout_specs(config);
        Ok(Self {
            config: config.clone(),
            layout,
            names: specs.into_iter().map(|s| (s.name, s.role, s.shape)).collect(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// (name, role, shape) of every parameter, in storage order.
    pub fn param_specs(&self) -> &[(String, Role, Vec<usize>)] {
        &self.names
    }
}

/// All parameters of a model, in a fixed order determined by its config.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F: Real> {
    arch: Architecture,
    params: Vec<Param<F>>,
}

impl<F: Real> ModelParams<F> {
    /// Fresh parameters. Each tensor draws from its own sub-stream of `rng`
    /// keyed by name, so adding or removing parameters leaves the others'
    /// initial values unchanged.
    pub fn init(config: &ModelConfig, rng: &Rng) -> Result<Self> {
        let arch = Architecture::new(config)?;
        let (_, specs) = layout_specs(config);
        let params = specs
            .into_iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let values = match s.init {
                    Init::Normal(std) => rng.derive(&s.name).normal_vec(n, std),
                    Init::Zeros => vec![F::zero(); n],
                    Init::Ones => vec![F::one(); n],
                };
                let tensor = DiffTensor::new(&s.shape, values)?.requires_grad();
                Ok(Param {
                    name: s.name,
                    role: s.role,
                    tensor,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { arch, params })
    }

    /// Reassembles parameters read from elsewhere; names, roles and shapes
    /// must match the layout `config` implies, in order.
    pub fn from_parts(config: &ModelConfig, params: Vec<Param<F>>) -> Result<Self> {
        let arch = Architecture::new(config)?;
        let specs = arch.param_specs();
        if specs.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, role, shape), p) in specs.iter().zip(&params) {
            if *name != p.name || *role != p.role || shape != p.tensor.shape() {
                return Err(Error::Format(format!(
                    "parameter {} ({:?}, {:?}) does not match expected {} ({:?}, {:?})",
                    p.name,
                    p.role,
                    p.tensor.shape(),
                    name,
                    role,
                    shape
                )));
            }
        }
        Ok(Self { arch, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Param<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<F>] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param<F>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<F>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Name → position in [`ModelParams::params`].
    pub fn index(&self) -> HashMap<&str, usize> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.as_str(), i))
            .collect()
    }

    /// Registers every parameter as a tape leaf (trainable ones differentiable).
    pub fn leaves(&self, tape: &mut Tape<F>) -> ParamVars {
        ParamVars {
            vars: self.params.iter().map(|p| tape.leaf(&p.tensor)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.tensor.all_finite())
    }

    /// Converts to another precision.
    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams {
            arch: self.arch.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    role: p.role,
                    tensor: p.tensor.cast(),
                })
                .collect(),
        }
    }
}

/// Tape handles of a model's parameters, parallel to [`ModelParams::params`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    /// Wraps handles registered elsewhere, in [`ModelParams::params`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn as_slice(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    /// Parameters touched per token: each MoE layer counts its router and
    /// `top_k` experts rather than all of them.
    pub active_per_token: usize,
}

pub fn count_params<F: Real>(params: &ModelParams<F>) -> ParamCount {
    let total = params.params.iter().map(|p| p.tensor.len()).sum();
    let k = params.config().router.top_k;
    let mut inactive = 0;
    for block in &params.arch.layout.blocks {
        if let FeedForwardIds::Moe { experts, .. } = &block.ff {
            let size = |f: &FfnIds| {
                [f.w1, f.b1, f.w2, f.b2]
                    .iter()
                    .map(|&i| params.params[i].tensor.len())
                    .sum::<usize>()
            };
            inactive += experts.iter().skip(k).map(size).sum::<usize>();
        }
    }
    ParamCount {
        total,
        active_per_token: total - inactive,
    }
}
