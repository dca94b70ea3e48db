use std::collections::BTreeSet;

use super::{AdamConfig, FreezeMode};
use crate::error::{Error, Result};
use crate::model::{ModelParams, Role};
use crate::numerics::Real;

/// Names of the parameters `mode` freezes.
pub fn freeze_mask<F: Real>(params: &ModelParams<F>, mode: FreezeMode) -> BTreeSet<String> {
    let frozen = |role: Role| match mode {
        FreezeMode::None => false,
        FreezeMode::FreezeGate => role == Role::Gate,
        FreezeMode::FreezeExpert => role == Role::Expert,
        FreezeMode::FreezeMoe => role.is_moe(),
    };
    params
        .params()
        .iter()
        .filter(|p| frozen(p.role))
        .map(|p| p.name.clone())
        .collect()
}

/// First and second moments per parameter, kept in 64-bit, plus each
/// parameter's own update count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub steps: Vec<u64>,
}

impl AdamState {
    pub fn new<F: Real>(params: &ModelParams<F>) -> Self {
        let zeros = || params.params().iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            steps: vec![0; params.len()],
        }
    }
}

/// One Adam update with bias correction.
///
/// `grads[i]` is `None` when no gradient reached parameter `i` (it is then
/// left alone, moments included). Frozen parameters are never touched and
/// their gradients are discarded. A non-finite gradient on a trainable
/// parameter aborts before anything is modified.
pub fn adam_step<F: Real>(
    params: &mut ModelParams<F>,
    grads: &[Option<Vec<F>>],
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: f64,
    frozen: &[bool],
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || frozen.len() != n || state.m.len() != n {
        return Err(Error::Shape {
            op: "adam_step",
            left: vec![n],
            right: vec![grads.len(), frozen.len(), state.m.len()],
        });
    }
    for (i, (p, g)) in params.params().iter().zip(grads).enumerate() {
        if frozen[i] {
            continue;
        }
        if let Some(g) = g {
            if g.len() != p.tensor.len() {
                return Err(Error::Shape {
                    op: "adam_step gradient",
                    left: p.tensor.shape().to_vec(),
                    right: vec![g.len()],
                });
            }
            if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} at element {j}",
                    p.name
                )));
            }
        }
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for (i, p) in params.params_mut().iter_mut().enumerate() {
        let Some(g) = &grads[i] else { continue };
        if frozen[i] {
            continue;
        }
        state.steps[i] += 1;
        let t = state.steps[i] as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.tensor.values_mut().iter_mut().enumerate() {
            let gj = g[j].to_f64_lossy();
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
            *w = F::from_f64_lossy(w.to_f64_lossy() - update);
        }
    }
    Ok(())
}
