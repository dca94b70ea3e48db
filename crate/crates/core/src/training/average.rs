use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::model::{load_checkpoint, ModelParams};
use crate::numerics::Real;

/// Elementwise mean of parameter sets sharing one config. Sums are taken in
/// 64-bit in the given order, then divided by the count.
pub fn average_params<F: Real>(models: &[ModelParams<F>]) -> Result<ModelParams<F>> {
    let first = models
        .first()
        .ok_or_else(|| Error::Config("average of zero checkpoints".into()))?;
    for m in &models[1..] {
        if m.config() != first.config() {
            return Err(Error::Config("checkpoints have different model configs".into()));
        }
    }
    let n = models.len() as f64;
    let mut out = first.clone();
    for (i, p) in out.params_mut().iter_mut().enumerate() {
        let mut acc = vec![0.0f64; p.tensor.len()];
        for m in models {
            for (a, v) in acc.iter_mut().zip(m.params()[i].tensor.values()) {
                *a += v.to_f64_lossy();
            }
        }
        for (w, a) in p.tensor.values_mut().iter_mut().zip(acc) {
            *w = F::from_f64_lossy(a / n);
        }
    }
    Ok(out)
}

/// Loads and averages checkpoint files.
pub fn average_checkpoints<F: Real>(paths: &[PathBuf]) -> Result<ModelParams<F>> {
    let models = paths
        .iter()
        .map(|p| load_checkpoint::<F>(p))
        .collect::<Result<Vec<_>>>()?;
    average_params(&models)
}
