//! Central finite-difference gradient checking.
//!
//! Numeric derivatives use the fourth-order five-point stencil
//! `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, whose truncation error
//! at `h = 1e-4` is far below the round-off of a second-order stencil at the
//! smaller step it would need. The per-coordinate relative error is
//! `|analytic - numeric| / max(|analytic|, |numeric|, min_scale)`; the floor
//! keeps coordinates whose true gradient is near zero from turning
//! finite-difference round-off into spurious failures.

use super::{DiffTensor, Real, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Stencil step `h`.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Denominator floor of the relative error.
    pub min_scale: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self::f64()
    }
}

impl GradCheckConfig {
    /// Thresholds for gradients computed in 64-bit.
    pub fn f64() -> Self {
        Self {
            step: 1e-4,
            tol: 1e-6,
            min_scale: 1e-4,
        }
    }

    /// Thresholds for gradients computed in 32-bit. Coordinates smaller than
    /// the floor are held to an absolute error of `tol * min_scale` (1e-6),
    /// a few `f32` ulps of an order-one gradient.
    pub fn f32() -> Self {
        Self {
            step: 1e-4,
            tol: 1e-4,
            min_scale: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate with the largest error (`None` when there are no coordinates).
    pub worst_index: Option<usize>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates: usize,
    pub passed: bool,
}

/// Compares `analytic` against the five-point central difference along every
/// coordinate `i` of `params`.
pub fn finite_difference_check(
    mut f: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if params.len() != analytic.len() {
        return Err(Error::Shape {
            op: "finite_difference_check",
            left: vec![params.len()],
            right: vec![analytic.len()],
        });
    }
    let mut p = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates: params.len(),
        passed: true,
    };
    for i in 0..p.len() {
        let orig = p[i];
        let h = cfg.step;
        let mut at = |x: f64| {
            p[i] = x;
            f(&p)
        };
        let (up2, up, down, down2) = (at(orig + 2.0 * h), at(orig + h), at(orig - h), at(orig - 2.0 * h));
        p[i] = orig;
        if ![up2, up, down, down2].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "objective while perturbing coordinate {i}"
            )));
        }
        let numeric = (8.0 * (up - down) - (up2 - down2)) / (12.0 * h);
        let a = analytic[i];
        if !a.is_finite() {
            return Err(Error::NonFinite(format!("analytic gradient at coordinate {i}")));
        }
        let denom = a.abs().max(numeric.abs()).max(cfg.min_scale);
        let err = (a - numeric).abs() / denom;
        if report.worst_index.is_none() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_index = Some(i);
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    report.passed = report.max_rel_err < cfg.tol;
    Ok(report)
}

/// A scalar-valued computation over a list of input tensors, buildable at
/// either precision.
pub trait TapeProgram {
    fn build<F: Real>(&self, tape: &mut Tape<F>, inputs: &[Var]) -> Result<Var>;
}

fn run_program<F: Real, P: TapeProgram>(
    program: &P,
    inputs: &[DiffTensor<F>],
) -> Result<(Tape<F>, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = program.build(&mut tape, &vars)?;
    Ok((tape, vars, out))
}

/// Checks the tape's gradients of `program` at precision `F` against central
/// differences computed in 64-bit. Only trainable inputs are perturbed.
pub fn check_program<F: Real, P: TapeProgram>(
    program: &P,
    inputs: &[DiffTensor<f64>],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let cast: Vec<DiffTensor<F>> = inputs.iter().map(|t| t.cast()).collect();
    let (mut tape, vars, out) = run_program(program, &cast)?;
    tape.backward(out)?;
    let mut analytic = Vec::new();
    let mut params = Vec::new();
    for (t, v) in inputs.iter().zip(&vars) {
        if !t.is_trainable() {
            continue;
        }
        params.extend_from_slice(t.values());
        match tape.grad(*v) {
            Some(g) => analytic.extend(g.iter().map(|x| x.to_f64_lossy())),
            None => analytic.extend(std::iter::repeat_n(0.0, t.len())),
        }
    }
    let objective = |p: &[f64]| -> f64 {
        let mut offset = 0;
        let perturbed: Vec<DiffTensor<f64>> = inputs
            .iter()
            .map(|t| {
                let mut t = t.clone();
                if t.is_trainable() {
                    let n = t.len();
                    t.values_mut().copy_from_slice(&p[offset..offset + n]);
                    offset += n;
                }
                t
            })
            .collect();
        match run_program(program, &perturbed) {
            Ok((tape, _, out)) => tape.scalar(out),
            Err(_) => f64::NAN,
        }
    };
    finite_difference_check(objective, &params, &analytic, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let p = [0.3, -1.2, 2.5, 4.0];
        let analytic: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
        let f = |q: &[f64]| q.iter().map(|x| x * x).sum::<f64>();
        let r = finite_difference_check(f, &p, &analytic, &GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_err < 1e-9, "{r:?}");
        assert!(r.passed);
    }

    #[test]
    fn corrupted_gradient_is_reported_at_its_coordinate() {
        let p = [0.3, -1.2, 2.5, 4.0];
        let mut analytic: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
        analytic[2] *= 1.01;
        let f = |q: &[f64]| q.iter().map(|x| x * x).sum::<f64>();
        let r = finite_difference_check(f, &p, &analytic, &GradCheckConfig::default()).unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst_index, Some(2));
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let f = |q: &[f64]| q[0].ln();
        let err = finite_difference_check(f, &[0.0], &[1.0], &GradCheckConfig::default());
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }
}
