use std::fmt::Display;

use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Relative tolerance.
    pub rtol: f64,
    /// Absolute tolerance, used where the relative error is ill-conditioned.
    pub atol: f64,
    /// Check at most this many evenly strided entries per input.
    pub max_entries_per_input: Option<usize>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rtol: 1e-4,
            atol: 1e-6,
            max_entries_per_input: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputReport {
    pub input: usize,
    pub checked: usize,
    /// Largest relative error among entries whose gradient magnitude exceeds `atol`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_entry: Option<usize>,
    /// Entries whose absolute error is within `atol`.
    pub abs_fallbacks: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub inputs: Vec<InputReport>,
    pub max_rel_err: f64,
    pub passed: bool,
    pub failure: Option<String>,
}

impl GradcheckReport {
    fn failed(msg: String) -> Self {
        Self {
            inputs: Vec::new(),
            max_rel_err: f64::INFINITY,
            passed: false,
            failure: Some(msg),
        }
    }
}

fn evaluate<F, E>(f: &F, points: &[Tensor]) -> Result<f64, String>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
    E: Display,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = points.iter().map(|p| tape.var(p.clone())).collect();
    let out = f(&tape, &vars).map_err(|e| e.to_string())?;
    let value = out.value();
    if !value.is_scalar() {
        return Err(format!("function returned shape {:?}, expected a scalar", value.shape()));
    }
    Ok(value.item())
}

/// Compares tape gradients of a scalar function against central finite
/// differences at `points`.
pub fn gradcheck<F, E>(f: F, points: &[Tensor], config: GradcheckConfig) -> GradcheckReport
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
    E: Display,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = points.iter().map(|p| tape.var(p.clone())).collect();
    let out = match f(&tape, &vars) {
        Ok(v) => v,
        Err(e) => return GradcheckReport::failed(format!("forward failed: {e}")),
    };
    if !out.value().item().is_finite() {
        return GradcheckReport::failed("non-finite function value at the base point".into());
    }
    let grads = match tape.backward(out) {
        Ok(g) => g,
        Err(e) => return GradcheckReport::failed(format!("backward failed: {e}")),
    };
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();

    let mut inputs = Vec::with_capacity(points.len());
    let mut work: Vec<Tensor> = points.to_vec();
    for (i, point) in points.iter().enumerate() {
        if let Some(bad) = analytic[i].data().iter().position(|g| !g.is_finite()) {
            return GradcheckReport::failed(format!("non-finite analytic gradient at input {i}, entry {bad}"));
        }
        let stride = match config.max_entries_per_input {
            Some(cap) if cap > 0 && point.len() > cap => point.len().div_ceil(cap),
            _ => 1,
        };
        let mut report = InputReport {
            input: i,
            checked: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_entry: None,
            abs_fallbacks: 0,
            passed: true,
        };
        for j in (0..point.len()).step_by(stride) {
            let x = point.data()[j];
            work[i].data_mut()[j] = x + config.step;
            let plus = evaluate(&f, &work);
            work[i].data_mut()[j] = x - config.step;
            let minus = evaluate(&f, &work);
            work[i].data_mut()[j] = x;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
                (Err(e), _) | (_, Err(e)) => {
                    return GradcheckReport::failed(format!("perturbed forward failed at input {i}, entry {j}: {e}"))
                }
                _ => return GradcheckReport::failed(format!("non-finite value at input {i}, entry {j}")),
            };
            let numeric = (plus - minus) / (2.0 * config.step);
            let a = analytic[i].data()[j];
            let abs_err = (a - numeric).abs();
            report.checked += 1;
            if abs_err > report.max_abs_err {
                report.max_abs_err = abs_err;
            }
            let scale = a.abs().max(numeric.abs());
            // relative error is only meaningful above the absolute floor
            let rel_err = if scale > config.atol { abs_err / scale } else { 0.0 };
            if rel_err > report.max_rel_err {
                report.max_rel_err = rel_err;
                report.worst_entry = Some(j);
            }
            if abs_err <= config.atol {
                report.abs_fallbacks += 1;
            } else if rel_err > config.rtol {
                report.passed = false;
            }
        }
        inputs.push(report);
    }
    let max_rel_err = inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let passed = inputs.iter().all(|r| r.passed);
    GradcheckReport {
        inputs,
        max_rel_err,
        passed,
        failure: None,
    }
}
