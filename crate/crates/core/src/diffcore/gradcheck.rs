//! Central finite-difference verification of recorded gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    /// Absolute error accepted regardless of relative error, for entries
    /// whose true derivative is near zero.
    pub abs_tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_error: f64,
    /// Largest relative error among entries not rescued by `abs_tol`.
    pub max_rel_error: f64,
    pub failures: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn evaluate<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Compares the backward sweep of `f` against central differences for every
/// element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, config: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (idx, (input, var)) in inputs.iter().zip(&vars).enumerate() {
        let zeros = Tensor::zeros(input.shape());
        let analytic = grads.get(*var).unwrap_or(&zeros).clone();
        for e in 0..input.len() {
            let orig = input.data()[e];
            work[idx].data_mut()[e] = orig + config.step;
            let plus = evaluate(&work, &f)?;
            work[idx].data_mut()[e] = orig - config.step;
            let minus = evaluate(&work, &f)?;
            work[idx].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * config.step);
            let a = analytic.data()[e];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient check input {idx} element {e}"),
                });
            }
            let abs = (a - numeric).abs();
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if abs <= config.abs_tol {
                continue;
            }
            let rel = abs / a.abs().max(numeric.abs());
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel > config.rel_tol {
                report.failures.push(Mismatch {
                    input: idx,
                    element: e,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
