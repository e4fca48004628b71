//! Central-difference gradient checking for graph-built functions.

use super::graph::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over all checked coordinates.
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Relative error with an absolute floor so near-zero gradients compare sanely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compare analytic gradients of `f` against central differences with step
/// `h`, for every coordinate of every input.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
    };
    let mut work = inputs.to_vec();
    for (t, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, inputs[t].len());
        for i in 0..inputs[t].len() {
            let orig = inputs[t].data()[i];
            work[t].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[t].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[t].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            report.max_rel_err = report.max_rel_err.max(rel_err(analytic[i], numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}
