//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates the forward pass, so it stays independent
//! of the backward rules it validates.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(input, element)` of the worst entry.
    pub worst: (usize, usize),
}

/// Relative error with an absolute floor so that vanishing gradients compare
/// by absolute difference.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares analytic gradients of `f` against central differences.
///
/// `f` receives a fresh graph and one differentiable leaf per input and must
/// return a scalar. `select(input, numel)` picks the element indices to check
/// for each input; `None` checks all.
pub fn check<F>(
    inputs: &[Tensor],
    step: f64,
    select: Option<&dyn Fn(usize, usize) -> Vec<usize>>,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut report = GradReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: (0, 0),
    };
    let mut work = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = g.grad(*var).expect("leaf requires grad");
        let idx = match select {
            Some(sel) => sel(k, inputs[k].numel()),
            None => (0..inputs[k].numel()).collect(),
        };
        for i in idx {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let e = rel_err(analytic.data()[i], numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = (k, i);
            }
        }
    }
    Ok(report)
}
