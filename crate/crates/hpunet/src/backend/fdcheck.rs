//! Central finite-difference verification of reverse-mode gradients.
//!
//! The checker rebuilds the graph from scratch for every perturbed
//! evaluation, so the builder closure must be deterministic: stochastic ops
//! must use pinned noise (e.g. [`Graph::reparam_with_eps`]) or a freshly
//! seeded [`RngState`](super::RngState) inside the closure.

use super::graph::{Graph, Var};
use super::tensor::{Real, Tensor};
use super::BackendError;

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// Worst relative error `|analytic - numeric| / max(|analytic|, |numeric|, 1)`.
    pub max_rel_err: f64,
    /// Location of the worst error as (input index, element index).
    pub worst_at: (usize, usize),
    pub elements_checked: usize,
}

impl FdReport {
    pub fn assert_below(&self, tol: f64) {
        assert!(
            self.max_rel_err <= tol,
            "finite-difference check failed: rel err {:.3e} > {tol:.0e} at input {} element {} \
             ({} elements checked)",
            self.max_rel_err,
            self.worst_at.0,
            self.worst_at.1,
            self.elements_checked
        );
    }
}

/// Checks every element of every input (or an evenly spaced subsample of at
/// most `max_per_input` elements per input when given).
///
/// `build` receives a fresh graph plus leaves for `inputs` in order and must
/// return a scalar loss var.
pub fn central_diff_check<F: Real>(
    inputs: &[Tensor<F>],
    h: f64,
    max_per_input: Option<usize>,
    mut build: impl FnMut(&mut Graph<F>, &[Var]) -> Result<Var, BackendError>,
) -> Result<FdReport, BackendError> {
    // Analytic pass.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let loss = build(&mut g, &vars)?;
    if g.value(loss).len() != 1 {
        return Err(BackendError::NonScalarLoss {
            shape: g.shape(loss).to_vec(),
        });
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).iter().map(|x| x.as_f64()).collect())
        .collect();
    drop(g);

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_at: (0, 0),
        elements_checked: 0,
    };
    let mut work: Vec<Tensor<F>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let len = input.len();
        let stride = match max_per_input {
            Some(cap) if len > cap => len.div_ceil(cap),
            _ => 1,
        };
        let mut e = 0;
        while e < len {
            let base = input.data()[e].as_f64();
            let mut eval = |x: f64| -> Result<f64, BackendError> {
                work[ti].data_mut()[e] = F::of(x);
                let mut g = Graph::new();
                let vars: Vec<Var> = work.iter().map(|t| g.leaf(t)).collect();
                let loss = build(&mut g, &vars)?;
                Ok(g.scalar_value(loss).as_f64())
            };
            let plus = eval(base + h)?;
            let minus = eval(base - h)?;
            work[ti].data_mut()[e] = F::of(base);
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[ti][e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_at = (ti, e);
            }
            report.elements_checked += 1;
            e += stride;
        }
    }
    Ok(report)
}
