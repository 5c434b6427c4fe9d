use serde::Serialize;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients smaller than `REL_FLOOR * max(1, |f|)` are compared in absolute
/// rather than relative terms. Central-difference roundoff grows like
/// `eps * |f| / h`, so the floor scales with the function value.
pub const REL_FLOOR: f64 = 1e-6;

/// Outcome of a central-difference gradient comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compare analytic gradients of the scalar function `f` against central
/// differences with step `h` on every coordinate of every input.
///
/// `f` receives a fresh graph with the inputs registered as trainable leaves
/// (in order) and must return a scalar node.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let base = g.value(out).item()?;
    let again = eval(inputs)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Nondeterministic {
            first: base,
            second: again,
        });
    }
    g.backward(out)?;

    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let floor = REL_FLOOR * base.abs().max(1.0);
    let mut work = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic_grad = g
            .grad(*var)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[ti].numel()]);
        for ci in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[ci] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[ci] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let analytic = analytic_grad[ci];
            let err = relative_error(analytic, numeric, floor);
            report.coords_checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((ti, ci));
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
