//! Central finite-difference verification of analytic gradients.

use std::fmt;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients.
///
/// Per-coordinate error is `|analytic - numeric| / max(1, |analytic|, |numeric|)`,
/// i.e. relative for large gradients and absolute below unit magnitude.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub tolerance: f64,
    pub passed: bool,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "gradcheck coords={} max_rel_error={:.3e} max_abs_error={:.3e} worst=input{}[{}] tol={:.1e} {}",
            self.coordinates,
            self.max_rel_error,
            self.max_abs_error,
            self.worst.0,
            self.worst.1,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::shape("finite_diff_check", "function must be scalar-valued"));
    }
    Ok(v.item())
}

/// Checks the gradient of a scalar function with respect to every input.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let mut report = GradCheckReport {
        coordinates: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        tolerance: tol,
        passed: true,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let x0 = t.data()[j];
            probe[ti].data_mut()[j] = x0 + step;
            let plus = eval(&f, &probe)?;
            probe[ti].data_mut()[j] = x0 - step;
            let minus = eval(&f, &probe)?;
            probe[ti].data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[ti][j];
            let rel = relative_error(a, numeric);
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (ti, j);
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}

/// Single-input convenience wrapper around [`finite_diff_check_many`].
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), step, tol)
}
