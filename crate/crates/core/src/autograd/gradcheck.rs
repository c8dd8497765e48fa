//! Central finite differences against the tape's analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Tensor,
    pub numeric: Tensor,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the coordinate with the largest relative error.
    pub worst: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate `i`.
pub fn numeric_gradient<F>(mut f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Compares two same-shape gradients coordinate by coordinate.
pub fn compare(analytic: Tensor, numeric: Tensor, tolerance: f64) -> GradCheckReport {
    let mut max_rel_err = 0.0;
    let mut max_abs_err = 0.0;
    let mut worst = 0;
    for (i, (a, n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let rel = relative_error(*a, *n);
        if rel > max_rel_err || rel.is_nan() {
            max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
            worst = i;
        }
        max_abs_err = f64::max(max_abs_err, (a - n).abs());
    }
    GradCheckReport {
        analytic,
        numeric,
        max_rel_err,
        max_abs_err,
        worst,
        tolerance,
    }
}

/// Checks the gradient of the scalar function `f` at `x`.
///
/// `f` receives a fresh graph and the input as a leaf; it must return a
/// scalar node and be a pure function of the leaf's value.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone())?;
    let y = f(&mut g, xv)?;
    g.backward(y)?;
    let analytic = g.grad(xv);

    let numeric = numeric_gradient(
        |probe| {
            let mut g = Graph::new();
            let xv = g.constant(probe.clone())?;
            let y = f(&mut g, xv)?;
            let v = g.value(y);
            if v.numel() != 1 {
                return Err(Error::NonScalarLoss(v.shape().to_vec()));
            }
            Ok(v.item())
        },
        x,
        step,
    )?;
    Ok(compare(analytic, numeric, tolerance))
}
