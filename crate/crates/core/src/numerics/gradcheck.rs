//! Central finite differences, the reference the tape gradients are held to.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{bail, Result};

/// Analytic and numeric gradients of one scalar function at one point.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Tensor,
    pub numeric: Tensor,
    pub max_rel_err: f64,
}

/// `|numeric - analytic| / max(1, |analytic|)`.
pub fn relative_error(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / analytic.abs().max(1.0)
}

fn check_step(h: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&h) {
        bail!(Config, "finite-difference step {h} outside [1e-7, 1e-3]");
    }
    Ok(())
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for a plain scalar function.
pub fn central_difference(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    index: usize,
    h: f64,
) -> Result<f64> {
    let mut probe = x.clone();
    let orig = probe.data()[index];
    probe.data_mut()[index] = orig + h;
    let plus = f(&probe)?;
    probe.data_mut()[index] = orig - h;
    let minus = f(&probe)?;
    Ok((plus - minus) / (2.0 * h))
}

/// Derivative of `f` at `x` along `direction`, by central differences.
pub fn directional_difference(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    direction: &Tensor,
    h: f64,
) -> Result<f64> {
    let shifted = |sign: f64| {
        let data = x.data().iter().zip(direction.data()).map(|(a, d)| a + sign * h * d).collect();
        Tensor::new(x.shape().to_vec(), data)
    };
    let plus = f(&shifted(1.0)?)?;
    let minus = f(&shifted(-1.0)?)?;
    Ok((plus - minus) / (2.0 * h))
}

/// Compares the tape gradient of `f` at `x` with central differences on
/// every coordinate.
pub fn finite_diff_report<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    check_step(h)?;
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(leaf)?;
    let analytic = tape.backward(out)?.wrt(leaf);

    let eval = |p: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        f(tape.constant(p.clone()))?.item()
    };
    let mut numeric = Vec::with_capacity(x.numel());
    let mut max_rel_err: f64 = 0.0;
    for i in 0..x.numel() {
        let n = central_difference(eval, x, i, h)?;
        max_rel_err = max_rel_err.max(relative_error(n, analytic.data()[i]));
        numeric.push(n);
    }
    Ok(GradCheckReport { numeric: Tensor::new(x.shape().to_vec(), numeric)?, analytic, max_rel_err })
}

/// Maximum relative error between tape and finite-difference gradients.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    Ok(finite_diff_report(f, x, h)?.max_rel_err)
}
