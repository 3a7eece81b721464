//! Finite-difference verification of reverse-mode gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Symmetric relative error between an analytic and a numeric derivative.
/// The floor in the denominator turns the comparison absolute for
/// derivatives near zero: central differences of a loss of magnitude L
/// carry roundoff of order ulp(L)/h regardless of the true derivative, so
/// coordinates below that noise cannot meet any relative bound. A floor F
/// under threshold T accepts |analytic - numeric| < T*F there and leaves
/// well-scaled coordinates on the plain relative test.
fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + floor)
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let tape = Tape::new();
    let v = tape.leaf(x, false);
    let out = f(&tape, v)?;
    Ok(tape.value(out)?.data()[0])
}

/// Compare the tape gradient of a scalar-valued function against central
/// differences with step `h`, one coordinate at a time. Returns the worst
/// relative error over all coordinates.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let tape = Tape::new();
    let v = tape.leaf(x, true);
    let out = f(&tape, v)?;
    tape.backward(out)?;
    let analytic = tape.grad(v)?.expect("tracked leaf has a gradient");

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fd = (eval_scalar(&f, &xp)? - eval_scalar(&f, &xm)?) / (2.0 * h);
        worst = worst.max(rel_err(analytic.data()[i], fd, 1e-12));
    }
    Ok(worst)
}

fn eval_scalar_multi<F>(f: &F, xs: &[Tensor]) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x, false)).collect();
    let out = f(&tape, &vars)?;
    Ok(tape.value(out)?.data()[0])
}

/// Multi-input variant: one backward pass provides every analytic gradient,
/// then each coordinate of each input is perturbed in turn. Returns the worst
/// relative error across all inputs.
pub fn grad_check_multi<F>(f: F, xs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    grad_check_multi_floor(f, xs, h, 1e-12)
}

/// As [`grad_check_multi`] with an explicit noise floor. Use a floor above
/// ulp(loss)/h when the function has coordinates whose true derivative is
/// zero or tiny (e.g. attention key biases, which cancel in softmax), so
/// those are judged by absolute agreement instead of a hopeless ratio.
pub fn grad_check_multi_floor<F>(f: F, xs: &[Tensor], h: f64, floor: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x, true)).collect();
    let out = f(&tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| Ok(tape.grad(v)?.expect("tracked leaf has a gradient")))
        .collect::<Result<_>>()?;

    let mut worst = 0.0f64;
    for (which, x) in xs.iter().enumerate() {
        for i in 0..x.len() {
            let mut plus = xs.to_vec();
            let mut minus = xs.to_vec();
            plus[which].data_mut()[i] += h;
            minus[which].data_mut()[i] -= h;
            let fd = (eval_scalar_multi(&f, &plus)? - eval_scalar_multi(&f, &minus)?) / (2.0 * h);
            worst = worst.max(rel_err(analytic[which].data()[i], fd, floor));
        }
    }
    Ok(worst)
}
