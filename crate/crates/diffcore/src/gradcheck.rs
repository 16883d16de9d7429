//! Central finite-difference gradient checking.

use crate::error::{DiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn eval<F>(f: &mut F, point: &Tensor) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    let v = tape.value(y);
    if v.len() != 1 {
        return Err(crate::error::contract("grad_check", format!("function output has shape {:?}", v.shape())));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(DiffError::NonFinite(format!("grad_check: f = {v} at {:?}", point.data())));
    }
    Ok(v)
}

/// Largest coordinate-wise error between the analytic gradient of `f` at
/// `point` and a central difference with the given `step`, measured as
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(mut f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    let yv = tape.value(y);
    if yv.len() != 1 || !yv.item().is_finite() {
        return Err(DiffError::NonFinite(format!("grad_check: f = {:?} at {:?}", yv.data(), point.data())));
    }
    let grads = tape.backward(y)?;
    let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()));

    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + step;
        let fp = eval(&mut f, &probe)?;
        probe.data_mut()[i] = x0 - step;
        let fm = eval(&mut f, &probe)?;
        probe.data_mut()[i] = x0;
        let numeric = (fp - fm) / (2.0 * step);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        if !err.is_finite() {
            return Err(DiffError::NonFinite(format!("grad_check: gradient error at coordinate {i}")));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}
