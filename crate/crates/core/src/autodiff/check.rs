use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Per-coordinate comparison of reverse-mode and central-difference
/// gradients.
#[derive(Debug, Clone)]
pub struct GradientCheck {
    pub autodiff: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradientCheck {
    /// `max_i |fd_i - ad_i| / (|ad_i| + 1e-12)`.
    pub fn max_relative_error(&self) -> f64 {
        self.autodiff
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (n - a).abs() / (a.abs() + 1e-12))
            .fold(0.0, f64::max)
    }

    /// Relative error with an absolute floor in the denominator, for
    /// coordinates whose true gradient is near zero.
    pub fn max_relative_error_floored(&self, floor: f64) -> f64 {
        self.autodiff
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (n - a).abs() / a.abs().max(n.abs()).max(floor))
            .fold(0.0, f64::max)
    }

    pub fn max_abs_error(&self) -> f64 {
        self.autodiff
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (n - a).abs())
            .fold(0.0, f64::max)
    }
}

fn eval_scalar<F>(f: &F, x: Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let xid = tape.constant(x)?;
    let y = f(&mut tape, xid)?;
    if !tape.value(y).is_scalar() {
        return Err(Error::Contract("gradient check needs a scalar function".into()));
    }
    Ok(tape.value(y).item())
}

/// Runs `f` once under autodiff and `2n` times perturbed.
pub fn gradient_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradientCheck>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    if !(h > 0.0) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let xid = tape.param(x.clone())?;
    let y = f(&mut tape, xid)?;
    tape.backward(y)?;
    let autodiff = tape
        .grad(xid)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        numeric.push((eval_scalar(&f, plus)? - eval_scalar(&f, minus)?) / (2.0 * h));
    }
    Ok(GradientCheck { autodiff, numeric })
}

/// Max relative error between autodiff and central finite differences of a
/// scalar tensor function at `x`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    Ok(gradient_check(f, x, h)?.max_relative_error())
}
