//! Central finite-difference gradient checks.
//!
//! The numeric side only ever runs forward passes, so it stays independent of
//! the backward rules it is checking.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Worst relative error over all checked inputs, measured per input as
/// `max|analytic - numeric| / max(max|analytic|, max|numeric|)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Compares backprop against central differences with step `h`.
///
/// `f` builds a scalar loss from leaves holding `inputs` (one leaf per input, in
/// order). Every input is perturbed element by element.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l).item())
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        let mut numeric = vec![0.0; input.len()];
        for j in 0..input.len() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * h);
        }
        let scale = analytic
            .data()
            .iter()
            .chain(numeric.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let abs = analytic
            .data()
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        let rel = if scale > 0.0 { abs / scale } else { 0.0 };
        report.max_abs_error = report.max_abs_error.max(abs);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += input.len();
    }
    Ok(report)
}
