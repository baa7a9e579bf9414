//! Central finite differences, used to check analytic gradients.
//!
//! Only forward evaluation is used here, so a check is independent of the
//! backward rules it validates.

use crate::error::Result;
use crate::nn::param::Parameter;
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// Worst per-tensor relative error `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`.
    pub max_rel_err: f64,
    pub checked: usize,
}

pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

/// Checks `f(inputs)` against finite differences in every input element.
pub fn check_fn(inputs: &[Tensor<f64>], h: f64, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Result<GradReport> {
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut report = GradReport { max_rel_err: 0.0, checked: 0 };
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for e in 0..inputs[i].numel() {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[e] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[e] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        report.max_rel_err = report.max_rel_err.max(rel_err(&analytic, &numeric));
        report.checked += numeric.len();
    }
    Ok(report)
}

/// Compares the grads already accumulated in a model's parameters with
/// finite differences of `loss`. At most `per_param` evenly spaced
/// coordinates of each parameter are probed.
pub fn check_params<M>(
    model: &mut M,
    params_of: impl Fn(&mut M) -> Vec<&mut Parameter<f64>>,
    loss: impl Fn(&M) -> Result<f64>,
    h: f64,
    per_param: usize,
) -> Result<GradReport> {
    let mut report = GradReport { max_rel_err: 0.0, checked: 0 };
    let count = params_of(model).len();
    for p in 0..count {
        let (n, analytic_all, trainable) = {
            let ps = params_of(model);
            (ps[p].value.numel(), ps[p].grad.data().to_vec(), ps[p].trainable)
        };
        if !trainable {
            continue;
        }
        let step = n.div_ceil(per_param.max(1)).max(1);
        let coords: Vec<usize> = (0..n).step_by(step).collect();
        let mut numeric = Vec::with_capacity(coords.len());
        for &e in &coords {
            let orig = params_of(model)[p].value.data()[e];
            params_of(model)[p].value.data_mut()[e] = orig + h;
            let up = loss(model)?;
            params_of(model)[p].value.data_mut()[e] = orig - h;
            let down = loss(model)?;
            params_of(model)[p].value.data_mut()[e] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        let analytic: Vec<f64> = coords.iter().map(|&e| analytic_all[e]).collect();
        report.max_rel_err = report.max_rel_err.max(rel_err(&analytic, &numeric));
        report.checked += coords.len();
    }
    Ok(report)
}
