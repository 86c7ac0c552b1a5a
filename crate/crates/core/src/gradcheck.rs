//! Central-difference gradient verification.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::models::{ModelParams, ModelVars, ParamGroup};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute terms; central
/// differences cannot resolve them relative to an O(1) loss.
pub const GRADIENT_FLOOR: f64 = 1e-6;

/// `|analytic - numeric| / max(|analytic|, |numeric|, GRADIENT_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADIENT_FLOOR)
}

/// Compares the reverse-mode gradient of `f` at `point` against central
/// differences with step `h`, returning the worst relative error over all
/// coordinates.
pub fn finite_diff_check<F>(point: &Tensor, h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("step must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    let analytic = g.backward(y)?.wrt(x);

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p);
        let y = f(&mut g, x)?;
        Ok(g.item(y))
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Runs the central-difference comparison for every parameter tensor in the
/// given groups, returning the worst relative error per named tensor.
pub fn check_model_gradients<F>(
    params: &ModelParams,
    groups: &[ParamGroup],
    h: f64,
    loss: F,
) -> Result<Vec<(String, f64)>>
where
    F: Fn(&mut Graph, &ModelVars) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = params.bind(&mut g, groups);
    let y = loss(&mut g, &vars)?;
    let grads = g.backward(y)?;

    let eval = |p: &ModelParams| -> Result<f64> {
        let mut g = Graph::new();
        let vars = p.bind(&mut g, &[]);
        let y = loss(&mut g, &vars)?;
        Ok(g.item(y))
    };

    let mut report = Vec::new();
    for (slot, (name, group, tensor)) in params.named_tensors().into_iter().enumerate() {
        if !groups.contains(&group) {
            continue;
        }
        let analytic = grads.wrt(vars.flat()[slot]);
        let mut worst: f64 = 0.0;
        for i in 0..tensor.len() {
            let mut plus = params.clone();
            plus.tensor_mut(slot).data_mut()[i] += h;
            let mut minus = params.clone();
            minus.tensor_mut(slot).data_mut()[i] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
        report.push((name, worst));
    }
    Ok(report)
}
