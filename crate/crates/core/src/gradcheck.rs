//! Central finite-difference gradient checker.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-input comparison between analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, element)` where the worst error occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `h`, over every element of every input.
///
/// The relative error of one element is `|a − n| / max(|a|, |n|, floor)`
/// where `floor = 1e-3 · max_j |a_j|` guards elements whose true gradient
/// is zero up to round-off.
pub fn grad_check<F>(inputs: &[Tensor<f64>], h: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|v| g.param(v.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar(&g, out)?;
        let grads = g.backward(out);
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
            .collect::<Vec<_>>()
    };
    let mut eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|v| g.param(v.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar(&g, out)
    };

    let scale = analytic.iter().map(|t| t.max_abs()).fold(0.0, f64::max);
    let floor = (1e-3 * scale).max(1e-12);

    let mut values = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for i in 0..values.len() {
        for e in 0..values[i].len() {
            let orig = values[i].data()[e];
            values[i].data_mut()[e] = orig + h;
            let plus = eval(&values)?;
            values[i].data_mut()[e] = orig - h;
            let minus = eval(&values)?;
            values[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i].data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (i, e);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

fn scalar(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::shape("grad_check", format!("output must be scalar, got {:?}", t.shape())));
    }
    Ok(t.item())
}
