//! Central finite-difference checks against the tape's analytic gradients.

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// Gradients smaller than this are compared in absolute rather than relative
/// terms; below it finite-difference cancellation noise dominates.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Step used for a parameter value `w`.
pub fn step_for(w: f64) -> f64 {
    1e-3 * w.abs().max(1.0)
}

/// Fourth-order central difference of `f` at `x`:
/// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`.
pub fn derivative<F>(x: f64, mut f: F) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let h = step_for(x);
    let p1 = f(x + h)?;
    let m1 = f(x - h)?;
    let p2 = f(x + 2.0 * h)?;
    let m2 = f(x - 2.0 * h)?;
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
}

/// Runs `f` on fresh graphs with `inputs` bound as trainable leaves, and
/// returns the maximum relative error between analytic and finite-difference
/// gradients for each input.
pub fn check<F>(inputs: &[Tensor], f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut work = inputs.to_vec();
    let mut worst = Vec::with_capacity(inputs.len());
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v, &g);
        let mut max_err = 0.0f64;
        for j in 0..work[i].len() {
            let orig = work[i].data()[j];
            let numeric = derivative(orig, |x| {
                work[i].data_mut()[j] = x;
                eval(&work)
            })?;
            work[i].data_mut()[j] = orig;
            max_err = max_err.max(relative_error(analytic.data()[j], numeric));
        }
        worst.push(max_err);
    }
    Ok(worst)
}
