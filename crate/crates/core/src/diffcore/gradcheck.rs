use super::graph::{Graph, Var};
use super::mlp::{BoundNet, MlpNet};
use crate::error::Result;

/// Compares tape gradients against central differences over every parameter.
///
/// `loss` builds a scalar on a fresh graph given the (possibly perturbed) net
/// and its tracked binding. Anything the closure treats as frozen must be
/// captured by the closure, so it stays fixed while parameters are perturbed.
///
/// Returns `max |analytic - numeric| / (|numeric| + 1e-12)`. Components whose
/// disagreement is below the rounding resolution of the difference quotient
/// count as exact, so structurally zero gradients do not read as failures.
pub fn finite_diff_check<F>(net: &MlpNet, step: f64, mut loss: F) -> Result<f64>
where
    F: FnMut(&MlpNet, &mut Graph, &BoundNet) -> Result<Var>,
{
    let mut work = net.clone();
    work.zero_grad();
    let mut g = Graph::new();
    let bound = work.bind(&mut g, true);
    let l = loss(&work, &mut g, &bound)?;
    g.backward(l)?;
    work.accumulate_grads(&g, &bound)?;
    let analytic = work.flat_grads();

    let base = net.flat_params();
    let mut eval = |theta: &[f64]| -> Result<f64> {
        work.set_flat_params(theta)?;
        let mut g = Graph::new();
        let bound = work.bind(&mut g, false);
        let l = loss(&work, &mut g, &bound)?;
        Ok(g.scalar(l))
    };
    let mut worst = 0.0f64;
    let mut theta = base.clone();
    for i in 0..base.len() {
        theta[i] = base[i] + step;
        let up = eval(&theta)?;
        theta[i] = base[i] - step;
        let down = eval(&theta)?;
        theta[i] = base[i];
        let numeric = (up - down) / (2.0 * step);
        // Rounding in `up - down` bounds what the difference quotient can resolve.
        let resolution = 8.0 * f64::EPSILON * (up.abs() + down.abs()) / (2.0 * step);
        let diff = (analytic[i] - numeric).abs();
        let err = if diff <= resolution { 0.0 } else { diff / (numeric.abs() + 1e-12) };
        worst = worst.max(err);
    }
    Ok(worst)
}
