//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates forward values, so it stays
//! independent of the reverse sweep it verifies.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

/// Compare reverse-mode gradients of `loss` w.r.t. `params` against central
/// differences. Returns `‖g_ad − g_fd‖₂ / max(‖g_ad‖₂, ‖g_fd‖₂)` over all
/// entries of all parameters (0 when both vanish).
pub fn check_gradients<F>(params: &mut [Tensor], loss: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |params: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params
            .iter()
            .enumerate()
            .map(|(i, p)| g.param(p.clone(), format!("p{i}")))
            .collect();
        let l = loss(&mut g, &vars)?;
        Ok(g.value(l).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| g.param(p.clone(), format!("p{i}")))
        .collect();
    let l = loss(&mut g, &vars)?;
    let grads = g.backward(l)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params.iter())
        .map(|(&v, p)| grads.wrt_or_zeros(v, p))
        .collect();

    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for pi in 0..params.len() {
        for k in 0..params[pi].len() {
            let orig = params[pi].data()[k];
            params[pi].data_mut()[k] = orig + FD_STEP;
            let up = eval(params)?;
            params[pi].data_mut()[k] = orig - FD_STEP;
            let down = eval(params)?;
            params[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[pi].data()[k];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
    }
    let denom = na.sqrt().max(nn.sqrt());
    Ok(if denom == 0.0 { 0.0 } else { diff.sqrt() / denom })
}
