//! Differentiable parameters: a reverse-mode tape, named parameter sets and
//! an Adam optimizer.

mod optim;
mod params;
mod tape;

pub use optim::{warmup_lr, AdamHyper, OptState};
pub use params::ParamSet;
pub use tape::{Bound, Gradients, Tape, Var};

use crate::error::{Error, Result};

/// Evaluates a scalar loss built on a fresh tape and returns its value and
/// the gradient with respect to every tensor in `params`.
pub fn value_and_grad<F, E>(params: &ParamSet, loss: F) -> std::result::Result<(f64, ParamSet), E>
where
    F: FnOnce(&mut Tape, &Bound) -> std::result::Result<Var, E>,
    E: From<Error>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(params);
    let out = loss(&mut tape, &bound)?;
    let value = tape.scalar(out);
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            param: params.first_non_finite().map(str::to_string),
        }
        .into());
    }
    let grads = tape.backward(out)?;
    Ok((value, grads.of(&bound, params)))
}

/// Central finite differences of `loss` for every scalar in `params`.
/// Test oracle; cost is two loss evaluations per scalar.
pub fn finite_difference<F>(params: &ParamSet, h: f64, mut loss: F) -> Result<ParamSet>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let mut grad = params.zeros_like();
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name).map_or(0, |a| a.len());
        for idx in 0..n {
            let base = params.get(&name).unwrap().as_slice().unwrap()[idx];
            probe.get_mut(&name).unwrap().as_slice_mut().unwrap()[idx] = base + h;
            let up = loss(&probe)?;
            probe.get_mut(&name).unwrap().as_slice_mut().unwrap()[idx] = base - h;
            let down = loss(&probe)?;
            probe.get_mut(&name).unwrap().as_slice_mut().unwrap()[idx] = base;
            grad.get_mut(&name).unwrap().as_slice_mut().unwrap()[idx] = (up - down) / (2.0 * h);
        }
    }
    Ok(grad)
}
