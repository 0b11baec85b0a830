//! Plain unconditional CFM, used to check the base flow-matching machinery
//! on low-dimensional distributions.

use ndarray::Array2;

use crate::condnets::{self, FieldNet, FieldNetConfig, NetRole};
use crate::error::{Error, Result};
use crate::flowcore::{self, FlowHyper, FlowSample};
use crate::gradcore::{value_and_grad, warmup_lr, AdamHyper, OptState, Tape};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncondTrain {
    pub steps: u64,
    pub batch: usize,
    pub adam: AdamHyper,
    pub warmup_steps: u64,
    pub sigma: f64,
}

fn field_tape(net: &FieldNet, tape: &mut Tape, b: &crate::gradcore::Bound, s: &FlowSample) -> crate::gradcore::Var {
    let x = tape.constant(s.x_t.clone());
    let temb = tape.constant(condnets::time_rows(&s.t, net.config.time_embed_dim));
    net.apply(tape, b, &[x, temb])
}

/// Trains `net` on batches from `sample(rng, n)`; returns the per-step losses.
pub fn train_unconditional<S>(net: &mut FieldNet, mut sample: S, cfg: &UncondTrain, rng: &mut Rng) -> Result<Vec<f64>>
where
    S: FnMut(&mut Rng, usize) -> Array2<f64>,
{
    if net.config.role != NetRole::Unconditional {
        return Err(Error::Precondition("expected an unconditional field".into()));
    }
    let mut opt = OptState::new(&net.params);
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let x1 = sample(rng, cfg.batch);
        let s = FlowSample::draw(x1, 1, cfg.sigma, rng)?;
        let (loss, grads) = value_and_grad(&net.params, |tape, b| {
            let v = field_tape(net, tape, b, &s);
            let target = tape.constant(s.v_target.clone());
            let r = tape.sub(v, target);
            Ok::<_, Error>(tape.mean_sq(r))
        })
        .map_err(|e| Error::TrainingDiverged {
            step,
            source: Box::new(e),
        })?;
        let hyper = AdamHyper {
            lr: warmup_lr(cfg.adam.lr, step, cfg.warmup_steps),
            ..cfg.adam
        };
        opt.adam_step(&mut net.params, &grads, &hyper)?;
        losses.push(loss);
    }
    Ok(losses)
}

/// Draws `n` samples by integrating the field from standard normal noise.
pub fn sample_unconditional(net: &FieldNet, n: usize, hyper: &FlowHyper, rng: &mut Rng) -> Result<Array2<f64>> {
    let d = net.config.state_dim;
    let x0 = crate::rng::normal_matrix(rng, n, d);
    let dim = net.config.time_embed_dim;
    flowcore::ode_sample(
        |x, t| {
            let temb = condnets::repeat_row(&condnets::time_embedding(t, dim), x.nrows());
            net.eval(&[x.view(), temb.view()])
        },
        x0,
        hyper,
    )
}

pub fn unconditional_net(state_dim: usize, hidden: usize, layers: usize, rng: &mut Rng) -> Result<FieldNet> {
    FieldNet::init(FieldNetConfig::unconditional(state_dim, 16, hidden, layers), rng)
}
