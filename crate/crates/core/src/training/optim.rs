use crate::bayesnet::NetworkParams;
use crate::error::{Error, Result};
use crate::losses::ParamGrads;
use crate::real::Real;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments and step counter, kept in double precision.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new<T: Real>(params: &NetworkParams<T>, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

fn check_grads<T: Real>(params: &NetworkParams<T>, grads: &ParamGrads, state: &OptimState) -> Result<()> {
    if grads.len() != params.tensors.len() || state.m.len() != params.tensors.len() {
        return Err(Error::shape(
            "adam_step",
            &[params.tensors.len()],
            &[grads.len(), state.m.len()],
        ));
    }
    for ((t, g), m) in params.tensors.iter().zip(grads).zip(&state.m) {
        if g.len() != t.len() || m.len() != t.len() {
            return Err(Error::shape("adam_step", t.shape(), &[g.len(), m.len()]));
        }
    }
    Ok(())
}

/// One bias-corrected Adam update at learning rate `lr`.
pub fn adam_step<T: Real>(
    params: &mut NetworkParams<T>,
    grads: &ParamGrads,
    state: &mut OptimState,
    lr: f64,
) -> Result<()> {
    check_grads(params, grads, state)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (((p, g), m), v) in params.tensors.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let upd = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            *p = T::lit(p.to_f64_lossy() - upd);
        }
    }
    Ok(())
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: u64, total_steps: u64, lr_max: f64, lr_min: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "schedule step {step} beyond total {total_steps}"
        )));
    }
    if total_steps == 0 {
        return Ok(lr_max);
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}

/// Rescales `grads` to global norm at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}
