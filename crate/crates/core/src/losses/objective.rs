use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use super::terms::{
    data_fidelity_on_tape, hetero_nll_on_tape, kl_component, kl_component_grad, trace_on_tape, trace_weights,
    TraceMode, EXACT_TRACE_MAX_PIXELS,
};
use crate::bayesnet::{softplus, unrolled_on_tape, Mode, NetworkParams, ParamVars, PriorSnapshot, VARIANCE_FLOOR};
use crate::diffengine::{Tape, Tensor, TvVariant, Var};
use crate::error::{Error, Result};
use crate::operators::{ProjectionOperator, Sinogram};
use crate::real::Real;
use crate::seed::{derive_seed, rng_from};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HyperParams {
    /// KL weight; `None` selects `1e-3 · pixels / variational parameters`.
    pub beta: Option<f64>,
    pub gamma: f64,
    pub hutchinson_samples: usize,
    pub train_mc_samples: usize,
    pub tv_variant: TvVariant,
    pub tv_smooth_eps: f64,
    pub trace_mode: TraceMode,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            beta: None,
            gamma: 1e-2,
            hutchinson_samples: 10,
            train_mc_samples: 1,
            tv_variant: TvVariant::Isotropic,
            tv_smooth_eps: 1e-6,
            trace_mode: TraceMode::Hutchinson,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if let Some(b) = self.beta {
            if !(b >= 0.0) {
                return Err(Error::Config(format!("beta must be nonnegative, got {b}")));
            }
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be nonnegative, got {}", self.gamma)));
        }
        if self.hutchinson_samples == 0 || self.train_mc_samples == 0 {
            return Err(Error::Config(
                "probe and Monte-Carlo sample counts must be at least 1".into(),
            ));
        }
        if !(self.tv_smooth_eps >= 0.0) {
            return Err(Error::Config(format!(
                "tv smoothing must be nonnegative, got {}",
                self.tv_smooth_eps
            )));
        }
        Ok(())
    }

    pub fn beta_value<T: Real>(&self, params: &NetworkParams<T>, pixels: usize) -> f64 {
        self.beta
            .unwrap_or_else(|| 1e-3 * pixels as f64 / params.n_variational().max(1) as f64)
    }
}

/// Named components of either objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub fidelity_or_nll: f64,
    pub trace: f64,
    pub tv: f64,
    pub kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(fidelity_or_nll: f64, trace: f64, tv: f64, kl: f64) -> Self {
        Self {
            fidelity_or_nll,
            trace,
            tv,
            kl,
            total: fidelity_or_nll + trace + tv + kl,
        }
    }
}

/// Gradients in `f64`, one vector per parameter tensor.
pub type ParamGrads = Vec<Vec<f64>>;

pub fn zero_grads<T: Real>(params: &NetworkParams<T>) -> ParamGrads {
    params.tensors.iter().map(|t| vec![0.0; t.len()]).collect()
}

/// `KL[q_ψ ‖ p]` over every variational scalar, with its gradient.
/// `prior = None` is the standard normal.
pub fn network_kl<T: Real>(params: &NetworkParams<T>, prior: Option<&PriorSnapshot>) -> Result<(f64, ParamGrads)> {
    let pairs = params.variational_pairs();
    if let Some(p) = prior {
        if p.means.len() != pairs.len()
            || p.means
                .iter()
                .zip(&pairs)
                .any(|(m, &(mi, _))| m.len() != params.tensors[mi].len())
        {
            return Err(Error::Data("prior snapshot does not match the network layout".into()));
        }
    }
    let mut grads = zero_grads(params);
    let mut total = 0.0;
    for (k, &(mi, ri)) in pairs.iter().enumerate() {
        let means = params.tensors[mi].data();
        let rhos = params.tensors[ri].data();
        for j in 0..means.len() {
            let mq = means[j].to_f64_lossy();
            let rho = rhos[j].to_f64_lossy();
            let sq = softplus(rho);
            let (mp, sp) = prior.map_or((0.0, 1.0), |p| (p.means[k][j], p.sigmas[k][j]));
            total += kl_component(mq, sq, mp, sp);
            let (dm, ds) = kl_component_grad(mq, sq, mp, sp);
            grads[mi][j] = dm;
            grads[ri][j] = ds / (1.0 + (-rho).exp());
        }
    }
    Ok((total, grads))
}

fn add_grads(acc: &mut ParamGrads, g: &ParamGrads, scale: f64) {
    for (a, b) in acc.iter_mut().zip(g) {
        a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
    }
}

/// `β·KL` added into `grads`; `β = 0` switches the term off entirely.
fn weighted_kl<T: Real>(
    params: &NetworkParams<T>,
    prior: Option<&PriorSnapshot>,
    beta: f64,
    grads: Option<ParamGrads>,
) -> Result<(f64, Option<ParamGrads>)> {
    if beta == 0.0 {
        return Ok((0.0, grads));
    }
    let (kl, kl_grads) = network_kl(params, prior)?;
    let grads = grads.map(|mut g| {
        add_grads(&mut g, &kl_grads, beta);
        g
    });
    Ok((beta * kl, grads))
}

fn collect_grads<T: Real>(tape: &Tape<T>, pv: &ParamVars, loss: Var) -> Result<ParamGrads> {
    let g = tape.backward(loss)?;
    Ok(pv
        .vars
        .iter()
        .map(|&v| {
            g.get(v)
                .map(|s| s.iter().map(|x| x.to_f64_lossy()).collect())
                .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
        })
        .collect())
}

fn image_shape(op: &ProjectionOperator) -> [usize; 4] {
    let g = op.grid();
    [1, 1, g.ny, g.nx]
}

/// Positive variance map on a tape: `softplus(s) + 1e-6`.
pub fn variance_on_tape<T: Real>(tape: &mut Tape<T>, sigma_raw: Var) -> Var {
    let sp = tape.softplus(sigma_raw);
    tape.add_scalar(sp, VARIANCE_FLOOR)
}

pub struct SupervisedExample<'a> {
    /// Stable identifier; together with the noise seed it fixes the weight noise.
    pub id: u64,
    pub x_true: &'a [f64],
    pub y: &'a Sinogram,
    pub x0: &'a [f64],
}

struct Partial {
    parts: [f64; 3],
    grads: Option<ParamGrads>,
}

fn reduce(partials: Vec<Partial>, params_len: &[usize]) -> ([f64; 3], Option<ParamGrads>) {
    let mut parts = [0.0; 3];
    let mut grads: Option<ParamGrads> = None;
    for p in partials {
        for k in 0..3 {
            parts[k] += p.parts[k];
        }
        if let Some(g) = p.grads {
            let acc = grads.get_or_insert_with(|| params_len.iter().map(|&n| vec![0.0; n]).collect());
            add_grads(acc, &g, 1.0);
        }
    }
    (parts, grads)
}

/// Negative ELBO over a batch: `Σ_batch NLL` averaged over the Monte-Carlo draws, plus `β·KL[q ‖ N(0, I)]`.
/// Weight noise for example `id`, draw `d` comes from `derive_seed(noise_seed, [id, d])`,
/// with `noise_seed` drawn from `rng`.
pub fn supervised_loss<T: Real, R: Rng + ?Sized>(
    params: &NetworkParams<T>,
    batch: &[SupervisedExample<'_>],
    op: &Arc<ProjectionOperator>,
    hyper: &HyperParams,
    rng: &mut R,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<ParamGrads>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("supervised batch is empty".into()));
    }
    let noise_seed = rng.next_u64();
    let shape = image_shape(op);
    let draws = hyper.train_mc_samples;
    let partials = batch
        .par_iter()
        .map(|ex| -> Result<Partial> {
            let mut tape = Tape::<T>::new();
            let pv = ParamVars::attach(&mut tape, params, with_grad);
            let y = tape.constant(Tensor::from_f64(&[ex.y.n_angles, ex.y.n_detectors], &ex.y.values)?);
            let x0 = tape.constant(Tensor::from_f64(&shape, ex.x0)?);
            let m0 = tape.constant(Tensor::zeros(&shape));
            let xt = tape.constant(Tensor::from_f64(&shape, ex.x_true)?);
            let mut acc: Option<Var> = None;
            for d in 0..draws {
                let mut r = rng_from(derive_seed(noise_seed, &[ex.id, d as u64]));
                let (out, _) = unrolled_on_tape(&mut tape, params, &pv, op, y, x0, m0, &mut r, Mode::Sample)?;
                let var = variance_on_tape(&mut tape, out.sigma_raw);
                let nll = hetero_nll_on_tape(&mut tape, xt, out.mu, var)?;
                acc = Some(match acc {
                    None => nll,
                    Some(a) => tape.add(a, nll)?,
                });
            }
            let nll = tape.scale(acc.expect("draws >= 1"), 1.0 / draws as f64);
            let value = tape.value(nll).item()?.to_f64_lossy();
            let grads = if with_grad {
                Some(collect_grads(&tape, &pv, nll)?)
            } else {
                None
            };
            Ok(Partial {
                parts: [value, 0.0, 0.0],
                grads,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let lens: Vec<usize> = params.tensors.iter().map(Tensor::len).collect();
    let ([nll, _, _], grads) = reduce(partials, &lens);
    let beta = hyper.beta_value(params, op.grid().len());
    let (kl, grads) = weighted_kl(params, None, beta, grads)?;
    Ok((LossBreakdown::new(nll, 0.0, 0.0, kl), grads))
}

pub struct UktExample<'a> {
    pub id: u64,
    pub y: &'a Sinogram,
    pub x0: &'a [f64],
}

/// Adaptation objective summed over measurements, averaged over Monte-Carlo draws:
/// `‖y − A F^μ‖² + trace(A Σ̂ Aᵀ) + γ·TV(F^μ)`, plus `β·KL[q ‖ prior]`.
pub fn ukt_loss<T: Real, R: Rng + ?Sized>(
    params: &NetworkParams<T>,
    measurements: &[UktExample<'_>],
    op: &Arc<ProjectionOperator>,
    prior: Option<&PriorSnapshot>,
    hyper: &HyperParams,
    rng: &mut R,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<ParamGrads>)> {
    let prior = prior.ok_or_else(|| Error::Data("adaptation needs the prior snapshot of the first phase".into()))?;
    if measurements.is_empty() {
        return Err(Error::InvalidArgument("no measurements to adapt to".into()));
    }
    let noise_seed = rng.next_u64();
    let shape = image_shape(op);
    let draws = hyper.train_mc_samples;
    let partials = measurements
        .par_iter()
        .map(|ex| -> Result<Partial> {
            let mut tape = Tape::<T>::new();
            let pv = ParamVars::attach(&mut tape, params, with_grad);
            let y = tape.constant(Tensor::from_f64(&[ex.y.n_angles, ex.y.n_detectors], &ex.y.values)?);
            let x0 = tape.constant(Tensor::from_f64(&shape, ex.x0)?);
            let m0 = tape.constant(Tensor::zeros(&shape));
            let mut terms: Option<[Var; 3]> = None;
            for d in 0..draws {
                let mut r = rng_from(derive_seed(noise_seed, &[ex.id, d as u64]));
                let (out, _) = unrolled_on_tape(&mut tape, params, &pv, op, y, x0, m0, &mut r, Mode::Sample)?;
                let fid = data_fidelity_on_tape(&mut tape, y, op, out.mu)?;
                let var = variance_on_tape(&mut tape, out.sigma_raw);
                let mut tr = rng_from(derive_seed(noise_seed, &[ex.id, d as u64, 1]));
                let c = trace_weights(
                    op,
                    &mut tr,
                    hyper.hutchinson_samples,
                    hyper.trace_mode,
                    EXACT_TRACE_MAX_PIXELS,
                )?;
                let trace = trace_on_tape(&mut tape, var, &c)?;
                let tv = tape.tv(out.mu, hyper.tv_variant, hyper.tv_smooth_eps)?;
                let tv = tape.scale(tv, hyper.gamma);
                terms = Some(match terms {
                    None => [fid, trace, tv],
                    Some([a, b, c]) => [tape.add(a, fid)?, tape.add(b, trace)?, tape.add(c, tv)?],
                });
            }
            let inv = 1.0 / draws as f64;
            let [f, t, v] = terms.expect("draws >= 1").map(|x| tape.scale(x, inv));
            let ft = tape.add(f, t)?;
            let total = tape.add(ft, v)?;
            let parts = [f, t, v].map(|x| tape.value(x).item().map(|s| s.to_f64_lossy()).unwrap_or(f64::NAN));
            let grads = if with_grad {
                Some(collect_grads(&tape, &pv, total)?)
            } else {
                None
            };
            Ok(Partial { parts, grads })
        })
        .collect::<Result<Vec<_>>>()?;
    let lens: Vec<usize> = params.tensors.iter().map(Tensor::len).collect();
    let ([fid, trace, tv], grads) = reduce(partials, &lens);
    let beta = hyper.beta_value(params, op.grid().len());
    let (kl, grads) = weighted_kl(params, Some(prior), beta, grads)?;
    Ok((LossBreakdown::new(fid, trace, tv, kl), grads))
}
