use std::sync::Arc;

use rand::Rng;

use crate::diffengine::{Tape, Tensor, TvVariant, Var};
use crate::error::{Error, Result};
use crate::operators::{ProjectionOperator, Sinogram};
use crate::real::Real;

/// Product of independent Gaussians.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDiag {
    pub mean: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussianDiag {
    pub fn new(mean: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mean.len() != sigma.len() {
            return Err(Error::shape("gaussian", &[mean.len()], &[sigma.len()]));
        }
        if let Some(s) = sigma.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "gaussian scale must be positive, got {s}"
            )));
        }
        Ok(Self { mean, sigma })
    }

    pub fn standard(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            sigma: vec![1.0; n],
        }
    }
}

/// Closed-form KL of one component pair.
pub fn kl_component(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
    let d = mq - mp;
    (sp / sq).ln() + (sq * sq + d * d) / (2.0 * sp * sp) - 0.5
}

/// `∂KL/∂μ_q`, `∂KL/∂σ_q` of one component pair.
pub fn kl_component_grad(mq: f64, sq: f64, mp: f64, sp: f64) -> (f64, f64) {
    let ip = 1.0 / (sp * sp);
    ((mq - mp) * ip, -1.0 / sq + sq * ip)
}

/// `KL[q ‖ p] = Σ ln(σ_p/σ_q) + (σ_q² + (μ_q−μ_p)²)/(2σ_p²) − ½`.
pub fn kl_diag_gauss(q: &GaussianDiag, p: &GaussianDiag) -> Result<f64> {
    if q.mean.len() != p.mean.len() {
        return Err(Error::shape("kl_diag_gauss", &[p.mean.len()], &[q.mean.len()]));
    }
    Ok((0..q.mean.len())
        .map(|i| kl_component(q.mean[i], q.sigma[i], p.mean[i], p.sigma[i]))
        .sum())
}

/// `½ Σ (x−μ)²/v + ln v` on a tape. `var` must already be positive.
pub fn hetero_nll_on_tape<T: Real>(tape: &mut Tape<T>, x_true: Var, mu: Var, var: Var) -> Result<Var> {
    let d = tape.sub(x_true, mu)?;
    let d2 = tape.square(d);
    let r = tape.div(d2, var)?;
    let lv = tape.log_eps(var, 0.0);
    let s = tape.add(r, lv)?;
    let s = tape.sum(s);
    Ok(tape.scale(s, 0.5))
}

/// `½ Σ [(xᵢ−μᵢ)²/vᵢ + ln vᵢ]`, the Gaussian negative log-likelihood without the 2π term.
pub fn hetero_nll(x_true: &[f64], mu: &[f64], var: &[f64]) -> Result<f64> {
    if x_true.len() != mu.len() || mu.len() != var.len() {
        return Err(Error::shape("hetero_nll", &[x_true.len()], &[mu.len(), var.len()]));
    }
    if let Some(v) = var.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::InvalidArgument(format!("variance must be positive, got {v}")));
    }
    Ok(0.5
        * x_true
            .iter()
            .zip(mu)
            .zip(var)
            .map(|((x, m), v)| (x - m) * (x - m) / v + v.ln())
            .sum::<f64>())
}

/// Total variation of an `h × w` image (see [`Tape::tv`]).
pub fn tv_seminorm(image: &[f64], h: usize, w: usize, variant: TvVariant, smooth_eps: f64) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(&[h, w], image.to_vec())?);
    let t = tape.tv(x, variant, smooth_eps)?;
    tape.value(t).item()
}

/// `‖y − A μ‖²` on a tape; `y` is a constant sinogram node.
pub fn data_fidelity_on_tape<T: Real>(
    tape: &mut Tape<T>,
    y: Var,
    op: &Arc<ProjectionOperator>,
    mu: Var,
) -> Result<Var> {
    let ax = tape.project(mu, op)?;
    let r = tape.sub(y, ax)?;
    let r2 = tape.square(r);
    Ok(tape.sum(r2))
}

pub fn data_fidelity(y: &Sinogram, op: &ProjectionOperator, mu: &[f64]) -> Result<f64> {
    y.check(op.geometry(), "data_fidelity")?;
    let ax = op.forward(mu)?;
    Ok(y.values.iter().zip(&ax.values).map(|(a, b)| (a - b) * (a - b)).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceMode {
    Hutchinson,
    Exact,
}

impl TraceMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "hutchinson" => Some(Self::Hutchinson),
            "exact" => Some(Self::Exact),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Hutchinson => "hutchinson",
            Self::Exact => "exact",
        }
    }
}

/// Largest image (in pixels) for which exact column norms may be requested.
pub const EXACT_TRACE_MAX_PIXELS: usize = 64 * 64;

/// Per-pixel weights `c` with `trace(A diag(v) Aᵀ) ≈ Σⱼ cⱼ vⱼ`.
///
/// Hutchinson: `c = (1/S) Σ_s (Aᵀ v_s)²` with Rademacher `v_s`; exact: `cⱼ = ‖A eⱼ‖²`.
pub fn trace_weights<R: Rng + ?Sized>(
    op: &ProjectionOperator,
    rng: &mut R,
    samples: usize,
    mode: TraceMode,
    max_exact_pixels: usize,
) -> Result<Vec<f64>> {
    match mode {
        TraceMode::Exact => {
            if op.grid().len() > max_exact_pixels {
                return Err(Error::InvalidArgument(format!(
                    "exact trace needs {} column norms, limit is {max_exact_pixels}",
                    op.grid().len()
                )));
            }
            Ok(op.column_norms_sq())
        }
        TraceMode::Hutchinson => {
            if samples == 0 {
                return Err(Error::InvalidArgument(
                    "trace estimator needs at least one probe".into(),
                ));
            }
            let n = op.grid().len();
            let mut c = vec![0.0; n];
            let mut v = vec![0.0; op.n_rows()];
            let mut w = vec![0.0; n];
            for _ in 0..samples {
                v.iter_mut()
                    .for_each(|x| *x = if rng.random::<bool>() { 1.0 } else { -1.0 });
                op.adjoint_into(&v, &mut w);
                c.iter_mut().zip(&w).for_each(|(ci, wi)| *ci += wi * wi);
            }
            let s = 1.0 / samples as f64;
            c.iter_mut().for_each(|ci| *ci *= s);
            Ok(c)
        }
    }
}

pub fn trace_term<R: Rng + ?Sized>(
    op: &ProjectionOperator,
    var_diag: &[f64],
    rng: &mut R,
    samples: usize,
    mode: TraceMode,
) -> Result<f64> {
    op.grid().check_image(var_diag.len(), "trace_term")?;
    let c = trace_weights(op, rng, samples, mode, EXACT_TRACE_MAX_PIXELS)?;
    Ok(c.iter().zip(var_diag).map(|(a, b)| a * b).sum())
}

/// `Σⱼ cⱼ vⱼ` on a tape.
pub fn trace_on_tape<T: Real>(tape: &mut Tape<T>, var: Var, weights: &[f64]) -> Result<Var> {
    let shape = tape.shape(var).to_vec();
    let c = tape.constant(Tensor::from_f64(&shape, weights)?);
    let p = tape.mul(var, c)?;
    Ok(tape.sum(p))
}
