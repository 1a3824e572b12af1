use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use super::params::{BayesConvIdx, ConvIdx, HeadIdx, NetworkParams, NormIdx};
use crate::diffengine::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::operators::{ProjectionOperator, Sinogram};
use crate::real::Real;

/// Stabiliser under the square root of the activation variance.
pub const ACTIVATION_VAR_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Local reparametrisation: fresh activation noise on every call.
    Sample,
    /// Activation means only.
    Mean,
}

/// Network tensors attached to a tape.
pub struct ParamVars {
    pub vars: Vec<Var>,
}

impl ParamVars {
    /// Attaches parameters as leaves (`trainable`) or as constants.
    pub fn attach<T: Real>(tape: &mut Tape<T>, params: &NetworkParams<T>, trainable: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        ParamVars { vars }
    }
}

/// Tape handles of one block's outputs, each `[1, 1, ny, nx]`.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub mu: Var,
    pub sigma_raw: Var,
}

/// Tape handles of one unrolled step.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub x: Var,
    pub m: Var,
    pub grad_d: Var,
}

fn gaussian_noise<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::new(shape, data).expect("shape")
}

/// Variational convolution with local reparametrisation. `w` holds the tape
/// handles of `[w_mean, w_rho, b_mean, b_rho]`.
///
/// Sample mode returns `a_μ + sqrt(a_v + 1e-12)·ε` with `a_μ = conv(h, w_mean) + b_mean`,
/// `a_v = conv(h², σ_w²) + σ_b²` and fresh `ε ~ N(0, 1)`; when every scale is exactly
/// zero it returns `a_μ` unchanged. Mean mode returns `a_μ`.
pub fn bayes_conv_on_tape<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    h: Var,
    w: [Var; 4],
    rng: &mut R,
    mode: Mode,
) -> Result<Var> {
    let [w_mean, w_rho, b_mean, b_rho] = w;
    let a_mu = tape.conv2d(h, w_mean, Some(b_mean))?;
    if mode == Mode::Mean {
        return Ok(a_mu);
    }
    let sw = tape.softplus(w_rho);
    let sb = tape.softplus(b_rho);
    let zero = |t: &Tape<T>, v: Var| t.value(v).data().iter().all(|x| *x == T::zero());
    if zero(tape, sw) && zero(tape, sb) {
        return Ok(a_mu);
    }
    let h2 = tape.square(h);
    let sw2 = tape.square(sw);
    let sb2 = tape.square(sb);
    let a_v = tape.conv2d(h2, sw2, Some(sb2))?;
    let sd = tape.sqrt_eps(a_v, ACTIVATION_VAR_EPS);
    let eps = gaussian_noise(rng, tape.shape(a_mu));
    let eps = tape.constant(eps);
    let noise = tape.mul(sd, eps)?;
    tape.add(a_mu, noise)
}

struct Ctx<'a, T: Real, R: Rng + ?Sized> {
    tape: &'a mut Tape<T>,
    p: &'a ParamVars,
    slope: f64,
    groups: usize,
    mode: Mode,
    rng: &'a mut R,
}

impl<T: Real, R: Rng + ?Sized> Ctx<'_, T, R> {
    fn v(&self, i: usize) -> Var {
        self.p.vars[i]
    }

    fn bayes_conv(&mut self, h: Var, l: &BayesConvIdx) -> Result<Var> {
        let w = [self.v(l.w_mean), self.v(l.w_rho), self.v(l.b_mean), self.v(l.b_rho)];
        bayes_conv_on_tape(self.tape, h, w, self.rng, self.mode)
    }

    fn norm_act(&mut self, h: Var, n: &NormIdx) -> Result<Var> {
        let g = self.tape.group_norm(h, self.groups, self.v(n.gamma), self.v(n.beta))?;
        Ok(self.tape.leaky_relu(g, self.slope))
    }

    fn conv(&mut self, h: Var, c: &ConvIdx) -> Result<Var> {
        self.tape.conv2d(h, self.v(c.w), Some(self.v(c.b)))
    }

    fn head(&mut self, h: Var, hd: &HeadIdx) -> Result<Var> {
        let a = self.conv(h, &hd.conv)?;
        let a = self.norm_act(a, &hd.norm)?;
        self.conv(a, &hd.out)
    }
}

/// One block on a tape. `x`, `grad`, `m` are `[1, 1, ny, nx]`.
#[allow(clippy::too_many_arguments)]
pub fn block_on_tape<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    params: &NetworkParams<T>,
    p: &ParamVars,
    x: Var,
    grad: Var,
    m: Var,
    rng: &mut R,
    mode: Mode,
) -> Result<BlockVars> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 || shape[0] != 1 || shape[1] != 1 {
        return Err(Error::shape("block input", &[1, 1, 0, 0], &shape));
    }
    if shape[2] % 2 != 0 || shape[3] % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "grid {}x{} must have even sides for pooling",
            shape[3], shape[2]
        )));
    }
    for v in [grad, m] {
        if tape.shape(v) != shape.as_slice() {
            return Err(Error::shape("block input", &shape, tape.shape(v)));
        }
    }
    let l = &params.layout;
    let mut c = Ctx {
        tape,
        p,
        slope: params.config.slope,
        groups: params.config.groups,
        mode,
        rng,
    };
    let xg = c.tape.concat_channels(x, grad)?;
    let inp = c.tape.concat_channels(xg, m)?;
    let h = c.bayes_conv(inp, &l.encoder[0])?;
    let h = c.norm_act(h, &l.encoder_norms[0])?;
    let h = c.bayes_conv(h, &l.encoder[1])?;
    let skip = c.norm_act(h, &l.encoder_norms[1])?;
    let h = c.tape.maxpool2(skip)?;
    let h = c.bayes_conv(h, &l.encoder[2])?;
    let h = c.norm_act(h, &l.encoder_norms[2])?;
    let h = c.bayes_conv(h, &l.encoder[3])?;
    let h = c.norm_act(h, &l.encoder_norms[3])?;
    let up = c.tape.conv_transpose2d(h, c.v(l.up.w), Some(c.v(l.up.b)))?;
    let h = c.tape.concat_channels(up, skip)?;
    let h = c.conv(h, &l.decoder[0])?;
    let h = c.norm_act(h, &l.decoder_norms[0])?;
    let h = c.conv(h, &l.decoder[1])?;
    let h = c.norm_act(h, &l.decoder_norms[1])?;
    let residual = c.head(h, &l.mu_head)?;
    let sigma_raw = c.head(h, &l.sigma_head)?;
    let sum = c.tape.add(x, residual)?;
    let mu = c.tape.relu_project(sum);
    Ok(BlockVars { mu, sigma_raw })
}

/// The K-step chain on a tape. `y` is `[n_angles, n_detectors]`; `x0`, `m0` are `[1, 1, ny, nx]`.
/// The data-fidelity gradient enters the network divided by `‖A‖²`.
#[allow(clippy::too_many_arguments)]
pub fn unrolled_on_tape<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    params: &NetworkParams<T>,
    p: &ParamVars,
    op: &Arc<ProjectionOperator>,
    y: Var,
    x0: Var,
    m0: Var,
    rng: &mut R,
    mode: Mode,
) -> Result<(BlockVars, Vec<StepVars>)> {
    let grid = op.grid();
    let img_shape = [1, 1, grid.ny, grid.nx];
    let inv_norm = 1.0 / op.norm_sq();
    let (mut x, mut m) = (x0, m0);
    let mut steps = Vec::with_capacity(params.config.k_iters);
    let mut last = None;
    for _ in 0..params.config.k_iters {
        let ax = tape.project(x, op)?;
        let r = tape.sub(ax, y)?;
        let g = tape.backproject(r, op)?;
        let g = tape.reshape(g, &img_shape)?;
        let gs = tape.scale(g, inv_norm);
        let out = block_on_tape(tape, params, p, x, gs, m, rng, mode)?;
        steps.push(StepVars {
            x: out.mu,
            m: out.sigma_raw,
            grad_d: g,
        });
        x = out.mu;
        m = out.sigma_raw;
        last = Some(out);
    }
    Ok((last.expect("k_iters >= 1"), steps))
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterateState<T> {
    pub x: Vec<T>,
    pub m: Vec<T>,
    pub grad_d: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkOutput<T> {
    pub mu: Vec<T>,
    pub sigma_raw: Vec<T>,
    pub m_next: Vec<T>,
}

fn image_const<T: Real>(tape: &mut Tape<T>, data: &[T], ny: usize, nx: usize) -> Result<Var> {
    Ok(tape.constant(Tensor::new(&[1, 1, ny, nx], data.to_vec())?))
}

fn output<T: Real>(tape: &Tape<T>, b: BlockVars) -> NetworkOutput<T> {
    let sigma_raw = tape.value(b.sigma_raw).data().to_vec();
    NetworkOutput {
        mu: tape.value(b.mu).data().to_vec(),
        m_next: sigma_raw.clone(),
        sigma_raw,
    }
}

/// One block evaluated without gradients. `state.grad_d` is used as given.
pub fn sample_block<T: Real, R: Rng + ?Sized>(
    params: &NetworkParams<T>,
    state: &IterateState<T>,
    ny: usize,
    nx: usize,
    rng: &mut R,
    mode: Mode,
) -> Result<NetworkOutput<T>> {
    let mut tape = Tape::new();
    let p = ParamVars::attach(&mut tape, params, false);
    let x = image_const(&mut tape, &state.x, ny, nx)?;
    let g = image_const(&mut tape, &state.grad_d, ny, nx)?;
    let m = image_const(&mut tape, &state.m, ny, nx)?;
    let b = block_on_tape(&mut tape, params, &p, x, g, m, rng, mode)?;
    Ok(output(&tape, b))
}

/// The K-step chain evaluated without gradients. The trajectory holds `(x_k, m_k, ∇D_{k-1})`.
pub fn unrolled_forward<T: Real, R: Rng + ?Sized>(
    params: &NetworkParams<T>,
    y: &Sinogram,
    op: &Arc<ProjectionOperator>,
    x0: &[T],
    m0: &[T],
    rng: &mut R,
    mode: Mode,
) -> Result<(NetworkOutput<T>, Vec<IterateState<T>>)> {
    y.check(op.geometry(), "unrolled_forward measurement")?;
    let grid = op.grid();
    grid.check_image(x0.len(), "unrolled_forward x0")?;
    grid.check_image(m0.len(), "unrolled_forward m0")?;
    let mut tape = Tape::new();
    let p = ParamVars::attach(&mut tape, params, false);
    let yv = tape.constant(Tensor::from_f64(&[y.n_angles, y.n_detectors], &y.values)?);
    let x = image_const(&mut tape, x0, grid.ny, grid.nx)?;
    let m = image_const(&mut tape, m0, grid.ny, grid.nx)?;
    let (b, steps) = unrolled_on_tape(&mut tape, params, &p, op, yv, x, m, rng, mode)?;
    let traj = steps
        .iter()
        .map(|s| IterateState {
            x: tape.value(s.x).data().to_vec(),
            m: tape.value(s.m).data().to_vec(),
            grad_d: tape.value(s.grad_d).data().to_vec(),
        })
        .collect();
    Ok((output(&tape, b), traj))
}
