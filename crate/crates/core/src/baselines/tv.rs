use crate::error::{Error, Result};
use crate::inference::{data_range_of, psnr};
use crate::operators::{fbp, Filter, ProjectionOperator, Sinogram};

/// Relative weights of the sweep; multiplied by a data-dependent scale.
pub const ALPHA_GRID: [f64; 5] = [1e-3, 3e-3, 1e-2, 3e-2, 1e-1];

const DIVERGENCE_WINDOW: usize = 50;
const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TvConfig {
    pub alpha: f64,
    pub iters: usize,
    /// Over-relaxation in `[0, 1]`.
    pub theta: f64,
    /// Safety factor on the estimate of `‖[A; c∇]‖`.
    pub norm_margin: f64,
    /// Scale the gradient block to `c = ‖A‖/√8` so both blocks have equal norm; `c = 1` otherwise.
    pub balance: bool,
}

impl Default for TvConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            iters: 500,
            theta: 1.0,
            norm_margin: 1.05,
            balance: true,
        }
    }
}

impl TvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || self.iters == 0 {
            return Err(Error::Config(format!(
                "tv needs alpha > 0 and at least one iteration, got alpha={} iters={}",
                self.alpha, self.iters
            )));
        }
        if !(0.0..=1.0).contains(&self.theta) || !(self.norm_margin > 0.0) {
            return Err(Error::Config(format!(
                "tv needs theta in [0, 1] and a positive norm margin, got {} and {}",
                self.theta, self.norm_margin
            )));
        }
        Ok(())
    }
}

/// Forward differences `(d_x, d_y)`, zero across the far edge.
pub fn gradient(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; h * w];
    let mut dy = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            if j + 1 < w {
                dx[k] = x[k + 1] - x[k];
            }
            if i + 1 < h {
                dy[k] = x[k + w] - x[k];
            }
        }
    }
    (dx, dy)
}

/// `∇ᵀ(p, q)`, i.e. minus the discrete divergence.
pub fn neg_divergence_adjoint(p: &[f64], q: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            if j + 1 < w {
                out[k] -= p[k];
                out[k + 1] += p[k];
            }
            if i + 1 < h {
                out[k] -= q[k];
                out[k + w] += q[k];
            }
        }
    }
    out
}

/// `½‖Ax − y‖² + α·TV_iso(x)`.
pub fn tv_objective(x: &[f64], y: &Sinogram, op: &ProjectionOperator, alpha: f64) -> Result<f64> {
    let g = op.grid();
    let ax = op.forward(x)?;
    let fid: f64 = ax.values.iter().zip(&y.values).map(|(a, b)| (a - b) * (a - b)).sum();
    let (dx, dy) = gradient(x, g.ny, g.nx);
    let tv: f64 = dx.iter().zip(&dy).map(|(a, b)| (a * a + b * b).sqrt()).sum();
    Ok(0.5 * fid + alpha * tv)
}

/// Nonnegative constant image closest to `y` in the data term.
fn best_constant(y: &Sinogram, op: &ProjectionOperator) -> Result<Vec<f64>> {
    let ones = op.forward(&vec![1.0; op.grid().len()])?;
    let den: f64 = ones.values.iter().map(|a| a * a).sum();
    let num: f64 = ones.values.iter().zip(&y.values).map(|(a, b)| a * b).sum();
    let c = if den > 0.0 { (num / den).max(0.0) } else { 0.0 };
    Ok(vec![c; op.grid().len()])
}

#[derive(Clone, Debug, PartialEq)]
pub struct TvSolution {
    /// Lowest-objective primal iterate seen. The iteration starts from whichever of the
    /// clamped FBP and the best constant image has the lower objective.
    pub image: Vec<f64>,
    pub objective: f64,
    /// 0 for the initial point.
    pub best_iteration: usize,
    /// Best objective so far after each iteration, starting with the initial point.
    pub history: Vec<f64>,
}

/// Chambolle–Pock for `min_{x ≥ 0} ½‖Ax − y‖² + α·TV_iso(x)` on `K = [A; c∇]` with
/// `σ = τ = 1/(margin·L)`, `L² = ‖A‖² + 8c²`.
///
/// Divergence is declared when the objective stays above ten times the larger of the two
/// starting candidates' objectives for 50 consecutive steps.
pub fn tv_reconstruct(y: &Sinogram, op: &ProjectionOperator, cfg: &TvConfig) -> Result<TvSolution> {
    cfg.validate()?;
    y.check(op.geometry(), "tv_reconstruct")?;
    let g = op.grid();
    let (h, w, n) = (g.ny, g.nx, g.len());
    let c = if cfg.balance { (op.norm_sq() / 8.0).sqrt() } else { 1.0 };
    let l = (op.norm_sq() + 8.0 * c * c).sqrt() * cfg.norm_margin;
    let radius = cfg.alpha / c;
    let (sigma, tau) = (1.0 / l, 1.0 / l);

    let mut x = fbp(op, y, Filter::Hann, crate::phantoms::FBP_INIT_CUTOFF)?;
    x.iter_mut().for_each(|v| *v = v.max(0.0));
    let flat = best_constant(y, op)?;
    let (obj_fbp, obj_flat) = (
        tv_objective(&x, y, op, cfg.alpha)?,
        tv_objective(&flat, y, op, cfg.alpha)?,
    );
    if obj_flat < obj_fbp {
        x = flat;
    }
    let initial = obj_fbp.max(obj_flat);
    let mut xbar = x.clone();
    let mut p = vec![0.0; op.n_rows()];
    let (mut qx, mut qy) = (vec![0.0; n], vec![0.0; n]);
    let mut ax = vec![0.0; op.n_rows()];
    let mut atp = vec![0.0; n];

    let mut best = x.clone();
    let mut best_obj = tv_objective(&x, y, op, cfg.alpha)?;
    let mut best_iteration = 0;
    let mut history = Vec::with_capacity(cfg.iters + 1);
    history.push(best_obj);
    let mut rising = 0usize;

    for it in 1..=cfg.iters {
        op.forward_into(&xbar, &mut ax);
        for ((pi, &a), &yi) in p.iter_mut().zip(&ax).zip(&y.values) {
            *pi = (*pi + sigma * (a - yi)) / (1.0 + sigma);
        }
        let (gx, gy) = gradient(&xbar, h, w);
        for k in 0..n {
            let (u, v) = (qx[k] + sigma * c * gx[k], qy[k] + sigma * c * gy[k]);
            let s = ((u * u + v * v).sqrt() / radius).max(1.0);
            qx[k] = u / s;
            qy[k] = v / s;
        }
        op.adjoint_into(&p, &mut atp);
        let dq = neg_divergence_adjoint(&qx, &qy, h, w);
        for k in 0..n {
            let old = x[k];
            x[k] = (old - tau * (atp[k] + c * dq[k])).max(0.0);
            xbar[k] = x[k] + cfg.theta * (x[k] - old);
        }
        let obj = tv_objective(&x, y, op, cfg.alpha)?;
        if !obj.is_finite() {
            return Err(Error::Numerical(format!(
                "tv solver produced a non-finite objective at step {it} (sigma={sigma:.3e}, tau={tau:.3e})"
            )));
        }
        rising = if obj > DIVERGENCE_FACTOR * initial {
            rising + 1
        } else {
            0
        };
        if rising >= DIVERGENCE_WINDOW {
            return Err(Error::Numerical(format!(
                "tv solver diverging: objective above {DIVERGENCE_FACTOR} times the starting value for {DIVERGENCE_WINDOW} consecutive steps up to step {it} \
                 (sigma={sigma:.3e}, tau={tau:.3e})"
            )));
        }
        if obj < best_obj {
            best_obj = obj;
            best.copy_from_slice(&x);
            best_iteration = it;
        }
        history.push(best_obj);
    }
    Ok(TvSolution {
        image: best,
        objective: best_obj,
        best_iteration,
        history,
    })
}

/// The sweep grid scaled by `‖A‖ · max FBP(y)` over the tuning sinograms.
pub fn alpha_grid(op: &ProjectionOperator, ys: &[&Sinogram]) -> Result<Vec<f64>> {
    let mut peak: f64 = 0.0;
    for y in ys {
        let x = fbp(op, y, Filter::Hann, crate::phantoms::FBP_INIT_CUTOFF)?;
        peak = x.iter().fold(peak, |m, &v| m.max(v));
    }
    let scale = op.norm_sq().sqrt() * if peak > 0.0 { peak } else { 1.0 };
    Ok(ALPHA_GRID.iter().map(|a| a * scale).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlphaSweep {
    pub alphas: Vec<f64>,
    /// Mean PSNR over the tuning images for each alpha.
    pub mean_psnr: Vec<f64>,
    pub best_alpha: f64,
}

/// Picks the alpha with the highest mean PSNR over `(y, ground truth)` tuning pairs.
pub fn sweep_alpha(
    items: &[(Sinogram, Vec<f64>)],
    op: &ProjectionOperator,
    base: &TvConfig,
    alphas: &[f64],
) -> Result<AlphaSweep> {
    if items.is_empty() || alphas.is_empty() {
        return Err(Error::InvalidArgument(
            "alpha sweep needs tuning images and candidate weights".into(),
        ));
    }
    let mut mean_psnr = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let cfg = TvConfig { alpha, ..*base };
        let mut total = 0.0;
        for (y, gt) in items {
            let sol = tv_reconstruct(y, op, &cfg)?;
            total += psnr(&sol.image, gt, data_range_of(gt))?;
        }
        mean_psnr.push(total / items.len() as f64);
    }
    let best = (0..alphas.len()).fold(0, |b, i| if mean_psnr[i] > mean_psnr[b] { i } else { b });
    Ok(AlphaSweep {
        alphas: alphas.to_vec(),
        mean_psnr,
        best_alpha: alphas[best],
    })
}
