//! Invariant suites run by `bdgd selftest`: operator adjointness, gradient checks,
//! KL correctness, the trace estimator and the uncertainty decomposition.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::bayesnet::{init_network, softplus_inv, NetConfig, NetworkParams};
use crate::diffengine::{gradcheck, GRADCHECK_OPS};
use crate::error::Result;
use crate::inference::{mc_moments, reconstruct, PredictiveSampler};
use crate::losses::{
    kl_diag_gauss, supervised_loss, trace_term, ukt_loss, GaussianDiag, HyperParams, ParamGrads, SupervisedExample,
    TraceMode, UktExample,
};
use crate::operators::{Geometry, ImageGrid, ProjectionOperator, Sinogram};
use crate::seed::{child_seed, rng_from};
use crate::training::{Checkpoint, OptimState, RngState};

pub const ADJOINT_TOL: f64 = 1e-10;
pub const OP_GRAD_TOL: f64 = 1e-4;
pub const LOSS_GRAD_TOL: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn line(&self) -> String {
        format!(
            "{} {} ({:.1} s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> SuiteReport {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, e.to_string()));
    SuiteReport {
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `|⟨Ax, y⟩ − ⟨x, Aᵀy⟩| / (‖Ax‖ ‖y‖)`, worst over `pairs` random pairs.
pub fn adjoint_mismatch(op: &ProjectionOperator, pairs: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for k in 0..pairs {
        let mut rng = rng_from(child_seed(seed, k as u64));
        let x = uniform(&mut rng, op.grid().len(), -1.0, 1.0);
        let g = op.geometry();
        let y = Sinogram::new(g.n_angles(), g.n_detectors, uniform(&mut rng, op.n_rows(), -1.0, 1.0))?;
        let ax = op.forward(&x)?;
        let aty = op.adjoint(&y)?;
        let lhs = dot(&ax.values, &y.values);
        let rhs = dot(&x, &aty);
        let scale = dot(&ax.values, &ax.values).sqrt() * dot(&y.values, &y.values).sqrt();
        worst = worst.max((lhs - rhs).abs() / scale.max(f64::MIN_POSITIVE));
    }
    Ok(worst)
}

/// Adjoint test on the desk parallel and fan geometries, 20 pairs each.
pub fn adjoint_suite() -> SuiteReport {
    timed("adjoint", || {
        let grid = ImageGrid::new(64, 64, 1.0)?;
        let mut parts = Vec::new();
        let mut ok = true;
        for (name, g) in [
            ("parallel", Geometry::parallel(120, 128, 1.0)?),
            ("fan", Geometry::fan(120, 128, 1.5, 500.0, 500.0)?),
        ] {
            let op = ProjectionOperator::new(grid, g)?;
            let err = adjoint_mismatch(&op, 20, 17)?;
            ok &= err < ADJOINT_TOL;
            parts.push(format!("{name} {err:.1e}"));
        }
        Ok((ok, format!("{} (tol {ADJOINT_TOL:.0e})", parts.join(", "))))
    })
}

fn loss_operator() -> Result<Arc<ProjectionOperator>> {
    let grid = ImageGrid::new(16, 16, 1.0)?;
    Ok(Arc::new(ProjectionOperator::new(
        grid,
        Geometry::fan(32, 32, 1.5, 100.0, 100.0)?,
    )?))
}

fn loss_network(seed: u64) -> Result<NetworkParams<f64>> {
    let cfg = NetConfig {
        c1: 4,
        c2: 8,
        groups: 2,
        k_iters: 2,
        ..Default::default()
    };
    let mut p = init_network::<f64, _>(&cfg, &mut rng_from(seed))?;
    p.set_all_rho(softplus_inv(0.05));
    Ok(p)
}

/// Worst relative central-difference error over three scalars of each listed tensor.
fn fd_worst(
    net: &NetworkParams<f64>,
    grads: &ParamGrads,
    tensors: &[usize],
    loss: &dyn Fn(&NetworkParams<f64>) -> Result<f64>,
) -> Result<f64> {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for &t in tensors {
        let n = net.tensors[t].len();
        for j in [0, n / 3, n - 1] {
            let mut p = net.clone();
            p.tensors[t].data_mut()[j] += h;
            let fp = loss(&p)?;
            p.tensors[t].data_mut()[j] -= 2.0 * h;
            let fm = loss(&p)?;
            let fd = (fp - fm) / (2.0 * h);
            let g = grads[t][j];
            worst = worst.max((g - fd).abs() / fd.abs().max(g.abs()).max(1e-8));
        }
    }
    Ok(worst)
}

/// Relative errors of the supervised and adaptation objectives against finite differences,
/// with the weight and probe noise frozen by a fixed seed.
pub fn loss_gradcheck() -> Result<(f64, f64)> {
    let op = loss_operator()?;
    let net = loss_network(3)?;
    let n = op.grid().len();
    let mut rng = rng_from(5);
    let x = uniform(&mut rng, n, 0.0, 1.0);
    let mut y = op.forward(&x)?;
    y.values.iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
    let x0 = uniform(&mut rng, n, 0.0, 1.0);
    let hyper = HyperParams {
        beta: Some(0.3),
        gamma: 0.05,
        hutchinson_samples: 3,
        ..Default::default()
    };
    let l = &net.layout;
    let tensors = [
        l.encoder[0].w_mean,
        l.encoder[0].w_rho,
        l.encoder[3].b_rho,
        l.decoder[0].w,
        l.mu_head.out.w,
        l.sigma_head.out.w,
    ];

    let sup = |p: &NetworkParams<f64>, grad: bool| {
        let ex = [SupervisedExample {
            id: 7,
            x_true: &x,
            y: &y,
            x0: &x0,
        }];
        supervised_loss(p, &ex, &op, &hyper, &mut rng_from(9), grad)
    };
    let (_, g) = sup(&net, true)?;
    let sup_err = fd_worst(&net, &g.expect("requested"), &tensors, &|p| Ok(sup(p, false)?.0.total))?;

    let prior = crate::bayesnet::snapshot_posterior(&loss_network(4)?);
    let ukt = |p: &NetworkParams<f64>, grad: bool| {
        let ex = [UktExample { id: 3, y: &y, x0: &x0 }];
        ukt_loss(p, &ex, &op, Some(&prior), &hyper, &mut rng_from(10), grad)
    };
    let (_, g) = ukt(&net, true)?;
    let ukt_err = fd_worst(&net, &g.expect("requested"), &tensors, &|p| Ok(ukt(p, false)?.0.total))?;
    Ok((sup_err, ukt_err))
}

/// Every engine op (5 seeds) and both assembled objectives.
pub fn gradient_suite() -> SuiteReport {
    timed("gradients", || {
        let mut worst_op = ("", 0.0f64);
        for op in GRADCHECK_OPS {
            for seed in 0..5 {
                let r = gradcheck(op, seed)?;
                if r.max_rel_err > worst_op.1 || r.max_rel_err.is_nan() {
                    worst_op = (op, r.max_rel_err);
                }
            }
        }
        let (sup, ukt) = loss_gradcheck()?;
        let ok = worst_op.1 <= OP_GRAD_TOL && sup <= LOSS_GRAD_TOL && ukt <= LOSS_GRAD_TOL;
        Ok((
            ok,
            format!(
                "{} ops, worst {} {:.1e} (tol {OP_GRAD_TOL:.0e}); supervised {sup:.1e}, adaptation {ukt:.1e} (tol {LOSS_GRAD_TOL:.0e})",
                GRADCHECK_OPS.len(),
                worst_op.0,
                worst_op.1
            ),
        ))
    })
}

/// Monte-Carlo estimate of `KL[q‖p]` and its standard error.
pub fn kl_monte_carlo(q: &GaussianDiag, p: &GaussianDiag, draws: usize, rng: &mut impl Rng) -> (f64, f64) {
    let log_n = |x: f64, m: f64, s: f64| -0.5 * ((x - m) / s).powi(2) - s.ln();
    let (mut sum, mut sum2) = (0.0, 0.0);
    for _ in 0..draws {
        let mut l = 0.0;
        for i in 0..q.mean.len() {
            let x = q.mean[i] + q.sigma[i] * rng.sample::<f64, _>(rand_distr::StandardNormal);
            l += log_n(x, q.mean[i], q.sigma[i]) - log_n(x, p.mean[i], p.sigma[i]);
        }
        sum += l;
        sum2 += l * l;
    }
    let mean = sum / draws as f64;
    (mean, ((sum2 / draws as f64 - mean * mean) / draws as f64).sqrt())
}

/// Closed form against 10⁵-draw estimates on 10 random pairs, and `KL[q‖q] = 0`.
pub fn kl_suite() -> SuiteReport {
    timed("kl", || {
        let mut ok = true;
        let mut worst_z: f64 = 0.0;
        for k in 0..10 {
            let mut rng = rng_from(child_seed(23, k));
            let d = 5;
            let q = GaussianDiag::new(uniform(&mut rng, d, -1.0, 1.0), uniform(&mut rng, d, 0.3, 1.5))?;
            let p = GaussianDiag::new(uniform(&mut rng, d, -1.0, 1.0), uniform(&mut rng, d, 0.3, 1.5))?;
            let exact = kl_diag_gauss(&q, &p)?;
            let (mc, se) = kl_monte_carlo(&q, &p, 100_000, &mut rng);
            let z = (mc - exact).abs() / se;
            worst_z = worst_z.max(z);
            ok &= z < 3.0;
            ok &= kl_diag_gauss(&q, &q)? == 0.0;
        }
        Ok((
            ok,
            format!("10 instances, worst |mc - exact| = {worst_z:.2} SE; KL(q||q) = 0"),
        ))
    })
}

/// Mean of 1000 Hutchinson estimates (10 probes each) on an 8×8 operator against the exact trace.
pub fn trace_suite() -> SuiteReport {
    timed("trace", || {
        let grid = ImageGrid::new(8, 8, 1.0)?;
        let op = ProjectionOperator::new(grid, Geometry::fan(16, 16, 1.5, 100.0, 100.0)?)?;
        let var = uniform(&mut rng_from(9), 64, 0.1, 2.0);
        let exact = trace_term(&op, &var, &mut rng_from(0), 1, TraceMode::Exact)?;
        let mut rng = rng_from(10);
        let runs = 1000;
        let mut total = 0.0;
        for _ in 0..runs {
            total += trace_term(&op, &var, &mut rng, 10, TraceMode::Hutchinson)?;
        }
        let rel = (total / runs as f64 - exact).abs() / exact;
        Ok((rel < 0.01, format!("relative error {rel:.2e} (tol 1e-2)")))
    })
}

struct Stub {
    m: Vec<f64>,
    s: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl PredictiveSampler for Stub {
    fn draw(&self, t: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut rng = rng_from(child_seed(seed, t as u64));
        let mu = (0..self.m.len())
            .map(|i| {
                Normal::new(self.m[i], self.s[i])
                    .expect("positive scale")
                    .sample(&mut rng)
            })
            .collect();
        let var = (0..self.m.len())
            .map(|i| rng.random_range(self.a[i]..self.b[i]))
            .collect();
        Ok((mu, var))
    }
}

fn stub_checkpoint(op: &ProjectionOperator, sigma: f64) -> Result<Checkpoint> {
    let cfg = NetConfig {
        c1: 4,
        c2: 8,
        groups: 2,
        k_iters: 2,
        head_scale: 1.0,
        ..Default::default()
    };
    let mut params: NetworkParams<f32> = init_network(&cfg, &mut rng_from(4))?;
    params.set_all_rho(softplus_inv(sigma));
    Ok(Checkpoint {
        config_text: String::new(),
        geometry_hash: op.geometry_hash(),
        optim: OptimState::new(&params, 1e-3),
        prior: None,
        params,
        rng: RngState::capture(&rng_from(0)),
        log_offset: 0,
    })
}

/// Decomposition identity, collapse at σ = 1e-12 in single precision, and stub moments at T = 10⁴.
pub fn uncertainty_suite() -> SuiteReport {
    timed("uncertainty", || {
        let grid = ImageGrid::new(16, 16, 1.0)?;
        let op = Arc::new(ProjectionOperator::new(
            grid,
            Geometry::fan(24, 32, 1.5, 100.0, 100.0)?,
        )?);
        let x: Vec<f64> = (0..256)
            .map(|i| if (i / 16 + i % 16) % 5 < 3 { 0.8 } else { 0.2 })
            .collect();
        let y = op.forward(&x)?;

        let r = reconstruct(&stub_checkpoint(&op, 0.05)?, &y, &op, 6, 11)?;
        let identity = (0..r.mean.len()).all(|i| r.total[i] == r.aleatoric[i] + r.epistemic[i]);
        let r = reconstruct(&stub_checkpoint(&op, 1e-12)?, &y, &op, 8, 3)?;
        let collapse = r.epistemic.iter().fold(0.0f64, |m, &e| m.max(e.abs()));

        let mut rng = rng_from(5);
        let n = 20;
        let stub = Stub {
            m: uniform(&mut rng, n, -1.0, 1.0),
            s: uniform(&mut rng, n, 0.1, 1.0),
            a: uniform(&mut rng, n, 0.1, 0.5),
            b: uniform(&mut rng, n, 0.6, 2.0),
        };
        let t = 10_000;
        let r = mc_moments(&stub, t, 99, false)?;
        let mut worst_z: f64 = 0.0;
        for i in 0..n {
            let ale_se = (stub.b[i] - stub.a[i]) / (12.0 * t as f64).sqrt();
            worst_z = worst_z.max((r.aleatoric[i] - (stub.a[i] + stub.b[i]) / 2.0).abs() / ale_se);
            let epi = stub.s[i] * stub.s[i];
            worst_z = worst_z.max((r.epistemic[i] - epi).abs() / (epi * (2.0 / t as f64).sqrt()));
        }
        let ok = identity && collapse < 1e-4 && worst_z < 3.0;
        Ok((
            ok,
            format!(
                "identity {}, collapsed epistemic max {collapse:.1e} (tol 1e-4), stub worst {worst_z:.2} SE",
                if identity { "exact" } else { "violated" }
            ),
        ))
    })
}

/// The five suites in order.
pub fn run_all() -> Vec<SuiteReport> {
    vec![
        adjoint_suite(),
        gradient_suite(),
        kl_suite(),
        trace_suite(),
        uncertainty_suite(),
    ]
}
