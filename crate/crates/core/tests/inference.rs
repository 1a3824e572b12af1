use std::sync::Arc;

use bdgd::bayesnet::*;
use bdgd::inference::*;
use bdgd::operators::{fbp, Filter, Geometry, ImageGrid, ProjectionOperator};
use bdgd::seed::{child_seed, rng_from};
use bdgd::training::{Checkpoint, OptimState, RngState};
use bdgd::Error;
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn operator() -> Arc<ProjectionOperator> {
    let grid = ImageGrid::new(16, 16, 1.0).unwrap();
    Arc::new(ProjectionOperator::new(grid, Geometry::fan(24, 32, 1.5, 100.0, 100.0).unwrap()).unwrap())
}

fn checkpoint(op: &ProjectionOperator, rho_sigma: Option<f64>) -> Checkpoint {
    let cfg = NetConfig {
        c1: 4,
        c2: 8,
        groups: 2,
        k_iters: 2,
        head_scale: 1.0,
        ..Default::default()
    };
    let mut params: NetworkParams<f32> = init_network(&cfg, &mut rng_from(4)).unwrap();
    params.set_all_rho(rho_sigma.map_or(-1e30, softplus_inv));
    Checkpoint {
        config_text: String::new(),
        geometry_hash: op.geometry_hash(),
        optim: OptimState::new(&params, 1e-3),
        prior: None,
        params,
        rng: RngState::capture(&rng_from(0)),
        log_offset: 0,
    }
}

fn phantom_sinogram(op: &ProjectionOperator) -> bdgd::operators::Sinogram {
    let x: Vec<f64> = (0..256)
        .map(|i| if (i / 16 + i % 16) % 5 < 3 { 0.8 } else { 0.2 })
        .collect();
    op.forward(&x).unwrap()
}

#[test]
fn collapsed_posterior_has_no_epistemic_uncertainty() {
    let op = operator();
    let ck = checkpoint(&op, None);
    let y = phantom_sinogram(&op);
    let r = reconstruct(&ck, &y, &op, 8, 3).unwrap();
    assert!(r.epistemic.iter().all(|&e| e == 0.0));
    let x0: Vec<f32> = fbp(&op, &y, Filter::Hann, 0.6)
        .unwrap()
        .iter()
        .map(|&v| v as f32)
        .collect();
    let (mean_mode, _) =
        unrolled_forward(&ck.params, &y, &op, &x0, &vec![0.0; 256], &mut rng_from(0), Mode::Mean).unwrap();
    for (a, b) in r.mean.iter().zip(&mean_mode.mu) {
        assert_eq!(*a, *b as f64);
    }

    let tiny = checkpoint(&op, Some(1e-12));
    let r = reconstruct(&tiny, &y, &op, 8, 3).unwrap();
    let worst = r.epistemic.iter().fold(0.0f64, |m, &e| m.max(e.abs()));
    assert!(worst < 1e-4, "epistemic {worst}");
}

#[test]
fn decomposition_identity_and_single_sample() {
    let op = operator();
    let ck = checkpoint(&op, Some(0.05));
    let y = phantom_sinogram(&op);
    let r = reconstruct(&ck, &y, &op, 6, 11).unwrap();
    assert_eq!(r.samples_used, 6);
    assert!(r.epistemic.iter().any(|&e| e > 0.0));
    for i in 0..r.mean.len() {
        assert_eq!(r.total[i], r.aleatoric[i] + r.epistemic[i]);
        assert!(r.epistemic[i] >= 0.0 && r.aleatoric[i] > 0.0);
    }
    assert_eq!(r, reconstruct(&ck, &y, &op, 6, 11).unwrap());
    let one = reconstruct(&ck, &y, &op, 1, 11).unwrap();
    assert!(one.epistemic.iter().all(|&e| e == 0.0));
    assert!(reconstruct(&ck, &y, &op, 0, 11).is_err());
}

#[test]
fn geometry_mismatch_is_reported() {
    let op = operator();
    let mut ck = checkpoint(&op, None);
    ck.geometry_hash ^= 1;
    let err = reconstruct(&ck, &phantom_sinogram(&op), &op, 2, 0).unwrap_err();
    assert!(matches!(err, Error::GeometryMismatch { .. }));
    assert_eq!(err.exit_code(), 2);
}

/// Means `N(m_i, s_i²)` and variances `U(a_i, b_i)` with known moments.
struct Stub {
    m: Vec<f64>,
    s: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl PredictiveSampler for Stub {
    fn draw(&self, t: usize, seed: u64) -> bdgd::Result<(Vec<f64>, Vec<f64>)> {
        let mut rng = rng_from(child_seed(seed, t as u64));
        let mu = (0..self.m.len())
            .map(|i| Normal::new(self.m[i], self.s[i]).unwrap().sample(&mut rng))
            .collect();
        let var = (0..self.m.len())
            .map(|i| rng.random_range(self.a[i]..self.b[i]))
            .collect();
        Ok((mu, var))
    }
}

#[test]
fn estimators_match_stub_moments() {
    let mut rng = rng_from(5);
    let n = 20;
    let stub = Stub {
        m: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        s: (0..n).map(|_| rng.random_range(0.1..1.0)).collect(),
        a: (0..n).map(|_| rng.random_range(0.1..0.5)).collect(),
        b: (0..n).map(|_| rng.random_range(0.6..2.0)).collect(),
    };
    let t = 10_000;
    let r = mc_moments(&stub, t, 99, false).unwrap();
    for i in 0..n {
        let ale = (stub.a[i] + stub.b[i]) / 2.0;
        let ale_se = (stub.b[i] - stub.a[i]) / (12.0 * t as f64).sqrt();
        assert!((r.aleatoric[i] - ale).abs() < 3.0 * ale_se, "pixel {i} aleatoric");
        let epi = stub.s[i] * stub.s[i];
        let epi_se = epi * (2.0 / t as f64).sqrt();
        assert!((r.epistemic[i] - epi).abs() < 3.0 * epi_se, "pixel {i} epistemic");
        assert_eq!(r.total[i], r.aleatoric[i] + r.epistemic[i]);
    }
    let kept = mc_moments(&stub, 5, 1, true).unwrap();
    assert_eq!(kept.per_sample_means.unwrap().len(), 5);
}

#[test]
fn psnr_definition() {
    let x: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
    assert_eq!(psnr(&x, &x, 1.0).unwrap(), 99.0);
    let off: Vec<f64> = x.iter().map(|v| v + 0.1).collect();
    assert!((psnr(&off, &x, 1.0).unwrap() - 20.0).abs() < 1e-10);
    let (xs, os): (Vec<f64>, Vec<f64>) = x.iter().zip(&off).map(|(a, b)| (a + 3.0, b + 3.0)).unzip();
    assert!((psnr(&os, &xs, 1.0).unwrap() - psnr(&off, &x, 1.0).unwrap()).abs() < 1e-9);
    assert!(psnr(&x, &x[..50], 1.0).is_err());
    assert!(psnr(&x, &x, 0.0).is_err());

    let mut rng = rng_from(1);
    let noise: Vec<f64> = (0..100).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut last = f64::INFINITY;
    for amp in [0.01, 0.03, 0.1, 0.3] {
        let y: Vec<f64> = x.iter().zip(&noise).map(|(a, n)| a + amp * n).collect();
        let p = psnr(&y, &x, 1.0).unwrap();
        assert!(p < last);
        last = p;
    }
}

#[test]
fn ssim_properties() {
    let (h, w) = (24, 20);
    let mut rng = rng_from(2);
    let x: Vec<f64> = (0..h * w)
        .map(|i| ((i % w) as f64 / w as f64) + 0.1 * rng.random::<f64>())
        .collect();
    assert!((ssim(&x, &x, h, w, 1.0).unwrap() - 1.0).abs() < 1e-12);
    let noisy: Vec<f64> = x.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
    assert!(ssim(&noisy, &x, h, w, 1.0).unwrap() < 0.5);
    let a = ssim(&noisy, &x, h, w, 1.0).unwrap();
    let b = ssim(&x, &noisy, h, w, 1.0).unwrap();
    assert!((a - b).abs() < 1e-12);
    assert!(ssim(&x[..100], &x[..100], 10, 10, 1.0).is_err());

    let m = evaluate(&x, &x, h, w).unwrap();
    assert_eq!((m.psnr, m.ssim), (99.0, 1.0));
}

#[test]
fn minmax_normalisation() {
    assert_eq!(normalize_minmax(&[2.0, 4.0, 3.0]), vec![0.0, 1.0, 0.5]);
    assert_eq!(normalize_minmax(&[5.0, 5.0]), vec![0.0, 0.0]);
    assert_eq!(data_range_of(&[1.0, 3.0, -1.0]), 4.0);
}
