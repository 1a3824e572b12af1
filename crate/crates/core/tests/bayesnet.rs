use std::sync::Arc;

use bdgd::bayesnet::*;
use bdgd::diffengine::{Tape, Tensor};
use bdgd::operators::{Geometry, ImageGrid, ProjectionOperator};
use bdgd::seed::rng_from;
use rand::Rng;

fn small_cfg() -> NetConfig {
    NetConfig {
        c1: 4,
        c2: 8,
        groups: 2,
        ..Default::default()
    }
}

fn operator() -> Arc<ProjectionOperator> {
    let grid = ImageGrid::new(16, 16, 1.0).unwrap();
    Arc::new(ProjectionOperator::new(grid, Geometry::fan(20, 32, 1.5, 100.0, 100.0).unwrap()).unwrap())
}

fn image(seed: u64, n: usize) -> Vec<f32> {
    let mut rng = rng_from(seed);
    (0..n).map(|_| rng.random_range(-0.2f32..1.0)).collect()
}

#[test]
fn init_is_deterministic_with_initial_scale() {
    let a = init_network::<f32, _>(&small_cfg(), &mut rng_from(3)).unwrap();
    let b = init_network::<f32, _>(&small_cfg(), &mut rng_from(3)).unwrap();
    assert_eq!(a, b);
    for (_, r) in a.variational_pairs() {
        for &rho in a.tensors[r].data() {
            assert!((softplus(rho as f64) - 1e-3).abs() < 1e-9);
        }
    }
    let bad = NetConfig {
        groups: 3,
        ..small_cfg()
    };
    assert!(init_network::<f32, _>(&bad, &mut rng_from(3)).is_err());
}

#[test]
fn parameter_count_does_not_depend_on_k() {
    let counts: Vec<usize> = [1, 3, 5]
        .iter()
        .map(|&k| {
            let cfg = NetConfig {
                k_iters: k,
                ..small_cfg()
            };
            init_network::<f32, _>(&cfg, &mut rng_from(1)).unwrap().n_scalars()
        })
        .collect();
    assert!(counts.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn zero_heads_give_projected_input() {
    let cfg = NetConfig {
        head_scale: 0.0,
        ..small_cfg()
    };
    let params = init_network::<f32, _>(&cfg, &mut rng_from(2)).unwrap();
    let x0 = image(5, 256);
    let state = IterateState {
        x: x0.clone(),
        m: vec![0.0; 256],
        grad_d: image(6, 256),
    };
    let out = sample_block(&params, &state, 16, 16, &mut rng_from(1), Mode::Sample).unwrap();
    let want: Vec<f32> = x0.iter().map(|v| v.max(0.0)).collect();
    assert_eq!(out.mu, want);
}

#[test]
fn mean_mode_is_deterministic_and_collapse_is_exact() {
    let mut params = init_network::<f32, _>(&small_cfg(), &mut rng_from(2)).unwrap();
    let state = IterateState {
        x: image(1, 256),
        m: vec![0.0; 256],
        grad_d: image(2, 256),
    };
    let a = sample_block(&params, &state, 16, 16, &mut rng_from(1), Mode::Mean).unwrap();
    let b = sample_block(&params, &state, 16, 16, &mut rng_from(9), Mode::Mean).unwrap();
    assert_eq!(a, b);
    let s = sample_block(&params, &state, 16, 16, &mut rng_from(1), Mode::Sample).unwrap();
    assert_ne!(s, a);
    params.set_all_rho(-1e30);
    let s = sample_block(&params, &state, 16, 16, &mut rng_from(1), Mode::Sample).unwrap();
    assert_eq!(s, a);
}

#[test]
fn tiny_scales_converge_to_mean_mode() {
    let mut params = init_network::<f32, _>(&small_cfg(), &mut rng_from(4)).unwrap();
    params.set_all_rho(softplus_inv(1e-12));
    let op = operator();
    let y = op.forward(&vec![0.3; 256]).unwrap();
    let x0 = image(3, 256);
    let m0 = vec![0.0f32; 256];
    let (mean, _) = unrolled_forward(&params, &y, &op, &x0, &m0, &mut rng_from(1), Mode::Mean).unwrap();
    let (smp, _) = unrolled_forward(&params, &y, &op, &x0, &m0, &mut rng_from(1), Mode::Sample).unwrap();
    let diff = mean
        .mu
        .iter()
        .zip(&smp.mu)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(diff < 1e-4, "{diff}");
}

fn conv_moments(
    h: &[f64],
    hs: (usize, usize, usize),
    wm: &[f64],
    ws: &[f64],
    bm: &[f64],
    bs: &[f64],
    co: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (ci, ny, nx) = hs;
    let mut mu = vec![0.0; co * ny * nx];
    let mut var = vec![0.0; co * ny * nx];
    for o in 0..co {
        for i in 0..ny as isize {
            for j in 0..nx as isize {
                let (mut m, mut v) = (bm[o], bs[o] * bs[o]);
                for c in 0..ci {
                    for di in -1..=1isize {
                        for dj in -1..=1isize {
                            let (y, x) = (i + di, j + dj);
                            if y < 0 || x < 0 || y >= ny as isize || x >= nx as isize {
                                continue;
                            }
                            let k = ((o * ci + c) * 3 + (di + 1) as usize) * 3 + (dj + 1) as usize;
                            let hv = h[(c * ny + y as usize) * nx + x as usize];
                            m += wm[k] * hv;
                            v += ws[k] * ws[k] * hv * hv;
                        }
                    }
                }
                let idx = (o * ny + i as usize) * nx + j as usize;
                mu[idx] = m;
                var[idx] = v;
            }
        }
    }
    (mu, var)
}

#[test]
fn local_reparametrisation_matches_activation_moments() {
    let mut rng = rng_from(12);
    let (ci, co, ny, nx) = (2, 2, 3, 3);
    let h: Vec<f64> = (0..ci * ny * nx).map(|_| rng.random_range(-1.0..1.0)).collect();
    let wm: Vec<f64> = (0..co * ci * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let wr: Vec<f64> = (0..co * ci * 9).map(|_| rng.random_range(-2.0..0.0)).collect();
    let bm: Vec<f64> = (0..co).map(|_| rng.random_range(-1.0..1.0)).collect();
    let br: Vec<f64> = (0..co).map(|_| rng.random_range(-2.0..0.0)).collect();
    let ws: Vec<f64> = wr.iter().map(|&r| softplus(r)).collect();
    let bs: Vec<f64> = br.iter().map(|&r| softplus(r)).collect();
    let (mu, var) = conv_moments(&h, (ci, ny, nx), &wm, &ws, &bm, &bs, co);

    let n = 100_000;
    let mut sum = vec![0.0; mu.len()];
    let mut sum2 = vec![0.0; mu.len()];
    let mut noise_rng = rng_from(77);
    let mut tape = Tape::<f64>::new();
    let hv = tape.constant(Tensor::from_f64(&[1, ci, ny, nx], &h).unwrap());
    let w = [
        tape.constant(Tensor::from_f64(&[co, ci, 3, 3], &wm).unwrap()),
        tape.constant(Tensor::from_f64(&[co, ci, 3, 3], &wr).unwrap()),
        tape.constant(Tensor::from_f64(&[co], &bm).unwrap()),
        tape.constant(Tensor::from_f64(&[co], &br).unwrap()),
    ];
    let base = tape.len();
    for _ in 0..n {
        let a = bayes_conv_on_tape(&mut tape, hv, w, &mut noise_rng, Mode::Sample).unwrap();
        for (i, &v) in tape.value(a).data().iter().enumerate() {
            sum[i] += v;
            sum2[i] += v * v;
        }
        // keep the tape short: rebuild it when it grows
        if tape.len() > base + 1000 {
            tape = Tape::new();
            let hv2 = tape.constant(Tensor::from_f64(&[1, ci, ny, nx], &h).unwrap());
            assert_eq!(hv2, hv);
            let w2 = [
                tape.constant(Tensor::from_f64(&[co, ci, 3, 3], &wm).unwrap()),
                tape.constant(Tensor::from_f64(&[co, ci, 3, 3], &wr).unwrap()),
                tape.constant(Tensor::from_f64(&[co], &bm).unwrap()),
                tape.constant(Tensor::from_f64(&[co], &br).unwrap()),
            ];
            assert_eq!(w2, w);
        }
    }
    for i in 0..mu.len() {
        let m = sum[i] / n as f64;
        let v = sum2[i] / n as f64 - m * m;
        let se_mean = (var[i] / n as f64).sqrt();
        // standard error of a Gaussian sample variance
        let se_var = var[i] * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((m - mu[i]).abs() < 3.0 * se_mean + 1e-12, "mean {i}: {m} vs {}", mu[i]);
        assert!(
            (v - var[i] - ACTIVATION_VAR_EPS).abs() < 3.0 * se_var,
            "var {i}: {v} vs {}",
            var[i]
        );
    }
}

#[test]
fn k_one_matches_a_single_block() {
    let cfg = NetConfig {
        k_iters: 1,
        ..small_cfg()
    };
    let params = init_network::<f64, _>(&cfg, &mut rng_from(8)).unwrap();
    let op = operator();
    let y = op.forward(&vec![0.5; 256]).unwrap();
    let x0: Vec<f64> = image(4, 256).iter().map(|&v| v as f64).collect();
    let m0 = vec![0.0; 256];
    let (out, traj) = unrolled_forward(&params, &y, &op, &x0, &m0, &mut rng_from(1), Mode::Mean).unwrap();
    let ax = op.forward(&x0).unwrap();
    let r = bdgd::operators::Sinogram::new(
        y.n_angles,
        y.n_detectors,
        ax.values.iter().zip(&y.values).map(|(a, b)| a - b).collect(),
    )
    .unwrap();
    let g = op.adjoint(&r).unwrap();
    let scaled: Vec<f64> = g.iter().map(|v| v / op.norm_sq()).collect();
    let state = IterateState {
        x: x0.clone(),
        m: m0.clone(),
        grad_d: scaled,
    };
    let single = sample_block(&params, &state, 16, 16, &mut rng_from(1), Mode::Mean).unwrap();
    assert_eq!(traj.len(), 1);
    for (a, b) in out.mu.iter().zip(&single.mu) {
        assert!((a - b).abs() < 1e-10);
    }
    for (a, b) in traj[0].grad_d.iter().zip(&g) {
        assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
    }
}

#[test]
fn consistent_start_is_a_fixed_point_with_zero_heads() {
    let cfg = NetConfig {
        head_scale: 0.0,
        ..small_cfg()
    };
    let params = init_network::<f64, _>(&cfg, &mut rng_from(8)).unwrap();
    let op = operator();
    let x0: Vec<f64> = image(4, 256).iter().map(|&v| v as f64).collect();
    let y = op.forward(&x0).unwrap();
    let (out, traj) = unrolled_forward(&params, &y, &op, &x0, &vec![0.0; 256], &mut rng_from(1), Mode::Sample).unwrap();
    assert!(traj[0].grad_d.iter().all(|&v| v.abs() < 1e-9));
    let want: Vec<f64> = x0.iter().map(|v| v.max(0.0)).collect();
    assert_eq!(out.mu, want);
    assert_eq!(traj.len(), 3);
}

#[test]
fn iterates_are_nonnegative() {
    let params = init_network::<f32, _>(
        &NetConfig {
            head_scale: 1.0,
            ..small_cfg()
        },
        &mut rng_from(5),
    )
    .unwrap();
    let op = operator();
    let y = op.forward(&vec![0.7; 256]).unwrap();
    let x0 = image(9, 256);
    let (_, traj) = unrolled_forward(&params, &y, &op, &x0, &vec![0.0; 256], &mut rng_from(3), Mode::Sample).unwrap();
    assert_eq!(traj.len(), 3);
    assert!(traj.iter().all(|s| s.x.iter().all(|&v| v >= 0.0)));
}

#[test]
fn variance_head_floor_and_monotonicity() {
    let v = variance_from_head(&[0.0f64, -40.0]);
    assert!((v[0] - (2f64.ln() + 1e-6)).abs() < 1e-15);
    assert!((v[1] - 1e-6).abs() < 1e-15);
    let xs: Vec<f64> = (0..400).map(|i| -20.0 + 0.1 * i as f64).collect();
    let vs = variance_from_head(&xs);
    assert!(vs.windows(2).all(|w| w[1] >= w[0]));
    assert!(vs.iter().all(|&v| v > 0.0));
}

#[test]
fn snapshot_copies_current_scales() {
    let mut params = init_network::<f32, _>(&small_cfg(), &mut rng_from(2)).unwrap();
    let snap = snapshot_posterior(&params);
    assert_eq!(snap.len(), params.n_variational());
    let before = snap.clone();
    params.tensors[params.layout.encoder[0].w_mean].data_mut()[0] += 1.0;
    assert_eq!(snap, before);
    assert!((snap.sigmas[0][0] - 1e-3).abs() < 1e-9);
}
