use bdgd::diffengine::*;
use proptest::prelude::*;
use rand::Rng;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

#[test]
fn leaky_relu_definition() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = tape.leaky_relu(x, 0.01);
    assert_eq!(tape.value(y).data(), &[-0.01, 0.0, 2.0]);
}

#[test]
fn zero_kernel_and_identity_kernel() {
    let mut rng = bdgd::seed::rng_from(4);
    let xs: Vec<f64> = (0..25).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[1, 1, 5, 5], &xs));
    let zero = tape.leaf(Tensor::zeros(&[1, 1, 3, 3]));
    let y = tape.conv2d(x, zero, None).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let id = tape.leaf(t(&[1, 1, 3, 3], &k));
    let y = tape.conv2d(x, id, None).unwrap();
    assert_eq!(tape.value(y).data(), xs.as_slice());
}

fn naive_conv(x: &[f64], (n, ci, h, w): (usize, usize, usize, usize), k: &[f64], co: usize, b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * co * h * w];
    for s in 0..n {
        for o in 0..co {
            for i in 0..h as isize {
                for j in 0..w as isize {
                    let mut acc = b[o];
                    for c in 0..ci {
                        for di in -1..=1isize {
                            for dj in -1..=1isize {
                                let (y, xx) = (i + di, j + dj);
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                let kv = k[((o * ci + c) * 3 + (di + 1) as usize) * 3 + (dj + 1) as usize];
                                acc += kv * x[((s * ci + c) * h + y as usize) * w + xx as usize];
                            }
                        }
                    }
                    out[((s * co + o) * h + i as usize) * w + j as usize] = acc;
                }
            }
        }
    }
    out
}

fn naive_conv_t(x: &[f64], (n, ci, h, w): (usize, usize, usize, usize), k: &[f64], co: usize, b: &[f64]) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * co * h2 * w2];
    for s in 0..n {
        for o in 0..co {
            for y in 0..h2 {
                for xx in 0..w2 {
                    let mut acc = b[o];
                    for c in 0..ci {
                        acc += x[((s * ci + c) * h + y / 2) * w + xx / 2] * k[((c * co + o) * 2 + y % 2) * 2 + xx % 2];
                    }
                    out[((s * co + o) * h2 + y) * w2 + xx] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn convolutions_match_direct_loops() {
    let mut rng = bdgd::seed::rng_from(8);
    let mut r = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let (x, k, b) = (r(2 * 3 * 6 * 5), r(4 * 3 * 9), r(4));
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(t(&[2, 3, 6, 5], &x));
    let kv = tape.constant(t(&[4, 3, 3, 3], &k));
    let bv = tape.constant(t(&[4], &b));
    let y = tape.conv2d(xv, kv, Some(bv)).unwrap();
    let want = naive_conv(&x, (2, 3, 6, 5), &k, 4, &b);
    for (a, w) in tape.value(y).data().iter().zip(&want) {
        assert!((a - w).abs() < 1e-12);
    }
    let (kt, bt) = (r(3 * 2 * 4), r(2));
    let kv = tape.constant(t(&[3, 2, 2, 2], &kt));
    let bv = tape.constant(t(&[2], &bt));
    let y = tape.conv_transpose2d(xv, kv, Some(bv)).unwrap();
    assert_eq!(tape.shape(y), &[2, 2, 12, 10]);
    let want = naive_conv_t(&x, (2, 3, 6, 5), &kt, 2, &bt);
    for (a, w) in tape.value(y).data().iter().zip(&want) {
        assert!((a - w).abs() < 1e-12);
    }
}

#[test]
fn hand_derivatives() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert!(g.get(x).unwrap().iter().all(|&v| v == 1.0));

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[3], &[1.0, -2.0, 3.0]));
    let sq = tape.square(x);
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[2.0, -4.0, 6.0]);
    assert_eq!(g.get(s).unwrap(), &[1.0]);
}

#[test]
fn every_op_passes_finite_differences() {
    for op in GRADCHECK_OPS {
        for seed in 0..5 {
            let r = gradcheck(op, seed).unwrap();
            assert!(r.max_rel_err <= 1e-4, "{op} seed {seed}: {}", r.max_rel_err);
            assert!(r.n_checked > 0);
        }
    }
}

#[test]
fn named_gradcheck_bounds() {
    assert!(gradcheck("add", 1).unwrap().max_rel_err < 1e-8);
    assert!(gradcheck("conv2d", 1).unwrap().max_rel_err < 1e-4);
    assert!(gradcheck("group_norm", 1).unwrap().max_rel_err < 1e-4);
    assert!(gradcheck("no_such_op", 1).is_err());
}

#[test]
fn composition_matches_finite_differences() {
    let mut rng = bdgd::seed::rng_from(2);
    let x: Vec<f64> = (0..2 * 4 * 4 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..4 * 4 * 9).map(|_| rng.random_range(-0.5..0.5)).collect();
    let gam: Vec<f64> = (0..4).map(|_| rng.random_range(0.5..1.5)).collect();
    let inputs = vec![
        t(&[2, 4, 4, 4], &x),
        t(&[4, 4, 3, 3], &w),
        t(&[4], &gam),
        Tensor::zeros(&[4]),
    ];
    let f = |tape: &mut Tape<f64>, v: &[Var]| -> bdgd::Result<Var> {
        let c = tape.conv2d(v[0], v[1], None)?;
        let n = tape.group_norm(c, 2, v[2], v[3])?;
        let s = tape.softplus(n);
        let p = tape.maxpool2(s)?;
        Ok(tape.sqrt(p))
    };
    let r = check_function("composition", &inputs, &f, 3).unwrap();
    assert!(r.max_rel_err <= 1e-4, "{}", r.max_rel_err);
}

#[test]
fn maxpool_ties_route_to_first_element() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 1.0, 1.0, 0.0]));
    let p = tape.maxpool2(x).unwrap();
    let s = tape.sum(p);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn errors_are_reported() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(&[1, 6, 2, 2]));
    let g = tape.leaf(Tensor::full(&[6], 1.0));
    let b = tape.leaf(Tensor::zeros(&[6]));
    assert!(tape.group_norm(x, 4, g, b).is_err());
    assert!(tape.backward(x).is_err());
    let y = tape.leaf(Tensor::zeros(&[3]));
    let z = tape.leaf(Tensor::zeros(&[4]));
    assert!(tape.add(y, z).is_err());
    let k = tape.leaf(Tensor::zeros(&[2, 5, 3, 3]));
    assert!(tape.conv2d(x, k, None).is_err());
}

#[test]
fn tv_hand_count() {
    let mut img = vec![0.0; 16];
    for r in 0..4 {
        img[r * 4 + 2] = 1.0;
        img[r * 4 + 3] = 1.0;
    }
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[4, 4], &img));
    let tv = tape.tv(x, TvVariant::Anisotropic, 0.0).unwrap();
    assert_eq!(tape.value(tv).item().unwrap(), 4.0);
    let c = tape.leaf(Tensor::full(&[4, 4], 0.3));
    let tv = tape.tv(c, TvVariant::Anisotropic, 0.0).unwrap();
    assert_eq!(tape.value(tv).item().unwrap(), 0.0);
}

fn replay(seed: u64) -> Vec<f32> {
    let mut rng = bdgd::seed::rng_from(seed);
    let x: Vec<f64> = (0..3 * 8 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..4 * 3 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(Tensor::from_f64(&[1, 3, 8, 8], &x).unwrap());
    let wv = tape.leaf(Tensor::from_f64(&[4, 3, 3, 3], &w).unwrap());
    let y = tape.conv2d(xv, wv, None).unwrap();
    let y = tape.leaky_relu(y, 0.2);
    let y = tape.square(y);
    let l = tape.mean(y);
    tape.backward(l).unwrap().get(wv).unwrap().to_vec()
}

#[test]
fn replay_is_bit_identical() {
    let a = replay(5);
    let b = replay(5);
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

proptest! {
    #[test]
    fn relu_project_gradient_mask(xs in proptest::collection::vec(-3.0f64..3.0, 1..40)) {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[xs.len()], xs.clone()).unwrap());
        let y = tape.relu_project(x);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        for (gv, xv) in g.get(x).unwrap().iter().zip(&xs) {
            prop_assert_eq!(*gv, if *xv > 0.0 { 1.0 } else { 0.0 });
        }
    }
}
