use bdgd::operators::{Geometry, ImageGrid, ProjectionOperator, Sinogram};
use bdgd::phantoms::*;
use bdgd::seed::{child_seed, rng_from};
use proptest::prelude::*;

fn grid64() -> ImageGrid {
    ImageGrid::new(64, 64, 1.0).unwrap()
}

#[test]
fn centred_disk_matches_point_in_circle() {
    let grid = grid64();
    let e = Ellipse::new(0.0, 0.0, 0.5, 0.5, 0.3, 0.7).unwrap();
    let img = rasterize_ellipses(&[e], &grid);
    // disk of radius 16 mm on a 64 mm wide grid
    for iy in 0..64 {
        for ix in 0..64 {
            let x = ix as f64 - 31.5;
            let y = iy as f64 - 31.5;
            let r = (x * x + y * y).sqrt();
            let v = img[iy * 64 + ix];
            if r < 16.0 - 1e-9 {
                assert_eq!(v, 0.7);
            } else if r > 16.0 + 1e-9 {
                assert_eq!(v, 0.0);
            }
        }
    }
}

#[test]
fn overlapping_intensities_add_up() {
    let grid = grid64();
    let e = Ellipse::new(0.1, -0.2, 0.3, 0.2, 0.5, 0.4).unwrap();
    let img = rasterize_ellipses(&[e, e], &grid);
    let inside = img.iter().filter(|&&v| v != 0.0).count();
    assert!(inside > 0);
    assert!(img.iter().all(|&v| v == 0.0 || (v - 0.8).abs() < 1e-15));
}

#[test]
fn ood_phantoms_are_deterministic_and_bounded() {
    let grid = grid64();
    for seed in 0..50 {
        let a = sample_ood_phantom(&mut rng_from(seed), &grid);
        let b = sample_ood_phantom(&mut rng_from(seed), &grid);
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| (0.0..=3.0).contains(&v)));
        assert!(a.iter().any(|&v| v > 0.0));
    }
}

fn histogram(images: &[Vec<f64>]) -> Vec<f64> {
    let mut h = vec![0.0; 32];
    let mut total = 0.0;
    for img in images {
        for &v in img {
            let bin = ((v / 3.0) * 32.0).floor().clamp(0.0, 31.0) as usize;
            h[bin] += 1.0;
            total += 1.0;
        }
    }
    h.iter().map(|c| c / total).collect()
}

#[test]
fn ood_family_is_distinguishable_from_ellipses() {
    let grid = grid64();
    let ood: Vec<_> = (0..100).map(|s| sample_ood_phantom(&mut rng_from(s), &grid)).collect();
    let ell: Vec<_> = (0..100)
        .map(|s| sample_ellipse_phantom(&mut rng_from(1000 + s), 3, 10, &grid).unwrap())
        .collect();
    let (h1, h2) = (histogram(&ood), histogram(&ell));
    let tv: f64 = 0.5 * h1.iter().zip(&h2).map(|(a, b)| (a - b).abs()).sum::<f64>();
    // observed 0.076 at these seeds
    assert!(tv > 0.05, "histogram distance {tv}");
}

fn mean_of_draws(mean: f64, n: usize, seed: u64) -> f64 {
    let mut rng = rng_from(seed);
    (0..n).map(|_| poisson(&mut rng, mean)).sum::<f64>() / n as f64
}

#[test]
fn poisson_means_match_the_corruption_model() {
    let noise = NoiseModel::default();
    let sino = Sinogram::new(1, 1, vec![0.0]).unwrap();
    let mut rng = rng_from(3);
    let m: f64 = (0..100_000)
        .map(|_| simulate_counts(&sino, &noise, &mut rng)[0])
        .sum::<f64>()
        / 1e5;
    assert!((m - 8000.0).abs() < 80.0, "{m}");

    let s = (2.0f64).ln() / noise.attenuation;
    let sino = Sinogram::new(1, 1, vec![s]).unwrap();
    let m: f64 = (0..100_000)
        .map(|_| simulate_counts(&sino, &noise, &mut rng)[0])
        .sum::<f64>()
        / 1e5;
    assert!((m - 4000.0).abs() < 40.0, "{m}");

    // the small-mean regime
    assert!((mean_of_draws(3.5, 100_000, 9) - 3.5).abs() < 0.05);
}

#[test]
fn linearised_counts_converge_to_identity_at_high_dose() {
    let noise = NoiseModel::new(1e8, 0.02, 1.0).unwrap();
    let values: Vec<f64> = (0..500).map(|i| 5.0 * i as f64 / 499.0).collect();
    let sino = Sinogram::new(10, 50, values.clone()).unwrap();
    let counts = simulate_counts(&sino, &noise, &mut rng_from(11));
    let y = linearize(&counts, 10, 50, &noise).unwrap();
    let err: Vec<f64> = y.values.iter().zip(&values).map(|(a, b)| (a - b).abs()).collect();
    let rms = (err.iter().map(|e| e * e).sum::<f64>() / err.len() as f64).sqrt();
    let max = err.iter().cloned().fold(0.0, f64::max);
    // per-bin noise std at this dose is about 5.3e-3
    assert!(rms < 0.01, "{rms}");
    assert!(max < 0.03, "{max}");
}

fn small_operator() -> ProjectionOperator {
    let grid = ImageGrid::new(24, 24, 1.0).unwrap();
    ProjectionOperator::new(grid, Geometry::fan(30, 48, 1.5, 200.0, 200.0).unwrap()).unwrap()
}

#[test]
fn dataset_round_trip_and_determinism() {
    let op = small_operator();
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.bdgd"), dir.path().join("b.bdgd"));
    let noise = NoiseModel::default();
    let ds = generate_dataset(DatasetKind::SupervisedEllipses, 4, &op, &noise, 7, &p1).unwrap();
    generate_dataset(DatasetKind::SupervisedEllipses, 4, &op, &noise, 7, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    let back = read_dataset(&p1).unwrap();
    assert_eq!(back.records.len(), 4);
    assert_eq!(back, ds);
    back.check_operator(&op).unwrap();

    let u = generate_records(DatasetKind::UnsupervisedOod, 2, &op, &noise, 7).unwrap();
    assert!(u.records.iter().all(|r| r.ground_truth.is_none()));
    assert!(generate_records(DatasetKind::UnsupervisedOod, 0, &op, &noise, 7).is_err());
}

#[test]
fn stored_sinogram_is_reproduced_from_the_record_seed() {
    let op = small_operator();
    let noise = NoiseModel::default();
    let ds = generate_records(DatasetKind::SupervisedEllipses, 3, &op, &noise, 21).unwrap();
    for (i, rec) in ds.records.iter().enumerate() {
        assert_eq!(rec.seed, child_seed(21, i as u64));
        let mut rng = rng_from(rec.seed);
        let gt = sample_ellipse_phantom(&mut rng, 3, 10, op.grid()).unwrap();
        let clean = op.forward(&gt).unwrap();
        let counts = simulate_counts(&clean, &noise, &mut rng);
        let y = linearize(&counts, clean.n_angles, clean.n_detectors, &noise).unwrap();
        let y32: Vec<f32> = y.values.iter().map(|&v| v as f32).collect();
        assert_eq!(rec.sinogram, y32);
        let gt32: Vec<f32> = gt.iter().map(|&v| v as f32).collect();
        assert_eq!(rec.ground_truth.as_ref().unwrap(), &gt32);
    }
}

#[test]
fn truncated_dataset_is_rejected() {
    let op = small_operator();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.bdgd");
    generate_dataset(DatasetKind::SupervisedEllipses, 2, &op, &NoiseModel::default(), 1, &p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
    assert!(read_dataset(&p).is_err());
}

proptest! {
    #[test]
    fn ellipse_phantoms_are_nonnegative_and_deterministic(seed in any::<u64>()) {
        let grid = ImageGrid::new(32, 32, 1.0).unwrap();
        let a = sample_ellipse_phantom(&mut rng_from(seed), 3, 10, &grid).unwrap();
        let b = sample_ellipse_phantom(&mut rng_from(seed), 3, 10, &grid).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.iter().all(|&v| v >= 0.0 && v <= 10.0));
    }
}
