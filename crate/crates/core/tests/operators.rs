use bdgd::operators::{fbp, operator_norm, Filter, Geometry, ImageGrid, ProjectionOperator, Ray, Sinogram};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn inside(grid: &ImageGrid, p: [f64; 2]) -> bool {
    p[0].abs() <= grid.width() / 2.0 && p[1].abs() <= grid.height() / 2.0
}

/// Chord length of a ray through the grid square by dense marching (step
/// pixel_size/100); each inside/outside transition is refined by bisection.
fn marched_chord(grid: &ImageGrid, ray: &Ray) -> f64 {
    let h = grid.pixel_size / 100.0;
    let reach = (grid.width().powi(2) + grid.height().powi(2)).sqrt() + 2.0 * grid.pixel_size;
    // distance along the ray to the point closest to the grid centre
    let t_mid = -(ray.origin[0] * ray.dir[0] + ray.origin[1] * ray.dir[1]);
    let steps = (2.0 * reach / h).ceil() as usize;
    let refine = |mut a: f64, mut b: f64| {
        let ina = inside(grid, ray.at(a));
        for _ in 0..80 {
            let m = 0.5 * (a + b);
            if inside(grid, ray.at(m)) == ina {
                a = m;
            } else {
                b = m;
            }
        }
        0.5 * (a + b)
    };
    let mut total = 0.0;
    let mut t_prev = t_mid - reach;
    let mut was_in = inside(grid, ray.at(t_prev));
    let mut entry = None;
    for s in 1..=steps {
        let t = t_mid - reach + s as f64 * h;
        let now_in = inside(grid, ray.at(t));
        if now_in != was_in {
            let crossing = refine(t_prev, t);
            if now_in {
                entry = Some(crossing);
            } else if let Some(e) = entry.take() {
                total += crossing - e;
            }
        }
        was_in = now_in;
        t_prev = t;
    }
    total
}

#[test]
fn row_sums_match_marched_chord_lengths() {
    let grid = ImageGrid::new(16, 16, 1.0).unwrap();
    for geom in [
        Geometry::parallel(12, 26, 1.0).unwrap(),
        Geometry::fan(12, 40, 1.0, 500.0, 500.0).unwrap(),
    ] {
        let op = ProjectionOperator::new(grid, geom.clone()).unwrap();
        let sums = op.row_sums();
        let mut checked = 0;
        for a in 0..geom.n_angles() {
            for j in 0..geom.n_detectors {
                let chord = marched_chord(&grid, &geom.ray(a, j));
                let got = sums[a * geom.n_detectors + j];
                if chord == 0.0 {
                    assert_eq!(got, 0.0);
                    continue;
                }
                checked += 1;
                assert!(
                    ((got - chord) / chord).abs() < 1e-6,
                    "angle {a} bin {j}: row sum {got} vs chord {chord}"
                );
            }
        }
        assert!(checked > geom.n_angles() * 10);
    }
}

/// Dense marching of the Joseph image model for a single image: the ray is
/// walked in steps of pixel_size/100 along its dominant axis; inside each
/// pixel slab the integrand is the minor-axis linear interpolation of that
/// row at the slab's centre line.
fn marched_joseph(grid: &ImageGrid, image: &[f64], ray: &Ray) -> f64 {
    let ps = grid.pixel_size;
    let y_major = ray.dir[1].abs() >= ray.dir[0].abs();
    let (n_major, n_minor) = if y_major {
        (grid.ny, grid.nx)
    } else {
        (grid.nx, grid.ny)
    };
    let (o_maj, o_min, d_maj, d_min) = if y_major {
        (ray.origin[1], ray.origin[0], ray.dir[1], ray.dir[0])
    } else {
        (ray.origin[0], ray.origin[1], ray.dir[0], ray.dir[1])
    };
    let pixel = |maj: usize, min: usize| {
        if y_major {
            image[maj * grid.nx + min]
        } else {
            image[min * grid.nx + maj]
        }
    };
    let mut total = 0.0;
    let sub = 100;
    for i in 0..n_major {
        let c = (i as f64 - (n_major as f64 - 1.0) / 2.0) * ps;
        let m_center = o_min + (c - o_maj) / d_maj * d_min;
        let f = m_center / ps + (n_minor as f64 - 1.0) / 2.0;
        let value = if f < 0.0 || f > (n_minor - 1) as f64 {
            0.0
        } else {
            let j = (f.floor() as usize).min(n_minor - 2);
            let fr = f - j as f64;
            pixel(i, j) * (1.0 - fr) + pixel(i, j + 1) * fr
        };
        for s in 0..sub {
            let step = ps / sub as f64;
            let major = c - ps / 2.0 + (s as f64 + 0.5) * step;
            let minor = o_min + (major - o_maj) / d_maj * d_min;
            if minor.abs() <= grid.width() / 2.0 {
                total += value * step / d_maj.abs();
            }
        }
    }
    total
}

#[test]
fn centre_pixel_response_matches_marched_model() {
    let grid = ImageGrid::new(15, 15, 1.0).unwrap();
    let geom = Geometry::parallel(12, 31, 0.5).unwrap();
    let op = ProjectionOperator::new(grid, geom.clone()).unwrap();
    let mut image = vec![0.0; grid.len()];
    image[7 * 15 + 7] = 1.0;
    let sino = op.forward(&image).unwrap();
    for a in 0..geom.n_angles() {
        for j in 0..geom.n_detectors {
            let got = sino.values[a * geom.n_detectors + j];
            let want = marched_joseph(&grid, &image, &geom.ray(a, j));
            assert!((got - want).abs() < 1e-6, "angle {a} bin {j}: {got} vs {want}");
            // the tent support of one pixel is at most 1.5 pixels from the centre ray
            if geom.detector_offset(j).abs() > 1.5 * 2f64.sqrt() {
                assert_eq!(got, 0.0);
            }
        }
        assert!(sino.row(a).iter().any(|&v| v > 0.0));
    }
}

#[test]
fn power_method_matches_dense_svd() {
    let grid = ImageGrid::new(16, 16, 1.0).unwrap();
    let op = ProjectionOperator::new(grid, Geometry::parallel(12, 24, 1.0).unwrap()).unwrap();
    let dense = op.to_dense();
    let m = nalgebra::DMatrix::from_fn(dense.len(), grid.len(), |r, c| dense[r][c]);
    let sigma_max = m.singular_values().max();
    let est = operator_norm(&op, 100, 4);
    assert!(((est - sigma_max) / sigma_max).abs() < 0.01, "{est} vs {sigma_max}");
    assert!(operator_norm(&op, 100, 4) >= operator_norm(&op, 5, 4) - 1e-9);
}

fn disk(grid: &ImageGrid, radius_px: f64) -> Vec<f64> {
    let mut img = vec![0.0; grid.len()];
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let (x, y) = (grid.x_center(ix), grid.y_center(iy));
            if x * x + y * y < (radius_px * grid.pixel_size).powi(2) {
                img[iy * grid.nx + ix] = 1.0;
            }
        }
    }
    img
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

#[test]
fn fbp_recovers_parallel_disk() {
    let grid = ImageGrid::new(64, 64, 1.0).unwrap();
    // half-pixel detector pitch, 184 bins cover the grid diagonal; achieved error 0.0998
    let op = ProjectionOperator::new(grid, Geometry::parallel(180, 184, 0.5).unwrap()).unwrap();
    let x = disk(&grid, 16.0);
    let sino = op.forward(&x).unwrap();
    let rec = fbp(&op, &sino, Filter::Hann, 1.0).unwrap();
    let err = rel_err(&rec, &x);
    eprintln!("parallel disk fbp relative error (hann, 1.0): {err:.4}");
    assert!(err < 0.15);
}

#[test]
fn fbp_recovers_fan_disk() {
    let grid = ImageGrid::new(64, 64, 1.0).unwrap();
    let op = ProjectionOperator::new(grid, Geometry::fan(240, 128, 1.5, 500.0, 500.0).unwrap()).unwrap();
    let x = disk(&grid, 16.0);
    let sino = op.forward(&x).unwrap();
    let rec = fbp(&op, &sino, Filter::Hann, 1.0).unwrap();
    let err = rel_err(&rec, &x);
    eprintln!("fan disk fbp relative error (hann, 1.0): {err:.4}");
    assert!(err < 0.15);
}

#[test]
fn lower_cutoff_attenuates_noisy_sinogram() {
    let grid = ImageGrid::new(64, 64, 1.0).unwrap();
    let op = ProjectionOperator::new(grid, Geometry::parallel(90, 96, 1.0).unwrap()).unwrap();
    let mut sino = op.forward(&disk(&grid, 12.0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for v in sino.values.iter_mut() {
        *v += rng.random::<f64>() - 0.5;
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let full = fbp(&op, &sino, Filter::Hann, 1.0).unwrap();
    let low = fbp(&op, &sino, Filter::Hann, 0.6).unwrap();
    assert!(norm(&low) <= norm(&full));
}

#[test]
fn fbp_is_linear_and_validates_cutoff() {
    let grid = ImageGrid::new(16, 16, 1.0).unwrap();
    let op = ProjectionOperator::new(grid, Geometry::fan(24, 32, 1.5, 500.0, 500.0).unwrap()).unwrap();
    let zero = Sinogram::zeros(op.geometry());
    assert!(fbp(&op, &zero, Filter::RamLak, 1.0).unwrap().iter().all(|&v| v == 0.0));
    assert!(fbp(&op, &zero, Filter::Hann, 0.0).is_err());
    assert!(fbp(&op, &zero, Filter::Hann, 1.5).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a: Vec<f64> = (0..op.n_rows()).map(|_| rng.random()).collect();
    let b: Vec<f64> = (0..op.n_rows()).map(|_| rng.random()).collect();
    let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 2.0 * x - y).collect();
    let s = |v: Vec<f64>| Sinogram::new(24, 32, v).unwrap();
    let fa = fbp(&op, &s(a), Filter::Hann, 0.6).unwrap();
    let fb = fbp(&op, &s(b), Filter::Hann, 0.6).unwrap();
    let fs = fbp(&op, &s(sum), Filter::Hann, 0.6).unwrap();
    for i in 0..fa.len() {
        assert!((fs[i] - (2.0 * fa[i] - fb[i])).abs() < 1e-9);
    }
}
