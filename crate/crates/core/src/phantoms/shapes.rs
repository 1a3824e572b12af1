use rand::Rng;

use crate::error::{Error, Result};
use crate::operators::ImageGrid;

/// Ellipse in normalised coordinates: the grid spans `[-1, 1]` along each axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub angle: f64,
    pub intensity: f64,
}

impl Ellipse {
    pub fn new(cx: f64, cy: f64, a: f64, b: f64, angle: f64, intensity: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "ellipse semi-axes must be positive, got ({a}, {b})"
            )));
        }
        if !(0.1..=1.0).contains(&intensity) {
            return Err(Error::InvalidArgument(format!(
                "ellipse intensity {intensity} outside [0.1, 1]"
            )));
        }
        Ok(Ellipse {
            cx,
            cy,
            a,
            b,
            angle,
            intensity,
        })
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (du, dv) = (u - self.cx, v - self.cy);
        let p = (du * c + dv * s) / self.a;
        let q = (-du * s + dv * c) / self.b;
        p * p + q * q <= 1.0
    }
}

/// Normalised coordinates of every pixel centre, row-major with `y` slow.
fn normalised_centres(grid: &ImageGrid) -> impl Iterator<Item = (f64, f64)> + '_ {
    let (hx, hy) = (grid.width() / 2.0, grid.height() / 2.0);
    (0..grid.ny).flat_map(move |iy| (0..grid.nx).map(move |ix| (grid.x_center(ix) / hx, grid.y_center(iy) / hy)))
}

/// Sums the intensities of all ellipses containing each pixel centre.
pub fn rasterize_ellipses(ellipses: &[Ellipse], grid: &ImageGrid) -> Vec<f64> {
    normalised_centres(grid)
        .map(|(u, v)| ellipses.iter().filter(|e| e.contains(u, v)).map(|e| e.intensity).sum())
        .collect()
}

pub fn sample_ellipses<R: Rng + ?Sized>(rng: &mut R, min_count: usize, max_count: usize) -> Result<Vec<Ellipse>> {
    if max_count < min_count {
        return Err(Error::InvalidArgument(format!(
            "ellipse count range [{min_count}, {max_count}] is empty"
        )));
    }
    let n = rng.random_range(min_count..=max_count);
    Ok((0..n)
        .map(|_| Ellipse {
            cx: rng.random_range(-0.5..=0.5),
            cy: rng.random_range(-0.5..=0.5),
            a: rng.random_range(0.08..=0.45),
            b: rng.random_range(0.08..=0.45),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            intensity: rng.random_range(0.1..=1.0),
        })
        .collect())
}

/// Random overlapping-ellipse phantom. `min_count = max_count = 0` gives an empty image.
pub fn sample_ellipse_phantom<R: Rng + ?Sized>(
    rng: &mut R,
    min_count: usize,
    max_count: usize,
    grid: &ImageGrid,
) -> Result<Vec<f64>> {
    let ellipses = sample_ellipses(rng, min_count, max_count)?;
    Ok(rasterize_ellipses(&ellipses, grid))
}

/// Axis-aligned rectangle in normalised coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
    pub intensity: f64,
}

/// Annulus centred at the origin with rectangles placed inside its inner disk.
#[derive(Clone, Debug, PartialEq)]
pub struct OodShapes {
    pub r_inner: f64,
    pub r_outer: f64,
    pub ring_intensity: f64,
    pub rects: Vec<Rect>,
}

pub const MAX_OOD_RECTS: usize = 3;

pub fn sample_ood_shapes<R: Rng + ?Sized>(rng: &mut R) -> OodShapes {
    let r_outer = rng.random_range(0.7..=0.9);
    let r_inner = r_outer - rng.random_range(0.08..=0.2);
    let ring_intensity = rng.random_range(0.1..=1.0);
    let n = rng.random_range(1..=MAX_OOD_RECTS);
    let rects = (0..n)
        .map(|_| {
            // corners stay inside the inner disk, so rectangles never touch the ring
            let half = r_inner / std::f64::consts::SQRT_2;
            let w = rng.random_range(0.1..=half);
            let h = rng.random_range(0.1..=half);
            let x0 = rng.random_range(-half..=half - w);
            let y0 = rng.random_range(-half..=half - h);
            Rect {
                x0,
                x1: x0 + w,
                y0,
                y1: y0 + h,
                intensity: rng.random_range(0.1..=1.0),
            }
        })
        .collect();
    OodShapes {
        r_inner,
        r_outer,
        ring_intensity,
        rects,
    }
}

pub fn rasterize_ood(shapes: &OodShapes, grid: &ImageGrid) -> Vec<f64> {
    normalised_centres(grid)
        .map(|(u, v)| {
            let r = u.hypot(v);
            let mut value = 0.0;
            if r >= shapes.r_inner && r <= shapes.r_outer {
                value += shapes.ring_intensity;
            }
            for rect in &shapes.rects {
                if u >= rect.x0 && u <= rect.x1 && v >= rect.y0 && v <= rect.y1 {
                    value += rect.intensity;
                }
            }
            value
        })
        .collect()
}

/// Out-of-distribution phantom: an annulus plus up to three rectangles.
pub fn sample_ood_phantom<R: Rng + ?Sized>(rng: &mut R, grid: &ImageGrid) -> Vec<f64> {
    rasterize_ood(&sample_ood_shapes(rng), grid)
}
