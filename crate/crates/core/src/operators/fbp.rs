use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::geometry::Beam;
use super::projector::{ProjectionOperator, Sinogram};
use crate::error::{Error, Result};

/// Frequency window applied on top of the ramp filter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Filter {
    RamLak,
    Hann,
}

impl Filter {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ram-lak" | "ramlak" => Some(Filter::RamLak),
            "hann" => Some(Filter::Hann),
            _ => None,
        }
    }

    fn window(self, f: f64, cutoff: f64) -> f64 {
        if f > cutoff {
            return 0.0;
        }
        match self {
            Filter::RamLak => 1.0,
            Filter::Hann => 0.5 * (1.0 + (PI * f / cutoff).cos()),
        }
    }
}

/// Windowed ramp filter along the detector axis.
struct RampFilter {
    len: usize,
    response: Vec<f64>,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    ifft: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl RampFilter {
    /// Spatial band-limited ramp kernel, transformed and windowed. `spacing`
    /// is the sample spacing of the signal being filtered.
    fn new(n: usize, spacing: f64, filter: Filter, cutoff: f64) -> Self {
        let len = (2 * n).next_power_of_two().max(64);
        let mut kernel = vec![Complex::new(0.0, 0.0); len];
        for (i, k) in kernel.iter_mut().enumerate() {
            let m = if i <= len / 2 { i as i64 } else { i as i64 - len as i64 };
            let v = if m == 0 {
                1.0 / (4.0 * spacing * spacing)
            } else if m % 2 != 0 {
                -1.0 / ((m * m) as f64 * PI * PI * spacing * spacing)
            } else {
                0.0
            };
            *k = Complex::new(v, 0.0);
        }
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(len);
        let ifft = planner.plan_fft_inverse(len);
        fft.process(&mut kernel);
        let response = kernel
            .iter()
            .enumerate()
            .map(|(i, k)| {
                let bin = i.min(len - i) as f64 / (len as f64 / 2.0);
                // multiply by spacing for the discrete convolution, 1/len for the unnormalised inverse
                k.re * filter.window(bin, cutoff) * spacing / len as f64
            })
            .collect();
        Self {
            len,
            response,
            fft,
            ifft,
        }
    }

    fn apply(&self, row: &[f64], out: &mut [f64]) {
        let mut buf = vec![Complex::new(0.0, 0.0); self.len];
        for (b, &v) in buf.iter_mut().zip(row) {
            *b = Complex::new(v, 0.0);
        }
        self.fft.process(&mut buf);
        for (b, &h) in buf.iter_mut().zip(&self.response) {
            *b *= h;
        }
        self.ifft.process(&mut buf);
        for (o, b) in out.iter_mut().zip(&buf) {
            *o = b.re;
        }
    }
}

fn interp(row: &[f64], f: f64) -> f64 {
    if !(f > -1.0 && f < row.len() as f64) {
        return 0.0;
    }
    let i0 = f.floor();
    let frac = f - i0;
    let i0 = i0 as isize;
    let at = |i: isize| {
        if i >= 0 && (i as usize) < row.len() {
            row[i as usize]
        } else {
            0.0
        }
    };
    at(i0) * (1.0 - frac) + at(i0 + 1) * frac
}

/// Filtered backprojection.
///
/// Parallel beam uses the classical ramp-filter/backproject pair over `[0, π)`.
/// Fan beam (flat detector, full `2π` scan) rescales the detector to the
/// rotation axis, applies the cosine pre-weight, filters, and backprojects with
/// the inverse squared distance weight.
pub fn fbp(op: &ProjectionOperator, sino: &Sinogram, filter: Filter, cutoff: f64) -> Result<Vec<f64>> {
    if !(cutoff > 0.0 && cutoff <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fbp cutoff must lie in (0, 1], got {cutoff}"
        )));
    }
    let geom = op.geometry();
    sino.check(geom, "filtered backprojection")?;
    let grid = op.grid();
    let nd = geom.n_detectors;
    let half_det = (nd as f64 - 1.0) / 2.0;
    let mut image = vec![0.0; grid.len()];
    let mut filtered = vec![0.0; nd];

    match geom.beam {
        Beam::Parallel => {
            let ramp = RampFilter::new(nd, geom.detector_spacing, filter, cutoff);
            let scale = PI / geom.n_angles() as f64;
            for a in 0..geom.n_angles() {
                ramp.apply(sino.row(a), &mut filtered);
                let (e_u, _) = geom.frame(a);
                for iy in 0..grid.ny {
                    let y = grid.y_center(iy);
                    for ix in 0..grid.nx {
                        let u = grid.x_center(ix) * e_u[0] + y * e_u[1];
                        image[iy * grid.nx + ix] += scale * interp(&filtered, u / geom.detector_spacing + half_det);
                    }
                }
            }
        }
        Beam::Fan => {
            let d = geom.d_source_axis;
            let mag = d / (d + geom.d_axis_detector);
            let ds = geom.detector_spacing * mag;
            let ramp = RampFilter::new(nd, ds, filter, cutoff);
            let dbeta = 2.0 * PI / geom.n_angles() as f64;
            let mut weighted = vec![0.0; nd];
            for a in 0..geom.n_angles() {
                for (j, w) in weighted.iter_mut().enumerate() {
                    let s = geom.detector_offset(j) * mag;
                    *w = sino.row(a)[j] * d / (d * d + s * s).sqrt();
                }
                ramp.apply(&weighted, &mut filtered);
                let (e_u, e_c) = geom.frame(a);
                for iy in 0..grid.ny {
                    let y = grid.y_center(iy);
                    for ix in 0..grid.nx {
                        let x = grid.x_center(ix);
                        let along = d + x * e_c[0] + y * e_c[1];
                        let s = d * (x * e_u[0] + y * e_u[1]) / along;
                        let u_ratio = along / d;
                        image[iy * grid.nx + ix] +=
                            0.5 * dbeta * interp(&filtered, s / ds + half_det) / (u_ratio * u_ratio);
                    }
                }
            }
        }
    }
    for v in image.iter_mut() {
        if !v.is_finite() {
            *v = 0.0;
        }
    }
    Ok(image)
}
