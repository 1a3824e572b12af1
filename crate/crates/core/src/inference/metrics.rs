use crate::error::{Error, Result};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
}

fn check_pair(x: &[f64], reference: &[f64], data_range: f64, context: &'static str) -> Result<()> {
    if x.len() != reference.len() {
        return Err(Error::shape(context, &[reference.len()], &[x.len()]));
    }
    if !(data_range > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "{context}: data range must be positive, got {data_range}"
        )));
    }
    Ok(())
}

/// `max − min` of the reference, or 1 for a constant reference.
pub fn data_range_of(reference: &[f64]) -> f64 {
    let (lo, hi) = reference
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if hi > lo {
        hi - lo
    } else {
        1.0
    }
}

/// `10·log10(range² / MSE)`, capped at 99 dB.
pub fn psnr(x: &[f64], reference: &[f64], data_range: f64) -> Result<f64> {
    check_pair(x, reference, data_range, "psnr")?;
    let mse = x.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable filtering over the fully covered ("valid") region.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ho, wo) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * wo];
    for i in 0..h {
        for j in 0..wo {
            rows[i * wo + j] = (0..n).map(|t| k[t] * img[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for i in 0..ho {
        for j in 0..wo {
            out[i * wo + j] = (0..n).map(|t| k[t] * rows[(i + t) * wo + j]).sum();
        }
    }
    out
}

/// Mean local SSIM with an 11×11 Gaussian window (σ = 1.5), K1 = 0.01, K2 = 0.03.
pub fn ssim(x: &[f64], reference: &[f64], h: usize, w: usize, data_range: f64) -> Result<f64> {
    check_pair(x, reference, data_range, "ssim")?;
    if x.len() != h * w {
        return Err(Error::shape("ssim", &[h, w], &[x.len()]));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let k = gaussian_window();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let mx = filter_valid(x, h, w, &k);
    let my = filter_valid(reference, h, w, &k);
    let sxx = filter_valid(&prod(x, x), h, w, &k);
    let syy = filter_valid(&prod(reference, reference), h, w, &k);
    let sxy = filter_valid(&prod(x, reference), h, w, &k);
    let c1 = (K1 * data_range).powi(2);
    let c2 = (K2 * data_range).powi(2);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (a, b) = (mx[i], my[i]);
            let vx = sxx[i] - a * a;
            let vy = syy[i] - b * b;
            let cxy = sxy[i] - a * b;
            ((2.0 * a * b + c1) * (2.0 * cxy + c2)) / ((a * a + b * b + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// PSNR and SSIM against a reference, with the reference's own dynamic range.
pub fn evaluate(x: &[f64], reference: &[f64], h: usize, w: usize) -> Result<Metrics> {
    let range = data_range_of(reference);
    Ok(Metrics {
        psnr: psnr(x, reference, range)?,
        ssim: ssim(x, reference, h, w, range)?,
    })
}
