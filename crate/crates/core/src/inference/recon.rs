use std::sync::Arc;

use rayon::prelude::*;

use crate::bayesnet::{unrolled_forward, variance_from_head, Mode, NetworkParams};
use crate::error::{Error, Result};
use crate::operators::{fbp, Filter, ProjectionOperator, Sinogram};
use crate::phantoms::FBP_INIT_CUTOFF;
use crate::seed::{child_seed, rng_from};
use crate::training::Checkpoint;

/// Posterior-predictive summary of `T` Monte-Carlo passes.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconResult {
    pub mean: Vec<f64>,
    /// Mean of the predicted variances.
    pub aleatoric: Vec<f64>,
    /// Variance of the predicted means.
    pub epistemic: Vec<f64>,
    /// `aleatoric + epistemic`.
    pub total: Vec<f64>,
    pub samples_used: usize,
    pub per_sample_means: Option<Vec<Vec<f64>>>,
}

/// One draw of `(mean, variance)` maps; draw `t` must depend only on `t` and `seed`.
pub trait PredictiveSampler: Sync {
    fn draw(&self, t: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// Moment estimates over `samples` draws, reduced in draw order.
pub fn mc_moments<S: PredictiveSampler + ?Sized>(
    sampler: &S,
    samples: usize,
    seed: u64,
    keep_samples: bool,
) -> Result<ReconResult> {
    if samples == 0 {
        return Err(Error::InvalidArgument(
            "Monte-Carlo sample count must be at least 1".into(),
        ));
    }
    let draws = (0..samples)
        .into_par_iter()
        .map(|t| sampler.draw(t, seed))
        .collect::<Result<Vec<_>>>()?;
    let n = draws[0].0.len();
    let (mut s1, mut s2, mut sv) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for (mu, var) in &draws {
        if mu.len() != n || var.len() != n {
            return Err(Error::shape("mc_moments", &[n], &[mu.len(), var.len()]));
        }
        for i in 0..n {
            s1[i] += mu[i];
            s2[i] += mu[i] * mu[i];
            sv[i] += var[i];
        }
    }
    let inv = 1.0 / samples as f64;
    let mean: Vec<f64> = s1.iter().map(|v| v * inv).collect();
    let aleatoric: Vec<f64> = sv.iter().map(|v| v * inv).collect();
    let epistemic: Vec<f64> = s2.iter().zip(&mean).map(|(q, m)| (q * inv - m * m).max(0.0)).collect();
    let total = aleatoric.iter().zip(&epistemic).map(|(a, e)| a + e).collect();
    Ok(ReconResult {
        mean,
        aleatoric,
        epistemic,
        total,
        samples_used: samples,
        per_sample_means: keep_samples.then(|| draws.into_iter().map(|(m, _)| m).collect()),
    })
}

/// The unrolled network in sample mode from `x₀ = FBP(y)` and `m₀ = 0`.
pub struct NetworkSampler<'a> {
    pub params: &'a NetworkParams<f32>,
    pub op: &'a Arc<ProjectionOperator>,
    pub y: &'a Sinogram,
    pub x0: Vec<f32>,
}

impl<'a> NetworkSampler<'a> {
    pub fn new(params: &'a NetworkParams<f32>, op: &'a Arc<ProjectionOperator>, y: &'a Sinogram) -> Result<Self> {
        let x0 = fbp(op, y, Filter::Hann, FBP_INIT_CUTOFF)?;
        Ok(Self {
            params,
            op,
            y,
            x0: x0.iter().map(|&v| v as f32).collect(),
        })
    }
}

impl PredictiveSampler for NetworkSampler<'_> {
    fn draw(&self, t: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
        let m0 = vec![0.0f32; self.x0.len()];
        let mut rng = rng_from(child_seed(seed, t as u64));
        let (out, _) = unrolled_forward(self.params, self.y, self.op, &self.x0, &m0, &mut rng, Mode::Sample)?;
        let var = variance_from_head(&out.sigma_raw);
        Ok((
            out.mu.iter().map(|&v| v as f64).collect(),
            var.iter().map(|&v| v as f64).collect(),
        ))
    }
}

/// Monte-Carlo reconstruction with `samples` passes of the checkpointed network.
pub fn reconstruct(
    ck: &Checkpoint,
    y: &Sinogram,
    op: &Arc<ProjectionOperator>,
    samples: usize,
    seed: u64,
) -> Result<ReconResult> {
    if ck.geometry_hash != op.geometry_hash() {
        return Err(Error::GeometryMismatch {
            expected_from: "checkpoint",
            got_from: "configured",
            expected: ck.geometry_hash,
            got: op.geometry_hash(),
        });
    }
    let sampler = NetworkSampler::new(&ck.params, op, y)?;
    mc_moments(&sampler, samples, seed, false)
}

/// Affine map of `v` onto `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_minmax(v: &[f64]) -> Vec<f64> {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    if hi > lo {
        v.iter().map(|x| (x - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; v.len()]
    }
}
