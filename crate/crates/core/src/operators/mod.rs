//! Discrete Radon transform, its adjoint, filtered backprojection and operator norms.

mod fbp;
mod geometry;
mod projector;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use fbp::{fbp, Filter};
pub use geometry::{Beam, Fnv1a, Geometry, ImageGrid, Ray};
pub use projector::{ProjectionOperator, Sinogram};

/// A real linear map with an adjoint, on flat double-precision vectors.
pub trait LinearOperator {
    fn domain_len(&self) -> usize;
    fn range_len(&self) -> usize;
    fn apply(&self, x: &[f64], out: &mut [f64]);
    fn apply_adjoint(&self, y: &[f64], out: &mut [f64]);
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Power-method estimate of the spectral norm `‖A‖₂`.
///
/// Iterates `x ← AᵀA x / ‖AᵀA x‖` from a seeded random start and returns
/// `sqrt(‖AᵀA x‖)` for the last unit iterate. The estimate never decreases
/// with `iters` (beyond round-off).
pub fn operator_norm<A: LinearOperator + ?Sized>(op: &A, iters: usize, seed: u64) -> f64 {
    let iters = iters.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..op.domain_len()).map(|_| rng.random::<f64>() - 0.5).collect();
    let n = norm2(&x);
    x.iter_mut().for_each(|v| *v /= n);
    let mut ax = vec![0.0; op.range_len()];
    let mut atax = vec![0.0; op.domain_len()];
    let mut estimate = 0.0;
    for _ in 0..iters {
        op.apply(&x, &mut ax);
        op.apply_adjoint(&ax, &mut atax);
        let n = norm2(&atax);
        if n == 0.0 {
            return 0.0;
        }
        estimate = n.sqrt();
        for (xi, v) in x.iter_mut().zip(&atax) {
            *xi = v / n;
        }
    }
    estimate
}
