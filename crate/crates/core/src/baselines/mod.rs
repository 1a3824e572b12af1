//! Classical references: clamped FBP and isotropic-TV reconstruction by Chambolle–Pock.

mod tv;

pub use tv::{
    alpha_grid, gradient, neg_divergence_adjoint, sweep_alpha, tv_objective, tv_reconstruct, AlphaSweep, TvConfig,
    TvSolution, ALPHA_GRID,
};

use crate::error::Result;
use crate::operators::{fbp, Filter, ProjectionOperator, Sinogram};

/// Hann-filtered FBP, clamped at zero.
pub fn fbp_reconstruct(y: &Sinogram, op: &ProjectionOperator, cutoff: f64) -> Result<Vec<f64>> {
    let mut x = fbp(op, y, Filter::Hann, cutoff)?;
    x.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(x)
}
