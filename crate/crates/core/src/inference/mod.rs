//! Monte-Carlo reconstruction with aleatoric/epistemic decomposition, and image metrics.

mod metrics;
mod recon;

pub use metrics::{data_range_of, evaluate, psnr, ssim, Metrics, PSNR_CAP_DB, SSIM_SIGMA, SSIM_WINDOW};
pub use recon::{mc_moments, normalize_minmax, reconstruct, NetworkSampler, PredictiveSampler, ReconResult};
