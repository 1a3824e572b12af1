//! Bayesian unrolled gradient reconstruction for low-dose and sparse-view CT.
//!
//! The crate is organised bottom-up:
//!
//! * [`operators`] : Joseph projector, adjoint, filtered backprojection.
//! * [`phantoms`] : training/test phantoms, Poisson corruption, dataset files.
//! * [`diffengine`] : a small reverse-mode autodiff tape over dense tensors.
//! * [`bayesnet`] : the unrolled network with a variational encoder.
//! * [`losses`] : likelihoods, KL, total variation and trace terms.
//! * [`training`] : Adam, schedules, supervised pretraining, unsupervised adaptation.
//! * [`inference`] : Monte-Carlo reconstruction, uncertainty maps, PSNR/SSIM.
//! * [`baselines`] : FBP and TV-regularised reconstruction.
//! * [`formats`] : TNSR tensors, PGM images and the metrics CSV.
//! * [`cli`] : configuration and the command-line front end.
//! * [`selftest`] : the invariant suites behind `bdgd selftest`.

pub mod baselines;
pub mod bayesnet;
pub mod cli;
pub mod diffengine;
pub mod error;
pub mod formats;
pub mod inference;
pub mod losses;
pub mod operators;
pub mod phantoms;
pub mod real;
pub mod seed;
pub mod selftest;
pub mod training;

pub use error::{Error, Result};
pub use real::{DType, Real};
