//! The unrolled Bayesian network: variational encoder, deterministic decoder,
//! mean and variance heads, and the K-step chain with shared weights.

mod network;
mod params;

pub use network::{
    bayes_conv_on_tape, block_on_tape, sample_block, unrolled_forward, unrolled_on_tape, BlockVars, IterateState, Mode,
    NetworkOutput, ParamVars, StepVars, ACTIVATION_VAR_EPS,
};
pub use params::{
    init_network, param_layout, snapshot_posterior, softplus, softplus_inv, variance_from_head, BayesConvIdx, ConvIdx,
    HeadIdx, Layout, NetConfig, NetworkParams, NormIdx, ParamKind, ParamSpec, PriorSnapshot, RHO_INIT_SIGMA,
    VARIANCE_FLOOR,
};
