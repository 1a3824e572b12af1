//! Objective terms: heteroscedastic likelihood, diagonal-Gaussian KL, total
//! variation, data fidelity and the trace term, and both assembled objectives.

mod objective;
mod terms;

pub use objective::{
    network_kl, supervised_loss, ukt_loss, variance_on_tape, zero_grads, HyperParams, LossBreakdown, ParamGrads,
    SupervisedExample, UktExample,
};
pub use terms::{
    data_fidelity, data_fidelity_on_tape, hetero_nll, hetero_nll_on_tape, kl_component, kl_component_grad,
    kl_diag_gauss, trace_on_tape, trace_term, trace_weights, tv_seminorm, GaussianDiag, TraceMode,
    EXACT_TRACE_MAX_PIXELS,
};
