//! Impulse-response estimators: the stable-spline baseline, the combined
//! smoothness + Hankel rank estimator and the atomic-norm baseline.

pub mod atom;
pub mod export;
pub mod ss;
pub mod ssr;

pub use export::{EstimateRecord, TraceEntry};
pub use atom::{atom_dictionary, atom_estimate, atom_fit_with_penalty, AtomDictionary, AtomFit, AtomOptions};
pub use ss::{estimate_noise_variance, ss_estimate, ss_negative_log_ml, ss_posterior_mean, SsEstimate, SsOptions};
pub use ssr::{
    a_matrix, map_estimate, optimize_lambdas, q_saturation, q_threshold, rank_penalty_matrix, ssr_fit, ssr_fit_from,
    ssr_negative_log_ml, update_q, variational_bound_check, variational_rhs, HankelWeighting, LambdaBounds,
    LambdaSearch, PreparedQ, QUpdate, SsrFit, SsrHyperparameters, SsrOptions, SsrProblem, SsrState, StopReason,
};
