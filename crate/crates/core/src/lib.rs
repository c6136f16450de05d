//! Random regret minimization (RRM) discrete-choice models.
//!
//! Classical RRM models are fitted by maximum likelihood and mixed RRM
//! models (normal or log-normal random coefficients, panel data) by maximum
//! simulated likelihood with Halton draws. Post-estimation covers predicted
//! probabilities, individual-level conditional coefficients and log-normal
//! moment summaries.

pub mod dataset;
pub mod draws;
pub mod regret;
pub mod stats;
pub mod optimize;
pub mod estimation;
pub mod postestimation;
