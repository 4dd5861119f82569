//! Conditional score-based diffusion for predicting longitudinal cortical
//! thickness trajectories from baseline information.
//!
//! The crate bundles the differentiable 1D attention U-net, the EDM-style
//! training objective and probability-flow sampler, a synthetic longitudinal
//! cohort generator, deterministic regression baselines, an analytic Gaussian
//! oracle for verification, and the evaluation metrics.

pub mod autodiff;
pub mod baselines;
pub mod cli;
pub mod cohort;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod oracle;
pub mod rng;

pub use error::{Error, Result};

/// Number of cortical regions in the Desikan-Killiany parcellation.
pub const N_ROI: usize = 68;
