//! Control-function estimation of panel binary-response models with
//! endogenous regressors and correlated random effects.
//!
//! Pipeline: [`reduced_form`] (stepwise system MLE) → [`control_functions`]
//! (empirical-Bayes posterior means α̂, ε̂) → [`second_stage`] (pooled probit
//! or exchangeable GEE) → [`effects`] (ASF/APE, support-trimmed bounds) with
//! two-step standard errors from [`inference`]. [`alternatives`] and [`mc`]
//! hold the comparison estimators and the simulation harness.

pub mod alternatives;
pub mod control_functions;
pub mod data;
pub mod effects;
pub mod error;
pub mod inference;
pub mod mc;
pub mod numerics;
pub mod pipeline;
pub mod reduced_form;
pub mod second_stage;

pub use error::{PanelError, Result};
