//! Estimation of heterogeneous peer effects in binary-choice social
//! interaction models with group fixed effects.
//!
//! Groups of individuals interact through directed within-group networks.
//! Each individual's binary choice depends on the average choice probability
//! of their influencers, on covariates, and on a group fixed effect. Slope
//! parameters are heterogeneous across an unknown partition of groups into
//! latent clusters.
//!
//! The crate provides:
//! - a panel-of-groups data model with CSV exchange formats ([`data`]),
//! - the logistic pseudo-likelihood core with analytic derivatives ([`logit`]),
//! - equilibrium choice-probability solving by contraction iteration
//!   ([`equilibrium`]),
//! - sequential pseudo-likelihood estimation with group fixed effects
//!   ([`npl`]),
//! - penalized classification of groups into latent clusters ([`classo`]),
//! - information-criterion selection of the cluster count
//!   ([`model_selection`]),
//! - parametric-bootstrap debiasing and confidence intervals ([`bootstrap`]),
//! - a seeded simulation engine and replication harness ([`simulation`]),
//! - a batch pipeline tying the stages together ([`pipeline`]).
//!
//! With the default `parallel` feature, group-level and replication-level
//! work fans out over the current rayon thread pool. Results are identical
//! for any worker count: all parallel maps are index-ordered and reductions
//! run in a fixed order.

pub mod bootstrap;
pub mod classo;
pub mod data;
pub mod equilibrium;
mod error;
pub(crate) mod exec;
pub mod logit;
pub mod model_selection;
pub mod npl;
pub mod pipeline;
pub mod rng;
pub mod simulation;

pub use error::{Error, Result};
