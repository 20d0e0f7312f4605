//! Deep attribution priors.
//!
//! A prediction network `f` is trained jointly with a prior network `g` that
//! maps each feature's meta-features to a predicted global importance. The
//! training penalty pulls `f`'s Expected Gradients attributions toward
//! `g(M)`; the learned prior can then be inspected with attributions of its
//! own and partial dependence curves.

pub mod attribution;
pub mod autodiff;
pub mod baselines;
pub mod datagen;
pub mod error;
pub mod explain;
pub mod models;
pub mod rng;
pub mod stats;
pub mod training;

pub use error::{Error, Result};
