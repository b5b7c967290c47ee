//! Score-space metric learning for cross-domain few-shot classification.
//!
//! Fixed feature vectors are adapted per episode by small encoder heads; the
//! heads' pre-softmax scores for support and query samples become node
//! coordinates of a graph network that re-classifies each query from the
//! score distribution of the labelled support set.

pub mod baselines;
pub mod engine;
pub mod error;
pub mod featurebank;
pub mod gnn;
pub mod numerics;
pub mod parallel;
pub mod scorer;

pub use error::{Error, Result};
