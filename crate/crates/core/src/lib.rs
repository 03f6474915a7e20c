//! Neuralized k-means: cluster models rewritten as detection/pooling
//! networks, with relevance propagation, baseline explainers and a
//! pixel-flipping harness.
//!
//! Everything is generic over the [`Scalar`] type; the aliases below fix it
//! to `f64`.

pub mod baselines;
pub mod error;
pub mod evaluation;
pub mod export;
pub mod linalg;
pub mod models;
pub mod neuralize;
pub mod pooling;
pub mod propagate;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = linalg::Matrix<f64>;
pub type Dataset = models::Dataset<f64>;
pub type Stiffness = pooling::Stiffness<f64>;
pub type ClusterModel = models::ClusterModel<f64>;
pub type StandardModel = models::StandardModel<f64>;
pub type KernelModel = models::KernelModel<f64>;
pub type DeepModel = models::DeepModel<f64>;
pub type Network = neuralize::LayeredNetwork<f64>;
pub type ForwardTrace = neuralize::ForwardTrace<f64>;
pub type RuleSpec = propagate::RuleSpec<f64>;
pub type Rule = propagate::Rule<f64>;
pub type RelevanceState = propagate::RelevanceState<f64>;
pub type RootPoint = baselines::RootPoint<f64>;
pub type FlipCurve = evaluation::FlipCurve<f64>;
