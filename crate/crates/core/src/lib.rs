//! Group-aware coordination graphs for cooperative multi-agent Q-learning.
//!
//! Agents in a partially observable pursuit task exchange messages over a
//! coordination graph whose edges are sampled from a Gaussian: the mean comes
//! from pairwise attention over current observations, the covariance from a
//! k-means grouping of recent observation windows. Messages feed per-agent Q
//! heads mixed monotonically into a team value, trained by TD learning plus a
//! group-distance regularizer on the agents' action distributions.

pub mod config;
pub mod env;
pub mod error;
pub mod graph;
pub mod harness;
pub mod numerics;
pub mod policy;
pub mod training;

pub use error::{Error, Result};
