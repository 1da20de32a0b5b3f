//! Recover an approximation of a model's finetuning data from its initial and
//! final weights: autolabel a public seed corpus with the final model, score
//! every candidate by how well its last-layer gradient aligns with the weight
//! difference, greedily assemble a training set, and measure how close that
//! set comes to the real one.

pub mod corpus;
pub mod error;
pub mod gradstore;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod selector;

pub use error::{Error, Result};
