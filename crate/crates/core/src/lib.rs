//! Query formulation for proactive email attachment recommendation.
//!
//! The pipeline mines request/reply instances from an email corpus,
//! synthesizes scored silver queries against a per-mailbox query-likelihood
//! retriever, trains a windowed neural term ranker on them and evaluates
//! query formulation methods with rank-based metrics.

pub mod baselines;
pub mod container;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod features;
pub mod neural;
pub mod pipeline;
pub mod retrieval;
pub mod silver;
pub mod synth;
pub mod text;
pub mod trec;
pub mod util;

pub use error::{Error, Result};
