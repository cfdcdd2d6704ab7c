//! Training parallel spiking networks by convex reformulation.
//!
//! The pipeline: freeze hidden LIF dynamics ("witnesses", either Gaussian-sampled
//! or extracted from a surrogate-pretrained network), roll them over the training
//! inputs to obtain a binary spike dictionary, solve an L1-regularized convex
//! program over that dictionary with an exact primal-dual gap certificate, and
//! reconstruct an executable K-parallel LIF network from the sparse solution.
//! Surrogate-gradient BPTT training is provided both as a baseline and for
//! finetuning the reconstructed networks.

pub mod arrangement;
pub mod bitmat;
pub mod config;
pub mod dictionary;
pub mod harness;
mod error;
pub mod lif;
pub mod pathnorm;
pub mod reconstruct;
pub mod rng;
pub mod metrics;
pub mod oracle;
pub mod variants;
pub mod solver;
pub mod surrogate;
pub mod tasks;
pub mod witness;

pub use error::{Error, Result};
