//! Fairness-generalizing detector training at desk scale.
//!
//! The crate is `no_std` and only needs an allocator. It carries the whole
//! numerical pipeline:
//!
//! * [`numerics`]: dense `f64` tensors, a reverse-mode tape, parameter stores,
//!   finite-difference checking and plain SGD.
//! * [`dataset`]: synthetic image datasets with controllable subgroup
//!   imbalance and forgery-domain structure, plus the fake/real pair sampler.
//! * [`model`]: three-branch encoder (content, forgery, demographic), the
//!   decoder, the four MLP heads and AdaIN fusion.
//! * [`losses`]: margin, cross-entropy, contrastive and reconstruction terms,
//!   the disentanglement aggregate and the bi-level CVaR fairness loss.
//! * [`metrics`]: F_FPR, F_OAE, F_DP, F_MEO and AUC with brute-force oracles.
//! * [`trainer`]: the joint sharpness-aware optimization loop and loss
//!   landscape slicing.
//! * [`probe`]: linear probes used to measure what a representation encodes.
//!
//! File formats, CSV ingestion and the command line live in the companion
//! `fairgen-cli` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod dataset;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod probe;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{GradientMap, ParameterStore, Tape, Tensor, Var};
