//! Laboratory for label-based diversity (LDiversity) regularization of neural
//! networks.
//!
//! The crate is organized around one question: how entangled are the hidden
//! units of a layer, and what does that entanglement cost in generalization?
//! It answers it three ways, each checking the others:
//!
//! - [`info`] computes every information quantity exactly, by enumeration over
//!   finite discrete distributions. This is the ground truth.
//! - [`estim`] lower-bounds the same quantities with neural Jensen-Shannon
//!   discriminators, the only route that scales to real activations.
//! - [`bound`] verifies the mutual-information generalization bound and its
//!   diversity decomposition exactly on fully enumerable toy learning
//!   problems.
//!
//! [`train`] ties the estimators into the adversarial LDM training loop with
//! baseline regularizers (none, dropout, DeCov, UDM), [`metrics`] provides the
//! correlation-gap diagnostic, [`data`] handles MNIST IDX ingestion and
//! synthetic fixtures, and [`tensor`] is the minimal reverse-mode autodiff
//! engine underneath it all. The `ldm-lab` binary exposes everything as CLI
//! subcommands.

pub mod bound;
pub mod cli;
pub mod data;
pub mod estim;
pub mod info;
pub mod metrics;
pub mod report;
pub mod seeds;
pub mod tensor;
pub mod train;

pub use tensor::{Adam, Tensor, TensorError};
