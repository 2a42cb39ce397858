// SPDX-License-Identifier: MIT OR Apache-2.0

//! # residforge-core
//!
//! Causal analysis of how a decoder-only transformer finalizes the answer of
//! three-digit addition under a one-token readout.
//!
//! The pipeline:
//!
//! - [`localization`]: cross-sample `resid_post` patching and cumulative
//!   attention ablation, to find the depth after which the last input token
//!   alone controls the decoded answer.
//! - [`directions`]: diff-of-means directions and context-conditioned
//!   one-vs-rest dictionaries from last-token states.
//! - [`alignment`]: rank-r bases, orthogonal Procrustes rotators between
//!   contexts and the alignment metric triple.
//! - [`editing`]: strict counterfactual digit edits under the five direction
//!   modes, with scale selection and Wilson-interval aggregation.
//!
//! Subjects implement [`model::SubjectModel`]: the built-in toy transformer,
//! the planted-structure oracle in [`synthlab`], or a remote checkpoint through
//! [`bridge`].

pub mod alignment;
pub mod bridge;
pub mod container;
pub mod directions;
pub mod editing;
pub mod error;
pub mod localization;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod report;
pub mod rng;
pub mod stats;
pub mod synthlab;
pub mod task;

pub use error::{Error, Result};
