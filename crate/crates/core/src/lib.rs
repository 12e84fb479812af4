//! Topology-guided private embeddings for multi-camera retrieval.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`camera_graph`]: Gaussian affinity over camera geometry and its perturbation bound.
//! - [`geo_attention`]: geometry-conditioned self-attention with spectral safeguards.
//! - [`temporal_graph`]: lagged message passing over the camera graph.
//! - [`act`]: adaptive margins, the ACT identification and triplet losses, mining.
//! - [`transport`]: entropic optimal transport (Sinkhorn) and an exact LP oracle.
//! - [`dp`]: clipping, Gaussian-mechanism calibration, reproducible noise.
//! - [`accountant`]: advanced composition and a hash-chained privacy ledger.
//! - [`index`]: exact and graph-approximate cosine top-K retrieval plus Re-ID metrics.
//! - [`audit`]: membership-inference audit, privacy/utility sweeps, diagnostics.
//! - [`pipeline`]: synthetic data, the toy trainer and end-to-end orchestration.
//!
//! Shared payload types live in [`embeddings`].

// `!(x > 0.0)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod accountant;
pub mod act;
pub mod audit;
pub mod camera_graph;
pub mod dp;
pub mod embeddings;
pub mod error;
pub mod geo_attention;
pub mod index;
pub mod linalg;
pub mod pipeline;
pub mod temporal_graph;
pub mod transport;

pub use error::{Error, Result};
