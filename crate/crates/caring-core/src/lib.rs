//! Learning and verifying temporally causal latent representations when the
//! observation process loses information.
//!
//! The crate contains everything needed to run the desk-scale experiments
//! end to end:
//!
//! - [`tensor`] / [`tape`] / [`nn`] / [`optim`]: a minimal dense f64 stack
//!   with reverse-mode differentiation and AdamW.
//! - [`sim`]: seeded generators for the synthetic regimes (dimension-dropping
//!   mixing, time-delayed mixing, visual persistence), the context-length
//!   recoverability filter, and the binary dataset format.
//! - [`model`]: the sequence-to-step encoder, step-to-step decoder, and
//!   component-wise flow transition prior, with the sampled ELBO.
//! - [`train`]: the deterministic training loop and sweep orchestration.
//! - [`metrics`]: mean correlation coefficient with optimal assignment,
//!   Jacobian row-dominance, and evaluation reports.
//! - [`theory`]: numerical checks of the sufficiency condition and the
//!   continuity counterexamples.
//!
//! All heavy loops are data-parallel via rayon when the `parallel` feature
//! (default) is enabled, with a bit-identical sequential fallback.

pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numdiff;
pub mod optim;
pub mod parallel;
pub mod rng;
pub mod sim;
pub mod stats;
pub mod tape;
pub mod tensor;
pub mod theory;
pub mod train;

pub use error::{CoreError, Result};

/// Version string recorded into every artifact directory.
pub const TOOL_VERSION: &str = concat!("caring ", env!("CARGO_PKG_VERSION"));
