//! Contextualized Vendi Score guidance for diffusion sampling.
//!
//! The crate is split along the data flow of a guided generation run:
//! [`kernel`] and [`vendi`] provide the differentiable diversity measure,
//! [`diffusion`] the analytic mixture world and DDIM sampler, [`guidance`]
//! the memory-bank and exemplar guided generation loop, [`scenarios`] the
//! synthetic region x object benchmarks and [`metrics`] their evaluation.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod kernel;
pub mod metrics;
pub mod scenarios;
pub mod vendi;

pub use error::{Error, Result};
pub use kernel::FeatureVector;
