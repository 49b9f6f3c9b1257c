//! Offset-based robust beamforming for the multi-user MISO downlink.
//!
//! Each SINR constraint is rewritten as a slack variable `f_k(e)` that is
//! quadratic in the channel error, and the chance constraint is replaced by
//! `μ_f ≥ r σ_f`. The crate provides the moments of `f_k`, closed-form robust
//! beamforming directions, robust power loading, and a Monte-Carlo simulator.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod directions;
pub mod error;
pub mod linalg;
pub mod montecarlo;
pub mod pipeline;
pub mod powerload;
pub mod stats;

pub use channel::{Scenario, UncertaintyModel, UserChannel};
pub use error::{Error, Result};
pub use pipeline::{Algorithm, DesignParams};
pub use powerload::{Design, DesignReport, VarianceMode};
pub use stats::{BeamformerSet, OffsetStats};
