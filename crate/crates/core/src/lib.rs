//! Dual-polarized double-directional channel synthesis and multipath
//! parameter recovery for massive-MIMO arrays.
//!
//! * [`manifolds`]: array geometry, steering vectors, angle/phase conversion.
//! * [`channel`]: path sampling, channel synthesis, pilots and the LS baseline.
//! * [`cpd`]: four-way tensor decomposition of a full channel estimate.
//! * [`ctd`]: compressed estimation from the frugal block-diagonal pilot.
//! * [`bounds`]: identifiability calculators.
//! * [`bench`]: NMSE, path matching and the Monte-Carlo sweep harness.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod bounds;
pub mod channel;
pub mod cpd;
pub mod ctd;
pub mod error;
pub mod exec;
pub mod linalg;
pub mod manifolds;

pub use error::{Error, Result, Theorem};
pub use linalg::{CMat, CVec, C64};
