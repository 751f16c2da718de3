//! Area typing of city grid cells from POI-derived activity profiles, and
//! validation of the area types against mobile-phone activity timelines.

// `!(x > t)` is used on purpose so NaN takes the rejecting branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classify;
pub mod config;
pub mod error;
pub mod grid;
pub mod linalg;
pub mod par;
pub mod pipeline;
pub mod poi;
pub mod profiles;
pub mod spectral;
pub mod stats;
pub mod synth;
pub mod timeline;

pub use error::{Error, Result};
pub use grid::{CellId, GridSpec};
