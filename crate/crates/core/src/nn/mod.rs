//! Minimal CPU neural-network engine: parameter arena, NCHW tensor ops and Adam.

pub mod adam;
pub mod ops;
pub mod param;

pub use adam::Adam;
pub use param::{Param, ParamArena, ParamId, Part};
