//! Partial functional linear quantile regression.

pub use nalgebra;

pub mod evalbench;
pub mod extract;
pub mod fgrid;
pub mod io;
pub mod model;
pub mod qcov;
pub mod qsolve;
pub mod simgen;
