//! Super-resolution downscaling of coarse temperature grids onto fine
//! regional grids.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod grid;
pub mod models;
pub mod netcdf;
pub mod normalization;
pub mod pipeline;
pub mod tiling;
pub mod training;

pub use error::{Error, Result};
