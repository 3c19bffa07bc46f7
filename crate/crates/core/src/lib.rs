//! Marginal proportional-odds models for incomplete longitudinal ordinal data.
//!
//! Four estimators share one estimating-equation engine: plain GEE, inverse
//! probability weighted GEE, multiple-imputation GEE and a doubly robust
//! augmented GEE. A simulation harness and a small CLI sit on top.

pub mod cli;
pub mod covariate;
pub mod drgee;
pub mod error;
pub mod gee;
pub mod io;
pub mod migee;
pub mod missingness;
pub mod ordinal;
pub mod ordreg;
pub mod simgen;
pub mod solver;
pub mod wgee;

pub use error::{Error, Result};
