//! Spatial analysis of on-farm strip trials from yield-monitor data.
//!
//! The pipeline runs from raw yield points to a trimmed lattice of cell
//! means ([`field_data`]), overlays treatment layouts ([`design`]), fits
//! linear models with exponential spatial covariance by REML
//! ([`covariance`], [`inference`]), inspects residual spatial structure
//! ([`variogram`]) and measures how well each design and model recover a
//! known treatment effect ([`simulation`]).

pub mod covariance;
pub mod design;
pub mod error;
pub mod field_data;
pub mod inference;
pub mod optim;
pub mod par;
pub mod simulation;
pub mod variogram;

pub use error::{Error, Result};
pub use par::Execution;
