//! Estimation for overdispersed clustered multinomial data.
//!
//! The crate fits log-linear models by quasi minimum power-divergence
//! estimation and estimates the design effect `ϑ` and the intracluster
//! correlation `ρ²` of clustered count tables with unequal cluster sizes.

pub mod data;
pub mod datasets;
pub mod distributions;
pub mod divergence;
pub mod error;
pub mod estimation;
pub mod loglinear;
pub mod overdispersion;
pub mod simulation;

pub use error::{Error, Result};
