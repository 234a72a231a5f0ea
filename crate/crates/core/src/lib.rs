pub mod bounds;
pub mod data;
pub mod error;
pub mod overlap;
pub mod propensity;
pub mod stratification;

pub use error::{Error, Result};
pub mod simulation;
pub mod report;
