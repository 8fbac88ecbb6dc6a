//! Quasimetric value learning under Eikonal constraints for 2-D maze worlds.

pub mod agents;
pub mod autodiff;
pub mod bounds;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod geometry;
pub mod nn;
pub mod objectives;
pub mod oracle;
pub mod plot;
pub mod quasimetric;

pub use error::{Error, Result};
