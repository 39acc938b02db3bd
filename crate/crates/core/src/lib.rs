//! Building height estimation from edge maps and 2D footprints.

pub mod calibration;
pub mod candidates;
pub mod edgemap;
pub mod embedding;
pub mod error;
pub mod geometry;
pub mod pipeline;
pub mod ranking;
pub mod rectify;
pub mod scene;

pub use error::{Error, Result};
