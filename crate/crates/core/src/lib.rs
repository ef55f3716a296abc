pub mod ablation;
pub mod calibration;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod extract;
pub mod field;
pub mod geometry;
pub mod hypercube;
pub mod losses;
pub mod metrics;
pub mod plot;
pub mod render;
pub mod scene;
pub mod spatial;
pub mod train;

pub use error::{Error, Result};
