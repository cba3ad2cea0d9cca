//! Dense crowd localization, detection and counting with a learnable
//! per-pixel binarization threshold.

pub mod binarize;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod grid;
pub mod labelgen;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod pnm;
pub mod postprocess;
pub mod synth;

pub use error::{Error, Result};
pub use grid::{Grid, Tensor3};
