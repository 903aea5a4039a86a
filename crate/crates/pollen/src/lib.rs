//! File formats, image IO, the external embedder adapter and the command
//! line for `pollen-core`.

pub mod annot;
pub mod cli;
pub mod config;
pub mod csvio;
pub mod dataset;
pub mod error;
pub mod external;
pub mod io;
pub mod parallel;
pub mod weights;

pub use error::{Error, Result};
