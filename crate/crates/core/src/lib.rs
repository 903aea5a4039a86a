//! Numerical core of the pollen analysis engine.
//!
//! Everything here is pure computation over in-memory buffers and builds
//! without `std` (only `alloc` is required). File formats, image decoding,
//! the external embedder transport and the command line live in the
//! `pollen` crate.
//!
//! Stages, in pipeline order:
//!
//! 1. [`raster`]: pixel containers, resampling, blur and the Laplacian focus measure.
//! 2. [`detect`]: saliency thresholding, morphology, contour tracing and shape filters.
//! 3. [`prep`]: padded crops on a slate-gray background, normalisation and augmentation.
//! 4. [`embed`]: unit-hypersphere embedders (mock and a reference vision transformer).
//! 5. [`msloss`]: multi-similarity loss, its gradient and a toy optimiser.
//! 6. [`metrics`]: centroids, nearest-centroid classification and retrieval metrics.
//! 7. [`xai`]: gradient-weighted attention heatmaps.
//! 8. [`pipeline`]: end-to-end report assembly and calibration.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod error;

pub mod detect;
pub mod embed;
pub mod metrics;
pub mod msloss;
pub mod overlay;
pub mod pipeline;
pub mod prep;
pub mod raster;
pub mod seed;
pub mod synth;
pub mod xai;

pub use error::{Error, Result};
