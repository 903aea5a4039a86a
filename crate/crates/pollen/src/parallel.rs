//! Rayon-backed variants of the per-grain stages.

use pollen_core::detect::{detect_grains, GrainDetection};
use pollen_core::embed::{Embedder, Embedding};
use pollen_core::metrics::CentroidSet;
use pollen_core::pipeline::{assemble, check_inputs, process_grain, PipelineOptions, PipelineOutput};
use pollen_core::prep::NormalizedCrop;
use pollen_core::raster::{Raster, SaliencyMap};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Runs `f` on a pool of `threads` workers (0 = rayon's default).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Embeds every crop; results keep input order.
pub fn embed_all(embedder: &(dyn Embedder + Sync), crops: &[NormalizedCrop]) -> Vec<pollen_core::Result<Embedding>> {
    crops.par_iter().map(|c| embedder.embed(c)).collect()
}

/// [`pollen_core::pipeline::run_pipeline`] with grains processed in parallel.
pub fn run_pipeline_par(
    image_name: &str,
    image: &Raster,
    saliency: &SaliencyMap,
    embedder: &(dyn Embedder + Sync),
    cs: &CentroidSet,
    opts: &PipelineOptions,
) -> pollen_core::Result<PipelineOutput> {
    check_inputs(image, saliency, embedder, cs)?;
    opts.calibration.um_per_px()?;
    let grains = detect_grains(saliency, &opts.detect)?;
    process_grains_par(image_name, image, &grains, embedder, cs, opts)
}

/// Classifies already-detected grains in parallel and assembles the report.
pub fn process_grains_par(
    image_name: &str,
    image: &Raster,
    grains: &[GrainDetection],
    embedder: &(dyn Embedder + Sync),
    cs: &CentroidSet,
    opts: &PipelineOptions,
) -> pollen_core::Result<PipelineOutput> {
    let outcomes = grains
        .par_iter()
        .map(|g| process_grain(image, g, embedder, cs, opts))
        .collect::<pollen_core::Result<Vec<_>>>()?;
    assemble(image_name, image, outcomes, &opts.calibration)
}
