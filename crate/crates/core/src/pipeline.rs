//! Whole-image classification: detect grains, prepare and embed each crop,
//! assign it to the nearest centroid and aggregate a palynological report
//! with an annotated overlay.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::detect::{detect_grains, BBox, DetectParams, GrainDetection};
use crate::embed::Embedder;
use crate::error::{bail, Result};
use crate::metrics::{classify, CentroidSet, DEFAULT_TAU};
use crate::overlay::{class_colour, render_overlay, DrawnBox, UNCLASSIFIED_COLOUR};
use crate::prep::{prepare_grain, PrepConfig};
use crate::raster::{Raster, SaliencyMap};
use crate::xai::{capture_heatmap, Heatmap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub sensor_pixel_um: f64,
    pub magnification: f64,
}

impl CalibrationParams {
    /// 3.774 um sensor pixels behind a 60x objective.
    pub const SENSOR_60X: CalibrationParams = CalibrationParams { sensor_pixel_um: 3.774, magnification: 60.0 };
    /// 0.15 um per pixel, stated directly.
    pub const RES_015: CalibrationParams = CalibrationParams { sensor_pixel_um: 0.15, magnification: 1.0 };

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "sensor-60x" => Some(Self::SENSOR_60X),
            "res-0.15" => Some(Self::RES_015),
            _ => None,
        }
    }

    pub fn um_per_px(&self) -> Result<f64> {
        if !(self.magnification > 0.0) || !self.magnification.is_finite() {
            bail!(Parameter, "magnification must be positive, got {}", self.magnification);
        }
        if !(self.sensor_pixel_um > 0.0) || !self.sensor_pixel_um.is_finite() {
            bail!(Parameter, "sensor pixel size must be positive, got {}", self.sensor_pixel_um);
        }
        Ok(self.sensor_pixel_um / self.magnification)
    }
}

impl Default for CalibrationParams {
    fn default() -> Self {
        Self::SENSOR_60X
    }
}

pub fn um_per_px(c: &CalibrationParams) -> Result<f64> {
    c.um_per_px()
}

/// Diameter of the disk with the same area, in micrometres.
pub fn equivalent_diameter(area_px2: f64, c: &CalibrationParams) -> Result<f64> {
    if !(area_px2 >= 0.0) {
        bail!(Input, "area must be non-negative, got {area_px2}");
    }
    Ok(2.0 * (area_px2 / core::f64::consts::PI).sqrt() * c.um_per_px()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub sensor_pixel_um: f64,
    pub magnification: f64,
    pub um_per_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrainReport {
    pub id: u32,
    /// `None` when the grain could not be classified.
    pub class: Option<String>,
    pub distance: Option<f64>,
    pub confidence: Option<f64>,
    pub bbox: BBox,
    pub area_px: f64,
    pub equivalent_diameter_um: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeStats {
    pub mean_um: f64,
    pub std_um: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PalynologyReport {
    pub image_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<String>,
    pub total_grains: usize,
    pub classified: usize,
    pub unclassified: usize,
    pub counts: BTreeMap<String, usize>,
    /// Over classified grains only.
    pub percentages: BTreeMap<String, f64>,
    pub size_stats: BTreeMap<String, SizeStats>,
    pub grains: Vec<GrainReport>,
    pub calibration: CalibrationReport,
}

impl PalynologyReport {
    /// Checks the count, percentage and ordering invariants.
    pub fn validate(&self) -> Result<()> {
        let counted: usize = self.counts.values().sum();
        if counted != self.classified || self.classified + self.unclassified != self.total_grains {
            bail!(State, "report counts do not add up");
        }
        if self.grains.len() != self.total_grains {
            bail!(State, "report lists {} grains, total says {}", self.grains.len(), self.total_grains);
        }
        if self.classified > 0 {
            let pct: f64 = self.percentages.values().sum();
            if (pct - 100.0).abs() > 0.01 {
                bail!(State, "percentages sum to {pct}");
            }
        }
        if self.grains.windows(2).any(|w| w[0].id >= w[1].id) {
            bail!(State, "grains are not ordered by id");
        }
        for g in &self.grains {
            if let Some(c) = &g.class {
                if !self.counts.contains_key(c) {
                    bail!(State, "grain {} has uncounted class {c}", g.id);
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub detect: DetectParams,
    pub prep: PrepConfig,
    pub calibration: CalibrationParams,
    pub tau: f64,
    pub emit_heatmaps: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            detect: DetectParams::default(),
            prep: PrepConfig::default(),
            calibration: CalibrationParams::default(),
            tau: DEFAULT_TAU,
            emit_heatmaps: false,
        }
    }
}

/// Result of processing one grain.
#[derive(Debug, Clone, PartialEq)]
pub struct GrainOutcome {
    pub report: GrainReport,
    pub heatmap: Option<Heatmap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub report: PalynologyReport,
    pub overlay: Raster,
    pub boxes: Vec<DrawnBox>,
    pub heatmaps: Vec<Heatmap>,
}

/// Checks that image, saliency, embedder and centroids fit together.
pub fn check_inputs(image: &Raster, saliency: &SaliencyMap, embedder: &dyn Embedder, cs: &CentroidSet) -> Result<()> {
    if (image.width(), image.height()) != (saliency.width(), saliency.height()) {
        bail!(
            Dimension,
            "image is {}x{} but saliency is {}x{}",
            image.width(),
            image.height(),
            saliency.width(),
            saliency.height()
        );
    }
    if cs.is_empty() {
        bail!(Input, "no centroids");
    }
    if cs.dim() != embedder.dim() {
        bail!(Dimension, "centroids have {} dims, embedder {}", cs.dim(), embedder.dim());
    }
    Ok(())
}

/// Crops, embeds and classifies one grain. Failures are recorded on the
/// grain instead of aborting.
pub fn process_grain(
    image: &Raster,
    grain: &GrainDetection,
    embedder: &dyn Embedder,
    cs: &CentroidSet,
    opts: &PipelineOptions,
) -> Result<GrainOutcome> {
    let diameter = equivalent_diameter(grain.area, &opts.calibration)?;
    let mut report = GrainReport {
        id: grain.id,
        class: None,
        distance: None,
        confidence: None,
        bbox: grain.bbox,
        area_px: grain.area,
        equivalent_diameter_um: diameter,
        error: None,
    };
    let prep = PrepConfig { side: embedder.input_side(), ..opts.prep };
    let embedded = prepare_grain(image, grain, &prep).and_then(|crop| embedder.embed(&crop).map(|e| (crop, e)));
    let (crop, embedding) = match embedded {
        Ok(v) => v,
        Err(e) => {
            report.error = Some(alloc::format!("{e}"));
            return Ok(GrainOutcome { report, heatmap: None });
        }
    };
    let pred = classify(embedding.values(), cs, opts.tau)?;
    let mut heatmap = None;
    if opts.emit_heatmaps {
        let centroid = cs.centroid(&pred.class_name).expect("validated centroid");
        if let Some(cap) = embedder.explain(&crop, &centroid) {
            let mut h = capture_heatmap(&cap?, prep.side)?;
            h.grain_id = Some(grain.id);
            heatmap = Some(h);
        }
    }
    report.class = Some(pred.class_name);
    report.distance = Some(pred.distance);
    report.confidence = Some(pred.confidence);
    Ok(GrainOutcome { report, heatmap })
}

/// Aggregates per-grain outcomes (in any order) into the report, overlay
/// and heatmap list.
pub fn assemble(
    image_name: &str,
    image: &Raster,
    mut outcomes: Vec<GrainOutcome>,
    calibration: &CalibrationParams,
) -> Result<PipelineOutput> {
    outcomes.sort_by_key(|o| o.report.id);
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut sizes: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut grains = Vec::with_capacity(outcomes.len());
    let mut heatmaps = Vec::new();
    let mut boxes = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        let g = o.report;
        match &g.class {
            Some(c) => {
                *counts.entry(c.clone()).or_default() += 1;
                sizes.entry(c.clone()).or_default().push(g.equivalent_diameter_um);
                boxes.push(DrawnBox { grain_id: g.id, bbox: g.bbox, colour: class_colour(c), label: c.clone() });
            }
            None => boxes.push(DrawnBox {
                grain_id: g.id,
                bbox: g.bbox,
                colour: UNCLASSIFIED_COLOUR,
                label: String::from("?"),
            }),
        }
        heatmaps.extend(o.heatmap);
        grains.push(g);
    }
    let classified: usize = counts.values().sum();
    let percentages = counts
        .iter()
        .map(|(c, &n)| (c.clone(), 100.0 * n as f64 / classified as f64))
        .collect();
    let size_stats = sizes
        .into_iter()
        .map(|(c, d)| {
            let n = d.len() as f64;
            let mean = d.iter().sum::<f64>() / n;
            let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            (c, SizeStats { mean_um: mean, std_um: var.sqrt() })
        })
        .collect();
    let report = PalynologyReport {
        image_name: String::from(image_name),
        generated_at: None,
        total_grains: grains.len(),
        classified,
        unclassified: grains.len() - classified,
        counts,
        percentages,
        size_stats,
        grains,
        calibration: CalibrationReport {
            sensor_pixel_um: calibration.sensor_pixel_um,
            magnification: calibration.magnification,
            um_per_px: calibration.um_per_px()?,
        },
    };
    report.validate()?;
    let overlay = render_overlay(image, &boxes);
    Ok(PipelineOutput { report, overlay, boxes, heatmaps })
}

/// Sequential end-to-end run.
pub fn run_pipeline(
    image_name: &str,
    image: &Raster,
    saliency: &SaliencyMap,
    embedder: &dyn Embedder,
    cs: &CentroidSet,
    opts: &PipelineOptions,
) -> Result<PipelineOutput> {
    check_inputs(image, saliency, embedder, cs)?;
    opts.calibration.um_per_px()?;
    let grains = detect_grains(saliency, &opts.detect)?;
    let outcomes = grains
        .iter()
        .map(|g| process_grain(image, g, embedder, cs, opts))
        .collect::<Result<Vec<_>>>()?;
    assemble(image_name, image, outcomes, &opts.calibration)
}
