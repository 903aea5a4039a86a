//! The `pollen` command line.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use pollen_core::detect::{detect_grains, DetectParams};
use pollen_core::embed::{Embedder, MockEmbedder, VitConfig, VitWeights, EMBED_DIM};
use pollen_core::metrics::{classify, evaluate, fit_centroids_named, CentroidSet, DEFAULT_TAU};
use pollen_core::msloss::{clustered_batch, toy_optimize, MsParams};
use pollen_core::pipeline::{CalibrationParams, PipelineOptions};
use pollen_core::prep::{prepare_grain, square_crop, PrepConfig, CROP_SIDE};
use pollen_core::raster::{best_focus, laplacian_variance, SaliencyMap};
use pollen_core::seed::sub_seed;
use pollen_core::synth::SynthSpec;
use pollen_core::xai::{blend_heatmap, DEFAULT_BLEND};
use serde::Serialize;

use crate::annot::{annotation_path, write_annotations, AnnotationFile};
use crate::config::{Backend, CliConfig};
use crate::csvio::{fmt_g8, read_embeddings, read_json, to_json, write_embeddings, write_json, EmbeddingRow};
use crate::dataset::GrainDataset;
use crate::error::{Error, Result};
use crate::external::{Endpoint, ExternalEmbedder, DEFAULT_TIMEOUT};
use crate::io::{load_image, load_saliency, save_image, save_saliency};
use crate::parallel::{embed_all, process_grains_par, with_threads};
use crate::weights::{load_weights, save_weights};

/// Saliency inside and outside synthetic grains.
const SYNTH_INSIDE: f32 = 0.9;
const SYNTH_OUTSIDE: f32 = 0.05;

#[derive(Debug, Parser)]
#[command(name = "pollen", version, about = "Pollen grain detection, embedding and palynological reporting")]
pub struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Run-wide seed; each stage derives its own stream from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Timestamp written into annotations and reports instead of the clock.
    #[arg(long, global = true)]
    pub generated_at: Option<String>,
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Detect grains in a saliency map and write `<image>.pollen.txt`.
    Detect(DetectArgs),
    /// Write a synthetic textured image and its saliency map.
    Synth(SynthArgs),
    /// Embed every annotated grain into a CSV.
    Embed(EmbedArgs),
    /// Write seeded random ViT weights.
    InitWeights(InitWeightsArgs),
    /// Per-class centroids from an embeddings CSV.
    FitCentroids(FitCentroidsArgs),
    /// Nearest-centroid predictions for an embeddings CSV.
    Classify(ClassifyArgs),
    /// Retrieval and clustering metrics for an embeddings CSV.
    Evaluate(EvaluateArgs),
    /// Full pipeline on one image: report JSON, overlay and heatmaps.
    Report(ReportArgs),
    /// Optimise a toy batch with the multi-similarity loss.
    ToyTrain(ToyTrainArgs),
    /// Pick the sharpest image of a focus stack.
    Focus(FocusArgs),
}

#[derive(Debug, Args, Default)]
pub struct DetectFlags {
    #[arg(long)]
    pub k: Option<f64>,
    #[arg(long)]
    pub t_min: Option<f64>,
    #[arg(long)]
    pub t_max: Option<f64>,
    #[arg(long)]
    pub min_area: Option<f64>,
    #[arg(long)]
    pub max_area: Option<f64>,
    #[arg(long)]
    pub min_circularity: Option<f64>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["saliency", "synthetic"])))]
pub struct DetectArgs {
    #[arg(long)]
    pub saliency: Option<PathBuf>,
    /// `WxH:x,y,r,texture;...`
    #[arg(long)]
    pub synthetic: Option<String>,
    /// Image the annotations belong to.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value = "saliency-post")]
    pub detector_tag: String,
    #[command(flatten)]
    pub detect: DetectFlags,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub spec: String,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub saliency: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct EmbedderFlags {
    #[arg(long, value_enum)]
    pub backend: Option<Backend>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// `tcp://host:port` or `stdio:command args`.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Seconds.
    #[arg(long)]
    pub timeout: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// Glob of `.pollen.txt` files.
    #[arg(long)]
    pub annotations: String,
    /// Label for every row (default: the annotation file's directory name).
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub embedder: EmbedderFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Small,
    Tiny,
}

#[derive(Debug, Args)]
pub struct InitWeightsArgs {
    #[arg(long, value_enum, default_value = "small")]
    pub preset: Preset,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitCentroidsArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub centroids: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    pub k: Vec<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub saliency: PathBuf,
    #[arg(long)]
    pub centroids: PathBuf,
    /// Also write per-grain attention heatmaps.
    #[arg(long)]
    pub heatmaps: bool,
    /// Output directory (default: `report.dir`, else next to the image).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// `sensor-60x` or `res-0.15`.
    #[arg(long)]
    pub calib: Option<String>,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    #[command(flatten)]
    pub detect: DetectFlags,
    #[command(flatten)]
    pub embedder: EmbedderFlags,
}

#[derive(Debug, Args)]
pub struct ToyTrainArgs {
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 8)]
    pub per_class: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.5)]
    pub spread: f64,
    /// Trace CSV (`step,loss,rho`); stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FocusArgs {
    /// Glob of images, taken in lexicographic order.
    #[arg(long)]
    pub stack: String,
}

struct Ctx {
    json: bool,
    seed: u64,
    threads: usize,
    generated_at: String,
    config: CliConfig,
}

/// Parses `args` and runs the command; returns the process exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    let ctx = Ctx {
        json: cli.json,
        seed: cli.seed.or(config.seed).unwrap_or(0),
        threads: cli.threads,
        generated_at: cli
            .generated_at
            .clone()
            .unwrap_or_else(|| chrono::Utc::now().format("%Y-%m-%dT%H:%M:%SZ").to_string()),
        config,
    };
    match cli.command {
        Command::Detect(a) => cmd_detect(&ctx, a),
        Command::Synth(a) => cmd_synth(&ctx, a),
        Command::Embed(a) => cmd_embed(&ctx, a),
        Command::InitWeights(a) => cmd_init_weights(&ctx, a),
        Command::FitCentroids(a) => cmd_fit_centroids(&ctx, a),
        Command::Classify(a) => cmd_classify(&ctx, a),
        Command::Evaluate(a) => cmd_evaluate(&ctx, a),
        Command::Report(a) => cmd_report(&ctx, a),
        Command::ToyTrain(a) => cmd_toy_train(&ctx, a),
        Command::Focus(a) => cmd_focus(&ctx, a),
    }
}

fn out(text: &str) {
    let mut o = std::io::stdout().lock();
    let _ = o.write_all(text.as_bytes());
    if !text.ends_with('\n') {
        let _ = o.write_all(b"\n");
    }
}

fn emit<T: Serialize>(ctx: &Ctx, value: &T, human: impl FnOnce() -> String) -> Result<()> {
    if ctx.json {
        out(&to_json(value)?);
    } else {
        out(&human());
    }
    Ok(())
}

fn detect_params(ctx: &Ctx, f: &DetectFlags) -> Result<DetectParams> {
    let mut p = DetectParams::default();
    ctx.config.apply_detect(&mut p);
    let flags = [
        (f.k, &mut p.k),
        (f.t_min, &mut p.t_min),
        (f.t_max, &mut p.t_max),
        (f.min_area, &mut p.min_area),
        (f.max_area, &mut p.max_area),
        (f.min_circularity, &mut p.min_circularity),
    ];
    for (v, slot) in flags {
        if let Some(v) = v {
            *slot = v;
        }
    }
    p.validate()?;
    Ok(p)
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "image".into(), |n| n.to_string_lossy().into_owned())
}

fn cmd_detect(ctx: &Ctx, a: DetectArgs) -> Result<()> {
    let params = detect_params(ctx, &a.detect)?;
    let saliency: SaliencyMap = match (&a.saliency, &a.synthetic) {
        (Some(p), _) => load_saliency(p)?,
        (None, Some(spec)) => SynthSpec::parse(spec)?.saliency(SYNTH_INSIDE, SYNTH_OUTSIDE),
        (None, None) => return Err(Error::Usage("--saliency or --synthetic is required".into())),
    };
    let grains = detect_grains(&saliency, &params)?;
    let file = AnnotationFile {
        image_name: file_name(&a.image),
        width: saliency.width() as u32,
        height: saliency.height() as u32,
        generated_at: ctx.generated_at.clone(),
        detector_tag: a.detector_tag,
        params,
        grains,
    };
    let path = annotation_path(&a.image);
    write_annotations(&file, &path)?;
    #[derive(Serialize)]
    struct Out<'a> {
        grains: usize,
        annotation: &'a Path,
    }
    let n = file.grains.len();
    emit(ctx, &Out { grains: n, annotation: &path }, || {
        format!("{n} grain{} -> {}", if n == 1 { "" } else { "s" }, path.display())
    })
}

fn cmd_synth(ctx: &Ctx, a: SynthArgs) -> Result<()> {
    let spec = SynthSpec::parse(&a.spec)?;
    save_image(&a.image, &spec.image())?;
    if let Some(s) = &a.saliency {
        save_saliency(s, &spec.saliency(SYNTH_INSIDE, SYNTH_OUTSIDE))?;
    }
    #[derive(Serialize)]
    struct Out {
        width: usize,
        height: usize,
        disks: usize,
    }
    let o = Out { width: spec.width, height: spec.height, disks: spec.disks.len() };
    emit(ctx, &o, || format!("{}x{} image with {} disks -> {}", o.width, o.height, o.disks, a.image.display()))
}

fn build_embedder(ctx: &Ctx, f: &EmbedderFlags) -> Result<Box<dyn Embedder + Sync>> {
    let c = &ctx.config;
    let backend = f.backend.or(c.embed_backend).unwrap_or(Backend::Mock);
    let dim = f.dim.or(c.embed_dim);
    match backend {
        Backend::Mock => Ok(Box::new(MockEmbedder::new(dim.unwrap_or(EMBED_DIM), sub_seed(ctx.seed, "embed"))?)),
        Backend::Vit => {
            let path = f
                .weights
                .as_ref()
                .or(c.embed_weights.as_ref())
                .ok_or_else(|| Error::Usage("the vit backend needs --weights".into()))?;
            let w = load_weights(path)?;
            if let Some(d) = dim.filter(|&d| d != w.config.embed_dim()) {
                return Err(Error::Usage(format!("--dim {d} but the weights embed to {}", w.config.embed_dim())));
            }
            Ok(Box::new(w))
        }
        Backend::External => {
            let ep = f
                .endpoint
                .as_ref()
                .or(c.embed_endpoint.as_ref())
                .ok_or_else(|| Error::Usage("the external backend needs --endpoint".into()))?;
            let timeout = match f.timeout {
                Some(s) => Duration::try_from_secs_f64(s).map_err(|_| Error::Usage(format!("bad --timeout {s}")))?,
                None => c.embed_timeout.unwrap_or(DEFAULT_TIMEOUT),
            };
            let e = ExternalEmbedder::connect(&ep.parse::<Endpoint>()?, dim.unwrap_or(EMBED_DIM), CROP_SIDE, timeout)?;
            Ok(Box::new(e))
        }
    }
}

fn expand_glob(pattern: &str) -> Result<Vec<PathBuf>> {
    let paths = glob::glob(pattern).map_err(|e| Error::Usage(format!("bad glob {pattern:?}: {e}")))?;
    let mut v = paths.collect::<std::result::Result<Vec<_>, _>>().map_err(|e| {
        let path = e.path().to_path_buf();
        Error::io(path, e.into())
    })?;
    v.sort();
    if v.is_empty() {
        return Err(Error::Usage(format!("no files match {pattern:?}")));
    }
    Ok(v)
}

fn cmd_embed(ctx: &Ctx, a: EmbedArgs) -> Result<()> {
    let files = expand_glob(&a.annotations)?;
    let ds = GrainDataset::open(&files)?;
    let embedder = build_embedder(ctx, &a.embedder)?;
    let prep = PrepConfig { side: embedder.input_side(), ..PrepConfig::default() };
    let mut crops = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let (img, grain) = ds.get(i)?;
        crops.push(prepare_grain(&img, &grain, &prep)?);
    }
    let embeddings = with_threads(ctx.threads, || embed_all(embedder.as_ref(), &crops))?;
    let mut rows = Vec::with_capacity(crops.len());
    for (entry, e) in ds.entries().iter().zip(embeddings) {
        let label = match &a.label {
            Some(l) => l.clone(),
            None => entry
                .annotation_path
                .parent()
                .and_then(Path::file_name)
                .map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
        };
        rows.push(EmbeddingRow {
            id: format!("{}:{}", file_name(&entry.image_path), entry.grain.id),
            label,
            values: e?.into_values(),
        });
    }
    write_embeddings(&a.out, &rows)?;
    #[derive(Serialize)]
    struct Out<'a> {
        rows: usize,
        dim: usize,
        out: &'a Path,
    }
    let o = Out { rows: rows.len(), dim: embedder.dim(), out: &a.out };
    emit(ctx, &o, || format!("{} embeddings ({}-d) -> {}", o.rows, o.dim, a.out.display()))
}

fn cmd_init_weights(ctx: &Ctx, a: InitWeightsArgs) -> Result<()> {
    let cfg = match a.preset {
        Preset::Small => VitConfig::small(),
        Preset::Tiny => VitConfig::tiny(),
    };
    let w = VitWeights::seeded(cfg, sub_seed(ctx.seed, "weights"))?;
    save_weights(&w, &a.out)?;
    let n: usize = w.tensors().iter().map(|t| t.len()).sum();
    #[derive(Serialize)]
    struct Out<'a> {
        parameters: usize,
        out: &'a Path,
    }
    emit(ctx, &Out { parameters: n, out: &a.out }, || format!("{n} parameters -> {}", a.out.display()))
}

fn load_points(path: &Path) -> Result<(Vec<EmbeddingRow>, Vec<Vec<f64>>, Vec<String>)> {
    let rows = read_embeddings(path)?;
    let points = rows.iter().map(|r| r.values.clone()).collect();
    let labels = rows.iter().map(|r| r.label.clone()).collect();
    Ok((rows, points, labels))
}

fn cmd_fit_centroids(ctx: &Ctx, a: FitCentroidsArgs) -> Result<()> {
    let (_, points, labels) = load_points(&a.embeddings)?;
    let cs = fit_centroids_named(&points, &labels)?;
    write_json(&a.out, &cs)?;
    emit(ctx, &cs, || {
        let mut s = String::new();
        for (c, n) in cs.classes.iter().zip(&cs.counts) {
            let _ = writeln!(s, "{c}\t{n}");
        }
        let _ = write!(s, "{} centroids -> {}", cs.len(), a.out.display());
        s
    })
}

fn load_centroids(path: &Path) -> Result<CentroidSet> {
    let cs: CentroidSet = read_json(path)?;
    cs.validate()?;
    Ok(cs)
}

fn cmd_classify(ctx: &Ctx, a: ClassifyArgs) -> Result<()> {
    let (rows, _, _) = load_points(&a.embeddings)?;
    let cs = load_centroids(&a.centroids)?;
    #[derive(Serialize)]
    struct Row<'a> {
        id: &'a str,
        label: &'a str,
        class: String,
        distance: f64,
        confidence: f64,
    }
    let mut out_rows = Vec::with_capacity(rows.len());
    for r in &rows {
        let p = classify(&r.values, &cs, a.tau)?;
        out_rows.push(Row {
            id: &r.id,
            label: &r.label,
            class: p.class_name,
            distance: p.distance,
            confidence: p.confidence,
        });
    }
    emit(ctx, &out_rows, || {
        let mut s = String::from("id\tlabel\tclass\tdistance\tconfidence\n");
        for r in &out_rows {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", r.id, r.label, r.class, fmt_g8(r.distance), fmt_g8(r.confidence));
        }
        s
    })
}

fn cmd_evaluate(ctx: &Ctx, a: EvaluateArgs) -> Result<()> {
    let (_, points, labels) = load_points(&a.embeddings)?;
    let report = evaluate(&points, &labels, &a.k, sub_seed(ctx.seed, "kmeans"))?;
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    emit(ctx, &report, || {
        let mut s = String::new();
        for (k, v) in &report.recall_at_k {
            let _ = writeln!(s, "Recall@{k}\t{v:.4}");
        }
        let m = &report.map_at_r;
        let _ = writeln!(s, "mAP@R\t{:.4}\t({} evaluated, {} skipped)", m.value, m.evaluated, m.skipped);
        let _ = writeln!(s, "NMI\t{:.4}", report.nmi);
        let rho = &report.rho;
        let _ = writeln!(s, "rho\t{:.4}{}", rho.ratio, if rho.degenerate { "\t(degenerate)" } else { "" });
        let knn = &report.knn;
        let _ = writeln!(s, "kNN accuracy\t{:.4}", knn.accuracy);
        let _ = writeln!(s, "macro F1\t{:.4}", knn.macro_f1);
        let names: Vec<&str> = {
            let mut v: Vec<&str> = labels.iter().map(String::as_str).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let _ = writeln!(s, "confusion (rows true, columns predicted)");
        let _ = writeln!(s, "\t{}", names.join("\t"));
        for (name, row) in names.iter().zip(&knn.confusion) {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "{name}\t{}", cells.join("\t"));
        }
        s
    })
}

fn cmd_report(ctx: &Ctx, a: ReportArgs) -> Result<()> {
    let image = load_image(&a.image)?;
    let saliency = load_saliency(&a.saliency)?;
    let cs = load_centroids(&a.centroids)?;
    let embedder = build_embedder(ctx, &a.embedder)?;
    let preset = a.calib.as_deref().or(ctx.config.calib_preset.as_deref());
    let calibration = match preset {
        Some(name) => CalibrationParams::preset(name)
            .ok_or_else(|| Error::Usage(format!("unknown calibration preset {name:?} (sensor-60x, res-0.15)")))?,
        None => CalibrationParams::default(),
    };
    let opts = PipelineOptions {
        detect: detect_params(ctx, &a.detect)?,
        prep: PrepConfig::default(),
        calibration,
        tau: a.tau,
        emit_heatmaps: a.heatmaps,
    };
    pollen_core::pipeline::check_inputs(&image, &saliency, embedder.as_ref(), &cs)?;
    let grains = detect_grains(&saliency, &opts.detect)?;
    let name = file_name(&a.image);
    let output = with_threads(ctx.threads, || process_grains_par(&name, &image, &grains, embedder.as_ref(), &cs, &opts))??;
    let mut report = output.report;
    report.generated_at = Some(ctx.generated_at.clone());

    let dir = a
        .out_dir
        .clone()
        .or_else(|| ctx.config.report_dir.clone())
        .unwrap_or_else(|| a.image.parent().map_or_else(PathBuf::new, Path::to_path_buf));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let stem = file_stem(&a.image);
    let report_path = dir.join(format!("{stem}.report.json"));
    let overlay_path = dir.join(format!("{stem}.overlay.png"));
    write_json(&report_path, &report)?;
    save_image(&overlay_path, &output.overlay)?;
    let mut heatmap_files = Vec::new();
    for h in &output.heatmaps {
        let id = h.grain_id.expect("pipeline heatmaps carry their grain");
        let grain = grains.iter().find(|g| g.id == id).expect("heatmap grain was detected");
        let heat_path = dir.join(format!("{stem}.{id}.heatmap.png"));
        save_image(&heat_path, &h.to_raster())?;
        let (crop, _) = square_crop(&image, grain, opts.prep.pad_frac)?;
        let blend_path = dir.join(format!("{stem}.{id}.overlay.png"));
        save_image(&blend_path, &blend_heatmap(&crop, h, DEFAULT_BLEND)?)?;
        heatmap_files.push(heat_path);
        heatmap_files.push(blend_path);
    }
    #[derive(Serialize)]
    struct Out<'a> {
        report: &'a Path,
        overlay: &'a Path,
        heatmaps: &'a [PathBuf],
        summary: &'a pollen_core::pipeline::PalynologyReport,
    }
    let o = Out { report: &report_path, overlay: &overlay_path, heatmaps: &heatmap_files, summary: &report };
    emit(ctx, &o, || {
        let mut s = format!(
            "{} grains ({} classified, {} unclassified)\n",
            report.total_grains, report.classified, report.unclassified
        );
        for (c, n) in &report.counts {
            let _ = writeln!(s, "{c}\t{n}\t{:.2}%", report.percentages[c]);
        }
        let _ = write!(s, "report -> {}\noverlay -> {}", report_path.display(), overlay_path.display());
        if !heatmap_files.is_empty() {
            let _ = write!(s, "\n{} heatmap files", heatmap_files.len());
        }
        s
    })
}

fn cmd_toy_train(ctx: &Ctx, a: ToyTrainArgs) -> Result<()> {
    let batch = clustered_batch(a.classes, a.per_class, a.dim, a.spread, sub_seed(ctx.seed, "toy"))?;
    let (_, trace) = toy_optimize(&batch, &MsParams::default(), a.lr, a.steps)?;
    let mut csv = String::from("step,loss,rho\n");
    for (i, t) in trace.iter().enumerate() {
        let rho = t.rho.map_or_else(String::new, fmt_g8);
        let _ = writeln!(csv, "{i},{},{rho}", fmt_g8(t.loss));
    }
    let last = trace.last().expect("steps + 1 entries");
    #[derive(Serialize)]
    struct Out {
        steps: usize,
        loss: f64,
        rho: Option<f64>,
    }
    let o = Out { steps: a.steps, loss: last.loss, rho: last.rho };
    match &a.out {
        Some(p) => std::fs::write(p, &csv).map_err(|e| Error::io(p, e))?,
        None if !ctx.json => out(&csv),
        None => {}
    }
    emit(ctx, &o, || {
        let rho = o.rho.map_or_else(|| "n/a".into(), |r| format!("{r:.4}"));
        format!("final step {} loss {:.6} rho {rho}", o.steps, o.loss)
    })
}

fn cmd_focus(ctx: &Ctx, a: FocusArgs) -> Result<()> {
    let paths = expand_glob(&a.stack)?;
    let stack = paths.iter().map(|p| load_image(p)).collect::<Result<Vec<_>>>()?;
    let best = best_focus(&stack)?;
    let scores = stack.iter().map(laplacian_variance).collect::<pollen_core::Result<Vec<_>>>()?;
    #[derive(Serialize)]
    struct Out<'a> {
        best: usize,
        path: &'a Path,
        scores: &'a [f64],
    }
    emit(ctx, &Out { best, path: &paths[best], scores: &scores }, || {
        let mut s = String::new();
        for (i, (p, v)) in paths.iter().zip(&scores).enumerate() {
            let _ = writeln!(s, "{i}\t{}\t{}", fmt_g8(*v), p.display());
        }
        let _ = write!(s, "best {best} {}", paths[best].display());
        s
    })
}
