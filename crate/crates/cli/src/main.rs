//! `fisheyekit` — batch CLI over the fisheye detection toolkit.
//!
//! Exit codes: 0 success, 2 usage, 3 file/parse, 4 domain/validation,
//! 5 adapter/stage failure. Logs go to standard error; data goes to the
//! paths you name (or stdout, with `--stdout`).

use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand};

use fisheyekit::error::{Error, Result};
use fisheyekit::formats::{
    parse_detections, parse_ground_truth, render_comparison, render_table, write_csv_matrix,
    write_detections, write_fused_results, ClassSchema, Detection, DetectionFormat, DimsTable,
    EvalReport,
};
use fisheyekit::fusion::{weighted_box_fusion_batch, FusionConfig, ScoreMode, ScoreRescale};
use fisheyekit::geometry::{clip_box, scale_box};
use fisheyekit::illumination::{
    apply_clustering, auto_threshold, build_manifest, export_scatter, NightThreshold,
};
use fisheyekit::manifest::{LumaMode, Manifest};
use fisheyekit::metrics::{evaluate, ApMode, EvalOptions, IoUGrid};
use fisheyekit::pipeline::{load_schema_file, orchestrate, PipelineConfig};

#[derive(Parser)]
#[command(name = "fisheyekit", version, about = "Fisheye detection pipeline toolkit")]
struct Cli {
    /// Bound internal parallelism (defaults to the available cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an image manifest (dims, illumination stats) from a directory
    Manifest(ManifestArgs),
    /// Partition a manifest into night/other by luminance threshold
    Cluster(ClusterArgs),
    /// Fuse per-model detection files with weighted box fusion
    Fuse(FuseArgs),
    /// Rescale detection coordinates by a constant factor
    Scale(ScaleArgs),
    /// Evaluate detections against ground truth (mAP over an IoU grid, F1)
    Eval(EvalArgs),
    /// Render a comparison table from stored evaluation reports
    Report(ReportArgs),
    /// Run the full pipeline described by a config file
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct ManifestArgs {
    /// Directory of images (png/jpg)
    image_dir: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    /// Luminance definition: mean | bt601
    #[arg(long, default_value = "mean")]
    luma: String,
}

#[derive(Args)]
#[command(group(ArgGroup::new("threshold").required(true).args(["t_night", "auto_threshold"])))]
struct ClusterArgs {
    /// Input manifest (JSON Lines)
    #[arg(short, long)]
    manifest: PathBuf,
    /// Explicit night threshold in (0, 255)
    #[arg(long)]
    t_night: Option<f64>,
    /// Derive the threshold with Otsu's method over the luminance histogram
    #[arg(long)]
    auto_threshold: bool,
    /// Clustered manifest output
    #[arg(short, long)]
    out: PathBuf,
    /// Night-subset manifest
    #[arg(long)]
    night_out: Option<PathBuf>,
    /// Other-subset manifest
    #[arg(long)]
    other_out: Option<PathBuf>,
    /// Plot-ready per-image scatter CSV
    #[arg(long)]
    scatter_csv: Option<PathBuf>,
}

#[derive(Args)]
struct ContextArgs {
    /// Ground-truth COCO file supplying the class schema and image dims
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Manifest supplying image dims (alternative to --gt)
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Class schema JSON (alternative to --gt); default: the five
    /// traffic classes
    #[arg(long)]
    classes: Option<PathBuf>,
}

impl ContextArgs {
    fn load(&self) -> Result<(ClassSchema, DimsTable)> {
        if let Some(gt_path) = &self.gt {
            let gt = parse_ground_truth(gt_path)?;
            return Ok((gt.schema, gt.dims));
        }
        let schema = match &self.classes {
            Some(path) => load_schema_file(path)?,
            None => ClassSchema::default(),
        };
        let dims = match &self.manifest {
            Some(path) => Manifest::read_jsonl(path)?.dims_table(),
            None => DimsTable::new(),
        };
        Ok((schema, dims))
    }
}

#[derive(Args)]
struct FuseArgs {
    /// Detection files, one per model
    #[arg(long, num_args = 1.., required = true)]
    dets: Vec<PathBuf>,
    /// Input format: coco-results | yolo-txt-dir
    #[arg(long, default_value = "coco-results")]
    format: String,
    /// Comma-separated model tags (default: file stems)
    #[arg(long)]
    tags: Option<String>,
    #[command(flatten)]
    context: ContextArgs,
    /// Cluster-joining IoU threshold
    #[arg(long, default_value_t = 0.55)]
    iou_thr: f64,
    /// Comma-separated per-model weights (default: all 1)
    #[arg(long)]
    weights: Option<String>,
    /// Drop boxes scoring below this before clustering
    #[arg(long, default_value_t = 0.0)]
    skip_thr: f64,
    /// Fused score: mean | weighted-mean
    #[arg(long, default_value = "mean")]
    score_mode: String,
    /// Score rescale: none | by-model-count
    #[arg(long, default_value = "none")]
    rescale: String,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScaleArgs {
    #[arg(long)]
    dets: PathBuf,
    /// Multiply every coordinate by this factor (e.g. 0.25 to undo x4
    /// super-resolution)
    #[arg(long)]
    factor: f64,
    #[arg(long, default_value = "coco-results")]
    format: String,
    #[arg(long, default_value = "model")]
    tag: String,
    #[command(flatten)]
    context: ContextArgs,
    /// Clip rescaled boxes to the image dims from --gt/--manifest
    #[arg(long)]
    clip: bool,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    dets: PathBuf,
    #[arg(long, default_value = "coco-results")]
    format: String,
    #[arg(long, default_value = "model")]
    tag: String,
    /// IoU grid: "start:end:step" or a comma list (default 0.5:0.95:0.05)
    #[arg(long)]
    iou_grid: Option<String>,
    /// IoU threshold of the F1 operating point
    #[arg(long, default_value_t = 0.5)]
    f1_iou: f64,
    /// Confidence threshold of the F1 operating point
    #[arg(long, default_value_t = 0.0)]
    conf_thr: f64,
    /// Keep only the top-K detections per image
    #[arg(long)]
    top_k: Option<usize>,
    /// Exact trapezoidal AUC instead of 101-point interpolation
    #[arg(long)]
    trapezoid: bool,
    /// Report JSON output
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Per-class AP matrix CSV
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Plain-text table output
    #[arg(long)]
    table: Option<PathBuf>,
    /// Print the report JSON and table to stdout
    #[arg(long)]
    stdout: bool,
}

#[derive(Args)]
#[command(group(ArgGroup::new("sink").required(true).multiple(true).args(["out", "stdout"])))]
struct ReportArgs {
    /// Stored EvalReport JSON files
    #[arg(long, num_args = 1.., required = true)]
    reports: Vec<PathBuf>,
    /// Comma-separated row names (default: file stems)
    #[arg(long)]
    names: Option<String>,
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long)]
    stdout: bool,
}

#[derive(Args)]
struct PipelineArgs {
    /// Pipeline config (TOML)
    #[arg(short, long)]
    config: PathBuf,
    /// Override the config's work directory
    #[arg(long)]
    work_dir: Option<PathBuf>,
    /// Override the config's raw image directory
    #[arg(long)]
    images: Option<PathBuf>,
}

fn parse_luma(s: &str) -> Result<LumaMode> {
    match s {
        "mean" => Ok(LumaMode::Mean),
        "bt601" => Ok(LumaMode::Bt601),
        other => Err(Error::InvalidArgument(format!(
            "unknown luma mode '{other}' (expected mean or bt601)"
        ))),
    }
}

fn parse_score_mode(s: &str) -> Result<ScoreMode> {
    match s {
        "mean" => Ok(ScoreMode::Mean),
        "weighted-mean" => Ok(ScoreMode::WeightedMean),
        other => Err(Error::InvalidArgument(format!(
            "unknown score mode '{other}'"
        ))),
    }
}

fn parse_rescale(s: &str) -> Result<ScoreRescale> {
    match s {
        "none" => Ok(ScoreRescale::None),
        "by-model-count" => Ok(ScoreRescale::ByModelCount),
        other => Err(Error::InvalidArgument(format!(
            "unknown rescale mode '{other}'"
        ))),
    }
}

fn parse_comma_list(s: &str) -> Vec<String> {
    s.split(',').map(|p| p.trim().to_string()).collect()
}

fn parse_weights(s: &str) -> Result<Vec<f64>> {
    parse_comma_list(s)
        .iter()
        .map(|p| {
            p.parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("weight '{p}' is not a number")))
        })
        .collect()
}

fn parse_grid(spec: &str) -> Result<IoUGrid> {
    let round9 = |v: f64| (v * 1e9).round() / 1e9;
    let values: Vec<f64> = if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "IoU grid '{spec}' must be start:end:step"
            )));
        }
        let nums: Vec<f64> = parts
            .iter()
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|_| Error::InvalidArgument(format!("'{p}' is not a number")))
            })
            .collect::<Result<_>>()?;
        let (start, end, step) = (nums[0], nums[1], nums[2]);
        if step <= 0.0 {
            return Err(Error::InvalidArgument("grid step must be positive".into()));
        }
        let mut out = Vec::new();
        let mut i = 0u32;
        loop {
            let value = round9(start + f64::from(i) * step);
            if value > end + step * 1e-6 {
                break;
            }
            out.push(value);
            i += 1;
        }
        out
    } else {
        parse_comma_list(spec)
            .iter()
            .map(|p| {
                p.parse::<f64>()
                    .map(round9)
                    .map_err(|_| Error::InvalidArgument(format!("'{p}' is not a number")))
            })
            .collect::<Result<_>>()?
    };
    IoUGrid::new(values)
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn load_model_files(
    files: &[PathBuf],
    format: DetectionFormat,
    tags: &Option<String>,
    schema: &ClassSchema,
    dims: &DimsTable,
) -> Result<(Vec<String>, Vec<Vec<Detection>>)> {
    let tags: Vec<String> = match tags {
        Some(list) => {
            let parsed = parse_comma_list(list);
            if parsed.len() != files.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} tags given for {} detection files",
                    parsed.len(),
                    files.len()
                )));
            }
            parsed
        }
        None => files.iter().map(|f| stem_of(f)).collect(),
    };
    let mut per_model = Vec::with_capacity(files.len());
    for (file, tag) in files.iter().zip(&tags) {
        per_model.push(parse_detections(file, format, schema, dims, tag)?);
    }
    Ok((tags, per_model))
}

fn run_manifest(args: &ManifestArgs) -> Result<()> {
    let luma = parse_luma(&args.luma)?;
    let manifest = build_manifest(&args.image_dir, luma)?;
    manifest.write_jsonl(&args.out)?;
    log::info!("{} images -> {}", manifest.len(), args.out.display());
    Ok(())
}

fn run_cluster(args: &ClusterArgs) -> Result<()> {
    let manifest = Manifest::read_jsonl(&args.manifest)?;
    let threshold = match args.t_night {
        Some(t) => NightThreshold::new(t)?,
        None => auto_threshold(&manifest.records)?,
    };
    let clustered = apply_clustering(&manifest, threshold)?;
    clustered.full.write_jsonl(&args.out)?;
    if let Some(path) = &args.night_out {
        Manifest {
            header: clustered.full.header.clone(),
            records: clustered.night.clone(),
        }
        .write_jsonl(path)?;
    }
    if let Some(path) = &args.other_out {
        Manifest {
            header: clustered.full.header.clone(),
            records: clustered.other.clone(),
        }
        .write_jsonl(path)?;
    }
    if let Some(path) = &args.scatter_csv {
        export_scatter(&clustered.full.records, path)?;
    }
    eprintln!(
        "t_night={} night={} other={}",
        threshold.value(),
        clustered.night.len(),
        clustered.other.len()
    );
    Ok(())
}

fn run_fuse(args: &FuseArgs) -> Result<()> {
    let format: DetectionFormat = args.format.parse()?;
    let (schema, dims) = args.context.load()?;
    let (tags, per_model) = load_model_files(&args.dets, format, &args.tags, &schema, &dims)?;

    let config = FusionConfig {
        iou_threshold: args.iou_thr,
        model_weights: args.weights.as_deref().map(parse_weights).transpose()?,
        skip_box_threshold: args.skip_thr,
        score_mode: parse_score_mode(&args.score_mode)?,
        score_rescale: parse_rescale(&args.rescale)?,
    };
    let fused = weighted_box_fusion_batch(&per_model, &config)?;
    let echo = serde_json::json!({
        "fusion": serde_json::to_value(&config)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?,
        "models": tags,
    });
    write_fused_results(&fused, &args.out, &echo)?;
    let input_total: usize = per_model.iter().map(|m| m.len()).sum();
    log::info!(
        "fused {} detections from {} models into {}",
        input_total,
        per_model.len(),
        fused.len()
    );
    Ok(())
}

fn run_scale(args: &ScaleArgs) -> Result<()> {
    let format: DetectionFormat = args.format.parse()?;
    let (schema, dims) = args.context.load()?;
    let dets = parse_detections(&args.dets, format, &schema, &dims, &args.tag)?;
    let scaled: Vec<Detection> = dets
        .iter()
        .map(|det| {
            let mut bbox = scale_box(&det.bbox, args.factor)?;
            if args.clip {
                let image_dims = dims.get(&det.image_id).ok_or_else(|| {
                    Error::Referential(format!(
                        "--clip: no dimensions known for image '{}'",
                        det.image_id
                    ))
                })?;
                bbox = clip_box(&bbox, *image_dims);
            }
            Ok(Detection {
                bbox,
                ..det.clone()
            })
        })
        .collect::<Result<_>>()?;
    write_detections(&scaled, &args.out, format, Some(&dims))?;
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let format: DetectionFormat = args.format.parse()?;
    let gt = parse_ground_truth(&args.gt)?;
    let dets = parse_detections(&args.dets, format, &gt.schema, &gt.dims, &args.tag)?;
    let options = EvalOptions {
        grid: match &args.iou_grid {
            Some(spec) => parse_grid(spec)?,
            None => IoUGrid::coco(),
        },
        f1_iou_threshold: args.f1_iou,
        confidence_threshold: args.conf_thr,
        ap_mode: if args.trapezoid {
            ApMode::Trapezoid
        } else {
            ApMode::Interp101
        },
        top_k_per_image: args.top_k,
    };
    let report = evaluate(&dets, &gt, &options)?;

    if let Some(path) = &args.out {
        report.write_json(path)?;
    }
    if let Some(path) = &args.csv {
        write_csv_matrix(&report, path)?;
    }
    let table = render_table(&report);
    if let Some(path) = &args.table {
        std::fs::write(path, &table).map_err(|e| Error::io(path, e))?;
    }
    if args.stdout {
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        println!("{json}");
        println!("{table}");
    }
    eprintln!(
        "mAP={} P={} R={} F1={}",
        report.map, report.precision, report.recall, report.f1
    );
    Ok(())
}

fn run_report(args: &ReportArgs) -> Result<()> {
    let names: Vec<String> = match &args.names {
        Some(list) => {
            let parsed = parse_comma_list(list);
            if parsed.len() != args.reports.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} names given for {} reports",
                    parsed.len(),
                    args.reports.len()
                )));
            }
            parsed
        }
        None => args.reports.iter().map(|p| stem_of(p)).collect(),
    };
    let mut entries = Vec::with_capacity(args.reports.len());
    for (path, name) in args.reports.iter().zip(names) {
        entries.push((name, EvalReport::read_json(path)?));
    }
    let table = render_comparison(&entries);
    if let Some(path) = &args.out {
        std::fs::write(path, &table).map_err(|e| Error::io(path, e))?;
    }
    if args.stdout {
        print!("{table}");
    }
    Ok(())
}

fn run_pipeline(args: &PipelineArgs) -> Result<()> {
    let mut config = PipelineConfig::load(&args.config)?;
    if let Some(dir) = &args.work_dir {
        config.work_dir = Some(dir.clone());
    }
    if let Some(dir) = &args.images {
        config.images = Some(dir.clone());
    }
    let images = config.images.clone().ok_or_else(|| {
        Error::InvalidArgument("no image directory: set images in the config or pass --images".into())
    })?;
    config.validate()?;
    let raw = build_manifest(&images, config.luma)?;
    let record = orchestrate(&config, &raw)?;
    for stage in &record.stages {
        eprintln!(
            "{:<22} {:?} ({} ms){}",
            stage.name,
            stage.status,
            stage.duration_ms,
            stage
                .detail
                .as_deref()
                .map(|d| format!(" — {d}"))
                .unwrap_or_default()
        );
    }
    Ok(())
}

fn run(command: &Command) -> Result<()> {
    match command {
        Command::Manifest(args) => run_manifest(args),
        Command::Cluster(args) => run_cluster(args),
        Command::Fuse(args) => run_fuse(args),
        Command::Scale(args) => run_scale(args),
        Command::Eval(args) => run_eval(args),
        Command::Report(args) => run_report(args),
        Command::Pipeline(args) => run_pipeline(args),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            log::warn!("could not bound the thread pool: {e}");
        }
    }
    if let Err(e) = run(&cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
