//! The `milcli` command-line interface.
//!
//! Exit codes: 0 on success, 1 for usage and validation errors, 2 for I/O
//! failures. Diagnostics go to stderr and result summaries to stdout.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::fbag::{read_bag, write_bag};
use crate::features::extract_bag;
use crate::heatmap::HeatmapParams;
use crate::jsonfmt::to_stable_json;
use crate::metrics::{evaluate_scores, roc_curve};
use crate::model::load_checkpoint;
use crate::pipeline::{
    attention_heatmap, checkpoint_file, env_seed, resolve_seed, run_training, write_text, RunConfig, HEATMAP_DIR,
    REPORT_FILE, SPLITS_FILE,
};
use crate::raster::RasterImage;
use crate::split::build_split_plan;
use crate::synth::{write_benchmark, SynthConfig};
use crate::tiler::{
    build_tissue_mask, format_coords, parse_coords, tile_grid, PatchCoord, DEFAULT_MIN_TISSUE_FRAC,
    TRANSFORMER_PATCH_SIZE,
};
use crate::train::{benchmark_task, CvReport};

const DEFAULT_SEED: u64 = 42;
const DEFAULT_MASK_SCALE: u32 = 16;

#[derive(Debug, Parser)]
#[command(name = "milcli", version, about = "Gated-attention MIL for whole-slide image classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Detect tissue on a raster and write patch coordinates as `x,y,patch_size` lines.
    Tile(TileArgs),
    /// Compute handcrafted patch features and write an FBAG file.
    Extract(ExtractArgs),
    /// Write a stratified k-fold split plan as JSON.
    Splits(SplitsArgs),
    /// Run k-fold training from a JSON run config.
    Train(TrainArgs),
    /// Recompute pooled metrics from a report at a chosen threshold.
    Evaluate(EvaluateArgs),
    /// Render a model's attention over a bag onto a slide thumbnail.
    Heatmap(HeatmapArgs),
    /// Write the synthetic witness benchmark (bags, manifest and run config).
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct TilingArgs {
    #[arg(long, default_value_t = TRANSFORMER_PATCH_SIZE)]
    patch_size: u32,
    #[arg(long, default_value_t = DEFAULT_MIN_TISSUE_FRAC)]
    min_tissue_frac: f64,
    /// Image pixels per tissue-mask pixel [default: min(16, image side)]
    #[arg(long)]
    mask_scale: Option<u32>,
}

#[derive(Debug, Args)]
struct TileArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    tiling: TilingArgs,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[arg(long)]
    image: PathBuf,
    /// Coordinates from `tile`; the image is tiled on the fly when absent.
    #[arg(long)]
    coords: Option<PathBuf>,
    /// Defaults to the image file stem.
    #[arg(long)]
    slide_id: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    tiling: TilingArgs,
}

#[derive(Debug, Args)]
struct SplitsArgs {
    /// Item count; every item is treated as one class unless --labels is given.
    #[arg(long)]
    n: Option<usize>,
    /// One 0/1 label per line.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = SPLITS_FILE)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Add the instance-level clustering loss.
    #[arg(long)]
    instance_loss: bool,
    /// Upper bound on concurrently trained rounds.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// A `report.json`, or a run directory containing one.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
    /// Write the pooled ROC curve as two columns (`fpr tpr`).
    #[arg(long)]
    roc: Option<PathBuf>,
    /// Write metrics JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct HeatmapArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    bag: PathBuf,
    #[arg(long)]
    thumb: PathBuf,
    /// Output PNG; defaults to `<output-dir>/heatmaps/<slide_id>.png`.
    #[arg(long, required_unless_present = "output_dir")]
    out: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Full-resolution pixels per thumbnail pixel; inferred from the bag when absent.
    #[arg(long)]
    scale: Option<u32>,
    #[arg(long, default_value_t = 1.0)]
    clip_lo: f64,
    #[arg(long, default_value_t = 99.0)]
    clip_hi: f64,
    #[arg(long, default_value_t = 0.6)]
    max_alpha: f64,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    bags: usize,
    #[arg(long, default_value_t = 64)]
    instances: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 0.05)]
    witness_frac: f64,
    #[arg(long, default_value_t = 1.0)]
    shift: f64,
    #[arg(long)]
    seed: Option<u64>,
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(summary) => {
            print!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("milcli: error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(command: Command) -> Result<String> {
    match command {
        Command::Tile(a) => tile(a),
        Command::Extract(a) => extract(a),
        Command::Splits(a) => splits(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Heatmap(a) => heatmap(a),
        Command::Synth(a) => synth(a),
    }
}

fn tile_image(image: &RasterImage, t: &TilingArgs) -> Result<Vec<PatchCoord>> {
    if !(0.0..=1.0).contains(&t.min_tissue_frac) {
        return Err(Error::invalid(format!("min_tissue_frac {} outside [0, 1]", t.min_tissue_frac)));
    }
    let side = image.width().min(image.height());
    let scale = t.mask_scale.unwrap_or(DEFAULT_MASK_SCALE.min(side));
    let mask = build_tissue_mask(image, scale)?;
    log::info!(
        "tissue mask {}x{} at scale {scale}: threshold {}, {} tissue pixels",
        mask.width,
        mask.height,
        mask.threshold,
        mask.count()
    );
    tile_grid(image.width(), image.height(), t.patch_size, &mask, t.min_tissue_frac)
}

fn tile(a: TileArgs) -> Result<String> {
    let image = RasterImage::load(&a.image)?;
    let coords = tile_image(&image, &a.tiling)?;
    write_text(&a.out, &format_coords(&coords))?;
    Ok(format!("{} patches of {} px written to {}\n", coords.len(), a.tiling.patch_size, a.out.display()))
}

fn extract(a: ExtractArgs) -> Result<String> {
    let image = RasterImage::load(&a.image)?;
    let coords = match &a.coords {
        Some(path) => parse_coords(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?,
        None => tile_image(&image, &a.tiling)?,
    };
    let slide_id = match a.slide_id {
        Some(id) => id,
        None => stem(&a.image)?,
    };
    let bag = extract_bag(&slide_id, &image, &coords)?;
    write_bag(&bag, &a.out)?;
    Ok(format!("{slide_id}: N={} D={} written to {}\n", bag.n(), bag.dim(), a.out.display()))
}

fn stem(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| Error::invalid(format!("cannot derive a slide id from {}", path.display())))
}

fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| match l.trim() {
            "0" => Ok(0),
            "1" => Ok(1),
            other => Err(Error::invalid(format!("{} line {}: label {other:?} is not 0 or 1", path.display(), i + 1))),
        })
        .collect()
}

fn splits(a: SplitsArgs) -> Result<String> {
    let labels = match (&a.labels, a.n) {
        (Some(path), n) => {
            let labels = read_labels(path)?;
            if let Some(n) = n.filter(|n| *n != labels.len()) {
                return Err(Error::invalid(format!("--n {n} disagrees with {} labels", labels.len())));
            }
            labels
        }
        (None, Some(n)) => vec![0; n],
        (None, None) => return Err(Error::invalid("give --n or --labels")),
    };
    let seed = resolve_seed(a.seed, env_seed().as_deref(), DEFAULT_SEED)?;
    let plan = build_split_plan(&labels, a.k, seed)?;
    write_text(&a.out, &plan.to_json())?;
    Ok(format!(
        "{} items in {} folds (sizes {:?}), seed {seed}, written to {}\n",
        labels.len(),
        a.k,
        plan.fold_sizes(),
        a.out.display()
    ))
}

fn train(a: TrainArgs) -> Result<String> {
    let mut cfg = RunConfig::load(&a.config)?;
    cfg.train.seed = resolve_seed(a.seed, env_seed().as_deref(), cfg.train.seed)?;
    if let Some(dir) = a.output_dir {
        cfg.output_dir = dir;
    }
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(v) = a.max_epochs {
        cfg.train.max_epochs = v;
    }
    if let Some(v) = a.patience {
        cfg.train.patience = v;
    }
    if let Some(v) = a.lr {
        cfg.train.optimizer.lr = v;
    }
    if let Some(v) = a.threshold {
        cfg.train.threshold = v;
    }
    if a.instance_loss {
        cfg.train.instance_loss = true;
    }
    if let Some(v) = a.threads {
        cfg.threads = v;
    }
    let run = run_training(&cfg)?;
    let m = &run.report.pooled.metrics;
    let mut summary = format!(
        "{} rounds on {} slides, seed {}\npooled AUROC {:.4}  F1 {:.4}  precision {:.4}  recall {:.4}  (threshold {})\n",
        run.report.rounds.len(),
        run.report.n_items,
        run.report.seed,
        m.auroc,
        m.f1,
        m.precision,
        m.recall,
        m.threshold
    );
    summary.push_str(&format!(
        "wrote {}, {} .. {}, {} under {}\n",
        SPLITS_FILE,
        checkpoint_file(0),
        checkpoint_file(cfg.k - 1),
        REPORT_FILE,
        cfg.output_dir.display()
    ));
    Ok(summary)
}

fn evaluate(a: EvaluateArgs) -> Result<String> {
    let path = if a.report.is_dir() { a.report.join(REPORT_FILE) } else { a.report.clone() };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let report: CvReport = serde_json::from_str(&text).map_err(|source| Error::Json { path: path.clone(), source })?;
    let threshold = a.threshold.unwrap_or(report.config.threshold);
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("threshold {threshold} outside (0, 1)")));
    }
    let (scores, labels) = report.pooled_scores();
    let metrics = evaluate_scores(&scores, &labels, threshold)?;
    if let Some(roc_path) = &a.roc {
        write_text(roc_path, &roc_curve(&scores, &labels)?.to_text())?;
    }
    let json = to_stable_json(&metrics).expect("metrics serialize");
    match &a.out {
        Some(out) => {
            write_text(out, &json)?;
            Ok(format!(
                "AUROC {:.4}  F1 {:.4} at threshold {threshold}; written to {}\n",
                metrics.auroc,
                metrics.f1,
                out.display()
            ))
        }
        None => Ok(json),
    }
}

fn heatmap(a: HeatmapArgs) -> Result<String> {
    let model = load_checkpoint(&a.model)?;
    let bag = read_bag(&a.bag)?;
    let thumb = RasterImage::load(&a.thumb)?;
    let params = HeatmapParams {
        clip_lo: a.clip_lo,
        clip_hi: a.clip_hi,
        max_alpha: a.max_alpha,
        thumbnail_scale: a.scale.unwrap_or(0),
    };
    if a.scale == Some(0) {
        return Err(Error::invalid("--scale must be positive"));
    }
    let out_path = match (a.out, a.output_dir) {
        (Some(out), _) => out,
        (None, Some(dir)) => dir.join(HEATMAP_DIR).join(format!("{}.png", bag.slide_id)),
        (None, None) => unreachable!("clap requires --out or --output-dir"),
    };
    let image = attention_heatmap(&model, &bag, &thumb, &params)?;
    if let Some(dir) = out_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    image.save(&out_path)?;
    Ok(format!("{}x{} heatmap for {} written to {}\n", image.width(), image.height(), bag.slide_id, out_path.display()))
}

fn synth(a: SynthArgs) -> Result<String> {
    let cfg = SynthConfig {
        bags: a.bags,
        instances: a.instances,
        dim: a.dim,
        witness_frac: a.witness_frac,
        shift: a.shift,
        seed: resolve_seed(a.seed, env_seed().as_deref(), DEFAULT_SEED)?,
    };
    let manifest = write_benchmark(&cfg, &a.out)?;
    let run = RunConfig::new("manifest.csv", "run", benchmark_task());
    let run_path = a.out.join("run.json");
    write_text(&run_path, &run.to_json())?;
    Ok(format!(
        "{} bags of {}x{} written; manifest {}; run config {}\n",
        cfg.bags,
        cfg.instances,
        cfg.dim,
        manifest.display(),
        run_path.display()
    ))
}
