//! File-level plumbing shared by the command-line tool: run configuration,
//! seed resolution and the end-to-end cross-validation run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{parse_manifest, resolve_task, TaskSpec};
use crate::error::{Error, Result};
use crate::fbag::FeatureBag;
use crate::heatmap::{infer_thumbnail_scale, normalize_attention, render_heatmap, HeatmapParams};
use crate::jsonfmt::to_stable_json;
use crate::model::{save_checkpoint, MilModel};
use crate::raster::RasterImage;
use crate::split::{build_split_plan, SplitPlan};
use crate::tiler::{DEFAULT_MIN_TISSUE_FRAC, TRANSFORMER_PATCH_SIZE};
use crate::train::{run_cross_validation, CvReport, TrainConfig, TrainingData};

pub const SEED_ENV: &str = "MILCLI_SEED";
pub const SPLITS_FILE: &str = "splits.json";
pub const REPORT_FILE: &str = "report.json";
pub const HEATMAP_DIR: &str = "heatmaps";

pub fn checkpoint_file(round: usize) -> String {
    format!("round_{round}.milm")
}

fn default_k() -> usize {
    10
}

fn default_patch_size() -> u32 {
    TRANSFORMER_PATCH_SIZE
}

fn default_min_tissue_frac() -> f64 {
    DEFAULT_MIN_TISSUE_FRAC
}

fn default_threads() -> usize {
    1
}

/// One JSON file describing a training run. Training fields (`max_epochs`,
/// `seed`, `optimizer`, ...) sit at the top level next to the paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Relative paths are taken from the config file's directory.
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
    pub task: TaskSpec,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_patch_size")]
    pub patch_size: u32,
    #[serde(default = "default_min_tissue_frac")]
    pub min_tissue_frac: f64,
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn new(manifest: impl Into<PathBuf>, output_dir: impl Into<PathBuf>, task: TaskSpec) -> Self {
        RunConfig {
            manifest: manifest.into(),
            output_dir: output_dir.into(),
            task,
            k: default_k(),
            patch_size: default_patch_size(),
            min_tissue_frac: default_min_tissue_frac(),
            threads: default_threads(),
            train: TrainConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 3 {
            return Err(Error::invalid(format!("k must be at least 3, got {}", self.k)));
        }
        if self.patch_size == 0 {
            return Err(Error::invalid("patch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.min_tissue_frac) {
            return Err(Error::invalid(format!("min_tissue_frac {} outside [0, 1]", self.min_tissue_frac)));
        }
        if self.threads == 0 {
            return Err(Error::invalid("threads must be at least 1"));
        }
        self.task.validate()?;
        self.train.validate()
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|source| Error::Json { path: path.to_path_buf(), source })
    }

    /// Reads and validates a config, anchoring relative paths at its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.manifest = base.join(&cfg.manifest);
        cfg.output_dir = base.join(&cfg.output_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        to_stable_json(self).expect("config serializes")
    }
}

/// Command-line flag, then the `MILCLI_SEED` value, then the config.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, config: u64) -> Result<u64> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match env.map(str::trim) {
        Some(text) if !text.is_empty() => {
            text.parse().map_err(|_| Error::invalid(format!("{SEED_ENV}={text:?} is not an unsigned integer")))
        }
        _ => Ok(config),
    }
}

pub fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub struct RunOutput {
    pub plan: SplitPlan,
    pub report: CvReport,
    pub models: Vec<MilModel>,
}

/// Loads the manifest's bags, runs every fold and writes `splits.json`,
/// `round_<r>.milm` and `report.json` under the output directory.
pub fn run_training(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let manifest_dir = cfg.manifest.parent().unwrap_or(Path::new(""));
    let manifest = parse_manifest(&cfg.manifest)?.resolve_paths(manifest_dir);
    let dataset = resolve_task(&manifest, &cfg.task)?;
    let (neg, pos) = dataset.class_counts();
    log::info!("task {:?}: {} slides ({pos} positive, {neg} negative)", cfg.task.name, dataset.len());
    let data = TrainingData::load(&dataset)?;
    let plan = build_split_plan(&data.labels, cfg.k, cfg.train.seed)?;

    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    write_text(&cfg.output_dir.join(SPLITS_FILE), &plan.to_json())?;
    let out = run_cross_validation(&data, &plan, &cfg.train, cfg.threads)?;
    for (r, model) in out.models.iter().enumerate() {
        save_checkpoint(model, &cfg.output_dir.join(checkpoint_file(r)))?;
    }
    write_text(&cfg.output_dir.join(REPORT_FILE), &out.report.to_json())?;
    Ok(RunOutput { plan, report: out.report, models: out.models })
}

/// Attention of `model` over `bag`, normalized and blended onto `thumbnail`.
/// A zero `thumbnail_scale` is replaced by the smallest scale that fits.
pub fn attention_heatmap(
    model: &MilModel,
    bag: &FeatureBag,
    thumbnail: &RasterImage,
    params: &HeatmapParams,
) -> Result<RasterImage> {
    let mut params = *params;
    if params.thumbnail_scale == 0 {
        params.thumbnail_scale = infer_thumbnail_scale(&bag.coords, thumbnail.width(), thumbnail.height());
        log::info!("inferred thumbnail scale {}", params.thumbnail_scale);
    }
    let output = model.forward(bag)?;
    let values = normalize_attention(output.attention.as_slice().expect("attention is contiguous"), &params)?;
    render_heatmap(thumbnail, &bag.coords, &values, &params)
}
