//! Running the pipeline over files and directories.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::imageops::FilterType;
use nucseg_core::metrics::{self, EvalReport, ShapeMismatch, Summary};
use nucseg_core::pipeline::{
    self, ConfigError, FeatureSource, PipelineConfig, PredictorSource, Segmentation, Stage, StageObserver,
};
use nucseg_core::predictor::InstanceSet;
use nucseg_core::RasterImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{self, ConfigFileError};
use crate::io::{self, IoError};
use crate::masks::FileMaskPredictor;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    ConfigFile(#[from] ConfigFileError),
    #[error("{image}: {source}")]
    Pipeline { image: String, source: nucseg_core::Error },
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Fs { path: String, source: std::io::Error },
    #[error("no images found in {0}")]
    NoImages(String),
    #[error("missing ground truth for: {}", .0.join(", "))]
    MissingGroundTruth(Vec<String>),
    #[error("no prediction for: {}", .0.join(", "))]
    MissingPrediction(Vec<String>),
    #[error("{stem}: {source}")]
    Shape { stem: String, source: ShapeMismatch },
}

impl RunError {
    /// `true` for problems with the configuration rather than the data.
    pub fn is_config(&self) -> bool {
        match self {
            RunError::Config(_) | RunError::ConfigFile(_) => true,
            RunError::Pipeline { source, .. } => matches!(source, nucseg_core::Error::Config(_)),
            _ => false,
        }
    }
}

fn fs_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Fs { path: path.display().to_string(), source }
}

/// Options that are not part of the pipeline configuration.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Also write the activation stack as `activations.sprt`.
    pub debug_activations: bool,
    /// Resample every input to `n × n` with a Lanczos-3 kernel first.
    pub resize: Option<u32>,
    /// Directory of externally computed feature grids, `<stem>.sprt`.
    pub features: Option<PathBuf>,
    /// Root of externally predicted masks; see [`crate::masks`].
    pub masks: Option<PathBuf>,
    /// Fail when some image has no ground truth.
    pub require_gt: bool,
}

/// Wall time per stage, in seconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub stages: BTreeMap<String, f64>,
    pub total: f64,
}

struct Timer {
    image: String,
    started: Option<Instant>,
    stages: BTreeMap<String, f64>,
}

impl StageObserver for Timer {
    fn enter(&mut self, stage: Stage) {
        crate::trace::record(|| crate::trace::Event::Stage { image: self.image.clone(), stage: stage.name() });
        self.started = Some(Instant::now());
    }

    fn exit(&mut self, stage: Stage) {
        if let Some(t) = self.started.take() {
            *self.stages.entry(stage.name().to_string()).or_default() += t.elapsed().as_secs_f64();
        }
    }
}

/// One entry of `scores.json`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: u32,
    pub score: f64,
}

/// Supported input extensions.
pub const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "tif", "tiff", "bmp"];

fn is_image(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

pub fn stem_of(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Images directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>, RunError> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(fs_err(dir))? {
        let path = entry.map_err(fs_err(dir))?.path();
        if is_image(&path) {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(RunError::NoImages(dir.display().to_string()));
    }
    Ok(out)
}

/// Lanczos-3 resampling to `size × size`.
pub fn resize(image: &RasterImage, size: u32) -> RasterImage {
    let buf: image::RgbImage =
        image::ImageBuffer::from_raw(image.width() as u32, image.height() as u32, image.as_bytes().to_vec())
            .expect("raster buffer matches its shape");
    let out = image::imageops::resize(&buf, size, size, FilterType::Lanczos3);
    RasterImage::new(size as usize, size as usize, 3, out.into_raw())
}

/// Segments one in-memory image.
pub fn segment_image(
    stem: &str,
    image: &RasterImage,
    config: &PipelineConfig,
    options: &RunOptions,
) -> Result<(Segmentation, Timing), RunError> {
    let start = Instant::now();
    let grid = match &options.features {
        Some(dir) => Some(Tensor::read(&dir.join(format!("{stem}.sprt")))?.into_feature_grid_for(image.height(), image.width())?),
        None => None,
    };
    let features = match &grid {
        Some(g) => FeatureSource::Precomputed(g),
        None => FeatureSource::Builtin,
    };
    let file_predictor = options.masks.as_ref().map(FileMaskPredictor::new);
    let predictor = match &file_predictor {
        Some(p) => PredictorSource::Custom(p),
        None => PredictorSource::Oracle,
    };
    let mut timer = Timer { image: stem.to_string(), started: None, stages: BTreeMap::new() };
    let seg = pipeline::segment(stem, image, config, features, predictor, &mut timer)
        .map_err(|source| RunError::Pipeline { image: stem.to_string(), source })?;
    Ok((seg, Timing { stages: timer.stages, total: start.elapsed().as_secs_f64() }))
}

/// Paths written for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageOutput {
    pub stem: String,
    pub dir: PathBuf,
    pub instances: usize,
}

fn write_outputs(
    dir: &Path,
    seg: &Segmentation,
    timing: &Timing,
    config: &PipelineConfig,
    options: &RunOptions,
) -> Result<(), RunError> {
    io::write_json(&dir.join("prompts.json"), &seg.prompts)?;
    io::write_labels(&dir.join("labels.png"), &seg.labels)?;
    let scores: Vec<LabelScore> =
        seg.scores.iter().enumerate().map(|(i, &score)| LabelScore { label: i as u32 + 1, score }).collect();
    io::write_json(&dir.join("scores.json"), &scores)?;
    io::write_json(&dir.join("timing.json"), timing)?;
    crate::trace::write(&dir.join("config.resolved"), config::to_toml(config)?).map_err(fs_err(dir))?;
    if options.debug_activations {
        if let Some(stack) = &seg.activations {
            let (h, w) = stack.shape();
            let d = stack.maps.len();
            let mut data = Vec::with_capacity(h * w * d);
            for i in 0..h * w {
                data.extend(stack.maps.iter().map(|m| m.as_slice()[i] as f32));
            }
            Tensor::new(h, w, d, data)?.write(&dir.join("activations.sprt"))?;
        }
    }
    Ok(())
}

/// Segments `path` and writes `<out>/<stem>/{prompts.json, labels.png,
/// scores.json, timing.json, config.resolved}`. On failure the image's
/// output directory is removed.
pub fn run_image(path: &Path, out: &Path, config: &PipelineConfig, options: &RunOptions) -> Result<ImageOutput, RunError> {
    config.validate()?;
    let stem = stem_of(path);
    let dir = out.join(&stem);
    let result = (|| {
        let mut image = io::read_rgb(path)?;
        if let Some(n) = options.resize {
            image = resize(&image, n);
        }
        let (seg, timing) = segment_image(&stem, &image, config, options)?;
        std::fs::create_dir_all(&dir).map_err(fs_err(&dir))?;
        write_outputs(&dir, &seg, &timing, config, options)?;
        log::info!("{stem}: {} instances in {:.2}s", seg.instances.len(), timing.total);
        Ok(ImageOutput { stem: stem.clone(), dir: dir.clone(), instances: seg.instances.len() })
    })();
    if result.is_err() && dir.exists() {
        let _ = std::fs::remove_dir_all(&dir);
    }
    result
}

/// Per-image metrics in a dataset report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub stem: String,
    pub aji: f64,
    pub dq: f64,
    pub sq: f64,
    pub pq: f64,
    pub dice: f64,
}

impl ImageReport {
    fn new(stem: String, r: &EvalReport) -> Self {
        Self { stem, aji: r.aji, dq: r.dq, sq: r.sq, pq: r.pq, dice: r.dice }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub images: Vec<ImageReport>,
    pub summary: Summary,
}

fn summarize(images: Vec<ImageReport>) -> DatasetReport {
    let reports: Vec<EvalReport> = images
        .iter()
        .map(|r| EvalReport { aji: r.aji, dq: r.dq, sq: r.sq, pq: r.pq, dice: r.dice, matches: Vec::new() })
        .collect();
    DatasetReport { summary: metrics::summarize(&reports), images }
}

/// Scores predicted label maps against ground truth ones.
pub fn evaluate_pair(stem: &str, gt: &Path, pred: &Path) -> Result<ImageReport, RunError> {
    let gt = InstanceSet::from_label_map(&io::read_labels(gt)?);
    let pred = InstanceSet::from_label_map(&io::read_labels(pred)?);
    let r = metrics::evaluate(&gt, &pred).map_err(|source| RunError::Shape { stem: stem.to_string(), source })?;
    Ok(ImageReport::new(stem.to_string(), &r))
}

/// Runs every image of `input` (a directory or a single file) with
/// `config.workers` threads and, when `gt` is given, evaluates against
/// `<gt>/<stem>.png`. The report is also written to `<out>/report.json`.
pub fn run_dataset(
    input: &Path,
    out: &Path,
    gt: Option<&Path>,
    config: &PipelineConfig,
    options: &RunOptions,
) -> Result<Option<DatasetReport>, RunError> {
    config.validate()?;
    let images = if input.is_dir() { list_images(input)? } else { vec![input.to_path_buf()] };
    if let Some(gt) = gt {
        let missing: Vec<String> =
            images.iter().map(|p| stem_of(p)).filter(|s| !gt.join(format!("{s}.png")).is_file()).collect();
        if !missing.is_empty() && options.require_gt {
            return Err(RunError::MissingGroundTruth(missing));
        }
    }
    std::fs::create_dir_all(out).map_err(fs_err(out))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .expect("thread pool with a positive width");
    let outputs: Vec<ImageOutput> =
        pool.install(|| images.par_iter().map(|p| run_image(p, out, config, options)).collect::<Result<_, _>>())?;
    let Some(gt) = gt else {
        return Ok(None);
    };
    let mut reports = Vec::new();
    for o in &outputs {
        let gt_path = gt.join(format!("{}.png", o.stem));
        if gt_path.is_file() {
            reports.push(evaluate_pair(&o.stem, &gt_path, &o.dir.join("labels.png"))?);
        } else {
            log::warn!("{}: no ground truth, skipped in the summary", o.stem);
        }
    }
    let report = summarize(reports);
    io::write_json(&out.join("report.json"), &report)?;
    Ok(Some(report))
}

/// Evaluates `<pred>/<stem>/labels.png` (or `<pred>/<stem>.png`) against
/// every `<gt>/<stem>.png`.
pub fn eval_dirs(pred: &Path, gt: &Path) -> Result<DatasetReport, RunError> {
    let mut reports = Vec::new();
    let mut missing = Vec::new();
    for gt_path in list_images(gt)? {
        let stem = stem_of(&gt_path);
        let nested = pred.join(&stem).join("labels.png");
        let flat = pred.join(format!("{stem}.png"));
        let pred_path = if nested.is_file() { nested } else { flat };
        if !pred_path.is_file() {
            missing.push(stem);
            continue;
        }
        reports.push(evaluate_pair(&stem, &gt_path, &pred_path)?);
    }
    if !missing.is_empty() {
        return Err(RunError::MissingPrediction(missing));
    }
    Ok(summarize(reports))
}
