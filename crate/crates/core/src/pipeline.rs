//! End-to-end orchestration of the segmentation stages for one image.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::Result;
use crate::features::{self, BuiltinProvider, FeatureGrid, FeatureProvider};
use crate::grid::{BinaryMask, Grid, RasterImage};
use crate::ot::{self, OtError, SolverConfig, TransportPlan};
use crate::postprocess::{self, Kept, NmsConfig, NmsConfigError};
use crate::predictor::{self, InstanceSet, MaskPredictor, OraclePredictor, PatchLayout, PredictError, SkippedGroup};
use crate::prompting::{self, ActivationStack, PointConfig, PromptSet, Refiner, Resize, StopConfig};
use crate::stain::{self, CoarseChannel, StainError, StainMatrix};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("`{field}` {reason}")]
    Invalid { field: &'static str, reason: &'static str },
    #[error("stain matrix: {0}")]
    Stain(#[from] StainError),
    #[error("solver: {0}")]
    Solver(#[from] OtError),
    #[error(transparent)]
    Nms(#[from] NmsConfigError),
    #[error("patch layout: {0}")]
    Layout(#[from] PredictError),
}

fn invalid(field: &'static str, reason: &'static str) -> ConfigError {
    ConfigError::Invalid { field, reason }
}

#[cfg(feature = "serde")]
mod defaults {
    pub fn ratio() -> f64 {
        0.6
    }
    pub fn min_signal() -> f64 {
        0.1
    }
    pub fn histogram_bins() -> usize {
        256
    }
    pub fn patch_size() -> usize {
        128
    }
    pub fn stride() -> usize {
        64
    }
    pub fn cell() -> usize {
        4
    }
    pub fn prototypes() -> usize {
        3
    }
    pub fn rho0() -> f64 {
        0.6
    }
    pub fn rho_stride() -> f64 {
        0.05
    }
    pub fn negatives() -> usize {
        2
    }
    pub fn iou_merge() -> f64 {
        0.8
    }
    pub fn workers() -> usize {
        4
    }
}

/// Stain model and self-reference masks.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct StainConfig {
    #[cfg_attr(feature = "serde", serde(default))]
    pub matrix: StainMatrix,
    /// Fraction `t` of each coarse region kept as high confidence.
    #[cfg_attr(feature = "serde", serde(default = "defaults::ratio"))]
    pub ratio: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub coarse_channel: CoarseChannel,
    #[cfg_attr(feature = "serde", serde(default = "defaults::histogram_bins"))]
    pub histogram_bins: usize,
    /// Images whose peak hematoxylin concentration stays below this are
    /// treated as containing no nuclei.
    #[cfg_attr(feature = "serde", serde(default = "defaults::min_signal"))]
    pub min_signal: f64,
}

impl Default for StainConfig {
    fn default() -> Self {
        Self {
            matrix: StainMatrix::default(),
            ratio: 0.6,
            coarse_channel: CoarseChannel::default(),
            histogram_bins: 256,
            min_signal: 0.1,
        }
    }
}

/// Feature stitching geometry and prototype count.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct FeatureConfig {
    #[cfg_attr(feature = "serde", serde(default = "defaults::patch_size"))]
    pub patch_size: usize,
    #[cfg_attr(feature = "serde", serde(default = "defaults::stride"))]
    pub stride: usize,
    /// Pixels per feature cell side for the built-in provider.
    #[cfg_attr(feature = "serde", serde(default = "defaults::cell"))]
    pub cell: usize,
    /// Prototypes per class, `K`.
    #[cfg_attr(feature = "serde", serde(default = "defaults::prototypes"))]
    pub prototypes: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { patch_size: 128, stride: 64, cell: 4, prototypes: 3 }
    }
}

/// Progressive ρ scan.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct ScanConfig {
    #[cfg_attr(feature = "serde", serde(default = "defaults::rho0"))]
    pub rho0: f64,
    #[cfg_attr(feature = "serde", serde(default = "defaults::rho_stride"))]
    pub stride: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub stop: StopConfig,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self { rho0: 0.6, stride: 0.05, stop: StopConfig::default() }
    }
}

/// Activation maps and point prompts.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct PromptConfig {
    #[cfg_attr(feature = "serde", serde(default))]
    pub resize: Resize,
    #[cfg_attr(feature = "serde", serde(default))]
    pub refiner: Refiner,
    #[cfg_attr(feature = "serde", serde(default))]
    pub points: PointConfig,
}

/// Patch-level prediction and overlap merging.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct PredictorConfig {
    #[cfg_attr(feature = "serde", serde(default))]
    pub layout: PatchLayout,
    /// Negatives attached to each positive, `y`.
    #[cfg_attr(feature = "serde", serde(default = "defaults::negatives"))]
    pub negatives: usize,
    #[cfg_attr(feature = "serde", serde(default = "defaults::iou_merge"))]
    pub iou_merge: f64,
    /// Parameters of the built-in model-free predictor.
    #[cfg_attr(feature = "serde", serde(default))]
    pub oracle: OraclePredictor,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self { layout: PatchLayout::default(), negatives: 2, iou_merge: 0.8, oracle: OraclePredictor::default() }
    }
}

/// Every tunable of a run. Unknown keys are rejected when deserializing.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct PipelineConfig {
    #[cfg_attr(feature = "serde", serde(default))]
    pub stain: StainConfig,
    #[cfg_attr(feature = "serde", serde(default))]
    pub features: FeatureConfig,
    #[cfg_attr(feature = "serde", serde(default))]
    pub solver: SolverConfig,
    #[cfg_attr(feature = "serde", serde(default))]
    pub scan: ScanConfig,
    #[cfg_attr(feature = "serde", serde(default))]
    pub prompts: PromptConfig,
    #[cfg_attr(feature = "serde", serde(default))]
    pub predictor: PredictorConfig,
    #[cfg_attr(feature = "serde", serde(default))]
    pub nms: NmsConfig,
    #[cfg_attr(feature = "serde", serde(default))]
    pub seed: u64,
    /// Images processed concurrently by dataset runs.
    #[cfg_attr(feature = "serde", serde(default = "defaults::workers"))]
    pub workers: usize,
    /// Use the last scan plan even if the solver hit `max_iters`.
    #[cfg_attr(feature = "serde", serde(default))]
    pub allow_unconverged: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stain: StainConfig::default(),
            features: FeatureConfig::default(),
            solver: SolverConfig::default(),
            scan: ScanConfig::default(),
            prompts: PromptConfig::default(),
            predictor: PredictorConfig::default(),
            nms: NmsConfig::default(),
            seed: 0,
            workers: 4,
            allow_unconverged: false,
        }
    }
}

impl PipelineConfig {
    /// Checks every section; called before any pixel is touched.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.stain;
        let m = StainMatrix::new(s.matrix.hematoxylin, s.matrix.eosin, s.matrix.reference_intensity)?;
        m.pseudoinverse()?;
        if !(s.ratio > 0.0 && s.ratio <= 1.0) {
            return Err(invalid("stain.ratio", "must lie in (0, 1]"));
        }
        if s.histogram_bins < 2 {
            return Err(invalid("stain.histogram_bins", "must be at least 2"));
        }
        if !(s.min_signal >= 0.0 && s.min_signal.is_finite()) {
            return Err(invalid("stain.min_signal", "must be finite and non-negative"));
        }
        let f = &self.features;
        if f.cell == 0 || f.patch_size == 0 || f.stride == 0 {
            return Err(invalid("features", "patch_size, stride and cell must be positive"));
        }
        if f.stride > f.patch_size {
            return Err(invalid("features.stride", "must not exceed patch_size"));
        }
        if f.patch_size % f.cell != 0 {
            return Err(invalid("features.cell", "must divide patch_size"));
        }
        if f.prototypes == 0 {
            return Err(invalid("features.prototypes", "must be at least 1"));
        }
        self.solver.validate()?;
        let sc = &self.scan;
        if !(sc.rho0 > 0.0 && sc.rho0 < 1.0) {
            return Err(invalid("scan.rho0", "must lie in (0, 1)"));
        }
        if !(sc.stride > 0.0 && sc.stride.is_finite()) {
            return Err(invalid("scan.stride", "must be positive"));
        }
        if !(sc.stop.area_cap > 0.0 && sc.stop.area_cap <= 1.0) {
            return Err(invalid("scan.stop.area_cap", "must lie in (0, 1]"));
        }
        if sc.stop.merge_k == 0 {
            return Err(invalid("scan.stop.merge_k", "must be at least 1"));
        }
        let p = &self.prompts;
        if let Refiner::Gaussian { sigma } = p.refiner {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(invalid("prompts.refiner.sigma", "must be positive"));
            }
        }
        if p.points.negative_stride == 0 {
            return Err(invalid("prompts.points.negative_stride", "must be positive"));
        }
        if !(p.points.min_separation >= 0.0 && p.points.negative_margin >= 0.0) {
            return Err(invalid("prompts.points", "distances must be non-negative"));
        }
        let pr = &self.predictor;
        pr.layout.validate()?;
        if !(pr.iou_merge > 0.0 && pr.iou_merge <= 1.0) {
            return Err(invalid("predictor.iou_merge", "must lie in (0, 1]"));
        }
        if !(pr.oracle.drop > 0.0 && pr.oracle.drop <= 1.0) {
            return Err(invalid("predictor.oracle.drop", "must lie in (0, 1]"));
        }
        self.nms.validate()?;
        if self.workers == 0 {
            return Err(invalid("workers", "must be at least 1"));
        }
        Ok(())
    }
}

/// Pipeline stages, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Stain,
    Features,
    Prototypes,
    Transport,
    Prompts,
    Prediction,
    Postprocess,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Stain,
        Stage::Features,
        Stage::Prototypes,
        Stage::Transport,
        Stage::Prompts,
        Stage::Prediction,
        Stage::Postprocess,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Stain => "stain",
            Stage::Features => "features",
            Stage::Prototypes => "prototypes",
            Stage::Transport => "transport",
            Stage::Prompts => "prompts",
            Stage::Prediction => "prediction",
            Stage::Postprocess => "postprocess",
        }
    }
}

/// Hooks called around every stage, e.g. for timing.
pub trait StageObserver {
    fn enter(&mut self, _stage: Stage) {}
    fn exit(&mut self, _stage: Stage) {}
}

/// Observer that does nothing.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoObserver;

impl StageObserver for NoObserver {}

/// Where the feature grid comes from.
#[derive(Clone, Copy)]
pub enum FeatureSource<'a> {
    /// The built-in colour and texture descriptor.
    Builtin,
    Provider(&'a dyn FeatureProvider),
    /// A grid computed elsewhere, e.g. read from a tensor file.
    Precomputed(&'a FeatureGrid),
}

/// Which mask predictor to run.
#[derive(Clone, Copy)]
pub enum PredictorSource<'a> {
    /// [`OraclePredictor`] with the configured parameters.
    Oracle,
    Custom(&'a dyn MaskPredictor),
}

/// Summary of the ρ scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanReport {
    pub schedule: Vec<f64>,
    /// ρ of the plan that produced the prompts.
    pub rho: f64,
    pub fired_at_start: bool,
    pub converged: bool,
    pub iterations: usize,
}

/// Everything one image produces.
#[derive(Debug, Clone)]
pub struct Segmentation {
    pub image_id: String,
    /// Final instances in descending score order.
    pub instances: InstanceSet,
    /// Final score of each entry of `instances`.
    pub scores: Vec<f64>,
    /// Label `k` belongs to `instances[k - 1]`; earlier instances claim
    /// shared pixels first.
    pub labels: Grid<u32>,
    pub prompts: PromptSet,
    pub skipped: Vec<SkippedGroup>,
    /// `None` when the image had no hematoxylin signal.
    pub scan: Option<ScanReport>,
    pub activations: Option<ActivationStack>,
}

impl Segmentation {
    fn empty(image_id: &str, height: usize, width: usize) -> Self {
        Self {
            image_id: image_id.to_string(),
            instances: InstanceSet::new(height, width),
            scores: Vec::new(),
            labels: Grid::filled(height, width, 0),
            prompts: PromptSet { image_id: image_id.to_string(), ..PromptSet::default() },
            skipped: Vec::new(),
            scan: None,
            activations: None,
        }
    }
}

struct Observed<'a> {
    inner: &'a mut dyn StageObserver,
}

impl Observed<'_> {
    fn run<T>(&mut self, stage: Stage, f: impl FnOnce() -> T) -> T {
        self.inner.enter(stage);
        let out = f();
        self.inner.exit(stage);
        out
    }
}

struct Probed {
    stack: ActivationStack,
    fg: BinaryMask,
    bg: BinaryMask,
}

/// Runs every stage on one RGB image.
///
/// An image without hematoxylin signal yields an empty segmentation rather
/// than an error.
pub fn segment(
    image_id: &str,
    image: &RasterImage,
    config: &PipelineConfig,
    features: FeatureSource<'_>,
    predictor: PredictorSource<'_>,
    observer: &mut dyn StageObserver,
) -> Result<Segmentation> {
    config.validate()?;
    let (h, w) = (image.height(), image.width());
    let mut obs = Observed { inner: observer };
    let stains = StainMatrix::new(
        config.stain.matrix.hematoxylin,
        config.stain.matrix.eosin,
        config.stain.matrix.reference_intensity,
    )?;

    let masks = obs.run(Stage::Stain, || -> Result<_> {
        let maps = stain::stain_maps(image, &stains)?;
        let peak = maps.hematoxylin.as_slice().iter().fold(0.0f64, |a, &b| a.max(b));
        if peak < config.stain.min_signal {
            return Ok(None);
        }
        let (m_fg, m_bg) = match stain::high_confidence_masks(
            &maps,
            config.stain.ratio,
            config.stain.coarse_channel,
            config.stain.histogram_bins,
        ) {
            Ok(m) => m,
            Err(StainError::NoSeparatingThreshold | StainError::EmptyCoarseRegion(_)) => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        Ok(Some((maps, m_fg, m_bg)))
    })?;
    let Some((maps, m_fg, m_bg)) = masks else {
        log::info!("{image_id}: no hematoxylin signal, emitting an empty segmentation");
        return Ok(Segmentation::empty(image_id, h, w));
    };

    let grid = obs.run(Stage::Features, || -> Result<FeatureGrid> {
        let fc = &config.features;
        let (patch, stride) = (fc.patch_size.min(h).min(w), fc.stride.min(fc.patch_size.min(h).min(w)));
        Ok(match features {
            FeatureSource::Builtin => {
                let provider = BuiltinProvider::new(fc.cell, &stains)?;
                features::encode_stitched(image, &provider, patch, stride)?
            }
            FeatureSource::Provider(p) => features::encode_stitched(image, p, patch, stride)?,
            FeatureSource::Precomputed(g) => {
                if g.height() * g.cell() > h || g.width() * g.cell() > w {
                    return Err(features::FeatureError::Geometry("precomputed grid exceeds the image").into());
                }
                g.clone()
            }
        })
    })?;

    let prototypes = obs.run(Stage::Prototypes, || -> Result<_> {
        let (gh, gw, cell) = (grid.height(), grid.width(), grid.cell());
        let fg_small = features::resize_mask_to_grid(&m_fg, gh, gw, cell);
        let bg_small = features::resize_mask_to_grid(&m_bg, gh, gw, cell);
        Ok(features::extract_prototypes(&grid, &fg_small, &bg_small, config.features.prototypes, config.seed)?)
    })?;

    let (chosen, scan) = obs.run(Stage::Transport, || -> Result<_> {
        let cost = ot::cosine_cost(grid.as_slice(), prototypes.as_slice(), grid.dim())?;
        let fg_columns = prototypes.k_per_class();
        let mut prev_components = 0usize;
        let mut failure: Option<crate::Error> = None;
        let mut accepted: Option<Probed> = None;
        let mut first: Option<Probed> = None;
        let mut probe = |plan: &TransportPlan| -> bool {
            let probed = project(&grid, plan, fg_columns, h, w, config).map(|(stack, fg, bg)| Probed { stack, fg, bg });
            let probed = match probed {
                Ok(p) => p,
                Err(e) => {
                    failure = Some(e);
                    return true;
                }
            };
            let reading = prompting::merge_stop_probe(&probed.fg, prev_components, &config.scan.stop);
            log::debug!(
                "{image_id}: rho {:.3} gives {} components, largest {}",
                plan.rho,
                reading.components,
                reading.largest
            );
            prev_components = reading.components;
            if reading.fired {
                if accepted.is_none() {
                    first = Some(probed);
                }
                return true;
            }
            accepted = Some(probed);
            false
        };
        let outcome = ot::pot_scan(&cost, config.scan.rho0, config.scan.stride, &mut probe, &config.solver)?;
        if let Some(e) = failure {
            return Err(e);
        }
        let chosen = if outcome.fired_at_start { first } else { accepted }.expect("the scan probes every plan");
        let report = ScanReport {
            rho: outcome.plan.rho,
            converged: outcome.plan.converged(),
            iterations: outcome.plan.coupling.iterations,
            schedule: outcome.schedule,
            fired_at_start: outcome.fired_at_start,
        };
        Ok((chosen, report))
    })?;

    let prompts = obs.run(Stage::Prompts, || {
        let pc = &config.prompts.points;
        let exclude = chosen.fg.union(&m_fg);
        let region = if pc.union_high_confidence { exclude.clone() } else { chosen.fg.clone() };
        PromptSet {
            image_id: image_id.to_string(),
            positives: prompting::positive_points(&region, pc.min_separation, pc.min_area),
            negatives: prompting::negative_points(&chosen.bg, &exclude, pc.negative_stride, pc.negative_margin),
        }
    });

    let (candidates, skipped) = obs.run(Stage::Prediction, || {
        let pr = &config.predictor;
        let patches = pr.layout.patches(h, w);
        let groups = predictor::assign_prompts_to_patches(&prompts, &patches, pr.negatives);
        let oracle = pr.oracle;
        let model: &dyn MaskPredictor = match predictor {
            PredictorSource::Oracle => &oracle,
            PredictorSource::Custom(p) => p,
        };
        let (set, skipped) = predictor::predict_groups(image_id, image, &maps.hematoxylin, &patches, &groups, model);
        (predictor::merge_overlapped(&set, pr.iou_merge), skipped)
    });

    let (instances, scores) = obs.run(Stage::Postprocess, || {
        let unified = postprocess::unified_scores(&candidates, &maps.hematoxylin, config.nms.score_mode);
        let kept: Vec<Kept> = postprocess::containment_soft_nms(&candidates, &unified, &config.nms);
        let instances = postprocess::kept_instances(&candidates, &kept);
        let mut scores: Vec<f64> = kept.iter().map(|k| k.score).collect();
        scores.sort_by(|a, b| b.total_cmp(a));
        (instances, scores)
    });
    let labels = instances.to_label_map();

    Ok(Segmentation {
        image_id: image_id.to_string(),
        instances,
        scores,
        labels,
        prompts,
        skipped,
        scan: Some(scan),
        activations: Some(chosen.stack),
    })
}

fn project(
    grid: &FeatureGrid,
    plan: &TransportPlan,
    fg_columns: usize,
    h: usize,
    w: usize,
    config: &PipelineConfig,
) -> Result<(ActivationStack, BinaryMask, BinaryMask)> {
    let stack = prompting::reweight_and_project(
        grid,
        plan,
        fg_columns,
        h,
        w,
        config.prompts.resize,
        &config.prompts.refiner,
        config.allow_unconverged,
    )?;
    let (fg, bg) = prompting::aggregate_and_binarize(&stack)?;
    Ok((stack, fg, bg))
}
