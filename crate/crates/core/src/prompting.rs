//! Activation maps from a transport plan, their binarization, point
//! prompts and the merge probe that stops the ρ scan.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::features::FeatureGrid;
use crate::grid::{BinaryMask, Grid};
use crate::math;
use crate::morphology::{self, Connectivity};
use crate::ot::TransportPlan;
use crate::stain::{otsu_binarize, StainError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PromptError {
    #[error("transport plan did not converge")]
    Unconverged,
    #[error("plan has {plan} rows but the feature grid has {cells} cells")]
    PlanShape { plan: usize, cells: usize },
    #[error("activation stack needs at least one foreground and one background channel")]
    MissingClass,
    #[error("aggregated activation is zero everywhere")]
    AllZero,
    #[error("mask shape {got:?} does not match {expected:?}")]
    Shape { expected: (usize, usize), got: (usize, usize) },
    #[error(transparent)]
    Stain(#[from] StainError),
}

/// Upsampling from the feature grid to pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum Resize {
    #[default]
    Bilinear,
    Nearest,
}

/// Post-upsampling smoothing of each activation channel.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)
)]
pub enum Refiner {
    #[default]
    Identity,
    Gaussian { sigma: f64 },
}

impl Refiner {
    pub fn apply(&self, map: &Grid<f64>) -> Grid<f64> {
        match *self {
            Refiner::Identity => map.clone(),
            Refiner::Gaussian { sigma } => gaussian_blur(map, sigma),
        }
    }
}

/// Separable Gaussian blur with edge clamping and a `⌈3σ⌉` radius.
pub fn gaussian_blur(map: &Grid<f64>, sigma: f64) -> Grid<f64> {
    if !(sigma > 0.0) {
        return map.clone();
    }
    let radius = math::ceil(3.0 * sigma) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|d| math::exp(-((d * d) as f64) / (2.0 * sigma * sigma))).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = map.shape();
    let pass = |src: &Grid<f64>, horizontal: bool| {
        Grid::from_fn(h, w, |r, c| {
            kernel
                .iter()
                .enumerate()
                .map(|(t, &k)| {
                    let d = t as isize - radius;
                    let (rr, cc) = if horizontal {
                        (r, (c as isize + d).clamp(0, w as isize - 1) as usize)
                    } else {
                        ((r as isize + d).clamp(0, h as isize - 1) as usize, c)
                    };
                    k * src.get(rr, cc)
                })
                .sum()
        })
    };
    pass(&pass(map, true), false)
}

/// Per-prototype activation maps at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStack {
    /// Channel maps; the first `foreground` channels are foreground.
    pub maps: Vec<Grid<f64>>,
    pub foreground: usize,
}

impl ActivationStack {
    pub fn shape(&self) -> (usize, usize) {
        self.maps[0].shape()
    }

    pub fn is_foreground(&self, channel: usize) -> bool {
        channel < self.foreground
    }
}

/// Resamples a cell grid to `height × width` pixels; each cell spans
/// `cell × cell` pixels from the origin and samples beyond the grid clamp.
pub fn upsample(grid: &Grid<f64>, cell: usize, height: usize, width: usize, mode: Resize) -> Grid<f64> {
    let (gh, gw) = grid.shape();
    let scale = cell as f64;
    match mode {
        Resize::Nearest => Grid::from_fn(height, width, |r, c| *grid.get((r / cell).min(gh - 1), (c / cell).min(gw - 1))),
        Resize::Bilinear => {
            let coord = |p: usize, n: usize| {
                let x = ((p as f64 + 0.5) / scale - 0.5).clamp(0.0, (n - 1) as f64);
                let i0 = math::floor(x) as usize;
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, x - i0 as f64)
            };
            Grid::from_fn(height, width, |r, c| {
                let (r0, r1, fy) = coord(r, gh);
                let (c0, c1, fx) = coord(c, gw);
                let top = grid.get(r0, c0) * (1.0 - fx) + grid.get(r0, c1) * fx;
                let bottom = grid.get(r1, c0) * (1.0 - fx) + grid.get(r1, c1) * fx;
                top * (1.0 - fy) + bottom * fy
            })
        }
    }
}

/// `activation_k(cell) = ‖F(cell)‖ · T(cell, k)` for every real column,
/// upsampled to `height × width` and refined. The slack column is dropped.
#[allow(clippy::too_many_arguments)]
pub fn reweight_and_project(
    features: &FeatureGrid,
    plan: &TransportPlan,
    foreground_columns: usize,
    height: usize,
    width: usize,
    resize: Resize,
    refiner: &Refiner,
    allow_unconverged: bool,
) -> Result<ActivationStack, PromptError> {
    if !plan.converged() && !allow_unconverged {
        return Err(PromptError::Unconverged);
    }
    if plan.rows() != features.cells() {
        return Err(PromptError::PlanShape { plan: plan.rows(), cells: features.cells() });
    }
    let m = plan.targets();
    if foreground_columns == 0 || foreground_columns >= m {
        return Err(PromptError::MissingClass);
    }
    let norms: Vec<f64> =
        (0..features.cells()).map(|i| math::sqrt(features.row(i).iter().map(|v| v * v).sum())).collect();
    let maps = (0..m)
        .map(|k| {
            let cells = Grid::from_fn(features.height(), features.width(), |r, c| {
                let i = r * features.width() + c;
                norms[i] * plan.get(i, k)
            });
            refiner.apply(&upsample(&cells, features.cell(), height, width, resize))
        })
        .collect();
    Ok(ActivationStack { maps, foreground: foreground_columns })
}

const OTSU_BINS: usize = 256;

fn binarize_channel(values: &[f64]) -> Result<Vec<bool>, PromptError> {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi <= 0.0 {
        return Ok(vec![false; values.len()]);
    }
    if lo == hi {
        return Ok(vec![true; values.len()]);
    }
    Ok(otsu_binarize(values, OTSU_BINS)?)
}

/// Sums the channels of each class and binarizes both sums with Otsu.
/// Pixels claimed by both classes go to whichever has the larger
/// max-normalized activation, foreground on ties.
pub fn aggregate_and_binarize(stack: &ActivationStack) -> Result<(BinaryMask, BinaryMask), PromptError> {
    if stack.foreground == 0 || stack.foreground >= stack.maps.len() {
        return Err(PromptError::MissingClass);
    }
    let (h, w) = stack.shape();
    let mut fg = vec![0.0; h * w];
    let mut bg = vec![0.0; h * w];
    for (k, map) in stack.maps.iter().enumerate() {
        let acc = if stack.is_foreground(k) { &mut fg } else { &mut bg };
        for (a, v) in acc.iter_mut().zip(map.as_slice()) {
            *a += v;
        }
    }
    if fg.iter().chain(&bg).all(|&v| v <= 0.0) {
        return Err(PromptError::AllZero);
    }
    let fg_on = binarize_channel(&fg)?;
    let bg_on = binarize_channel(&bg)?;
    let max_fg = fg.iter().cloned().fold(0.0, f64::max);
    let max_bg = bg.iter().cloned().fold(0.0, f64::max);
    let mut fg_map = Grid::from_vec(h, w, fg_on);
    let mut bg_map = Grid::from_vec(h, w, bg_on);
    for i in 0..h * w {
        if fg_map.as_slice()[i] && bg_map.as_slice()[i] {
            let nf = fg[i] / max_fg;
            let nb = bg[i] / max_bg;
            if nf >= nb {
                bg_map.as_mut_slice()[i] = false;
            } else {
                fg_map.as_mut_slice()[i] = false;
            }
        }
    }
    Ok((fg_map, bg_map))
}

fn default_min_separation() -> f64 {
    5.0
}
fn default_min_area() -> usize {
    10
}
fn default_negative_stride() -> usize {
    32
}
fn default_negative_margin() -> f64 {
    5.0
}
#[cfg(feature = "serde")]
fn default_true() -> bool {
    true
}

/// Point-placement parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct PointConfig {
    /// Minimum distance between watershed markers, in pixels.
    #[cfg_attr(feature = "serde", serde(default = "default_min_separation"))]
    pub min_separation: f64,
    /// Watershed regions smaller than this emit no positive.
    #[cfg_attr(feature = "serde", serde(default = "default_min_area"))]
    pub min_area: usize,
    #[cfg_attr(feature = "serde", serde(default = "default_negative_stride"))]
    pub negative_stride: usize,
    #[cfg_attr(feature = "serde", serde(default = "default_negative_margin"))]
    pub negative_margin: f64,
    /// Add the high-confidence foreground mask to the activation foreground
    /// before placing positives.
    #[cfg_attr(feature = "serde", serde(default = "default_true"))]
    pub union_high_confidence: bool,
}

impl Default for PointConfig {
    fn default() -> Self {
        Self {
            min_separation: default_min_separation(),
            min_area: default_min_area(),
            negative_stride: default_negative_stride(),
            negative_margin: default_negative_margin(),
            union_high_confidence: true,
        }
    }
}

/// Positive and negative point prompts in `(row, col)` pixel coordinates.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct PromptSet {
    pub image_id: String,
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

/// Watershed basins of the inverted distance transform of `region`, with
/// regions below `min_area` dropped. Returns the label grid and the number
/// of labels; every retained label is non-empty.
pub fn split_regions(region: &BinaryMask, min_separation: f64, min_area: usize) -> (Grid<u32>, usize) {
    let dist = morphology::distance_transform(region);
    let mut markers = morphology::local_maxima(&dist, region, min_separation);
    // A component whose peaks were all thinned away by a stronger peak
    // across a gap still needs a marker of its own.
    let comps = morphology::connected_components(region, Connectivity::Eight);
    let mut seeded = vec![false; comps.count() + 1];
    for &(r, c) in &markers {
        seeded[*comps.labels.get(r, c) as usize] = true;
    }
    let mut best: Vec<Option<(f64, usize, usize)>> = vec![None; comps.count() + 1];
    for r in 0..region.height() {
        for c in 0..region.width() {
            let l = *comps.labels.get(r, c) as usize;
            if l == 0 || seeded[l] {
                continue;
            }
            let d = *dist.get(r, c);
            if best[l].is_none_or(|(bd, _, _)| d > bd) {
                best[l] = Some((d, r, c));
            }
        }
    }
    markers.extend(best.into_iter().flatten().map(|(_, r, c)| (r, c)));
    let elevation = dist.map(|d| -d);
    let labels = morphology::watershed(&elevation, &markers, region, Connectivity::Eight);
    let mut area = vec![0usize; markers.len() + 1];
    for &l in labels.as_slice() {
        area[l as usize] += 1;
    }
    let mut remap = vec![0u32; markers.len() + 1];
    let mut next = 0u32;
    for l in 1..=markers.len() {
        if area[l] >= min_area.max(1) {
            next += 1;
            remap[l] = next;
        }
    }
    (labels.map(|&l| remap[l as usize]), next as usize)
}

/// One positive per watershed region, at the region centroid or the
/// nearest in-region pixel when the centroid falls outside.
pub fn positive_points(region: &BinaryMask, min_separation: f64, min_area: usize) -> Vec<(usize, usize)> {
    let (labels, n) = split_regions(region, min_separation, min_area);
    let centroids = morphology::label_centroids(&labels, n);
    let mut best: Vec<(f64, usize, usize)> = vec![(f64::INFINITY, 0, 0); n];
    for r in 0..labels.height() {
        for c in 0..labels.width() {
            let l = *labels.get(r, c) as usize;
            if l == 0 {
                continue;
            }
            let (cr, cc) = centroids[l - 1].expect("retained labels are non-empty");
            let d = (r as f64 - cr) * (r as f64 - cr) + (c as f64 - cc) * (c as f64 - cc);
            if d < best[l - 1].0 {
                best[l - 1] = (d, r, c);
            }
        }
    }
    best.into_iter().map(|(_, r, c)| (r, c)).collect()
}

/// Lattice points every `stride` pixels (from the origin) inside `bg_map`
/// dilated by `margin` and outside `exclude`.
pub fn negative_points(bg_map: &BinaryMask, exclude: &BinaryMask, stride: usize, margin: f64) -> Vec<(usize, usize)> {
    assert!(stride > 0, "negative stride must be positive");
    let allowed = morphology::dilate_disk(bg_map, margin);
    let mut out = Vec::new();
    for r in (0..bg_map.height()).step_by(stride) {
        for c in (0..bg_map.width()).step_by(stride) {
            if *allowed.get(r, c) && !*exclude.get(r, c) {
                out.push((r, c));
            }
        }
    }
    out
}

fn default_merge_k() -> usize {
    2
}
fn default_area_cap() -> f64 {
    0.2
}

/// Thresholds of the component-merge stop probe.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct StopConfig {
    /// Minimum drop in the component count between steps.
    #[cfg_attr(feature = "serde", serde(default = "default_merge_k"))]
    pub merge_k: usize,
    /// Largest-component area, as a fraction of the image, that must be exceeded.
    #[cfg_attr(feature = "serde", serde(default = "default_area_cap"))]
    pub area_cap: f64,
}

impl Default for StopConfig {
    fn default() -> Self {
        Self { merge_k: default_merge_k(), area_cap: default_area_cap() }
    }
}

/// Result of one probe evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeReading {
    pub fired: bool,
    pub components: usize,
    pub largest: usize,
}

/// Fires when the 8-connected component count fell by at least `merge_k`
/// since the previous step and the largest component exceeds
/// `area_cap · H · W`. A previous count of zero never fires.
pub fn merge_stop_probe(fg_map: &BinaryMask, prev_components: usize, config: &StopConfig) -> ProbeReading {
    let comps = morphology::connected_components(fg_map, Connectivity::Eight);
    let count = comps.count();
    let largest = comps.largest_area();
    let dropped = prev_components > 0 && prev_components >= count + config.merge_k;
    let big = largest as f64 > config.area_cap * fg_map.len() as f64;
    ProbeReading { fired: dropped && big, components: count, largest }
}

/// Checks that a mask has the expected shape.
pub fn ensure_shape(mask: &BinaryMask, expected: (usize, usize)) -> Result<(), PromptError> {
    if mask.shape() != expected {
        return Err(PromptError::Shape { expected, got: mask.shape() });
    }
    Ok(())
}
