//! Patch-level promptable mask prediction.
//!
//! Prompts are grouped per patch, each group (one positive plus its nearest
//! negatives) is sent to a [`MaskPredictor`], and the returned patch masks
//! are lifted to sparse image-space [`Instance`]s.

use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::features::patch_origins;
use crate::grid::{crop_grid, BinaryMask, Grid, RasterImage};
use crate::morphology::{self, Connectivity};
use crate::prompting::PromptSet;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PredictError {
    #[error("invalid patch layout: {0}")]
    Layout(&'static str),
    #[error("seed pixel carries no hematoxylin signal (reference {0:.3e})")]
    EmptyGrowth(f64),
    #[error("prompt ({0}, {1}) lies outside the patch")]
    PromptOutsidePatch(usize, usize),
    #[error("predicted mask is {got:?}, patch is {expected:?}")]
    MaskShape { expected: (usize, usize), got: (usize, usize) },
    #[error("predicted mask is empty")]
    EmptyMask,
    #[error("score {0} is not a finite number")]
    InvalidScore(f64),
    #[error("{0}")]
    Backend(String),
}

fn default_patch_size() -> usize {
    512
}
fn default_overlap() -> f64 {
    0.5
}

/// Square patch tiling for prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct PatchLayout {
    #[cfg_attr(feature = "serde", serde(default = "default_patch_size"))]
    pub patch_size: usize,
    #[cfg_attr(feature = "serde", serde(default = "default_overlap"))]
    pub overlap_ratio: f64,
}

impl Default for PatchLayout {
    fn default() -> Self {
        Self { patch_size: default_patch_size(), overlap_ratio: default_overlap() }
    }
}

/// One patch of a layout in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRect {
    pub index: usize,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchRect {
    pub fn contains(&self, (r, c): (usize, usize)) -> bool {
        r >= self.top && r < self.top + self.height && c >= self.left && c < self.left + self.width
    }

    fn center_dist2(&self, (r, c): (usize, usize)) -> f64 {
        let cr = self.top as f64 + (self.height as f64 - 1.0) / 2.0;
        let cc = self.left as f64 + (self.width as f64 - 1.0) / 2.0;
        (r as f64 - cr) * (r as f64 - cr) + (c as f64 - cc) * (c as f64 - cc)
    }
}

impl PatchLayout {
    pub fn stride(&self) -> usize {
        math_floor(self.patch_size as f64 * (1.0 - self.overlap_ratio))
    }

    pub fn validate(&self) -> Result<(), PredictError> {
        if self.patch_size < 16 {
            return Err(PredictError::Layout("patch size must be at least 16"));
        }
        if !(0.0..1.0).contains(&self.overlap_ratio) {
            return Err(PredictError::Layout("overlap ratio must lie in [0, 1)"));
        }
        if self.stride() < 1 {
            return Err(PredictError::Layout("patch stride rounds to zero"));
        }
        Ok(())
    }

    /// Patches covering a `height × width` image in raster order. Patches
    /// larger than the image are clipped to it.
    pub fn patches(&self, height: usize, width: usize) -> Vec<PatchRect> {
        let ph = self.patch_size.min(height);
        let pw = self.patch_size.min(width);
        let stride = self.stride();
        let mut out = Vec::new();
        for &top in &patch_origins(height, ph, stride.min(ph)) {
            for &left in &patch_origins(width, pw, stride.min(pw)) {
                out.push(PatchRect { index: out.len(), top, left, height: ph, width: pw });
            }
        }
        out
    }
}

fn math_floor(x: f64) -> usize {
    crate::math::floor(x).max(0.0) as usize
}

/// A positive prompt with its attached negatives, in image coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptGroup {
    pub patch: usize,
    /// Position of this group within its patch.
    pub index: usize,
    pub positive: (usize, usize),
    pub negatives: Vec<(usize, usize)>,
}

fn dist2(a: (usize, usize), b: (usize, usize)) -> f64 {
    let dr = a.0 as f64 - b.0 as f64;
    let dc = a.1 as f64 - b.1 as f64;
    dr * dr + dc * dc
}

/// Sends each positive to the containing patch with the nearest centre
/// (ties to the lower index) and attaches its `y` nearest negatives inside
/// that patch. Groups come out ordered by patch, then by input order.
pub fn assign_prompts_to_patches(prompts: &PromptSet, patches: &[PatchRect], y: usize) -> Vec<PromptGroup> {
    let mut per_patch: Vec<Vec<(usize, usize)>> = vec![Vec::new(); patches.len()];
    for &p in &prompts.positives {
        let best = patches
            .iter()
            .filter(|rect| rect.contains(p))
            .map(|rect| (rect.center_dist2(p), rect.index))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if let Some((_, idx)) = best {
            per_patch[idx].push(p);
        }
    }
    let mut groups = Vec::new();
    for (rect, positives) in patches.iter().zip(per_patch) {
        let inside: Vec<(usize, usize)> = prompts.negatives.iter().copied().filter(|&n| rect.contains(n)).collect();
        for (index, positive) in positives.into_iter().enumerate() {
            let mut order: Vec<usize> = (0..inside.len()).collect();
            order.sort_by(|&a, &b| dist2(inside[a], positive).total_cmp(&dist2(inside[b], positive)).then(a.cmp(&b)));
            let negatives = order.into_iter().take(y).map(|k| inside[k]).collect();
            groups.push(PromptGroup { patch: rect.index, index, positive, negatives });
        }
    }
    groups
}

/// Image data handed to a predictor for one patch.
#[derive(Debug, Clone)]
pub struct PatchView<'a> {
    pub image_id: &'a str,
    pub rect: PatchRect,
    pub rgb: RasterImage,
    pub hematoxylin: Grid<f64>,
}

/// A prompt group expressed in patch-local coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalPrompt {
    pub index: usize,
    pub positive: (usize, usize),
    pub negatives: Vec<(usize, usize)>,
}

/// A patch-sized mask with the predictor's confidence in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMask {
    pub mask: BinaryMask,
    pub score: f64,
}

/// A promptable segmenter. Implementations must be deterministic.
pub trait MaskPredictor {
    fn predict(&self, patch: &PatchView<'_>, prompt: &LocalPrompt) -> Result<PatchMask, PredictError>;
}

/// A binary mask stored as its bounding box and a local bitmap.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub top: usize,
    pub left: usize,
    pub mask: BinaryMask,
    pub score: f64,
    /// Patch that produced the mask, if any.
    pub patch: Option<usize>,
    area: usize,
}

impl Instance {
    /// Crops `mask` (already in image coordinates, offset by `top`/`left`)
    /// to its bounding box. Returns `None` for an empty mask.
    pub fn from_mask(mask: &BinaryMask, top: usize, left: usize, score: f64, patch: Option<usize>) -> Option<Self> {
        let (h, w) = mask.shape();
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        for r in 0..h {
            for c in 0..w {
                if *mask.get(r, c) {
                    r0 = r0.min(r);
                    r1 = r1.max(r + 1);
                    c0 = c0.min(c);
                    c1 = c1.max(c + 1);
                }
            }
        }
        if r0 == usize::MAX {
            return None;
        }
        let local = crop_grid(mask, r0, c0, r1 - r0, c1 - c0);
        let area = local.count();
        Some(Self { top: top + r0, left: left + c0, mask: local, score, patch, area })
    }

    pub fn from_pixels(pixels: &[(usize, usize)], score: f64, patch: Option<usize>) -> Option<Self> {
        let r0 = pixels.iter().map(|p| p.0).min()?;
        let c0 = pixels.iter().map(|p| p.1).min()?;
        let r1 = pixels.iter().map(|p| p.0).max()? + 1;
        let c1 = pixels.iter().map(|p| p.1).max()? + 1;
        let mut mask = Grid::filled(r1 - r0, c1 - c0, false);
        for &(r, c) in pixels {
            mask.set(r - r0, c - c0, true);
        }
        let area = mask.count();
        Some(Self { top: r0, left: c0, mask, score, patch, area })
    }

    pub fn area(&self) -> usize {
        self.area
    }

    /// `(top, left, bottom, right)` with exclusive bottom/right.
    pub fn bbox(&self) -> (usize, usize, usize, usize) {
        (self.top, self.left, self.top + self.mask.height(), self.left + self.mask.width())
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        let (t, l, b, rr) = self.bbox();
        r >= t && r < b && c >= l && c < rr && *self.mask.get(r - t, c - l)
    }

    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (h, w) = self.mask.shape();
        (0..h * w).filter(|&i| self.mask.as_slice()[i]).map(move |i| (self.top + i / w, self.left + i % w))
    }

    pub fn intersection(&self, other: &Instance) -> usize {
        let (t0, l0, b0, r0) = self.bbox();
        let (t1, l1, b1, r1) = other.bbox();
        let (t, l, b, r) = (t0.max(t1), l0.max(l1), b0.min(b1), r0.min(r1));
        if t >= b || l >= r {
            return 0;
        }
        let mut n = 0;
        for row in t..b {
            for col in l..r {
                if *self.mask.get(row - t0, col - l0) && *other.mask.get(row - t1, col - l1) {
                    n += 1;
                }
            }
        }
        n
    }

    pub fn iou(&self, other: &Instance) -> f64 {
        let inter = self.intersection(other);
        let union = self.area + other.area - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn bbox_iou(&self, other: &Instance) -> f64 {
        let (t0, l0, b0, r0) = self.bbox();
        let (t1, l1, b1, r1) = other.bbox();
        let ih = b0.min(b1).saturating_sub(t0.max(t1));
        let iw = r0.min(r1).saturating_sub(l0.max(l1));
        let inter = (ih * iw) as f64;
        let union = ((b0 - t0) * (r0 - l0) + (b1 - t1) * (r1 - l1)) as f64 - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Pixel union of several instances; keeps the highest score and the
    /// first instance's patch.
    pub fn union_of(parts: &[&Instance]) -> Instance {
        let t = parts.iter().map(|p| p.bbox().0).min().expect("at least one part");
        let l = parts.iter().map(|p| p.bbox().1).min().unwrap();
        let b = parts.iter().map(|p| p.bbox().2).max().unwrap();
        let r = parts.iter().map(|p| p.bbox().3).max().unwrap();
        let mut mask = Grid::filled(b - t, r - l, false);
        for p in parts {
            for (row, col) in p.pixels() {
                mask.set(row - t, col - l, true);
            }
        }
        let score = parts.iter().map(|p| p.score).fold(f64::NEG_INFINITY, f64::max);
        let area = mask.count();
        Instance { top: t, left: l, mask, score, patch: parts[0].patch, area }
    }

    pub fn to_full(&self, height: usize, width: usize) -> BinaryMask {
        let mut out = Grid::filled(height, width, false);
        for (r, c) in self.pixels() {
            out.set(r, c, true);
        }
        out
    }
}

/// Instances of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InstanceSet {
    pub height: usize,
    pub width: usize,
    pub instances: Vec<Instance>,
}

impl InstanceSet {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, instances: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// One instance per non-zero label, in increasing label order.
    pub fn from_label_map(labels: &Grid<u32>) -> Self {
        let mut pixels: alloc::collections::BTreeMap<u32, Vec<(usize, usize)>> = Default::default();
        for r in 0..labels.height() {
            for c in 0..labels.width() {
                let l = *labels.get(r, c);
                if l != 0 {
                    pixels.entry(l).or_default().push((r, c));
                }
            }
        }
        let instances = pixels.values().filter_map(|p| Instance::from_pixels(p, 1.0, None)).collect();
        Self { height: labels.height(), width: labels.width(), instances }
    }

    /// Rasterizes instances in the given order; each claims only pixels not
    /// already claimed. Labels are `1..=n` in that order.
    pub fn to_label_map(&self) -> Grid<u32> {
        let mut out = Grid::filled(self.height, self.width, 0u32);
        for (k, inst) in self.instances.iter().enumerate() {
            for (r, c) in inst.pixels() {
                if *out.get(r, c) == 0 {
                    out.set(r, c, k as u32 + 1);
                }
            }
        }
        out
    }

    /// Union of all instance pixels.
    pub fn foreground(&self) -> BinaryMask {
        let mut out = Grid::filled(self.height, self.width, false);
        for inst in &self.instances {
            for (r, c) in inst.pixels() {
                out.set(r, c, true);
            }
        }
        out
    }
}

/// A predictor failure for one group, kept for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedGroup {
    pub patch: usize,
    pub index: usize,
    pub reason: PredictError,
}

/// Runs `predictor` on every group and lifts the masks to image space.
/// Failing groups are logged and skipped.
pub fn predict_groups(
    image_id: &str,
    rgb: &RasterImage,
    hematoxylin: &Grid<f64>,
    patches: &[PatchRect],
    groups: &[PromptGroup],
    predictor: &dyn MaskPredictor,
) -> (InstanceSet, Vec<SkippedGroup>) {
    let mut set = InstanceSet::new(rgb.height(), rgb.width());
    let mut skipped = Vec::new();
    let mut start = 0;
    while start < groups.len() {
        let rect = patches[groups[start].patch];
        let end = start + groups[start..].iter().take_while(|g| g.patch == rect.index).count();
        let view = PatchView {
            image_id,
            rect,
            rgb: rgb.crop(rect.top, rect.left, rect.height, rect.width),
            hematoxylin: crop_grid(hematoxylin, rect.top, rect.left, rect.height, rect.width),
        };
        for g in &groups[start..end] {
            let local = |(r, c): (usize, usize)| (r - rect.top, c - rect.left);
            let prompt = LocalPrompt {
                index: g.index,
                positive: local(g.positive),
                negatives: g.negatives.iter().map(|&n| local(n)).collect(),
            };
            let outcome = predictor.predict(&view, &prompt).and_then(|pm| {
                if pm.mask.shape() != (rect.height, rect.width) {
                    return Err(PredictError::MaskShape { expected: (rect.height, rect.width), got: pm.mask.shape() });
                }
                if !pm.score.is_finite() {
                    return Err(PredictError::InvalidScore(pm.score));
                }
                Instance::from_mask(&pm.mask, rect.top, rect.left, pm.score.clamp(0.0, 1.0), Some(rect.index))
                    .ok_or(PredictError::EmptyMask)
            });
            match outcome {
                Ok(inst) => set.instances.push(inst),
                Err(reason) => {
                    log::warn!("{image_id}: skipping prompt {} of patch {}: {reason}", g.index, g.patch);
                    skipped.push(SkippedGroup { patch: g.patch, index: g.index, reason });
                }
            }
        }
        start = end;
    }
    (set, skipped)
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Merges every group of instances linked by a chain of pairwise mask IoU
/// `≥ iou_merge` into its pixel union with the maximum score.
pub fn merge_overlapped(set: &InstanceSet, iou_merge: f64) -> InstanceSet {
    let n = set.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (&set.instances[i], &set.instances[j]);
            if a.bbox_iou(b) > 0.0 && a.iou(b) >= iou_merge {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        let root = find(&mut parent, i);
        groups[root].push(i);
    }
    let instances = groups
        .into_iter()
        .filter(|g| !g.is_empty())
        .map(|g| {
            if g.len() == 1 {
                set.instances[g[0]].clone()
            } else {
                let parts: Vec<&Instance> = g.iter().map(|&i| &set.instances[i]).collect();
                Instance::union_of(&parts)
            }
        })
        .collect();
    InstanceSet { height: set.height, width: set.width, instances }
}

fn default_drop() -> f64 {
    0.5
}
fn default_oracle_separation() -> f64 {
    5.0
}

/// Model-free predictor: region growing on the hematoxylin map from the
/// positive, bounded by the negatives, then split along distance-transform
/// watershed lines so touching nuclei come apart.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct OraclePredictor {
    /// Growth continues while smoothed `s_h ≥ drop · s_ref`.
    #[cfg_attr(feature = "serde", serde(default = "default_drop"))]
    pub drop: f64,
    /// Minimum marker separation for the splitting watershed.
    #[cfg_attr(feature = "serde", serde(default = "default_oracle_separation"))]
    pub min_separation: f64,
}

impl Default for OraclePredictor {
    fn default() -> Self {
        Self { drop: default_drop(), min_separation: default_oracle_separation() }
    }
}

/// Seeds whose reference hematoxylin level is below this grow nothing.
pub const MIN_SEED_LEVEL: f64 = 0.02;

fn box3(map: &Grid<f64>) -> Grid<f64> {
    let (h, w) = map.shape();
    Grid::from_fn(h, w, |r, c| {
        let mut sum = 0.0;
        let mut n = 0.0;
        for rr in r.saturating_sub(1)..(r + 2).min(h) {
            for cc in c.saturating_sub(1)..(c + 2).min(w) {
                sum += map.get(rr, cc);
                n += 1.0;
            }
        }
        sum / n
    })
}

fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    let k = ((v.len() - 1) as f64 * q) as usize;
    let (_, x, _) = v.select_nth_unstable_by(k, |a, b| a.total_cmp(b));
    *x
}

impl OraclePredictor {
    /// The grown region before watershed splitting and negative removal.
    pub fn grow(&self, smooth: &Grid<f64>, prompt: &LocalPrompt) -> Result<BinaryMask, PredictError> {
        let (h, w) = smooth.shape();
        let (sr, sc) = prompt.positive;
        if sr >= h || sc >= w {
            return Err(PredictError::PromptOutsidePatch(sr, sc));
        }
        let mut around = Vec::with_capacity(9);
        for r in sr.saturating_sub(1)..(sr + 2).min(h) {
            for c in sc.saturating_sub(1)..(sc + 2).min(w) {
                around.push(*smooth.get(r, c));
            }
        }
        around.sort_by(|a, b| a.total_cmp(b));
        let s_ref = around[around.len() / 2];
        if !(s_ref >= MIN_SEED_LEVEL) {
            return Err(PredictError::EmptyGrowth(s_ref));
        }
        let floor = self.drop * s_ref;
        let mut blocked = Grid::filled(h, w, false);
        for &(r, c) in &prompt.negatives {
            if r < h && c < w {
                blocked.set(r, c, true);
            }
        }
        let mut region = Grid::filled(h, w, false);
        let mut queue = VecDeque::new();
        region.set(sr, sc, true);
        queue.push_back((sr, sc));
        while let Some((r, c)) = queue.pop_front() {
            let neighbours = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
            for (nr, nc) in neighbours {
                if nr < h && nc < w && !*region.get(nr, nc) && !*blocked.get(nr, nc) && *smooth.get(nr, nc) >= floor {
                    region.set(nr, nc, true);
                    queue.push_back((nr, nc));
                }
            }
        }
        Ok(morphology::fill_holes(&region))
    }
}

impl MaskPredictor for OraclePredictor {
    fn predict(&self, patch: &PatchView<'_>, prompt: &LocalPrompt) -> Result<PatchMask, PredictError> {
        let smooth = box3(&patch.hematoxylin);
        let grown = self.grow(&smooth, prompt)?;
        let (h, w) = grown.shape();
        let (sr, sc) = prompt.positive;

        // Split inside the grown region's bounding box (one pixel of margin).
        let inst = Instance::from_mask(&grown, 0, 0, 0.0, None).ok_or(PredictError::EmptyMask)?;
        let (t, l, b, r) = inst.bbox();
        let (t, l, b, r) = (t.saturating_sub(1), l.saturating_sub(1), (b + 1).min(h), (r + 1).min(w));
        let local = crop_grid(&grown, t, l, b - t, r - l);
        let dist = morphology::distance_transform(&local);
        let elevation = dist.map(|d| -d);
        let mut markers = morphology::local_maxima(&dist, &local, self.min_separation);
        let mut labels = morphology::watershed(&elevation, &markers, &local, Connectivity::Eight);
        if *labels.get(sr - t, sc - l) == 0 {
            // no peak survived in the seed's component
            markers.push((sr - t, sc - l));
            labels = morphology::watershed(&elevation, &markers, &local, Connectivity::Eight);
        }
        let seed_label = *labels.get(sr - t, sc - l);
        let mut mask = Grid::filled(h, w, false);
        for rr in 0..b - t {
            for cc in 0..r - l {
                if *labels.get(rr, cc) == seed_label {
                    mask.set(rr + t, cc + l, true);
                }
            }
        }
        for &(nr, nc) in &prompt.negatives {
            if nr < h && nc < w {
                mask.set(nr, nc, false);
            }
        }
        if !*mask.get(sr, sc) {
            return Err(PredictError::EmptyMask);
        }
        let p99 = percentile(patch.hematoxylin.as_slice(), 0.99);
        let (mut sum, mut n) = (0.0, 0usize);
        for (i, &on) in mask.as_slice().iter().enumerate() {
            if on {
                sum += patch.hematoxylin.as_slice()[i];
                n += 1;
            }
        }
        let score = if p99 > 0.0 { (sum / n as f64 / p99).clamp(0.0, 1.0) } else { 0.0 };
        Ok(PatchMask { mask, score })
    }
}
