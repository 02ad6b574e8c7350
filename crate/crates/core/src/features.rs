//! Dense feature grids and class prototypes.
//!
//! Features come from a [`FeatureProvider`] applied to overlapping square
//! patches; overlapping cells are averaged into one [`FeatureGrid`].
//! Prototypes are K-means centroids of the cells under the high-confidence
//! foreground and background masks.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grid::{BinaryMask, Grid, RasterImage};
use crate::math;
use crate::stain::{to_optical_density, StainError, StainMatrix};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FeatureError {
    #[error("invalid patch geometry: {0}")]
    Geometry(&'static str),
    #[error("provider returned {got} values, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("feature grid contains a non-finite value")]
    NonFinite,
    #[error("mask shape {mask:?} does not match feature grid {grid:?}")]
    MaskShape { mask: (usize, usize), grid: (usize, usize) },
    #[error("{class} mask covers {available} feature cells, need at least k = {k}")]
    TooFewCells { class: &'static str, available: usize, k: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("{0} prototype collapsed to the zero vector")]
    ZeroPrototype(&'static str),
    #[error(transparent)]
    Stain(#[from] StainError),
}

/// `h × w × d` embedding grid. Each cell covers a `cell × cell` pixel block
/// starting at the image origin.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    dim: usize,
    cell: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, dim: usize, cell: usize, data: Vec<f64>) -> Result<Self, FeatureError> {
        if height == 0 || width == 0 {
            return Err(FeatureError::Geometry("feature grid must have at least one cell"));
        }
        if dim < 2 {
            return Err(FeatureError::Geometry("feature dimension must be at least 2"));
        }
        if cell == 0 {
            return Err(FeatureError::Geometry("cell size must be positive"));
        }
        if data.len() != height * width * dim {
            return Err(FeatureError::DimensionMismatch { expected: height * width * dim, got: data.len() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite);
        }
        Ok(Self { height, width, dim, cell, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cell(&self) -> usize {
        self.cell
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Flattened `hw × d` row-major matrix.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn vector(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.width + col) * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn row(&self, index: usize) -> &[f64] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }
}

/// A patch encoder. Implementations map a square `P × P` patch to a
/// `(P / cell) × (P / cell) × dim` row-major grid and must be deterministic.
pub trait FeatureProvider {
    fn dim(&self) -> usize;
    fn cell_size(&self) -> usize;
    fn encode(&self, patch: &RasterImage) -> Vec<f64>;
}

/// Origins of patches of length `patch` tiling `[0, extent)` with the given
/// stride; the last patch is pulled back to end exactly at `extent`.
pub fn patch_origins(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    assert!(patch <= extent && stride > 0);
    let mut origins = Vec::new();
    let mut o = 0;
    while o + patch <= extent {
        origins.push(o);
        o += stride;
    }
    let last = extent - patch;
    if *origins.last().unwrap_or(&usize::MAX) != last {
        origins.push(last);
    }
    origins
}

/// Runs `provider` over overlapping patches and averages the per-cell outputs.
///
/// The grid covers `floor(H / cell) × floor(W / cell)` cells; trailing
/// pixels beyond a whole cell are ignored.
pub fn encode_stitched(
    image: &RasterImage,
    provider: &dyn FeatureProvider,
    patch_size: usize,
    stride: usize,
) -> Result<FeatureGrid, FeatureError> {
    let cell = provider.cell_size();
    let dim = provider.dim();
    if cell == 0 || patch_size == 0 || stride == 0 {
        return Err(FeatureError::Geometry("patch size, stride and cell size must be positive"));
    }
    if stride > patch_size {
        return Err(FeatureError::Geometry("stride exceeds patch size"));
    }
    if patch_size % cell != 0 || stride % cell != 0 {
        return Err(FeatureError::Geometry("cell size must divide patch size and stride"));
    }
    let (gh, gw) = (image.height() / cell, image.width() / cell);
    let (eh, ew) = (gh * cell, gw * cell);
    if patch_size > eh || patch_size > ew {
        return Err(FeatureError::Geometry("patch size exceeds image size"));
    }
    let per_side = patch_size / cell;
    let mut sums = vec![0.0f64; gh * gw * dim];
    let mut counts = vec![0u32; gh * gw];
    for &top in &patch_origins(eh, patch_size, stride) {
        for &left in &patch_origins(ew, patch_size, stride) {
            let patch = image.crop(top, left, patch_size, patch_size);
            let out = provider.encode(&patch);
            let expected = per_side * per_side * dim;
            if out.len() != expected {
                return Err(FeatureError::DimensionMismatch { expected, got: out.len() });
            }
            let (r0, c0) = (top / cell, left / cell);
            for pr in 0..per_side {
                for pc in 0..per_side {
                    let g = (r0 + pr) * gw + c0 + pc;
                    counts[g] += 1;
                    let src = &out[(pr * per_side + pc) * dim..][..dim];
                    for (acc, v) in sums[g * dim..(g + 1) * dim].iter_mut().zip(src) {
                        *acc += v;
                    }
                }
            }
        }
    }
    for (g, &n) in counts.iter().enumerate() {
        debug_assert!(n > 0, "patch tiling left cell {g} uncovered");
        let inv = 1.0 / n as f64;
        for v in &mut sums[g * dim..(g + 1) * dim] {
            *v *= inv;
        }
    }
    FeatureGrid::new(gh, gw, dim, cell, sums)
}

/// Model-free fallback encoder producing nine stain and colour statistics per
/// cell: mean RGB (scaled by `x0`), mean hematoxylin and eosin
/// concentrations, hematoxylin variance, mean hematoxylin gradient magnitude,
/// percentile rank of the cell's hematoxylin mean within the patch, and a
/// constant bias of 1.
#[derive(Debug, Clone)]
pub struct BuiltinProvider {
    cell: usize,
    stains: StainMatrix,
    pinv: [[f64; 3]; 2],
}

pub const BUILTIN_DIM: usize = 9;

impl BuiltinProvider {
    pub fn new(cell: usize, stains: &StainMatrix) -> Result<Self, FeatureError> {
        if cell == 0 {
            return Err(FeatureError::Geometry("cell size must be positive"));
        }
        let stains = stains.normalized()?;
        let pinv = stains.pseudoinverse()?;
        Ok(Self { cell, stains, pinv })
    }
}

impl FeatureProvider for BuiltinProvider {
    fn dim(&self) -> usize {
        BUILTIN_DIM
    }

    fn cell_size(&self) -> usize {
        self.cell
    }

    fn encode(&self, patch: &RasterImage) -> Vec<f64> {
        let cell = self.cell;
        let (ch, cw) = (patch.height() / cell, patch.width() / cell);
        let x0 = self.stains.reference_intensity;
        let od = to_optical_density(patch, x0).expect("reference intensity validated at construction");
        let conc = |r: usize, c: usize, k: usize| {
            let v = od.get(r, c);
            let row = &self.pinv[k];
            (row[0] * v[0] + row[1] * v[1] + row[2] * v[2]).max(0.0)
        };
        let area = (cell * cell) as f64;
        let mut out = vec![0.0f64; ch * cw * BUILTIN_DIM];
        let mut means = vec![0.0f64; ch * cw];
        for gr in 0..ch {
            for gc in 0..cw {
                let mut acc = [0.0f64; 5];
                let mut sq_h = 0.0;
                let mut grad = 0.0;
                let mut grad_n = 0usize;
                for r in gr * cell..(gr + 1) * cell {
                    for c in gc * cell..(gc + 1) * cell {
                        let p = patch.rgb(r, c);
                        for k in 0..3 {
                            acc[k] += p[k] as f64 / x0[k];
                        }
                        let h = conc(r, c, 0);
                        acc[3] += h;
                        acc[4] += conc(r, c, 1);
                        sq_h += h * h;
                        if r + 1 < (gr + 1) * cell && c + 1 < (gc + 1) * cell {
                            let dx = conc(r, c + 1, 0) - h;
                            let dy = conc(r + 1, c, 0) - h;
                            grad += math::sqrt(dx * dx + dy * dy);
                            grad_n += 1;
                        }
                    }
                }
                let g = gr * cw + gc;
                let o = &mut out[g * BUILTIN_DIM..(g + 1) * BUILTIN_DIM];
                for k in 0..5 {
                    o[k] = acc[k] / area;
                }
                o[5] = (sq_h / area - o[3] * o[3]).max(0.0);
                o[6] = if grad_n > 0 { grad / grad_n as f64 } else { 0.0 };
                o[8] = 1.0;
                means[g] = o[3];
            }
        }
        let n = means.len();
        for g in 0..n {
            let (mut less, mut equal) = (0usize, 0usize);
            for (j, &m) in means.iter().enumerate() {
                if j == g {
                    continue;
                }
                if m < means[g] {
                    less += 1;
                } else if m == means[g] {
                    equal += 1;
                }
            }
            out[g * BUILTIN_DIM + 7] =
                if n > 1 { (less as f64 + 0.5 * equal as f64) / (n - 1) as f64 } else { 0.5 };
        }
        out
    }
}

/// Majority-vote downsampling of a pixel mask to the feature grid: a cell is
/// set when at least half of its `cell × cell` pixels are set.
pub fn resize_mask_to_grid(mask: &BinaryMask, grid_h: usize, grid_w: usize, cell: usize) -> BinaryMask {
    Grid::from_fn(grid_h, grid_w, |gr, gc| {
        let mut on = 0usize;
        let mut total = 0usize;
        for r in gr * cell..((gr + 1) * cell).min(mask.height()) {
            for c in gc * cell..((gc + 1) * cell).min(mask.width()) {
                total += 1;
                on += *mask.get(r, c) as usize;
            }
        }
        total > 0 && 2 * on >= total
    })
}

/// K-means outcome. `objective_trace[0]` is the objective of the seeded
/// centroids; later entries follow each centroid update.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_TOL: f64 = 1e-6;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn assign(points: &[&[f64]], centroids: &[Vec<f64>], out: &mut [usize]) -> f64 {
    let mut total = 0.0;
    for (p, slot) in points.iter().zip(out.iter_mut()) {
        let mut best = (f64::INFINITY, 0usize);
        for (k, c) in centroids.iter().enumerate() {
            let d = sq_dist(p, c);
            if d < best.0 {
                best = (d, k);
            }
        }
        *slot = best.1;
        total += best.0;
    }
    total
}

/// Lloyd's algorithm with k-means++ seeding from a fixed seed.
///
/// Stops after [`KMEANS_MAX_ITERS`] updates or once no centroid moves more
/// than [`KMEANS_TOL`]. An emptied cluster is re-seeded at the point
/// farthest from its current centroid.
pub fn kmeans(points: &[&[f64]], k: usize, seed: u64) -> KMeans {
    assert!(k >= 1 && points.len() >= k, "kmeans needs at least k points");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = points.len();

    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)].to_vec());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points[pick].to_vec());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }

    let dim = points[0].len();
    let mut assignments = vec![0usize; n];
    let mut trace = vec![assign(points, &centroids, &mut assignments)];
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITERS {
        iterations += 1;
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        let mut next: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .zip(&centroids)
            .map(|((s, &c), old)| if c > 0 { s.into_iter().map(|v| v / c as f64).collect() } else { old.clone() })
            .collect();
        let mut taken: Vec<usize> = Vec::new();
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let mut far = (f64::NEG_INFINITY, 0usize);
            for (i, p) in points.iter().enumerate() {
                if taken.contains(&i) {
                    continue;
                }
                let d = sq_dist(p, &next[assignments[i]]);
                if d > far.0 {
                    far = (d, i);
                }
            }
            taken.push(far.1);
            next[j] = points[far.1].to_vec();
        }
        let shift = centroids.iter().zip(&next).map(|(a, b)| math::sqrt(sq_dist(a, b))).fold(0.0, f64::max);
        centroids = next;
        trace.push(assign(points, &centroids, &mut assignments));
        if shift < KMEANS_TOL {
            break;
        }
    }
    KMeans { centroids, assignments, objective_trace: trace, iterations }
}

/// Foreground/background prototype matrix `P ∈ R^{2K×d}`; rows `0..K` are
/// foreground, `K..2K` background.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    vectors: Vec<f64>,
    dim: usize,
    k_per_class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassLabel {
    Foreground,
    Background,
}

impl PrototypeSet {
    pub fn new(foreground: &[Vec<f64>], background: &[Vec<f64>]) -> Result<Self, FeatureError> {
        let k = foreground.len();
        if k == 0 || background.len() != k {
            return Err(FeatureError::Geometry("need the same non-zero prototype count per class"));
        }
        let dim = foreground[0].len();
        let mut vectors = Vec::with_capacity(2 * k * dim);
        for (class, rows) in [("foreground", foreground), ("background", background)] {
            for row in rows {
                if row.len() != dim {
                    return Err(FeatureError::DimensionMismatch { expected: dim, got: row.len() });
                }
                if row.iter().all(|&v| v == 0.0) {
                    return Err(FeatureError::ZeroPrototype(class));
                }
                vectors.extend_from_slice(row);
            }
        }
        Ok(Self { vectors, dim, k_per_class: k })
    }

    pub fn k_per_class(&self) -> usize {
        self.k_per_class
    }

    pub fn len(&self) -> usize {
        2 * self.k_per_class
    }

    pub fn is_empty(&self) -> bool {
        self.k_per_class == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, index: usize) -> &[f64] {
        &self.vectors[index * self.dim..(index + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vectors
    }

    pub fn class_of(&self, index: usize) -> ClassLabel {
        if index < self.k_per_class {
            ClassLabel::Foreground
        } else {
            ClassLabel::Background
        }
    }
}

/// Clusters the masked cells of each class into `k` prototypes.
/// Masks must already be at feature resolution.
pub fn extract_prototypes(
    features: &FeatureGrid,
    m_fg: &BinaryMask,
    m_bg: &BinaryMask,
    k: usize,
    seed: u64,
) -> Result<PrototypeSet, FeatureError> {
    if k == 0 {
        return Err(FeatureError::ZeroK);
    }
    let grid = (features.height(), features.width());
    for m in [m_fg, m_bg] {
        if m.shape() != grid {
            return Err(FeatureError::MaskShape { mask: m.shape(), grid });
        }
    }
    let cluster = |mask: &BinaryMask, class: &'static str, salt: u64| -> Result<Vec<Vec<f64>>, FeatureError> {
        let points: Vec<&[f64]> =
            (0..features.cells()).filter(|&i| mask.as_slice()[i]).map(|i| features.row(i)).collect();
        if points.len() < k {
            return Err(FeatureError::TooFewCells { class, available: points.len(), k });
        }
        Ok(kmeans(&points, k, seed ^ salt).centroids)
    };
    let fg = cluster(m_fg, "foreground", 0)?;
    let bg = cluster(m_bg, "background", 0x9e37_79b9_7f4a_7c15)?;
    PrototypeSet::new(&fg, &bg)
}
