//! Optical density, H&E colour deconvolution and the high-confidence
//! self-reference masks.

use alloc::vec::Vec;

use crate::grid::{BinaryMask, Grid, RasterImage};
use crate::math;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StainError {
    #[error("reference intensity must be positive and finite, got {0}")]
    NonPositiveReference(f64),
    #[error("stain vector `{0}` has zero or non-finite norm")]
    InvalidStainVector(&'static str),
    #[error("stain vectors are linearly dependent (|h x e| = {0:e})")]
    DependentStains(f64),
    #[error("stain matrix is degenerate (condition number {0:e} > 1e8)")]
    DegenerateStainMatrix(f64),
    #[error("no separating threshold: histogram has fewer than two non-empty bins")]
    NoSeparatingThreshold,
    #[error("high-confidence ratio must lie in (0, 1], got {0}")]
    InvalidRatio(f64),
    #[error("coarse {0} region is empty")]
    EmptyCoarseRegion(&'static str),
}

/// Normalized stain matrix `Q = [Q_H, Q_E]` plus the white reference `x0`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct StainMatrix {
    pub hematoxylin: [f64; 3],
    pub eosin: [f64; 3],
    pub reference_intensity: [f64; 3],
}

impl Default for StainMatrix {
    fn default() -> Self {
        Self::ruifrok_johnston()
    }
}

fn norm3(v: [f64; 3]) -> f64 {
    math::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(v: [f64; 3], name: &'static str) -> Result<[f64; 3], StainError> {
    let n = norm3(v);
    if !n.is_finite() || n <= 0.0 {
        return Err(StainError::InvalidStainVector(name));
    }
    Ok([v[0] / n, v[1] / n, v[2] / n])
}

impl StainMatrix {
    /// Normalizes both vectors and checks independence and `x0 > 0`.
    pub fn new(hematoxylin: [f64; 3], eosin: [f64; 3], reference_intensity: [f64; 3]) -> Result<Self, StainError> {
        let m = Self { hematoxylin, eosin, reference_intensity };
        m.normalized()
    }

    /// Classic Ruifrok–Johnston H&E vectors with an 8-bit white reference.
    pub fn ruifrok_johnston() -> Self {
        Self::new([0.650, 0.704, 0.286], [0.072, 0.990, 0.105], [255.0; 3])
            .expect("reference stain vectors are valid")
    }

    /// Returns a validated copy with unit-norm stain vectors.
    pub fn normalized(&self) -> Result<Self, StainError> {
        for &x0 in &self.reference_intensity {
            if !x0.is_finite() || x0 <= 0.0 {
                return Err(StainError::NonPositiveReference(x0));
            }
        }
        let h = normalize(self.hematoxylin, "hematoxylin")?;
        let e = normalize(self.eosin, "eosin")?;
        let cross = norm3(cross3(h, e));
        if cross <= 1e-6 {
            return Err(StainError::DependentStains(cross));
        }
        Ok(Self { hematoxylin: h, eosin: e, reference_intensity: self.reference_intensity })
    }

    /// Condition number of the 3×2 matrix `[h e]`.
    pub fn condition_number(&self) -> f64 {
        let (h, e) = (self.hematoxylin, self.eosin);
        let (a, b, c) = (dot3(h, h), dot3(h, e), dot3(e, e));
        // eigenvalues of the 2x2 Gram matrix
        let mean = 0.5 * (a + c);
        let disc = math::sqrt((0.25 * (a - c) * (a - c) + b * b).max(0.0));
        let (hi, lo) = (mean + disc, mean - disc);
        if lo <= 0.0 {
            return f64::INFINITY;
        }
        math::sqrt(hi / lo)
    }

    /// Rows of the Moore–Penrose pseudoinverse `Q⁺ = (QᵀQ)⁻¹Qᵀ`.
    pub fn pseudoinverse(&self) -> Result<[[f64; 3]; 2], StainError> {
        let cond = self.condition_number();
        if !(cond <= 1e8) {
            return Err(StainError::DegenerateStainMatrix(cond));
        }
        let (h, e) = (self.hematoxylin, self.eosin);
        let (a, b, c) = (dot3(h, h), dot3(h, e), dot3(e, e));
        let det = a * c - b * b;
        let mut rows = [[0.0; 3]; 2];
        for k in 0..3 {
            rows[0][k] = (c * h[k] - b * e[k]) / det;
            rows[1][k] = (a * e[k] - b * h[k]) / det;
        }
        Ok(rows)
    }
}

/// Per-pixel hematoxylin and eosin concentrations, clamped at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct StainMaps {
    pub hematoxylin: Grid<f64>,
    pub eosin: Grid<f64>,
}

impl StainMaps {
    pub fn shape(&self) -> (usize, usize) {
        self.hematoxylin.shape()
    }
}

/// `−ln(x / x0)` with `x` lifted to at least 1 and capped at `x0`.
#[inline]
pub fn optical_density_value(x: f64, x0: f64) -> f64 {
    let x = x.max(1.0).min(x0);
    -math::ln(x / x0).min(0.0)
}

/// Converts an RGB raster to optical density, one 3-vector per pixel.
pub fn to_optical_density(image: &RasterImage, x0: [f64; 3]) -> Result<Grid<[f64; 3]>, StainError> {
    for &v in &x0 {
        if !v.is_finite() || v <= 0.0 {
            return Err(StainError::NonPositiveReference(v));
        }
    }
    // 256-entry lookup per channel
    let mut lut = [[0.0f64; 256]; 3];
    for (c, table) in lut.iter_mut().enumerate() {
        for (v, slot) in table.iter_mut().enumerate() {
            *slot = optical_density_value(v as f64, x0[c]);
        }
    }
    Ok(Grid::from_fn(image.height(), image.width(), |r, c| {
        let p = image.rgb(r, c);
        [lut[0][p[0] as usize], lut[1][p[1] as usize], lut[2][p[2] as usize]]
    }))
}

/// `S = Q⁺ · OD` per pixel, negatives clamped to zero.
pub fn deconvolve(od: &Grid<[f64; 3]>, stains: &StainMatrix) -> Result<StainMaps, StainError> {
    let stains = stains.normalized()?;
    let pinv = stains.pseudoinverse()?;
    let project = |row: &[f64; 3], v: &[f64; 3]| (row[0] * v[0] + row[1] * v[1] + row[2] * v[2]).max(0.0);
    Ok(StainMaps {
        hematoxylin: od.map(|v| project(&pinv[0], v)),
        eosin: od.map(|v| project(&pinv[1], v)),
    })
}

/// Convenience: OD conversion followed by deconvolution.
pub fn stain_maps(image: &RasterImage, stains: &StainMatrix) -> Result<StainMaps, StainError> {
    let od = to_optical_density(image, stains.reference_intensity)?;
    deconvolve(&od, stains)
}

/// Otsu threshold over a histogram of nonnegative counts.
///
/// Bins `0..=t` form class 0. The returned `t` maximizes the between-class
/// variance; near-ties (relative 1e-12) resolve to the smallest `t`.
pub fn otsu_threshold(histogram: &[f64]) -> Result<usize, StainError> {
    let non_empty = histogram.iter().filter(|&&c| c > 0.0).count();
    if non_empty < 2 {
        return Err(StainError::NoSeparatingThreshold);
    }
    let total: f64 = histogram.iter().sum();
    let mean_total: f64 = histogram.iter().enumerate().map(|(i, &c)| i as f64 * c / total).sum();

    let mut sigmas = Vec::with_capacity(histogram.len() - 1);
    let (mut w0, mut m0) = (0.0f64, 0.0f64);
    for t in 0..histogram.len() - 1 {
        let p = histogram[t] / total;
        w0 += p;
        m0 += t as f64 * p;
        let w1 = 1.0 - w0;
        let sigma = if w0 <= 0.0 || w1 <= 1e-15 {
            0.0
        } else {
            let theta0 = m0 / w0;
            let theta1 = (mean_total - m0) / w1;
            w0 * (theta0 - mean_total) * (theta0 - mean_total) + w1 * (theta1 - mean_total) * (theta1 - mean_total)
        };
        sigmas.push(sigma);
    }
    let best = sigmas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tol = best.abs() * 1e-12;
    Ok(sigmas.iter().position(|&s| s >= best - tol).unwrap_or(0))
}

/// Equal-width histogram over the observed `[min, max]` range.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub counts: Vec<f64>,
    pub min: f64,
    pub max: f64,
}

impl Histogram {
    pub fn build(values: impl Iterator<Item = f64> + Clone, bins: usize) -> Self {
        assert!(bins >= 2, "histogram needs at least two bins");
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.clone() {
            min = min.min(v);
            max = max.max(v);
        }
        let mut counts = alloc::vec![0.0; bins];
        if min > max {
            return Self { counts, min: 0.0, max: 0.0 };
        }
        let hist = Self { counts: Vec::new(), min, max };
        for v in values {
            counts[hist.bin_of(v, bins)] += 1.0;
        }
        Self { counts, ..hist }
    }

    #[inline]
    fn bin_of(&self, v: f64, bins: usize) -> usize {
        let span = self.max - self.min;
        if span <= 0.0 {
            return 0;
        }
        let b = math::floor((v - self.min) / span * bins as f64);
        (b.max(0.0) as usize).min(bins - 1)
    }

    pub fn bin(&self, v: f64) -> usize {
        self.bin_of(v, self.counts.len())
    }
}

/// Otsu binarization of continuous values over a `bins`-bin histogram.
/// `true` marks values above the threshold bin.
pub fn otsu_binarize(values: &[f64], bins: usize) -> Result<Vec<bool>, StainError> {
    let hist = Histogram::build(values.iter().copied(), bins);
    let t = otsu_threshold(&hist.counts)?;
    Ok(values.iter().map(|&v| hist.bin(v) > t).collect())
}

/// Which concentration drives the coarse Otsu split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum CoarseChannel {
    #[default]
    Hematoxylin,
    /// `s_h − s_e`
    Difference,
}

/// Selects the `ratio` fraction of `candidates` with the largest `score`.
/// Ties keep the lower pixel index so the selection is nested in `ratio`.
fn top_fraction(candidates: &[usize], score: &[f64], ratio: f64) -> Vec<usize> {
    let keep = math::round(ratio * candidates.len() as f64) as usize;
    let mut order: Vec<usize> = candidates.to_vec();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    order.truncate(keep.min(order.len()));
    order
}

/// Coarse Otsu split followed by the top-`ratio` selections.
///
/// Foreground keeps the strongest hematoxylin pixels of the coarse
/// foreground; background keeps the strongest eosin pixels of the coarse
/// background. The two masks are disjoint.
pub fn high_confidence_masks(
    maps: &StainMaps,
    ratio: f64,
    channel: CoarseChannel,
    bins: usize,
) -> Result<(BinaryMask, BinaryMask), StainError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(StainError::InvalidRatio(ratio));
    }
    let (h, w) = maps.shape();
    let s_h = maps.hematoxylin.as_slice();
    let s_e = maps.eosin.as_slice();
    let split: Vec<f64> = match channel {
        CoarseChannel::Hematoxylin => s_h.to_vec(),
        CoarseChannel::Difference => s_h.iter().zip(s_e).map(|(a, b)| a - b).collect(),
    };
    let coarse = otsu_binarize(&split, bins)?;
    let fg_idx: Vec<usize> = (0..coarse.len()).filter(|&i| coarse[i]).collect();
    let bg_idx: Vec<usize> = (0..coarse.len()).filter(|&i| !coarse[i]).collect();
    match (fg_idx.is_empty(), bg_idx.is_empty()) {
        (true, true) => return Err(StainError::EmptyCoarseRegion("foreground and background")),
        (true, false) => return Err(StainError::EmptyCoarseRegion("foreground")),
        (false, true) => return Err(StainError::EmptyCoarseRegion("background")),
        _ => {}
    }
    let mut fg = Grid::filled(h, w, false);
    for i in top_fraction(&fg_idx, s_h, ratio) {
        fg.as_mut_slice()[i] = true;
    }
    let mut bg = Grid::filled(h, w, false);
    for i in top_fraction(&bg_idx, s_e, ratio) {
        bg.as_mut_slice()[i] = true;
    }
    Ok((fg, bg))
}

/// Inverse of the OD model: `x0 · exp(−(s_h Q_H + s_e Q_E))` rounded to 8 bits.
pub fn render_pixel(stains: &StainMatrix, s_h: f64, s_e: f64) -> [u8; 3] {
    let mut out = [0u8; 3];
    for (c, slot) in out.iter_mut().enumerate() {
        let od = s_h * stains.hematoxylin[c] + s_e * stains.eosin[c];
        let v = stains.reference_intensity[c] * math::exp(-od);
        *slot = math::round(v).clamp(0.0, 255.0) as u8;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn white_is_zero_density() {
        let img = RasterImage::filled(2, 2, [255, 255, 255]);
        let od = to_optical_density(&img, [255.0; 3]).unwrap();
        assert!(od.as_slice().iter().all(|p| p.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn x0_over_e_is_unit_density() {
        let x0 = 200.0 * core::f64::consts::E;
        let od = optical_density_value(x0 / core::f64::consts::E, x0);
        assert!((od - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_pixels_are_lifted() {
        let od = optical_density_value(0.0, 255.0);
        assert!((od - math::ln(255.0)).abs() < 1e-12);
    }

    #[test]
    fn od_round_trip() {
        let x0 = [255.0, 250.0, 240.0];
        let mut seed = 17u32;
        let data: Vec<u8> = (0..4 * 4 * 3)
            .map(|_| {
                seed = seed.wrapping_mul(1664525).wrapping_add(1013904223);
                (1 + (seed >> 24) % 239) as u8
            })
            .collect();
        let img = RasterImage::new(4, 4, 3, data);
        let od = to_optical_density(&img, x0).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let px = img.rgb(r, c);
                let d = od.get(r, c);
                for k in 0..3 {
                    let back = math::exp(-d[k]) * x0[k];
                    assert!((back - px[k] as f64).abs() < 1e-6);
                    assert!(d[k] >= 0.0);
                }
            }
        }
    }

    #[test]
    fn non_positive_reference_rejected() {
        let img = RasterImage::filled(1, 1, [1, 2, 3]);
        assert!(matches!(to_optical_density(&img, [0.0, 1.0, 1.0]), Err(StainError::NonPositiveReference(_))));
    }

    #[test]
    fn deconvolve_recovers_pure_hematoxylin() {
        let q = StainMatrix::ruifrok_johnston();
        let v = q.hematoxylin.map(|x| 0.7 * x);
        let od = Grid::filled(3, 3, v);
        let maps = deconvolve(&od, &q).unwrap();
        for (&h, &e) in maps.hematoxylin.as_slice().iter().zip(maps.eosin.as_slice()) {
            assert!((h - 0.7).abs() < 1e-12);
            assert!(e.abs() < 1e-12);
        }
        let zero = deconvolve(&Grid::filled(2, 2, [0.0; 3]), &q).unwrap();
        assert!(zero.hematoxylin.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deconvolve_ignores_orthogonal_residual() {
        let q = StainMatrix::ruifrok_johnston();
        let n = cross3(q.hematoxylin, q.eosin);
        let od: [f64; 3] = core::array::from_fn(|k| 0.3 * q.hematoxylin[k] + 0.5 * q.eosin[k] + 0.2 * n[k]);
        // normal equations on the single pixel: [a b; b c][x y]ᵀ = [h·od e·od]ᵀ
        let (a, b, c) = (dot3(q.hematoxylin, q.hematoxylin), dot3(q.hematoxylin, q.eosin), dot3(q.eosin, q.eosin));
        let (rh, re) = (dot3(q.hematoxylin, od), dot3(q.eosin, od));
        let det = a * c - b * b;
        let (x, y) = ((c * rh - b * re) / det, (a * re - b * rh) / det);
        let maps = deconvolve(&Grid::filled(1, 1, od), &q).unwrap();
        assert!((maps.hematoxylin.as_slice()[0] - x).abs() < 1e-12);
        assert!((maps.eosin.as_slice()[0] - y).abs() < 1e-12);
        assert!((x - 0.3).abs() < 1e-6 && (y - 0.5).abs() < 1e-6);
    }

    #[test]
    fn degenerate_matrix_rejected() {
        let q = StainMatrix { hematoxylin: [1.0, 0.0, 0.0], eosin: [1.0, 1e-12, 0.0], reference_intensity: [255.0; 3] };
        assert!(q.normalized().is_err());
        let nearly = StainMatrix { hematoxylin: [1.0, 0.0, 0.0], eosin: [1.0, 1e-9, 0.0], reference_intensity: [255.0; 3] };
        let od = Grid::filled(1, 1, [0.1; 3]);
        assert!(matches!(nearly.pseudoinverse(), Err(StainError::DegenerateStainMatrix(_))));
        assert!(deconvolve(&od, &nearly).is_err());
    }

    #[test]
    fn otsu_two_bins() {
        assert_eq!(otsu_threshold(&[5.0, 5.0]).unwrap(), 0);
    }

    #[test]
    fn otsu_delta_spikes_take_smallest_plateau_index() {
        let mut h = vec![0.0; 256];
        h[10] = 100.0;
        h[200] = 50.0;
        assert_eq!(otsu_threshold(&h).unwrap(), 10);
    }

    #[test]
    fn otsu_single_value_errors() {
        let mut h = vec![0.0; 16];
        h[3] = 9.0;
        assert_eq!(otsu_threshold(&h), Err(StainError::NoSeparatingThreshold));
    }

    #[test]
    fn ratio_one_keeps_coarse_foreground() {
        let hm = Grid::from_vec(1, 6, vec![0.0, 0.1, 0.05, 1.0, 0.9, 0.95]);
        let em = Grid::from_vec(1, 6, vec![0.5, 0.4, 0.3, 0.0, 0.0, 0.1]);
        let maps = StainMaps { hematoxylin: hm, eosin: em };
        let (fg, bg) = high_confidence_masks(&maps, 1.0, CoarseChannel::Hematoxylin, 256).unwrap();
        assert_eq!(fg.as_slice(), &[false, false, false, true, true, true]);
        assert_eq!(bg.as_slice(), &[true, true, true, false, false, false]);
    }

    #[test]
    fn invalid_ratio_rejected() {
        let maps = StainMaps { hematoxylin: Grid::filled(1, 2, 0.0), eosin: Grid::filled(1, 2, 0.0) };
        assert_eq!(high_confidence_masks(&maps, 0.0, CoarseChannel::Hematoxylin, 256), Err(StainError::InvalidRatio(0.0)));
    }
}
