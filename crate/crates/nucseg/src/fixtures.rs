//! Synthetic H&E-like images with exact instance ground truth.
//!
//! Nuclei are filled ellipses of hematoxylin on a smoothly textured eosin
//! background. Pixels are rendered through the inverse optical-density
//! model `x0 · exp(−(s_h Q_H + s_e Q_E))` plus Gaussian intensity noise.
//! Some nuclei are placed so that they overlap one earlier nucleus; the
//! later nucleus occludes the earlier one in the label map.

use std::f64::consts::PI;
use std::path::Path;

use nucseg_core::stain::StainMatrix;
use nucseg_core::{Grid, RasterImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::io::{self, IoError};

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("invalid fixture spec: {0}")]
    Spec(&'static str),
    #[error("could not place nucleus {placed} of {wanted} in image {image}; density is infeasible")]
    Infeasible { image: usize, placed: usize, wanted: usize },
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}: {source}")]
    Create { path: String, source: std::io::Error },
}

fn d_images() -> usize {
    20
}
fn d_size() -> usize {
    256
}
fn d_nuclei() -> (usize, usize) {
    (30, 120)
}
fn d_radius() -> (f64, f64) {
    (5.0, 8.0)
}
fn d_elongation() -> f64 {
    1.4
}
fn d_overlap() -> f64 {
    0.15
}
fn d_max_overlap_fraction() -> f64 {
    0.2
}
fn d_hematoxylin() -> (f64, f64) {
    (0.6, 1.1)
}
fn d_eosin() -> (f64, f64) {
    (0.15, 0.4)
}
fn d_background_h() -> f64 {
    0.03
}
fn d_noise() -> f64 {
    2.0
}
fn d_gap() -> f64 {
    2.0
}

/// Parameters of a fixture set. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureSpec {
    #[serde(default = "d_images")]
    pub images: usize,
    #[serde(default = "d_size")]
    pub height: usize,
    #[serde(default = "d_size")]
    pub width: usize,
    /// Inclusive range of nuclei per image.
    #[serde(default = "d_nuclei")]
    pub nuclei: (usize, usize),
    /// Range of the minor semi-axis in pixels.
    #[serde(default = "d_radius")]
    pub radius: (f64, f64),
    /// Largest major/minor axis ratio.
    #[serde(default = "d_elongation")]
    pub max_elongation: f64,
    /// Chance that a nucleus is placed overlapping an earlier one.
    #[serde(default = "d_overlap")]
    pub overlap_probability: f64,
    /// Cap on overlapping pairs as a fraction of the nuclei count.
    #[serde(default = "d_max_overlap_fraction")]
    pub max_overlap_fraction: f64,
    /// Range of nuclear hematoxylin concentration.
    #[serde(default = "d_hematoxylin")]
    pub hematoxylin: (f64, f64),
    /// Range of the background eosin concentration.
    #[serde(default = "d_eosin")]
    pub eosin: (f64, f64),
    #[serde(default = "d_background_h")]
    pub background_hematoxylin: f64,
    /// Standard deviation of additive intensity noise, in 8-bit levels.
    #[serde(default = "d_noise")]
    pub noise: f64,
    /// Minimum gap between non-overlapping nuclei, in pixels.
    #[serde(default = "d_gap")]
    pub gap: f64,
    #[serde(default)]
    pub stains: StainMatrix,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            images: d_images(),
            height: d_size(),
            width: d_size(),
            nuclei: d_nuclei(),
            radius: d_radius(),
            max_elongation: d_elongation(),
            overlap_probability: d_overlap(),
            max_overlap_fraction: d_max_overlap_fraction(),
            hematoxylin: d_hematoxylin(),
            eosin: d_eosin(),
            background_hematoxylin: d_background_h(),
            noise: d_noise(),
            gap: d_gap(),
            stains: StainMatrix::default(),
        }
    }
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<(), FixtureError> {
        let range = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi;
        if self.height < 8 || self.width < 8 {
            return Err(FixtureError::Spec("images must be at least 8x8"));
        }
        if self.nuclei.0 > self.nuclei.1 {
            return Err(FixtureError::Spec("nuclei range is reversed"));
        }
        if !range(self.radius) || self.radius.0 < 1.0 {
            return Err(FixtureError::Spec("radius range must be ordered and at least 1"));
        }
        if !(self.max_elongation >= 1.0) {
            return Err(FixtureError::Spec("max_elongation must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.overlap_probability) || !(0.0..=1.0).contains(&self.max_overlap_fraction) {
            return Err(FixtureError::Spec("overlap probability and fraction must lie in [0, 1]"));
        }
        if !range(self.hematoxylin) || !range(self.eosin) {
            return Err(FixtureError::Spec("stain ranges must be ordered and non-negative"));
        }
        if !(self.background_hematoxylin >= 0.0 && self.noise >= 0.0 && self.gap >= 0.0) {
            return Err(FixtureError::Spec("background, noise and gap must be non-negative"));
        }
        StainMatrix::new(self.stains.hematoxylin, self.stains.eosin, self.stains.reference_intensity)
            .map_err(|_| FixtureError::Spec("invalid stain matrix"))?;
        Ok(())
    }
}

/// One filled ellipse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nucleus {
    pub row: f64,
    pub col: f64,
    /// Semi-axes, `major ≥ minor`.
    pub major: f64,
    pub minor: f64,
    pub angle: f64,
    pub hematoxylin: f64,
}

impl Nucleus {
    pub fn contains(&self, r: f64, c: f64) -> bool {
        let (dy, dx) = (r - self.row, c - self.col);
        let (s, co) = self.angle.sin_cos();
        let u = dx * co + dy * s;
        let v = -dx * s + dy * co;
        (u / self.major).powi(2) + (v / self.minor).powi(2) <= 1.0
    }
}

/// A rendered image with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub image: RasterImage,
    /// Instance ids `1..=n` in placement order; 0 is background.
    pub labels: Grid<u32>,
    pub nuclei: Vec<Nucleus>,
    /// Index pairs placed to overlap.
    pub overlapping: Vec<(usize, usize)>,
    pub hematoxylin: Grid<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

const ATTEMPTS: usize = 400;

fn place(spec: &FixtureSpec, rng: &mut ChaCha8Rng, image: usize) -> Result<(Vec<Nucleus>, Vec<(usize, usize)>), FixtureError> {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let wanted = rng.random_range(spec.nuclei.0..=spec.nuclei.1);
    let max_pairs = (spec.max_overlap_fraction * wanted as f64).floor() as usize;
    let mut nuclei: Vec<Nucleus> = Vec::with_capacity(wanted);
    let mut pairs = Vec::new();
    let mut paired = vec![false; wanted];
    while nuclei.len() < wanted {
        let mut done = false;
        for _ in 0..ATTEMPTS {
            let minor = uniform(rng, spec.radius);
            let major = minor * uniform(rng, (1.0, spec.max_elongation));
            let angle = rng.random_range(0.0..PI);
            let hematoxylin = uniform(rng, spec.hematoxylin);
            let partner = if pairs.len() < max_pairs && !nuclei.is_empty() && rng.random_bool(spec.overlap_probability) {
                let j = rng.random_range(0..nuclei.len());
                (!paired[j]).then_some(j)
            } else {
                None
            };
            let (row, col) = match partner {
                Some(j) => {
                    let p = &nuclei[j];
                    let phi = rng.random_range(0.0..2.0 * PI);
                    let d = (0.5 * (p.major + p.minor) + 0.5 * (major + minor)) * rng.random_range(0.6..0.8);
                    (p.row + d * phi.sin(), p.col + d * phi.cos())
                }
                None => (rng.random_range(major..(h - major).max(major + 1e-9)), rng.random_range(major..(w - major).max(major + 1e-9))),
            };
            if row < major || col < major || row > h - major || col > w - major {
                continue;
            }
            let clear = nuclei.iter().enumerate().all(|(k, q)| {
                Some(k) == partner || {
                    let d = ((q.row - row).powi(2) + (q.col - col).powi(2)).sqrt();
                    d > q.major + major + spec.gap
                }
            });
            if !clear {
                continue;
            }
            if let Some(j) = partner {
                paired[j] = true;
                paired[nuclei.len()] = true;
                pairs.push((j, nuclei.len()));
            }
            nuclei.push(Nucleus { row, col, major, minor, angle, hematoxylin });
            done = true;
            break;
        }
        if !done {
            return Err(FixtureError::Infeasible { image, placed: nuclei.len(), wanted });
        }
    }
    Ok((nuclei, pairs))
}

/// Smooth field in `[-1, 1]` built from a few random plane waves.
fn texture(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Grid<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..6)
        .map(|_| {
            let period = rng.random_range(24.0..96.0);
            let theta = rng.random_range(0.0..PI);
            (2.0 * PI / period * theta.cos(), 2.0 * PI / period * theta.sin(), rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    Grid::from_fn(h, w, |r, c| {
        waves.iter().map(|&(ky, kx, ph)| (ky * r as f64 + kx * c as f64 + ph).sin()).sum::<f64>() / waves.len() as f64
    })
}

/// Renders image `index` of the set described by `spec`.
pub fn generate_one(spec: &FixtureSpec, seed: u64, index: usize) -> Result<Fixture, FixtureError> {
    spec.validate()?;
    let stains = StainMatrix::new(spec.stains.hematoxylin, spec.stains.eosin, spec.stains.reference_intensity)
        .map_err(|_| FixtureError::Spec("invalid stain matrix"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let (h, w) = (spec.height, spec.width);
    let (nuclei, overlapping) = place(spec, &mut rng, index)?;

    let mut labels = Grid::filled(h, w, 0u32);
    for (k, n) in nuclei.iter().enumerate() {
        let (r0, r1) = ((n.row - n.major).floor().max(0.0) as usize, ((n.row + n.major).ceil() as usize + 1).min(h));
        let (c0, c1) = ((n.col - n.major).floor().max(0.0) as usize, ((n.col + n.major).ceil() as usize + 1).min(w));
        for r in r0..r1 {
            for c in c0..c1 {
                if n.contains(r as f64, c as f64) {
                    labels.set(r, c, k as u32 + 1);
                }
            }
        }
    }

    let eosin_level = uniform(&mut rng, spec.eosin);
    let amplitude = 0.5 * (spec.eosin.1 - spec.eosin.0);
    let tex = texture(&mut rng, h, w);
    let noise = Normal::new(0.0, spec.noise).expect("noise deviation is non-negative");
    let chromatin = Normal::new(0.0, 0.06).expect("constant deviation");
    let mut s_h = Grid::filled(h, w, 0.0);
    let mut image = RasterImage::filled(h, w, [255, 255, 255]);
    for r in 0..h {
        for c in 0..w {
            let t = *tex.get(r, c);
            let e_bg = (eosin_level + amplitude * t).max(0.0);
            let (sh, se) = match *labels.get(r, c) {
                0 => (spec.background_hematoxylin * (1.0 + 0.5 * t), e_bg),
                l => {
                    let n = &nuclei[l as usize - 1];
                    (n.hematoxylin * (1.0f64 + chromatin.sample(&mut rng)).max(0.5), 0.3 * e_bg)
                }
            };
            s_h.set(r, c, sh);
            let mut px = [0u8; 3];
            for (ch, slot) in px.iter_mut().enumerate() {
                let od = sh * stains.hematoxylin[ch] + se * stains.eosin[ch];
                let v = stains.reference_intensity[ch] * (-od).exp() + noise.sample(&mut rng);
                *slot = v.round().clamp(0.0, 255.0) as u8;
            }
            image.set_rgb(r, c, px);
        }
    }
    Ok(Fixture { image, labels, nuclei, overlapping, hematoxylin: s_h })
}

/// Renders the whole set; image `i` depends only on `(spec, seed, i)`.
pub fn generate(spec: &FixtureSpec, seed: u64) -> Result<Vec<Fixture>, FixtureError> {
    (0..spec.images).map(|i| generate_one(spec, seed, i)).collect()
}

pub fn stem(index: usize) -> String {
    format!("fixture_{index:03}")
}

/// Writes `images/<stem>.png` and `gt/<stem>.png` under `out`.
pub fn write(fixtures: &[Fixture], out: &Path) -> Result<(), FixtureError> {
    for sub in ["images", "gt"] {
        let dir = out.join(sub);
        std::fs::create_dir_all(&dir)
            .map_err(|source| FixtureError::Create { path: dir.display().to_string(), source })?;
    }
    for (i, f) in fixtures.iter().enumerate() {
        let name = format!("{}.png", stem(i));
        io::write_rgb(&out.join("images").join(&name), &f.image)?;
        io::write_labels(&out.join("gt").join(&name), &f.labels)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_nuclei_gives_blank_background() {
        let spec = FixtureSpec { images: 1, nuclei: (0, 0), ..FixtureSpec::default() };
        let f = generate_one(&spec, 1, 0).unwrap();
        assert!(f.labels.as_slice().iter().all(|&l| l == 0));
        assert!(f.nuclei.is_empty());
    }

    #[test]
    fn same_seed_same_pixels() {
        let spec = FixtureSpec { images: 2, ..FixtureSpec::default() };
        assert_eq!(generate(&spec, 7).unwrap(), generate(&spec, 7).unwrap());
        assert_ne!(generate_one(&spec, 7, 0).unwrap().image, generate_one(&spec, 8, 0).unwrap().image);
    }

    #[test]
    fn overlap_cap_holds() {
        let spec = FixtureSpec { images: 5, overlap_probability: 1.0, ..FixtureSpec::default() };
        for f in generate(&spec, 3).unwrap() {
            assert!(f.overlapping.len() as f64 <= 0.2 * f.nuclei.len() as f64);
        }
    }

    #[test]
    fn crowding_is_reported() {
        let spec = FixtureSpec { images: 1, height: 32, width: 32, nuclei: (200, 200), ..FixtureSpec::default() };
        assert!(matches!(generate_one(&spec, 0, 0), Err(FixtureError::Infeasible { .. })));
    }
}
