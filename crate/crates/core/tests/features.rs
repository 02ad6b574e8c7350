use nucseg_core::features::*;
use nucseg_core::stain::{render_pixel, StainMatrix};
use nucseg_core::{Grid, RasterImage};
use nucseg_oracles::best_kmeans;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn objective(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .map(|p| {
            centroids
                .iter()
                .map(|c| p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

#[test]
fn kmeans_finds_the_exhaustive_optimum_on_separated_blobs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..10 {
        let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let points: Vec<Vec<f64>> = (0..9)
            .map(|i| {
                let c = centers[i % 3];
                vec![c[0] + rng.random_range(-1.0..1.0), c[1] + rng.random_range(-1.0..1.0)]
            })
            .collect();
        let refs: Vec<&[f64]> = points.iter().map(|p| p.as_slice()).collect();
        let got = kmeans(&refs, 3, trial);
        let (best, _) = best_kmeans(&points, 3);
        let ours = objective(&points, &got.centroids);
        assert!((ours - best).abs() <= 1e-9 * best.max(1.0), "trial {trial}: {ours} vs {best}");
        assert!((got.objective_trace.last().unwrap() - ours).abs() < 1e-9);
    }
}

#[test]
fn kmeans_never_beats_the_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..20 {
        let points: Vec<Vec<f64>> = (0..8).map(|_| vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
        let refs: Vec<&[f64]> = points.iter().map(|p| p.as_slice()).collect();
        let got = kmeans(&refs, 2, trial);
        let (best, _) = best_kmeans(&points, 2);
        assert!(objective(&points, &got.centroids) >= best - 1e-12);
    }
}

/// Red channel of every pixel equals the column index; the provider reports
/// each cell's patch-local column index plus the patch's left edge / 1000,
/// then a constant.
struct ProbeProvider;

impl FeatureProvider for ProbeProvider {
    fn dim(&self) -> usize {
        2
    }
    fn cell_size(&self) -> usize {
        4
    }
    fn encode(&self, patch: &RasterImage) -> Vec<f64> {
        let left = patch.rgb(0, 0)[0] as f64;
        let side = patch.width() / 4;
        (0..side * side).flat_map(|i| [(i % side) as f64 + left / 1000.0, 1.0]).collect()
    }
}

#[test]
fn stitching_averages_overlapping_patches() {
    let (h, w, patch, stride) = (16, 24, 8, 4);
    let mut img = RasterImage::filled(h, w, [0, 0, 0]);
    for r in 0..h {
        for c in 0..w {
            img.set_rgb(r, c, [c as u8, 0, 0]);
        }
    }
    let grid = encode_stitched(&img, &ProbeProvider, patch, stride).unwrap();
    assert_eq!((grid.height(), grid.width(), grid.cell()), (4, 6, 4));
    // Horizontal origins 0, 4, ..., 16; a cell at column index gc is covered
    // by every origin o with o/4 <= gc < o/4 + 2.
    for gc in 0..6 {
        let values: Vec<f64> = (0..=16)
            .step_by(4)
            .filter(|&o| o / 4 <= gc && gc < o / 4 + 2)
            .map(|o| (gc - o / 4) as f64 + o as f64 / 1000.0)
            .collect();
        let expect = values.iter().sum::<f64>() / values.len() as f64;
        for gr in 0..4 {
            assert!((grid.vector(gr, gc)[0] - expect).abs() < 1e-12, "cell ({gr},{gc})");
        }
    }
}

#[test]
fn stitching_rejects_bad_geometry() {
    let img = RasterImage::filled(16, 16, [255, 255, 255]);
    assert!(encode_stitched(&img, &ProbeProvider, 8, 12).is_err());
    assert!(encode_stitched(&img, &ProbeProvider, 6, 4).is_err());
    assert!(encode_stitched(&img, &ProbeProvider, 32, 4).is_err());
}

#[test]
fn builtin_features_separate_a_dark_disk() {
    let q = StainMatrix::ruifrok_johnston();
    let (h, w) = (64, 64);
    let inside = |r: usize, c: usize| (r as f64 - 31.5).powi(2) + (c as f64 - 31.5).powi(2) <= 144.0;
    let mut img = RasterImage::filled(h, w, [0, 0, 0]);
    for r in 0..h {
        for c in 0..w {
            let px = if inside(r, c) { render_pixel(&q, 1.0, 0.05) } else { render_pixel(&q, 0.03, 0.3) };
            img.set_rgb(r, c, px);
        }
    }
    let provider = BuiltinProvider::new(4, &q).unwrap();
    assert_eq!(provider.dim(), 9);
    let grid = encode_stitched(&img, &provider, 32, 16).unwrap();
    let centre = grid.vector(7, 7);
    let corner = grid.vector(0, 0);
    // mean hematoxylin, then mean eosin
    assert!(centre[3] > 5.0 * corner[3]);
    assert!(corner[4] > centre[4]);
    assert_eq!(centre[8], 1.0);
}

#[test]
fn prototypes_come_out_foreground_first() {
    let data: Vec<f64> = (0..16).flat_map(|i| if i < 8 { [1.0, 0.0] } else { [0.0, 1.0] }).collect();
    let grid = FeatureGrid::new(4, 4, 2, 4, data).unwrap();
    let fg = Grid::from_fn(4, 4, |r, _| r < 2);
    let bg = fg.complement();
    let set = extract_prototypes(&grid, &fg, &bg, 2, 0).unwrap();
    assert_eq!(set.len(), 4);
    assert_eq!(set.row(0), &[1.0, 0.0]);
    assert_eq!(set.row(3), &[0.0, 1.0]);
    assert_eq!(set.class_of(1), ClassLabel::Foreground);
    assert_eq!(set.class_of(2), ClassLabel::Background);
    assert!(matches!(
        extract_prototypes(&grid, &Grid::filled(4, 4, false), &bg, 2, 0),
        Err(FeatureError::TooFewCells { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kmeans_objective_never_increases(seed in any::<u64>(), n in 4usize..40, k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let refs: Vec<&[f64]> = points.iter().map(|p| p.as_slice()).collect();
        let km = kmeans(&refs, k, seed);
        for pair in km.objective_trace.windows(2) {
            prop_assert!(pair[1] <= pair[0] + 1e-9);
        }
        prop_assert_eq!(km, kmeans(&refs, k, seed));
    }

    #[test]
    fn prototypes_ignore_unmasked_cells(seed in any::<u64>(), junk in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, d) = (6, 6, 3);
        let data: Vec<f64> = (0..h * w * d).map(|_| rng.random_range(0.1..1.0)).collect();
        let fg = Grid::from_fn(h, w, |r, c| r < 2 && c < 4);
        let bg = Grid::from_fn(h, w, |r, _| r >= 4);
        let a = FeatureGrid::new(h, w, d, 4, data.clone()).unwrap();
        let mut altered = data;
        for r in 2..4 {
            for c in 0..w {
                for k in 0..d {
                    altered[(r * w + c) * d + k] = junk;
                }
            }
        }
        let b = FeatureGrid::new(h, w, d, 4, altered).unwrap();
        prop_assert_eq!(extract_prototypes(&a, &fg, &bg, 2, seed).unwrap(), extract_prototypes(&b, &fg, &bg, 2, seed).unwrap());
    }
}
