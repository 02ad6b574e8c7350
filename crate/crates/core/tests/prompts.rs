use nucseg_core::predictor::*;
use nucseg_core::prompting::*;
use nucseg_core::{BinaryMask, Grid, RasterImage};
use nucseg_oracles::component_sizes;
use proptest::prelude::*;

fn disks(h: usize, w: usize, centers: &[(f64, f64, f64)]) -> BinaryMask {
    Grid::from_fn(h, w, |r, c| {
        centers.iter().any(|&(cr, cc, rad)| (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2) <= rad * rad)
    })
}

#[test]
fn separate_disks_give_one_region_each() {
    let region = disks(48, 48, &[(10.0, 10.0, 6.0), (30.0, 35.0, 8.0), (38.0, 8.0, 4.0)]);
    let (labels, n) = split_regions(&region, 5.0, 10);
    assert_eq!(n, 3);
    let mut sizes: Vec<usize> = (1..=n as u32).map(|l| labels.as_slice().iter().filter(|&&x| x == l).count()).collect();
    sizes.sort_unstable();
    assert_eq!(sizes, component_sizes(region.as_slice(), 48, 48, true));
    let points = positive_points(&region, 5.0, 10);
    assert_eq!(points.len(), 3);
    assert!(points.iter().all(|&(r, c)| *region.get(r, c)));
}

#[test]
fn touching_disks_are_split_at_the_neck() {
    let region = disks(40, 60, &[(20.0, 18.0, 10.0), (20.0, 36.0, 10.0)]);
    assert_eq!(component_sizes(region.as_slice(), 40, 60, true).len(), 1);
    let (labels, n) = split_regions(&region, 5.0, 10);
    assert_eq!(n, 2);
    assert_ne!(*labels.get(20, 12), *labels.get(20, 42));
    let points = positive_points(&region, 5.0, 10);
    let cols: Vec<usize> = points.iter().map(|p| p.1).collect();
    assert!(cols.iter().any(|&c| c < 27) && cols.iter().any(|&c| c > 27), "{points:?}");
}

#[test]
fn small_regions_emit_no_positive() {
    let region = disks(32, 32, &[(8.0, 8.0, 1.0), (20.0, 20.0, 6.0)]);
    assert_eq!(positive_points(&region, 5.0, 10).len(), 1);
}

#[test]
fn negatives_sit_on_the_lattice_inside_the_dilated_background() {
    let bg = Grid::from_fn(64, 64, |_, c| c >= 40);
    let exclude = Grid::from_fn(64, 64, |r, _| r < 8);
    let pts = negative_points(&bg, &exclude, 16, 10.0);
    assert!(!pts.is_empty());
    for &(r, c) in &pts {
        assert_eq!((r % 16, c % 16), (0, 0));
        assert!(c >= 30 && r >= 8);
    }
    assert!(pts.contains(&(16, 32)));
}

#[test]
fn merge_probe_fires_on_collapse() {
    let before = disks(40, 40, &[(5.0, 5.0, 2.0), (5.0, 20.0, 2.0), (5.0, 35.0, 2.0), (30.0, 10.0, 2.0)]);
    let after = disks(40, 40, &[(20.0, 20.0, 14.0)]);
    let cfg = StopConfig::default();
    let prev = merge_stop_probe(&before, 0, &cfg);
    assert!(!prev.fired);
    assert_eq!(prev.components, component_sizes(before.as_slice(), 40, 40, true).len());
    let next = merge_stop_probe(&after, prev.components, &cfg);
    assert!(next.fired);
    assert_eq!(next.largest, *component_sizes(after.as_slice(), 40, 40, true).last().unwrap());
    // a count drop without a giant component does not fire
    let small = disks(40, 40, &[(20.0, 20.0, 3.0)]);
    assert!(!merge_stop_probe(&small, prev.components, &cfg).fired);
}

#[test]
fn doubled_channel_leaves_the_maps_unchanged() {
    let fg = Grid::from_fn(16, 16, |r, c| ((r * 3 + c * 5) % 17) as f64 / 16.0);
    let bg = fg.map(|v| 1.0 - v);
    let one = ActivationStack { maps: vec![fg.clone(), bg.clone()], foreground: 1 };
    let two = ActivationStack { maps: vec![fg.clone(), fg, bg], foreground: 2 };
    assert_eq!(aggregate_and_binarize(&one).unwrap(), aggregate_and_binarize(&two).unwrap());
}

fn oracle_view(h: usize, w: usize, map: Grid<f64>) -> PatchView<'static> {
    PatchView {
        image_id: "disk",
        rect: PatchRect { index: 0, top: 0, left: 0, height: h, width: w },
        rgb: RasterImage::filled(h, w, [255, 255, 255]),
        hematoxylin: map,
    }
}

#[test]
fn oracle_mask_holds_the_positive_and_drops_negatives() {
    let nuclei = disks(48, 48, &[(16.0, 16.0, 7.0), (16.0, 28.0, 7.0), (36.0, 36.0, 6.0)]);
    let map = nuclei.map(|&on| if on { 0.9 } else { 0.01 });
    let view = oracle_view(48, 48, map);
    let oracle = OraclePredictor::default();
    let prompt = LocalPrompt { index: 0, positive: (16, 14), negatives: vec![(16, 17), (40, 5)] };
    let out = oracle.predict(&view, &prompt).unwrap();
    assert!(*out.mask.get(16, 14));
    assert!(!*out.mask.get(16, 17));
    assert!(!*out.mask.get(36, 36), "grew into a separate nucleus");
    assert!(!*out.mask.get(16, 32), "did not split touching nuclei");
    assert!((0.0..=1.0).contains(&out.score));
    assert_eq!(out, oracle.predict(&view, &prompt).unwrap());

    let background = LocalPrompt { index: 1, positive: (2, 45), negatives: vec![] };
    assert!(matches!(oracle.predict(&view, &background), Err(PredictError::EmptyGrowth(_))));
}

#[test]
fn chained_overlaps_merge_into_one() {
    let block = |c0: usize| {
        let px: Vec<(usize, usize)> = (0..10).flat_map(|r| (c0..c0 + 10).map(move |c| (r, c))).collect();
        Instance::from_pixels(&px, 0.1 * c0 as f64, None).unwrap()
    };
    let set = InstanceSet { height: 10, width: 40, instances: vec![block(0), block(1), block(2), block(25)] };
    let merged = merge_overlapped(&set, 0.8);
    assert_eq!(merged.len(), 2);
    assert_eq!(merged.instances[0].area(), 120);
    assert!((merged.instances[0].score - 0.2).abs() < 1e-12);
}

#[test]
fn patches_tile_the_image() {
    let layout = PatchLayout { patch_size: 64, overlap_ratio: 0.25 };
    let patches = layout.patches(150, 100);
    for r in 0..150 {
        for c in 0..100 {
            assert!(patches.iter().any(|p| p.contains((r, c))));
        }
    }
    assert!(patches.iter().all(|p| p.top + p.height <= 150 && p.left + p.width <= 100));
    let prompts = nucseg_core::prompting::PromptSet {
        image_id: "x".into(),
        positives: vec![(0, 0), (149, 99), (70, 50)],
        negatives: vec![(1, 1), (5, 5), (148, 98), (60, 60)],
    };
    let groups = assign_prompts_to_patches(&prompts, &patches, 2);
    assert_eq!(groups.len(), 3);
    for g in &groups {
        let rect = patches[g.patch];
        assert!(rect.contains(g.positive));
        assert!(g.negatives.iter().all(|&n| rect.contains(n)));
        assert!(g.negatives.len() <= 2);
    }
}

fn rect_instance(t: usize, l: usize, h: usize, w: usize) -> Instance {
    let px: Vec<(usize, usize)> = (t..t + h).flat_map(|r| (l..l + w).map(move |c| (r, c))).collect();
    Instance::from_pixels(&px, 0.5, None).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merged_masks_overlap_less_than_the_threshold(
        rects in prop::collection::vec((0usize..30, 0usize..30, 2usize..10, 2usize..10), 1..12),
        thr in 0.3f64..0.95,
    ) {
        let set = InstanceSet { height: 40, width: 40, instances: rects.iter().map(|&(t, l, h, w)| rect_instance(t, l, h, w)).collect() };
        let merged = merge_overlapped(&set, thr);
        for i in 0..merged.len() {
            for j in i + 1..merged.len() {
                prop_assert!(merged.instances[i].iou(&merged.instances[j]) < thr);
            }
        }
        prop_assert_eq!(merged.foreground(), set.foreground());
    }

    #[test]
    fn fg_and_bg_maps_are_disjoint(seed in any::<u64>()) {
        let mut x = seed | 1;
        let mut next = || { x ^= x << 13; x ^= x >> 7; x ^= x << 17; (x % 1000) as f64 / 1000.0 };
        let maps = (0..4).map(|_| Grid::from_fn(12, 12, |_, _| next())).collect();
        let stack = ActivationStack { maps, foreground: 2 };
        let (fg, bg) = aggregate_and_binarize(&stack).unwrap();
        prop_assert!(fg.is_disjoint(&bg));
    }
}
