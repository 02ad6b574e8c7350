use nucseg_core::metrics::*;
use nucseg_core::predictor::InstanceSet;
use nucseg_core::Grid;
use nucseg_oracles::{best_assignment, metric_cases};
use proptest::prelude::*;

fn set(h: usize, w: usize, labels: &[u32]) -> InstanceSet {
    InstanceSet::from_label_map(&Grid::from_vec(h, w, labels.to_vec()))
}

#[test]
fn hand_computed_cases() {
    for case in metric_cases() {
        let gt = set(case.height, case.width, &case.gt);
        let pred = set(case.height, case.width, &case.pred);
        let r = evaluate(&gt, &pred).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
        assert!(close(r.aji, case.aji), "{}: aji {} vs {}", case.name, r.aji, case.aji);
        assert!(close(r.dq, case.dq), "{}: dq {} vs {}", case.name, r.dq, case.dq);
        assert!(close(r.sq, case.sq), "{}: sq {} vs {}", case.name, r.sq, case.sq);
        assert!(close(r.pq, case.pq), "{}: pq {} vs {}", case.name, r.pq, case.pq);
        assert!(close(r.dice, case.dice), "{}: dice {} vs {}", case.name, r.dice, case.dice);
    }
}

#[test]
fn greedy_agrees_with_exhaustive_matching_when_unambiguous() {
    // Instances far apart except for designed overlaps, so greedy is optimal.
    let gt = set(1, 40, &[&[1u32; 10][..], &[0; 5], &[2; 10], &[0; 15]].concat());
    let pred = set(1, 40, &[&[0u32; 2][..], &[1; 10], &[0; 5], &[2; 6], &[0; 17]].concat());
    let matches = greedy_match(&gt, &pred, 0.0);
    let weights: Vec<Vec<f64>> =
        gt.instances.iter().map(|g| pred.instances.iter().map(|p| g.iou(p)).collect()).collect();
    let (best, assignment) = best_assignment(&weights);
    let total: f64 = matches.iter().map(|m| m.iou).sum();
    assert!((total - best).abs() < 1e-12);
    for m in &matches {
        assert_eq!(assignment[m.gt], Some(m.pred));
    }
}

#[test]
fn shape_mismatch_is_an_error() {
    let a = set(1, 4, &[1, 1, 0, 0]);
    let b = set(2, 2, &[1, 1, 0, 0]);
    assert!(evaluate(&a, &b).is_err());
}

fn permute(labels: &[u32], shift: u32) -> Vec<u32> {
    labels.iter().map(|&l| if l == 0 { 0 } else { (l + shift) % 5 + 1 }).collect()
}

proptest! {
    #[test]
    fn metric_identities(gt in prop::collection::vec(0u32..5, 36), pred in prop::collection::vec(0u32..5, 36), shift in 0u32..5) {
        let g = set(6, 6, &gt);
        let p = set(6, 6, &pred);
        let r = evaluate(&g, &p).unwrap();
        prop_assert!((r.pq - r.dq * r.sq).abs() <= 1e-12);
        for v in [r.aji, r.dq, r.sq, r.pq, r.dice] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let relabeled = evaluate(&set(6, 6, &permute(&gt, shift)), &set(6, 6, &permute(&pred, shift + 2))).unwrap();
        // Greedy ties break on index order, so AJI is only identity-free
        // when no two candidate pairs share an IoU.
        let mut ious: Vec<f64> = overlapping_pairs(&g, &p, 0.0).iter().map(|m| m.iou).collect();
        ious.sort_by(f64::total_cmp);
        if ious.windows(2).all(|w| w[0] != w[1]) {
            prop_assert!((relabeled.aji - r.aji).abs() <= 1e-12);
        }
        prop_assert!((relabeled.dice - r.dice).abs() <= 1e-12);
        prop_assert!((relabeled.dq - r.dq).abs() <= 1e-12);
        let same = evaluate(&g, &g).unwrap();
        prop_assert_eq!((same.aji, same.pq, same.dice), (1.0, 1.0, 1.0));
    }
}
