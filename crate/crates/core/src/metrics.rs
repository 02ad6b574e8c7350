//! Instance- and pixel-level segmentation metrics.
//!
//! Matching is greedy on IoU with a strict `IoU > τ` test. When both sets
//! are empty every metric is 1; when exactly one is empty every metric is 0.

use alloc::vec::Vec;

use crate::predictor::InstanceSet;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("ground truth is {gt:?} but prediction is {pred:?}")]
pub struct ShapeMismatch {
    pub gt: (usize, usize),
    pub pred: (usize, usize),
}

fn check(gt: &InstanceSet, pred: &InstanceSet) -> Result<(), ShapeMismatch> {
    if (gt.height, gt.width) != (pred.height, pred.width) {
        return Err(ShapeMismatch { gt: (gt.height, gt.width), pred: (pred.height, pred.width) });
    }
    Ok(())
}

/// A matched ground-truth / prediction pair.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Match {
    pub gt: usize,
    pub pred: usize,
    pub iou: f64,
    pub intersection: usize,
    pub union: usize,
}

/// Dice of the binarized foregrounds, `2|G ∩ P| / (|G| + |P|)`.
pub fn dice(gt: &InstanceSet, pred: &InstanceSet) -> Result<f64, ShapeMismatch> {
    check(gt, pred)?;
    let g = gt.foreground();
    let p = pred.foreground();
    let (ng, np) = (g.count(), p.count());
    if ng + np == 0 {
        return Ok(1.0);
    }
    let inter = g.intersection(&p).count();
    Ok(2.0 * inter as f64 / (ng + np) as f64)
}

/// Every pair with `IoU > min_iou`, sorted by IoU descending (ties to the
/// smaller gt index, then pred index).
pub fn overlapping_pairs(gt: &InstanceSet, pred: &InstanceSet, min_iou: f64) -> Vec<Match> {
    let mut pairs = Vec::new();
    for (i, g) in gt.instances.iter().enumerate() {
        for (j, p) in pred.instances.iter().enumerate() {
            if g.bbox_iou(p) <= 0.0 {
                continue;
            }
            let inter = g.intersection(p);
            if inter == 0 {
                continue;
            }
            let union = g.area() + p.area() - inter;
            let iou = inter as f64 / union as f64;
            if iou > min_iou {
                pairs.push(Match { gt: i, pred: j, iou, intersection: inter, union });
            }
        }
    }
    pairs.sort_by(|a, b| b.iou.total_cmp(&a.iou).then(a.gt.cmp(&b.gt)).then(a.pred.cmp(&b.pred)));
    pairs
}

/// Greedy one-to-one matching over [`overlapping_pairs`].
pub fn greedy_match(gt: &InstanceSet, pred: &InstanceSet, min_iou: f64) -> Vec<Match> {
    let mut gt_used = alloc::vec![false; gt.len()];
    let mut pred_used = alloc::vec![false; pred.len()];
    let mut out = Vec::new();
    for m in overlapping_pairs(gt, pred, min_iou) {
        if !gt_used[m.gt] && !pred_used[m.pred] {
            gt_used[m.gt] = true;
            pred_used[m.pred] = true;
            out.push(m);
        }
    }
    out
}

/// Aggregated Jaccard index over a greedy matching with `IoU > 0`.
pub fn aji(gt: &InstanceSet, pred: &InstanceSet) -> Result<f64, ShapeMismatch> {
    check(gt, pred)?;
    if gt.is_empty() && pred.is_empty() {
        return Ok(1.0);
    }
    let matches = greedy_match(gt, pred, 0.0);
    Ok(aji_from_matches(gt, pred, &matches))
}

fn aji_from_matches(gt: &InstanceSet, pred: &InstanceSet, matches: &[Match]) -> f64 {
    let mut gt_used = alloc::vec![false; gt.len()];
    let mut pred_used = alloc::vec![false; pred.len()];
    let (mut inter, mut union) = (0usize, 0usize);
    for m in matches {
        gt_used[m.gt] = true;
        pred_used[m.pred] = true;
        inter += m.intersection;
        union += m.union;
    }
    union += gt.instances.iter().zip(&gt_used).filter(|(_, &u)| !u).map(|(g, _)| g.area()).sum::<usize>();
    union += pred.instances.iter().zip(&pred_used).filter(|(_, &u)| !u).map(|(p, _)| p.area()).sum::<usize>();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Detection, segmentation and panoptic quality.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Panoptic {
    pub dq: f64,
    pub sq: f64,
    pub pq: f64,
}

/// Default IoU threshold for a true positive.
pub const PANOPTIC_TAU: f64 = 0.5;

pub fn panoptic(gt: &InstanceSet, pred: &InstanceSet, tau: f64) -> Result<Panoptic, ShapeMismatch> {
    check(gt, pred)?;
    if gt.is_empty() && pred.is_empty() {
        return Ok(Panoptic { dq: 1.0, sq: 1.0, pq: 1.0 });
    }
    Ok(panoptic_from_matches(gt.len(), pred.len(), &greedy_match(gt, pred, tau)))
}

fn panoptic_from_matches(n_gt: usize, n_pred: usize, tp: &[Match]) -> Panoptic {
    let t = tp.len() as f64;
    let fp = (n_pred - tp.len()) as f64;
    let fne = (n_gt - tp.len()) as f64;
    let dq = t / (t + 0.5 * fp + 0.5 * fne);
    let sq = if tp.is_empty() { 0.0 } else { tp.iter().map(|m| m.iou).sum::<f64>() / t };
    Panoptic { dq, sq, pq: dq * sq }
}

/// All metrics for one image.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub aji: f64,
    pub dq: f64,
    pub sq: f64,
    pub pq: f64,
    pub dice: f64,
    /// True-positive matches at the panoptic threshold.
    pub matches: Vec<Match>,
}

pub fn evaluate(gt: &InstanceSet, pred: &InstanceSet) -> Result<EvalReport, ShapeMismatch> {
    let p = panoptic(gt, pred, PANOPTIC_TAU)?;
    Ok(EvalReport {
        aji: aji(gt, pred)?,
        dq: p.dq,
        sq: p.sq,
        pq: p.pq,
        dice: dice(gt, pred)?,
        matches: greedy_match(gt, pred, PANOPTIC_TAU),
    })
}

/// Unweighted mean of per-image metrics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Summary {
    pub images: usize,
    pub aji: f64,
    pub dq: f64,
    pub sq: f64,
    pub pq: f64,
    pub dice: f64,
}

pub fn summarize<'a>(reports: impl IntoIterator<Item = &'a EvalReport>) -> Summary {
    let mut s = Summary::default();
    for r in reports {
        s.images += 1;
        s.aji += r.aji;
        s.dq += r.dq;
        s.sq += r.sq;
        s.pq += r.pq;
        s.dice += r.dice;
    }
    if s.images > 0 {
        let n = s.images as f64;
        s.aji /= n;
        s.dq /= n;
        s.sq /= n;
        s.pq /= n;
        s.dice /= n;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::Instance;

    fn rect(r0: usize, c0: usize, h: usize, w: usize) -> Instance {
        let px: Vec<(usize, usize)> = (r0..r0 + h).flat_map(|r| (c0..c0 + w).map(move |c| (r, c))).collect();
        Instance::from_pixels(&px, 1.0, None).unwrap()
    }

    fn set(v: Vec<Instance>) -> InstanceSet {
        InstanceSet { height: 30, width: 30, instances: v }
    }

    #[test]
    fn split_instance_aji_is_one_third() {
        let gt = set(vec![rect(0, 0, 10, 10)]);
        let pred = set(vec![rect(0, 0, 10, 5), rect(0, 5, 10, 5)]);
        assert!((aji(&gt, &pred).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn panoptic_two_gt_one_pred() {
        let gt = set(vec![rect(0, 0, 10, 10), rect(20, 20, 5, 5)]);
        // IoU 0.8 with the first gt: 80 px inside a 100 px gt
        let pred = set(vec![rect(0, 0, 8, 10)]);
        let p = panoptic(&gt, &pred, 0.5).unwrap();
        assert!((p.dq - 2.0 / 3.0).abs() < 1e-12);
        assert!((p.sq - 0.8).abs() < 1e-12);
        assert!((p.pq - p.dq * p.sq).abs() < 1e-15);
    }

    #[test]
    fn strict_threshold() {
        let gt = set(vec![rect(0, 0, 10, 10)]);
        let pred = set(vec![rect(0, 0, 5, 10)]);
        assert!(greedy_match(&gt, &pred, 0.5).is_empty());
        assert_eq!(greedy_match(&gt, &pred, 0.0).len(), 1);
    }

    #[test]
    fn empty_conventions() {
        let e = set(vec![]);
        let g = set(vec![rect(0, 0, 3, 3)]);
        assert_eq!(aji(&e, &e).unwrap(), 1.0);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(aji(&g, &e).unwrap(), 0.0);
        assert_eq!(dice(&g, &e).unwrap(), 0.0);
        assert_eq!(panoptic(&e, &g, 0.5).unwrap().pq, 0.0);
    }

    #[test]
    fn shape_mismatch_errors() {
        let a = InstanceSet::new(3, 3);
        let b = InstanceSet::new(3, 4);
        assert!(dice(&a, &b).is_err());
    }
}
