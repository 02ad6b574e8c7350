//! Binary-mask primitives: connected components, exact Euclidean distance
//! transform, disk dilation, hole filling, peak picking and marker-based
//! watershed flooding.

use alloc::collections::{BinaryHeap, VecDeque};
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::grid::{BinaryMask, Grid};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

const N4: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
const N8: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &N4,
            Connectivity::Eight => &N8,
        }
    }
}

#[inline]
fn step(r: usize, c: usize, d: (isize, isize), h: usize, w: usize) -> Option<(usize, usize)> {
    let nr = r as isize + d.0;
    let nc = c as isize + d.1;
    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
        None
    } else {
        Some((nr as usize, nc as usize))
    }
}

/// Connected-component labelling result. Labels start at 1 in raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct Components {
    pub labels: Grid<u32>,
    /// `areas[k]` is the pixel count of label `k + 1`.
    pub areas: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.areas.len()
    }

    pub fn largest_area(&self) -> usize {
        self.areas.iter().copied().max().unwrap_or(0)
    }
}

pub fn connected_components(mask: &BinaryMask, conn: Connectivity) -> Components {
    let (h, w) = mask.shape();
    let mut labels = Grid::filled(h, w, 0u32);
    let mut areas = Vec::new();
    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            if !*mask.get(r, c) || *labels.get(r, c) != 0 {
                continue;
            }
            let label = areas.len() as u32 + 1;
            let mut area = 0usize;
            labels.set(r, c, label);
            queue.push_back((r, c));
            while let Some((pr, pc)) = queue.pop_front() {
                area += 1;
                for &d in conn.offsets() {
                    if let Some((nr, nc)) = step(pr, pc, d, h, w) {
                        if *mask.get(nr, nc) && *labels.get(nr, nc) == 0 {
                            labels.set(nr, nc, label);
                            queue.push_back((nr, nc));
                        }
                    }
                }
            }
            areas.push(area);
        }
    }
    Components { labels, areas }
}

const EDT_INF: f64 = 1e20;

/// 1-D lower envelope of parabolas (Felzenszwalb & Huttenlocher).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, slot) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *slot = d * d + f[p];
    }
}

/// Exact Euclidean distance from every `true` pixel to the nearest `false`
/// pixel. Pixels outside the raster count as `false`; `false` pixels map to 0.
pub fn distance_transform(mask: &BinaryMask) -> Grid<f64> {
    let (h, w) = mask.shape();
    // pad by one so the outside acts as background
    let (ph, pw) = (h + 2, w + 2);
    let mut sq = vec![0.0f64; ph * pw];
    for r in 0..h {
        for c in 0..w {
            if *mask.get(r, c) {
                sq[(r + 1) * pw + c + 1] = EDT_INF;
            }
        }
    }
    let n = ph.max(pw);
    let (mut f, mut out, mut v, mut z) = (vec![0.0; n], vec![0.0; n], vec![0usize; n], vec![0.0; n + 1]);
    for c in 0..pw {
        for r in 0..ph {
            f[r] = sq[r * pw + c];
        }
        edt_1d(&f[..ph], &mut out[..ph], &mut v, &mut z);
        for r in 0..ph {
            sq[r * pw + c] = out[r];
        }
    }
    for r in 0..ph {
        f[..pw].copy_from_slice(&sq[r * pw..(r + 1) * pw]);
        edt_1d(&f[..pw], &mut out[..pw], &mut v, &mut z);
        sq[r * pw..(r + 1) * pw].copy_from_slice(&out[..pw]);
    }
    Grid::from_fn(h, w, |r, c| math::sqrt(sq[(r + 1) * pw + c + 1]))
}

/// Distance from every pixel to the nearest `true` pixel (no padding: the
/// outside is ignored). An all-`false` mask yields `f64::INFINITY`.
pub fn distance_to_set(mask: &BinaryMask) -> Grid<f64> {
    let (h, w) = mask.shape();
    if !mask.any() {
        return Grid::filled(h, w, f64::INFINITY);
    }
    let mut sq: Vec<f64> = mask.as_slice().iter().map(|&v| if v { 0.0 } else { EDT_INF }).collect();
    let n = h.max(w);
    let (mut f, mut out, mut v, mut z) = (vec![0.0; n], vec![0.0; n], vec![0usize; n], vec![0.0; n + 1]);
    for c in 0..w {
        for r in 0..h {
            f[r] = sq[r * w + c];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for r in 0..h {
            sq[r * w + c] = out[r];
        }
    }
    for r in 0..h {
        f[..w].copy_from_slice(&sq[r * w..(r + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        sq[r * w..(r + 1) * w].copy_from_slice(&out[..w]);
    }
    Grid::from_vec(h, w, sq.into_iter().map(math::sqrt).collect())
}

/// Dilation by a Euclidean disk of the given radius.
pub fn dilate_disk(mask: &BinaryMask, radius: f64) -> BinaryMask {
    if radius <= 0.0 {
        return mask.clone();
    }
    distance_to_set(mask).map(|&d| d <= radius)
}

/// Fills background components that do not touch the raster border.
pub fn fill_holes(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = mask.shape();
    let bg = mask.complement();
    let comps = connected_components(&bg, Connectivity::Four);
    let mut touches = vec![false; comps.count() + 1];
    for r in 0..h {
        for c in 0..w {
            if r == 0 || c == 0 || r + 1 == h || c + 1 == w {
                touches[*comps.labels.get(r, c) as usize] = true;
            }
        }
    }
    Grid::from_fn(h, w, |r, c| {
        let l = *comps.labels.get(r, c) as usize;
        *mask.get(r, c) || (l != 0 && !touches[l])
    })
}

/// Regional maxima of `dist` inside `mask` (8-neighbourhood, value > 0),
/// thinned so no two accepted peaks are closer than `min_separation`.
/// Stronger peaks win; ties go to the earlier raster index.
pub fn local_maxima(dist: &Grid<f64>, mask: &BinaryMask, min_separation: f64) -> Vec<(usize, usize)> {
    let (h, w) = dist.shape();
    let mut candidates = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let d = *dist.get(r, c);
            if !*mask.get(r, c) || d <= 0.0 {
                continue;
            }
            let is_max = N8.iter().all(|&o| match step(r, c, o, h, w) {
                Some((nr, nc)) => !*mask.get(nr, nc) || *dist.get(nr, nc) <= d,
                None => true,
            });
            if is_max {
                candidates.push((r, c));
            }
        }
    }
    candidates.sort_by(|a, b| dist.get(b.0, b.1).total_cmp(dist.get(a.0, a.1)).then(a.cmp(b)));
    let sep2 = min_separation * min_separation;
    let mut accepted: Vec<(usize, usize)> = Vec::new();
    for p in candidates {
        let far = accepted.iter().all(|q| {
            let dr = p.0 as f64 - q.0 as f64;
            let dc = p.1 as f64 - q.1 as f64;
            dr * dr + dc * dc >= sep2
        });
        if far {
            accepted.push(p);
        }
    }
    accepted
}

#[derive(PartialEq)]
struct FloodItem {
    level: f64,
    order: u64,
    index: usize,
}

impl Eq for FloodItem {}

impl Ord for FloodItem {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (level, order)
        other.level.total_cmp(&self.level).then(other.order.cmp(&self.order))
    }
}

impl PartialOrd for FloodItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Marker-controlled watershed by priority flooding of `elevation`.
///
/// Marker `k` (0-based) seeds label `k + 1`. Every pixel of `mask`
/// reachable from a marker receives exactly one label; unreachable pixels
/// and pixels outside `mask` stay 0.
pub fn watershed(elevation: &Grid<f64>, markers: &[(usize, usize)], mask: &BinaryMask, conn: Connectivity) -> Grid<u32> {
    let (h, w) = elevation.shape();
    let mut labels = Grid::filled(h, w, 0u32);
    let mut heap = BinaryHeap::new();
    let mut order = 0u64;
    for (k, &(r, c)) in markers.iter().enumerate() {
        if !*mask.get(r, c) || *labels.get(r, c) != 0 {
            continue;
        }
        labels.set(r, c, k as u32 + 1);
        heap.push(FloodItem { level: *elevation.get(r, c), order, index: r * w + c });
        order += 1;
    }
    while let Some(item) = heap.pop() {
        let (r, c) = (item.index / w, item.index % w);
        let label = *labels.get(r, c);
        for &d in conn.offsets() {
            if let Some((nr, nc)) = step(r, c, d, h, w) {
                if *mask.get(nr, nc) && *labels.get(nr, nc) == 0 {
                    labels.set(nr, nc, label);
                    let level = elevation.get(nr, nc).max(item.level);
                    heap.push(FloodItem { level, order, index: nr * w + nc });
                    order += 1;
                }
            }
        }
    }
    labels
}

/// Pixel-count centroid of every label `1..=n` (row, col), `None` for empty labels.
pub fn label_centroids(labels: &Grid<u32>, n: usize) -> Vec<Option<(f64, f64)>> {
    let mut acc = vec![(0.0f64, 0.0f64, 0usize); n + 1];
    for r in 0..labels.height() {
        for c in 0..labels.width() {
            let l = *labels.get(r, c) as usize;
            if l != 0 && l <= n {
                acc[l].0 += r as f64;
                acc[l].1 += c as f64;
                acc[l].2 += 1;
            }
        }
    }
    acc.into_iter()
        .skip(1)
        .map(|(sr, sc, k)| if k == 0 { None } else { Some((sr / k as f64, sc / k as f64)) })
        .collect()
}
