//! Slow, independent reference implementations used only by tests.
//!
//! Nothing here shares code with the production crates: transport optima
//! come from an exact min-cost-flow LP, thresholds from exhaustive scans,
//! matchings from enumerating permutations.

/// Exact linear transport by successive shortest paths.
///
/// Rows `i` supply at most `row_caps[i]`, columns `j` absorb at most
/// `col_caps[j]`, and `total` units are pushed. Returns the optimal cost and
/// the `n × m` flow, or `None` when `total` cannot be routed.
pub fn min_cost_flow(
    cost: &[f64],
    n: usize,
    m: usize,
    row_caps: &[f64],
    col_caps: &[f64],
    total: f64,
) -> Option<(f64, Vec<f64>)> {
    const TINY: f64 = 1e-15;
    // nodes: 0 source, 1..=n rows, n+1..=n+m cols, n+m+1 sink
    let sink = n + m + 1;
    let nodes = n + m + 2;
    let mut edges: Vec<(usize, usize, f64, f64)> = Vec::new(); // (from, to, cap, cost)
    let add = |edges: &mut Vec<(usize, usize, f64, f64)>, a: usize, b: usize, cap: f64, c: f64| {
        edges.push((a, b, cap, c));
        edges.push((b, a, 0.0, -c));
    };
    for i in 0..n {
        add(&mut edges, 0, 1 + i, row_caps[i], 0.0);
    }
    for i in 0..n {
        for j in 0..m {
            add(&mut edges, 1 + i, 1 + n + j, f64::INFINITY, cost[i * m + j]);
        }
    }
    for j in 0..m {
        add(&mut edges, 1 + n + j, sink, col_caps[j], 0.0);
    }
    let mut remaining = total;
    while remaining > 1e-14 {
        let mut dist = vec![f64::INFINITY; nodes];
        let mut via = vec![usize::MAX; nodes];
        dist[0] = 0.0;
        for _ in 0..nodes {
            let mut changed = false;
            for (e, &(a, b, cap, c)) in edges.iter().enumerate() {
                if cap > TINY && dist[a] + c < dist[b] - 1e-15 {
                    dist[b] = dist[a] + c;
                    via[b] = e;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        if !dist[sink].is_finite() {
            return None;
        }
        let mut push = remaining;
        let mut node = sink;
        while node != 0 {
            let e = via[node];
            push = push.min(edges[e].2);
            node = edges[e].0;
        }
        let mut node = sink;
        while node != 0 {
            let e = via[node];
            edges[e].2 -= push;
            edges[e ^ 1].2 += push;
            node = edges[e].0;
        }
        remaining -= push;
    }
    let mut flow = vec![0.0; n * m];
    let mut value = 0.0;
    let mut e = 2 * n;
    for i in 0..n {
        for j in 0..m {
            let f = edges[e + 1].2;
            flow[i * m + j] = f;
            value += f * cost[i * m + j];
            e += 2;
        }
    }
    Some((value, flow))
}

fn generalized_kl(x: &[f64], beta: f64) -> f64 {
    x.iter().map(|&v| if v > 0.0 { v * (v / beta).ln() - v + beta } else { beta }).sum()
}

fn golden_min(mut lo: f64, mut hi: f64, tol: f64, mut f: impl FnMut(f64) -> f64) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - r * (hi - lo);
    let mut x2 = lo + r * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - r * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + r * (hi - lo);
            f2 = f(x2);
        }
    }
    let mut best = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
    for x in [lo, hi] {
        let v = f(x);
        if v < best.1 {
            best = (x, v);
        }
    }
    best
}

/// Optimal value of the unregularized partial transport problem
///
/// `min ⟨T, C⟩ + λ·KL(Tᵀ1 ‖ ρ/M·1)` over `T ≥ 0`, `T1 ≤ 1/N`, `1ᵀT1 = ρ`,
///
/// with the generalized KL. The column masses are optimized by nested
/// golden-section search (the objective is jointly convex in them) and each
/// inner problem is an exact LP. Supports `1 ≤ M ≤ 3`.
pub fn partial_ot_optimum(cost: &[f64], n: usize, m: usize, rho: f64, lambda: f64) -> (f64, Vec<f64>) {
    assert!((1..=3).contains(&m), "oracle handles at most three columns");
    let row_caps = vec![1.0 / n as f64; n];
    let beta = rho / m as f64;
    let eval = |cols: &[f64]| -> f64 {
        let (lp, _) = min_cost_flow(cost, n, m, &row_caps, cols, rho).expect("column masses are routable");
        lp + lambda * generalized_kl(cols, beta)
    };
    let tol = 1e-10;
    match m {
        1 => (eval(&[rho]), vec![rho]),
        2 => {
            let (c0, v) = golden_min(0.0, rho, tol, |c0| eval(&[c0, rho - c0]));
            (v, vec![c0, rho - c0])
        }
        _ => {
            let inner = |c0: f64| golden_min(0.0, rho - c0, tol, |c1| eval(&[c0, c1, (rho - c0 - c1).max(0.0)]));
            let (c0, v) = golden_min(0.0, rho, tol, |c0| inner(c0).1);
            let (c1, _) = inner(c0);
            (v, vec![c0, c1, (rho - c0 - c1).max(0.0)])
        }
    }
}

/// Every `t` maximizing Otsu's between-class variance, by direct evaluation
/// of `w0(θ0 − θT)² + w1(θ1 − θT)²` for each split.
pub fn otsu_argmax_set(hist: &[f64]) -> Vec<usize> {
    let total: f64 = hist.iter().sum();
    let mean_t: f64 = hist.iter().enumerate().map(|(i, h)| i as f64 * h).sum::<f64>() / total;
    let mut scores = Vec::new();
    for t in 0..hist.len() - 1 {
        let w0: f64 = hist[..=t].iter().sum::<f64>();
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            scores.push(f64::NEG_INFINITY);
            continue;
        }
        let m0 = hist[..=t].iter().enumerate().map(|(i, h)| i as f64 * h).sum::<f64>() / w0;
        let m1 = hist[t + 1..].iter().enumerate().map(|(i, h)| (i + t + 1) as f64 * h).sum::<f64>() / w1;
        scores.push((w0 / total) * (m0 - mean_t).powi(2) + (w1 / total) * (m1 - mean_t).powi(2));
    }
    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    scores.iter().enumerate().filter(|(_, &s)| s >= best * (1.0 - 1e-12)).map(|(t, _)| t).collect()
}

/// Maximum total weight over all one-to-one assignments of rows to columns
/// (either side may stay unassigned), by exhaustive search.
pub fn best_assignment(weights: &[Vec<f64>]) -> (f64, Vec<Option<usize>>) {
    fn go(
        row: usize,
        weights: &[Vec<f64>],
        used: &mut Vec<bool>,
        current: &mut Vec<Option<usize>>,
        acc: f64,
        best: &mut (f64, Vec<Option<usize>>),
    ) {
        if row == weights.len() {
            if acc > best.0 {
                *best = (acc, current.clone());
            }
            return;
        }
        current.push(None);
        go(row + 1, weights, used, current, acc, best);
        current.pop();
        for j in 0..used.len() {
            if !used[j] && weights[row][j] > 0.0 {
                used[j] = true;
                current.push(Some(j));
                go(row + 1, weights, used, current, acc + weights[row][j], best);
                current.pop();
                used[j] = false;
            }
        }
    }
    let cols = weights.first().map_or(0, |r| r.len());
    let mut best = (0.0, vec![None; weights.len()]);
    go(0, weights, &mut vec![false; cols], &mut Vec::new(), 0.0, &mut best);
    best
}

/// Euclidean distance from every pixel to the nearest `false` pixel, by
/// scanning all pixels; pixels outside the grid count as `false`.
pub fn brute_distance_transform(mask: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            if !mask[r * w + c] {
                continue;
            }
            let border = [r + 1, c + 1, h - r, w - c].into_iter().min().unwrap() as f64;
            let mut best = border * border;
            for rr in 0..h {
                for cc in 0..w {
                    if !mask[rr * w + cc] {
                        let d = (rr as f64 - r as f64).powi(2) + (cc as f64 - c as f64).powi(2);
                        best = best.min(d);
                    }
                }
            }
            out[r * w + c] = best.sqrt();
        }
    }
    out
}

/// Connected components by repeated label propagation until nothing changes.
/// Returns the component count and each component's size, sorted.
pub fn component_sizes(mask: &[bool], h: usize, w: usize, eight: bool) -> Vec<usize> {
    let mut label: Vec<usize> = (0..h * w).collect();
    loop {
        let mut changed = false;
        for r in 0..h {
            for c in 0..w {
                if !mask[r * w + c] {
                    continue;
                }
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        if (dr == 0 && dc == 0) || (!eight && dr != 0 && dc != 0) {
                            continue;
                        }
                        let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                        if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                            continue;
                        }
                        let q = rr as usize * w + cc as usize;
                        if mask[q] && label[q] < label[r * w + c] {
                            label[r * w + c] = label[q];
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut sizes = std::collections::BTreeMap::new();
    for (i, &l) in label.iter().enumerate() {
        if mask[i] {
            *sizes.entry(l).or_insert(0usize) += 1;
        }
    }
    let mut v: Vec<usize> = sizes.into_values().collect();
    v.sort_unstable();
    v
}

/// Smallest K-means objective over every partition of `points` into at most
/// `k` non-empty groups, with the matching centroids.
pub fn best_kmeans(points: &[Vec<f64>], k: usize) -> (f64, Vec<Vec<f64>>) {
    let n = points.len();
    let d = points[0].len();
    let mut best = (f64::INFINITY, Vec::new());
    let mut labels = vec![0usize; n];
    let combos = k.pow(n as u32);
    for code in 0..combos {
        let mut x = code;
        for l in labels.iter_mut() {
            *l = x % k;
            x /= k;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        if counts.iter().any(|&c| c == 0) {
            continue;
        }
        let cents: Vec<Vec<f64>> =
            sums.iter().zip(&counts).map(|(s, &c)| s.iter().map(|v| v / c as f64).collect()).collect();
        let obj: f64 = points
            .iter()
            .zip(&labels)
            .map(|(p, &l)| p.iter().zip(&cents[l]).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum();
        if obj < best.0 {
            best = (obj, cents);
        }
    }
    best
}


/// A ground-truth/prediction label-map pair with metric values worked out by
/// hand from pixel counts.
#[derive(Debug, Clone)]
pub struct MetricCase {
    pub name: &'static str,
    pub height: usize,
    pub width: usize,
    pub gt: Vec<u32>,
    pub pred: Vec<u32>,
    pub aji: f64,
    pub dq: f64,
    pub sq: f64,
    pub pq: f64,
    pub dice: f64,
}

fn strip(len: usize, runs: &[(usize, usize, u32)]) -> Vec<u32> {
    let mut v = vec![0; len];
    for &(a, b, l) in runs {
        v[a..b].fill(l);
    }
    v
}

/// Ten constructed pairs. Strips are `1 × n`; the split case is a 10 × 10
/// block cut into two 5-column halves.
pub fn metric_cases() -> Vec<MetricCase> {
    let case = |name, width, gt: Vec<u32>, pred: Vec<u32>, v: [f64; 5]| MetricCase {
        name,
        height: 1,
        width,
        gt,
        pred,
        aji: v[0],
        dq: v[1],
        sq: v[2],
        pq: v[3],
        dice: v[4],
    };
    let block: Vec<u32> = vec![1; 100];
    let halves: Vec<u32> = (0..100).map(|i| if i % 10 < 5 { 1 } else { 2 }).collect();
    vec![
        // identical partition under swapped ids
        case("relabeled", 9, strip(9, &[(0, 4, 1), (5, 9, 2)]), strip(9, &[(0, 4, 2), (5, 9, 1)]), [1.0, 1.0, 1.0, 1.0, 1.0]),
        // 50 of 100 matched, the other half unmatched; IoU 0.5 is not > 0.5
        MetricCase { height: 10, width: 10, ..case("split", 100, block, halves, [1.0 / 3.0, 0.0, 0.0, 0.0, 1.0]) },
        // 100 px vs 80 px sharing 60
        case("shifted", 120, strip(120, &[(0, 100, 1)]), strip(120, &[(40, 120, 1)]), [0.5, 0.0, 0.0, 0.0, 120.0 / 180.0]),
        // IoU 6/10
        case("partial", 10, strip(10, &[(0, 10, 1)]), strip(10, &[(0, 6, 1)]), [0.6, 1.0, 0.6, 0.6, 12.0 / 16.0]),
        // one pred covers 8 of the first gt; second gt missed
        case("missed", 30, strip(30, &[(0, 10, 1), (20, 30, 2)]), strip(30, &[(0, 8, 1)]), [8.0 / 20.0, 2.0 / 3.0, 0.8, 0.8 * 2.0 / 3.0, 16.0 / 28.0]),
        // one pred over two gts at IoU 0.6 and 0.3
        case("greedy", 10, strip(10, &[(0, 6, 1), (7, 10, 2)]), strip(10, &[(0, 10, 1)]), [6.0 / 13.0, 2.0 / 3.0, 0.6, 0.4, 18.0 / 19.0]),
        case("empty prediction", 8, strip(8, &[(0, 3, 1), (5, 7, 2)]), vec![0; 8], [0.0, 0.0, 0.0, 0.0, 0.0]),
        case("both empty", 8, vec![0; 8], vec![0; 8], [1.0, 1.0, 1.0, 1.0, 1.0]),
        // two gts merged into one pred, both at IoU 0.5
        case("merged", 20, strip(20, &[(0, 10, 1), (10, 20, 2)]), strip(20, &[(0, 20, 1)]), [1.0 / 3.0, 0.0, 0.0, 0.0, 1.0]),
        // TPs at 0.9 and 10/12, one FN of 4 px, one FP of 5 px
        case(
            "mixed",
            60,
            strip(60, &[(0, 10, 1), (20, 30, 2), (40, 44, 3)]),
            strip(60, &[(1, 10, 1), (20, 32, 2), (50, 55, 3)]),
            [19.0 / 31.0, 2.0 / 3.0, 13.0 / 15.0, 26.0 / 45.0, 0.76],
        ),
    ]
}
