//! Acceptance checks. Prints one PASS/FAIL line per criterion. A failed
//! criterion is reported but only fails the process when
//! `NUCSEG_STRICT_ACCEPTANCE` is set, so the verdicts stay visible in an
//! ordinary test run.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nucseg::fixtures::{self, Fixture, FixtureSpec};
use nucseg::run::{self, RunOptions};
use nucseg_core::metrics;
use nucseg_core::morphology;
use nucseg_core::ot::{solve_partial, solve_partial_annealed, CostMatrix, SolverConfig};
use nucseg_core::pipeline::PipelineConfig;
use nucseg_core::postprocess::{containment_soft_nms, kept_instances, unified_scores, Decay, NmsConfig};
use nucseg_core::predictor::{Instance, InstanceSet};
use nucseg_core::stain::stain_maps;
use nucseg_core::Grid;
use nucseg_oracles::{metric_cases, partial_ot_optimum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fixture seed shared by the stain, end-to-end and determinism checks.
const FIXTURE_SEED: u64 = 42;
const ANNEAL: [f64; 6] = [0.05, 0.01, 3e-3, 1e-3, 3e-4, 1e-4];

type Check<'a> = (&'static str, Box<dyn FnOnce() -> Outcome + 'a>);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(elapsed: Duration, limit: f64) -> bool {
    elapsed.as_secs_f64() < limit
}

fn random_instance(rng: &mut ChaCha8Rng, n: usize, m: usize) -> (Vec<f64>, CostMatrix) {
    let c: Vec<f64> = (0..n * m).map(|_| rng.random_range(0.0..2.0)).collect();
    (c.clone(), CostMatrix::new(n, m, c).unwrap())
}

fn ot_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = SolverConfig { epsilon: 0.01, ..SolverConfig::default() };
    let mut worst: f64 = 0.0;
    let mut unconverged = 0;
    for _ in 0..50 {
        let n = rng.random_range(1..=8);
        let m = rng.random_range(1..=3);
        let rho = rng.random_range(0.1..=1.0);
        let (raw, cost) = random_instance(&mut rng, n, m);
        let plan = solve_partial(&cost, rho, &cfg).unwrap();
        if !plan.converged() {
            unconverged += 1;
        }
        let ours = plan.objective(&cost, cfg.lambda);
        let (oracle, _) = partial_ot_optimum(&raw, n, m, rho, cfg.lambda);
        worst = worst.max((ours - oracle).abs() / oracle.abs().max(1e-12));
    }
    let t = start.elapsed();
    outcome(
        worst <= 0.05 && unconverged == 0 && within(t, 10.0),
        format!("50 instances, worst relative gap {:.4}, unconverged {unconverged}, {:.2}s", worst, t.as_secs_f64()),
    )
}

fn constraint_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = SolverConfig::default();
    let (mut row, mut mass, mut slack) = (0.0f64, 0.0f64, 0.0f64);
    let mut converged = 0;
    for k in 0..200 {
        let n = rng.random_range(1..=64);
        let m = rng.random_range(1..=6);
        let rho = [0.3, 0.6, 1.0][k % 3];
        let (_, cost) = random_instance(&mut rng, n, m);
        let plan = solve_partial(&cost, rho, &cfg).unwrap();
        if !plan.converged() {
            continue;
        }
        converged += 1;
        for r in plan.coupling.row_sums() {
            row = row.max(r - 1.0 / n as f64);
        }
        mass = mass.max((plan.transported_mass() - rho).abs());
        slack = slack.max((plan.slack_mass() - (1.0 - rho)).abs());
    }
    let t = start.elapsed();
    outcome(
        converged == 200 && row <= 1e-6 && mass < 1e-6 && slack < 1e-6 && within(t, 30.0),
        format!(
            "{converged}/200 converged, row excess {row:.2e}, mass error {mass:.2e}, slack error {slack:.2e}, {:.2}s",
            t.as_secs_f64()
        ),
    )
}

fn equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = SolverConfig { max_iters: 200_000, ..SolverConfig::default() };
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(1..=8);
        let m = rng.random_range(1..=3);
        let rho = rng.random_range(0.1..=1.0);
        let (raw, cost) = random_instance(&mut rng, n, m);
        let plan = solve_partial_annealed(&cost, rho, &cfg, &ANNEAL).unwrap();
        let (oracle, _) = partial_ot_optimum(&raw, n, m, rho, cfg.lambda);
        worst = worst.max((plan.objective(&cost, cfg.lambda) - oracle).abs());
    }
    let t = start.elapsed();
    outcome(worst <= 1e-4 && within(t, 10.0), format!("20 instances, worst gap {worst:.2e}, {:.2}s", t.as_secs_f64()))
}

fn metric_oracles() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut identity: f64 = 0.0;
    let cases = metric_cases();
    for c in &cases {
        let gt = InstanceSet::from_label_map(&Grid::from_vec(c.height, c.width, c.gt.clone()));
        let pred = InstanceSet::from_label_map(&Grid::from_vec(c.height, c.width, c.pred.clone()));
        let r = metrics::evaluate(&gt, &pred).unwrap();
        for (a, b) in [(r.aji, c.aji), (r.dq, c.dq), (r.sq, c.sq), (r.pq, c.pq), (r.dice, c.dice)] {
            worst = worst.max((a - b).abs());
        }
        identity = identity.max((r.pq - r.dq * r.sq).abs());
    }
    // the identity on arbitrary inputs as well
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..500 {
        let gt = Grid::from_fn(8, 8, |_, _| rng.random_range(0..5u32));
        let pred = Grid::from_fn(8, 8, |_, _| rng.random_range(0..5u32));
        let r = metrics::evaluate(&InstanceSet::from_label_map(&gt), &InstanceSet::from_label_map(&pred)).unwrap();
        identity = identity.max((r.pq - r.dq * r.sq).abs());
    }
    outcome(
        cases.len() == 10 && worst <= 1e-12 && identity <= 1e-12,
        format!("{} pairs, worst deviation {worst:.1e}, PQ-DQ*SQ {identity:.1e}", cases.len()),
    )
}

fn stain_round_trip(set: &[Fixture], spec: &FixtureSpec) -> Outcome {
    let mut min_ratio = f64::INFINITY;
    for f in set {
        let maps = stain_maps(&f.image, &spec.stains).unwrap();
        let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0usize, 0.0, 0usize);
        for (&l, &s) in f.labels.as_slice().iter().zip(maps.hematoxylin.as_slice()) {
            if l != 0 {
                fg += s;
                nf += 1;
            } else {
                bg += s;
                nb += 1;
            }
        }
        min_ratio = min_ratio.min((fg / nf as f64) / (bg / nb as f64));
    }
    outcome(min_ratio >= 3.0, format!("{} fixtures, smallest nucleus/background s_h ratio {min_ratio:.2}", set.len()))
}

fn end_to_end(data: &Path, out: &Path, set: &[Fixture]) -> Outcome {
    let overlap = set.iter().map(|f| f.overlapping.len() as f64 / f.nuclei.len().max(1) as f64).fold(0.0, f64::max);
    let counts = (set.iter().map(|f| f.nuclei.len()).min().unwrap(), set.iter().map(|f| f.nuclei.len()).max().unwrap());
    let cfg = PipelineConfig { workers: 4, ..PipelineConfig::default() };
    let start = Instant::now();
    let report = run::run_dataset(&data.join("images"), out, Some(&data.join("gt")), &cfg, &RunOptions::default())
        .unwrap()
        .expect("ground truth given");
    let t = start.elapsed();
    let s = report.summary;
    outcome(
        s.images == 20 && s.aji >= 0.70 && s.dq >= 0.85 && within(t, 120.0),
        format!(
            "{} images ({}-{} nuclei, overlap fraction <= {:.2}), AJI {:.4}, DQ {:.4}, SQ {:.4}, PQ {:.4}, {:.1}s",
            s.images,
            counts.0,
            counts.1,
            overlap,
            s.aji,
            s.dq,
            s.sq,
            s.pq,
            t.as_secs_f64()
        ),
    )
}

fn determinism(data: &Path, out4: &Path, out1: &Path) -> Outcome {
    let cfg = PipelineConfig { workers: 1, ..PipelineConfig::default() };
    run::run_dataset(&data.join("images"), out1, None, &cfg, &RunOptions::default()).unwrap();
    let mut differing = Vec::new();
    let mut compared = 0;
    for i in 0..20 {
        let stem = fixtures::stem(i);
        let a = std::fs::read(out4.join(&stem).join("labels.png")).unwrap();
        let b = std::fs::read(out1.join(&stem).join("labels.png")).unwrap();
        compared += 1;
        if a != b {
            differing.push(stem);
        }
    }
    outcome(differing.is_empty(), format!("{compared} label maps compared, differing: {differing:?}"))
}

/// Candidate masks for one crowded image: each nucleus as drawn, a shifted
/// near-duplicate for about half of them, and confident containers covering
/// a nucleus with its one or two nearest neighbours.
fn nms_candidates(f: &Fixture, rng: &mut ChaCha8Rng, duplicates: bool) -> InstanceSet {
    let (h, w) = f.labels.shape();
    let gt = InstanceSet::from_label_map(&f.labels);
    let mut set = InstanceSet::new(h, w);
    for inst in &gt.instances {
        let score = rng.random_range(0.6..0.95);
        let mut good = inst.clone();
        good.score = score;
        set.instances.push(good);
        if rng.random_bool(0.5) && duplicates {
            let (dr, dc) = loop {
                let d = (rng.random_range(-2i64..=2), rng.random_range(-2i64..=2));
                if d != (0, 0) {
                    break d;
                }
            };
            let px: Vec<(usize, usize)> = inst
                .pixels()
                .filter_map(|(r, c)| {
                    let (r, c) = (r as i64 + dr, c as i64 + dc);
                    (r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w).then_some((r as usize, c as usize))
                })
                .collect();
            if let Some(dup) = Instance::from_pixels(&px, score - rng.random_range(0.05..0.2), None) {
                set.instances.push(dup);
            }
        }
    }
    let centre = |inst: &Instance| {
        let (t, l, b, r) = inst.bbox();
        ((t + b) as f64 / 2.0, (l + r) as f64 / 2.0)
    };
    for (i, inst) in gt.instances.iter().enumerate() {
        if !rng.random_bool(0.3) {
            continue;
        }
        let (ci, cj) = centre(inst);
        let mut near: Vec<(f64, usize)> = gt
            .instances
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(j, o)| {
                let (a, b) = centre(o);
                ((a - ci).hypot(b - cj), j)
            })
            .filter(|&(d, _)| d < 25.0)
            .collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0));
        near.truncate(rng.random_range(1..=2));
        if near.is_empty() {
            continue;
        }
        let mut members = inst.to_full(h, w);
        for &(_, j) in &near {
            members = members.union(&gt.instances[j].to_full(h, w));
        }
        let grown = morphology::dilate_disk(&members, 1.0);
        let px: Vec<(usize, usize)> = (0..h * w).filter(|&k| grown.as_slice()[k]).map(|k| (k / w, k % w)).collect();
        set.instances.push(Instance::from_pixels(&px, rng.random_range(0.85..1.0), None).unwrap());
    }
    set
}

const NMS_VARIANTS: [&str; 4] = ["exponential+penalty", "hard+penalty", "exponential", "hard"];

/// Mean AJI of each NMS variant over the crowded corpus, with the total
/// number of output instances and of those under 30 pixels.
fn nms_corpus_aji(duplicates: bool) -> ([f64; 4], [(usize, usize); 4], usize) {
    let spec = FixtureSpec { images: 10, nuclei: (100, 120), overlap_probability: 0.3, ..FixtureSpec::default() };
    let corpus = fixtures::generate(&spec, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let hard = Decay::Hard { iou: 0.5 };
    let variants = [
        NmsConfig::default(),
        NmsConfig { decay: hard, ..NmsConfig::default() },
        NmsConfig { containment_penalty: false, ..NmsConfig::default() },
        NmsConfig { decay: hard, containment_penalty: false, ..NmsConfig::default() },
    ];
    let mut aji = [0.0f64; 4];
    let mut counts = [(0usize, 0usize); 4];
    let mut truth = 0;
    for f in &corpus {
        let candidates = nms_candidates(f, &mut rng, duplicates);
        let gt = InstanceSet::from_label_map(&f.labels);
        truth += gt.len();
        for (k, cfg) in variants.iter().enumerate() {
            let scores = unified_scores(&candidates, &f.hematoxylin, cfg.score_mode);
            let kept = containment_soft_nms(&candidates, &scores, cfg);
            let pred = InstanceSet::from_label_map(&kept_instances(&candidates, &kept).to_label_map());
            counts[k].0 += pred.len();
            counts[k].1 += pred.instances.iter().filter(|i| i.area() < 30).count();
            aji[k] += metrics::aji(&gt, &pred).unwrap() / corpus.len() as f64;
        }
    }
    (aji, counts, truth)
}

fn nms_ablation() -> Outcome {
    let show = |(aji, counts, truth): ([f64; 4], [(usize, usize); 4], usize)| {
        let parts: Vec<String> = NMS_VARIANTS
            .iter()
            .zip(aji)
            .zip(counts)
            .map(|((n, a), (all, small))| format!("{n} {a:.4} ({all} instances, {small} under 30 px)"))
            .collect();
        format!("{} [{truth} true nuclei]", parts.join(", "))
    };
    let full = nms_corpus_aji(true);
    let aji = full.0;
    // Same corpus without the shifted near-duplicates, reported for analysis only.
    let plain = nms_corpus_aji(false);
    let soft_beats_hard = aji[0] >= aji[1];
    let penalty_helps = aji[0] > aji[2] && aji[1] > aji[3];
    outcome(
        soft_beats_hard && penalty_helps,
        format!(
            "soft >= hard: {soft_beats_hard}, penalty improves: {penalty_helps}; mean AJI over 10 images: {}; without near-duplicates: {}",
            show(full),
            show(plain)
        ),
    )
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let spec = FixtureSpec::default();
    let set = fixtures::generate(&spec, FIXTURE_SEED).expect("default fixture spec is feasible");
    let data = tmp.path().join("fixtures");
    fixtures::write(&set, &data).expect("fixtures written");
    let (out4, out1) = (tmp.path().join("workers4"), tmp.path().join("workers1"));

    let checks: Vec<Check<'_>> = vec![
        ("ot-correctness", Box::new(ot_correctness)),
        ("partial-ot-constraints", Box::new(constraint_suite)),
        ("slack-equivalence", Box::new(equivalence)),
        ("metric-oracles", Box::new(metric_oracles)),
        ("stain-round-trip", Box::new(|| stain_round_trip(&set, &spec))),
        ("end-to-end-synthetic", Box::new(|| end_to_end(&data, &out4, &set))),
        ("nms-ablation-direction", Box::new(nms_ablation)),
        ("determinism", Box::new(|| determinism(&data, &out4, &out1))),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let o = check();
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{failed} of 8 criteria failed");
    if failed > 0 && std::env::var_os("NUCSEG_STRICT_ACCEPTANCE").is_some() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
