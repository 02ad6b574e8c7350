use nucseg_core::ot::*;
use nucseg_oracles::{min_cost_flow, partial_ot_optimum};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ANNEAL: [f64; 6] = [0.05, 0.01, 3e-3, 1e-3, 3e-4, 1e-4];

fn random_cost(rng: &mut ChaCha8Rng, n: usize, m: usize) -> (Vec<f64>, CostMatrix) {
    let c: Vec<f64> = (0..n * m).map(|_| rng.random_range(0.0..2.0)).collect();
    (c.clone(), CostMatrix::new(n, m, c).unwrap())
}

#[test]
fn balanced_objective_near_lp_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let (raw, cost) = random_cost(&mut rng, 5, 3);
        let mu = vec![0.2; 5];
        let nu = vec![1.0 / 3.0; 3];
        let cfg = SolverConfig::default();
        let plan = sinkhorn_balanced(&cost, &mu, &nu, &cfg).unwrap();
        assert!(plan.converged);
        let ours: f64 = (0..5).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| plan.get(i, j) * raw[i * 3 + j]).sum();
        let (lp, _) = min_cost_flow(&raw, 5, 3, &mu, &nu, 1.0).unwrap();
        assert!(ours >= lp - 1e-9);
        assert!((ours - lp) / lp.max(1e-12) < 0.05, "ours {ours} lp {lp}");
    }
}

#[test]
fn balanced_marginals_hold() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (_, cost) = random_cost(&mut rng, 7, 4);
    let mu = [0.1, 0.2, 0.05, 0.15, 0.2, 0.2, 0.1];
    let nu = [0.4, 0.1, 0.3, 0.2];
    let plan = sinkhorn_balanced(&cost, &mu, &nu, &SolverConfig::default()).unwrap();
    for (a, b) in plan.row_sums().iter().zip(mu) {
        assert!((a - b).abs() < 1e-6);
    }
    for (a, b) in plan.column_sums().iter().zip(nu) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn partial_objective_within_five_percent_of_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cfg = SolverConfig { epsilon: 0.01, ..SolverConfig::default() };
    for _ in 0..20 {
        let n = rng.random_range(2..=8);
        let m = rng.random_range(1..=3);
        let rho = rng.random_range(0.2..=1.0);
        let (raw, cost) = random_cost(&mut rng, n, m);
        let plan = solve_partial(&cost, rho, &cfg).unwrap();
        assert!(plan.converged());
        let ours = plan.objective(&cost, cfg.lambda);
        let (oracle, _) = partial_ot_optimum(&raw, n, m, rho, cfg.lambda);
        assert!((ours - oracle).abs() <= 0.05 * oracle.abs(), "ours {ours} oracle {oracle}");
    }
}

#[test]
fn annealed_extended_problem_matches_direct_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let cfg = SolverConfig { max_iters: 200_000, ..SolverConfig::default() };
    for _ in 0..5 {
        let n = rng.random_range(2..=8);
        let m = rng.random_range(1..=3);
        let rho = rng.random_range(0.2..=1.0);
        let (raw, cost) = random_cost(&mut rng, n, m);
        let plan = solve_partial_annealed(&cost, rho, &cfg, &ANNEAL).unwrap();
        assert!(plan.converged());
        let (oracle, cols) = partial_ot_optimum(&raw, n, m, rho, cfg.lambda);
        assert!((plan.objective(&cost, cfg.lambda) - oracle).abs() < 1e-4);
        for (a, b) in plan.target_masses().iter().zip(&cols) {
            assert!((a - b).abs() < 1e-3, "column masses {:?} vs {cols:?}", plan.target_masses());
        }
    }
}

#[test]
fn warm_start_agrees_with_cold_start() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (_, cost) = random_cost(&mut rng, 30, 4);
    let cfg = SolverConfig::default();
    let first = solve_partial(&cost, 0.6, &cfg).unwrap();
    let cold = solve_partial(&cost, 0.65, &cfg).unwrap();
    let warm = solve_partial_warm(&cost, 0.65, &cfg, Some(&first.coupling.potentials())).unwrap();
    assert!(cold.converged() && warm.converged());
    for (a, b) in cold.coupling.as_slice().iter().zip(warm.coupling.as_slice()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn scan_returns_the_plan_before_the_probe_fires() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (_, cost) = random_cost(&mut rng, 10, 2);
    let mut probe = |p: &TransportPlan| p.rho > 0.72;
    let out = pot_scan(&cost, 0.6, 0.05, &mut probe, &SolverConfig::default()).unwrap();
    assert!((out.plan.rho - 0.7).abs() < 1e-12);
    assert_eq!(out.schedule.len(), 4);
    assert!(!out.fired_at_start);
}

#[test]
fn scan_rejects_bad_parameters() {
    let (_, cost) = random_cost(&mut ChaCha8Rng::seed_from_u64(0), 3, 2);
    let mut never = |_: &TransportPlan| false;
    assert_eq!(pot_scan(&cost, 0.0, 0.05, &mut never, &SolverConfig::default()), Err(OtError::InvalidScan));
    assert_eq!(pot_scan(&cost, 0.5, 0.0, &mut never, &SolverConfig::default()), Err(OtError::InvalidScan));
}

#[test]
fn all_mass_in_slack_when_rho_tiny() {
    let (_, cost) = random_cost(&mut ChaCha8Rng::seed_from_u64(1), 6, 2);
    let plan = solve_partial(&cost, 1e-6, &SolverConfig::default()).unwrap();
    assert!(plan.transported_mass() < 1e-5);
    assert!((plan.slack_mass() - 1.0).abs() < 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn partial_plan_invariants(
        seed in any::<u64>(),
        n in 1usize..=64,
        m in 1usize..=6,
        rho in prop::sample::select(vec![0.3, 0.6, 1.0]),
    ) {
        let (_, cost) = random_cost(&mut ChaCha8Rng::seed_from_u64(seed), n, m);
        let plan = solve_partial(&cost, rho, &SolverConfig::default()).unwrap();
        prop_assume!(plan.converged());
        prop_assert!(plan.coupling.as_slice().iter().all(|&t| t >= 0.0 && t.is_finite()));
        for r in plan.coupling.row_sums() {
            prop_assert!(r <= 1.0 / n as f64 + 1e-6);
        }
        prop_assert!((plan.transported_mass() - rho).abs() < 1e-6);
        prop_assert!((plan.slack_mass() - (1.0 - rho)).abs() < 1e-6);
    }

    #[test]
    fn cosine_cost_is_bounded(
        f in prop::collection::vec(-5.0f64..5.0, 12),
        p in prop::collection::vec(-5.0f64..5.0, 6),
    ) {
        let c = cosine_cost(&f, &p, 3).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                let x = &f[i * 3..i * 3 + 3];
                let y = &p[j * 3..j * 3 + 3];
                let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
                let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
                let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
                prop_assert!((c.get(i, j) - (1.0 - dot / (nx * ny))).abs() < 1e-12);
                prop_assert!((-1e-12..=2.0 + 1e-12).contains(&c.get(i, j)));
            }
        }
    }
}
