//! Entropic optimal transport by generalized matrix scaling.
//!
//! One stabilized scaling engine backs both the balanced solver and the
//! slack-column partial solver. The plan is kept in the factored form
//! `T_ij = a_i · exp((u_i + v_j − C_ij) / ε) · b_j`, where `u`, `v` are
//! absorbed log-potentials. Whenever a scaling leaves `[1e-30, 1e30]` it is
//! folded into its potential so `ε` far below 0.01 stays representable.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OtError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("transport fraction must lie in (0, 1], got {0}")]
    InvalidRho(f64),
    #[error("{which} marginal must be non-negative and sum to 1, got sum {sum}")]
    Marginal { which: &'static str, sum: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cost matrix must be finite and non-negative")]
    InvalidCost,
    #[error("POT-Scan stride must be positive and rho0 in (0, 1)")]
    InvalidScan,
}

/// Dense `N × M` cost matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, OtError> {
        if rows == 0 || cols == 0 {
            return Err(OtError::DimensionMismatch { expected: 1, got: 0 });
        }
        if values.len() != rows * cols {
            return Err(OtError::DimensionMismatch { expected: rows * cols, got: values.len() });
        }
        if values.iter().any(|&c| !c.is_finite() || c < 0.0) {
            return Err(OtError::InvalidCost);
        }
        Ok(Self { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// `[C, 0]`: the cost with an extra zero-cost slack column.
    pub fn with_slack_column(&self) -> CostMatrix {
        let mut values = Vec::with_capacity(self.rows * (self.cols + 1));
        for row in self.values.chunks(self.cols) {
            values.extend_from_slice(row);
            values.push(0.0);
        }
        CostMatrix { rows: self.rows, cols: self.cols + 1, values }
    }
}

/// Cosine cost `C_ij = 1 − ⟨f_i, p_j⟩ / (‖f_i‖ ‖p_j‖)` between row-major
/// feature rows and prototype rows, clamped to `[0, 2]`. Norms are floored
/// at `1e-12`.
pub fn cosine_cost(features: &[f64], prototypes: &[f64], dim: usize) -> Result<CostMatrix, OtError> {
    if dim == 0 || features.len() % dim != 0 {
        return Err(OtError::DimensionMismatch { expected: dim, got: features.len() });
    }
    if prototypes.len() % dim != 0 {
        return Err(OtError::DimensionMismatch { expected: dim, got: prototypes.len() });
    }
    let norm = |v: &[f64]| math::sqrt(v.iter().map(|x| x * x).sum::<f64>()).max(1e-12);
    let protos: Vec<(&[f64], f64)> = prototypes.chunks(dim).map(|p| (p, norm(p))).collect();
    let mut values = Vec::with_capacity(features.len() / dim * protos.len());
    for f in features.chunks(dim) {
        let nf = norm(f);
        for &(p, np) in &protos {
            let dot: f64 = f.iter().zip(p).map(|(x, y)| x * y).sum();
            values.push((1.0 - dot / (nf * np)).clamp(0.0, 2.0));
        }
    }
    CostMatrix::new(features.len() / dim, protos.len(), values)
}

fn default_epsilon() -> f64 {
    0.05
}
fn default_lambda() -> f64 {
    10.0
}
fn default_iota() -> f64 {
    1e9
}
fn default_max_iters() -> usize {
    2000
}
fn default_marginal_tol() -> f64 {
    1e-6
}

/// Entropic weight `ε`, column KL weight `λ`, slack weight `ι` and stopping
/// controls.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct SolverConfig {
    #[cfg_attr(feature = "serde", serde(default = "default_epsilon"))]
    pub epsilon: f64,
    #[cfg_attr(feature = "serde", serde(default = "default_lambda"))]
    pub lambda: f64,
    #[cfg_attr(feature = "serde", serde(default = "default_iota"))]
    pub iota: f64,
    #[cfg_attr(feature = "serde", serde(default = "default_max_iters"))]
    pub max_iters: usize,
    #[cfg_attr(feature = "serde", serde(default = "default_marginal_tol"))]
    pub marginal_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            epsilon: default_epsilon(),
            lambda: default_lambda(),
            iota: default_iota(),
            max_iters: default_max_iters(),
            marginal_tol: default_marginal_tol(),
        }
    }
}

/// Stall threshold on the largest per-column change of `ln b`.
pub const SCALING_TOL: f64 = 1e-9;

const SCALE_MAX: f64 = 1e30;
const SCALE_MIN: f64 = 1e-30;

impl SolverConfig {
    pub fn validate(&self) -> Result<(), OtError> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.epsilon) {
            return Err(OtError::InvalidConfig("epsilon must be positive"));
        }
        if !pos(self.lambda) {
            return Err(OtError::InvalidConfig("lambda must be positive"));
        }
        if !pos(self.marginal_tol) {
            return Err(OtError::InvalidConfig("marginal_tol must be positive"));
        }
        if !self.iota.is_finite() || self.iota < 1e6 * self.lambda {
            return Err(OtError::InvalidConfig("iota must be finite and at least 1e6 * lambda"));
        }
        if self.max_iters == 0 {
            return Err(OtError::InvalidConfig("max_iters must be at least 1"));
        }
        Ok(())
    }
}

/// Dual potentials `f_i = u_i + ε ln a_i`, `g_j = v_j + ε ln b_j`; used to
/// warm-start a related solve.
#[derive(Debug, Clone, PartialEq)]
pub struct Potentials {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
}

/// A solved coupling in factored form.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    /// Row scaling after absorption.
    pub a: Vec<f64>,
    /// Column scaling after absorption.
    pub b: Vec<f64>,
    /// Absorbed row log-potentials.
    pub u: Vec<f64>,
    /// Absorbed column log-potentials.
    pub v: Vec<f64>,
    pub epsilon: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl Coupling {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.values.chunks(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.values.chunks(self.cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    /// Rebuilds `diag(a) · exp((u ⊕ v − C)/ε) · diag(b)` from the stored
    /// factors. `cost` must be the matrix the coupling was solved on.
    pub fn reconstruct(&self, cost: &CostMatrix) -> Vec<f64> {
        assert_eq!((cost.rows(), cost.cols()), (self.rows, self.cols));
        let mut out = Vec::with_capacity(self.values.len());
        for i in 0..self.rows {
            for j in 0..self.cols {
                let k = math::exp((self.u[i] + self.v[j] - cost.get(i, j)) / self.epsilon);
                out.push(self.a[i] * k * self.b[j]);
            }
        }
        out
    }

    pub fn potentials(&self) -> Potentials {
        let pot = |base: &[f64], s: &[f64]| -> Vec<f64> {
            base.iter()
                .zip(s)
                .map(|(&p, &x)| if x > 0.0 { p + self.epsilon * math::ln(x) } else { p })
                .collect()
        };
        Potentials { f: pot(&self.u, &self.a), g: pot(&self.v, &self.b) }
    }
}

/// How a marginal enters the objective, expressed through its proximal
/// exponent `f` in the update `b = (β / Qᵀa)^f`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prox {
    /// Equality constraint: `f = 1`.
    Fixed,
    /// KL penalty of weight `w`: `f = w / (w + ε)`.
    Kl(f64),
}

impl Prox {
    fn exponent(self, epsilon: f64) -> f64 {
        match self {
            Prox::Fixed => 1.0,
            Prox::Kl(w) => w / (w + epsilon),
        }
    }
}

/// Generalized scaling with a hard source marginal `alpha` and per-column
/// proximal targets `beta`. Zero-mass rows and columns are held at zero.
pub fn generalized_scaling(
    cost: &CostMatrix,
    alpha: &[f64],
    beta: &[f64],
    prox: &[Prox],
    epsilon: f64,
    max_iters: usize,
    marginal_tol: f64,
    warm: Option<&Potentials>,
) -> Coupling {
    let (n, m) = (cost.rows(), cost.cols());
    assert!(alpha.len() == n && beta.len() == m && prox.len() == m);
    let f: Vec<f64> = prox.iter().map(|p| p.exponent(epsilon)).collect();
    let live_row: Vec<bool> = alpha.iter().map(|&x| x > 0.0).collect();
    let live_col: Vec<bool> = beta.iter().map(|&x| x > 0.0).collect();
    let ln_beta: Vec<f64> = beta.iter().map(|&x| if x > 0.0 { math::ln(x) } else { 0.0 }).collect();
    let c = cost.as_slice();

    let (mut u, mut v) = match warm {
        Some(p) if p.f.len() == n && p.g.len() == m => {
            let fix = |x: f64| if x.is_finite() { x } else { 0.0 };
            (p.f.iter().map(|&x| fix(x)).collect::<Vec<_>>(), p.g.iter().map(|&x| fix(x)).collect::<Vec<_>>())
        }
        _ => {
            let u = (0..n)
                .map(|i| {
                    (0..m).filter(|&j| live_col[j]).map(|j| c[i * m + j]).fold(f64::INFINITY, f64::min)
                })
                .map(|x| if x.is_finite() { x } else { 0.0 })
                .collect();
            (u, vec![0.0; m])
        }
    };
    let mut a = vec![1.0; n];
    let mut b: Vec<f64> = live_col.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    let mut k = vec![0.0; n * m];
    let entry = |u: &[f64], v: &[f64], i: usize, j: usize| math::exp((u[i] + v[j] - c[i * m + j]) / epsilon);
    for i in 0..n {
        for j in 0..m {
            k[i * m + j] = entry(&u, &v, i, j);
        }
    }
    // Full log-scaling ln B_j = ln b_j + v_j / ε, tracked for the stall test.
    let mut ln_big_b: Vec<f64> = (0..m).map(|j| v[j] / epsilon).collect();

    let mut accel = Anderson::new(ANDERSON_DEPTH);
    let mut accepted: Option<(Vec<f64>, Vec<f64>, f64)> = None;
    let mut extrapolated = false;
    let mut converged = false;
    let mut iterations = 0;
    let mut delta = f64::INFINITY;
    loop {
        // Row update: a = α / (K b), exact on every live row.
        for i in 0..n {
            if !live_row[i] {
                a[i] = 0.0;
                continue;
            }
            let x: f64 = (0..m).map(|j| k[i * m + j] * b[j]).sum();
            let ai = alpha[i] / x;
            if x.is_finite() && x > 0.0 && (SCALE_MIN..=SCALE_MAX).contains(&ai) {
                a[i] = ai;
                continue;
            }
            let ln_x = math::log_sum_exp(
                (0..m).filter(|&j| b[j] > 0.0).map(|j| (u[i] + v[j] - c[i * m + j]) / epsilon + math::ln(b[j])),
            );
            u[i] += epsilon * (math::ln(alpha[i]) - ln_x);
            a[i] = 1.0;
            for j in 0..m {
                k[i * m + j] = entry(&u, &v, i, j);
            }
        }

        if delta < SCALING_TOL && column_residual_ok(&k, &a, &b, &v, &ln_beta, &f, &live_col, n, m, epsilon, marginal_tol) {
            converged = true;
            break;
        }
        if iterations >= max_iters {
            break;
        }
        iterations += 1;

        // Column update: B = (β / Qᵀ A)^f in stabilized form, giving the
        // plain fixed-point image `g` of the current log-scaling.
        let live: Vec<usize> = (0..m).filter(|&j| live_col[j]).collect();
        let mut g = Vec::with_capacity(live.len());
        for &j in &live {
            let y: f64 = (0..n).map(|i| k[i * m + j] * a[i]).sum();
            let ln_y = if y.is_finite() && y > 0.0 {
                math::ln(y)
            } else {
                math::log_sum_exp(
                    (0..n).filter(|&i| a[i] > 0.0).map(|i| (u[i] + v[j] - c[i * m + j]) / epsilon + math::ln(a[i])),
                )
            };
            g.push(f[j] * (ln_beta[j] - ln_y + v[j] / epsilon));
        }
        let x: Vec<f64> = live.iter().map(|&j| ln_big_b[j]).collect();
        let residual: Vec<f64> = g.iter().zip(&x).map(|(g, x)| g - x).collect();
        delta = residual.iter().fold(0.0, |acc, r| acc.max(r.abs()));
        // An extrapolated iterate is kept only if it lowers the residual of
        // the last accepted one; otherwise fall back to the plain step.
        let next = match accepted.take() {
            Some((_, g_prev, r_prev)) if extrapolated && !(delta < r_prev) => {
                accel.reset();
                extrapolated = false;
                accepted = None;
                g_prev
            }
            _ => {
                accepted = Some((x.clone(), g.clone(), delta));
                let next = accel.step(&x, &g, &residual);
                extrapolated = accel.has_history();
                next
            }
        };
        for (idx, &j) in live.iter().enumerate() {
            ln_big_b[j] = next[idx];
            let ln_b = next[idx] - v[j] / epsilon;
            if ln_b.abs() <= math::ln(SCALE_MAX) {
                b[j] = math::exp(ln_b);
            } else {
                v[j] += epsilon * ln_b;
                b[j] = 1.0;
                for i in 0..n {
                    k[i * m + j] = entry(&u, &v, i, j);
                }
            }
        }
    }

    let mut values = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            values[i * m + j] = a[i] * k[i * m + j] * b[j];
        }
    }
    Coupling { rows: n, cols: m, values, a, b, u, v, epsilon, converged, iterations }
}

/// Depth of the Anderson mixing history on the column log-scalings.
const ANDERSON_DEPTH: usize = 5;

/// Type-II Anderson mixing for the column fixed-point map. The column space
/// holds at most a handful of entries, so the small least-squares solve is
/// negligible next to one kernel pass and collapses the slow linear tail of
/// plain scaling. The fixed point is unchanged.
struct Anderson {
    depth: usize,
    prev: Option<(Vec<f64>, Vec<f64>)>,
    dx: Vec<Vec<f64>>,
    dr: Vec<Vec<f64>>,
}

impl Anderson {
    fn new(depth: usize) -> Self {
        Self { depth, prev: None, dx: Vec::new(), dr: Vec::new() }
    }

    fn has_history(&self) -> bool {
        !self.dr.is_empty()
    }

    fn reset(&mut self) {
        self.prev = None;
        self.dx.clear();
        self.dr.clear();
    }

    /// Given iterate `x`, its image `g` and residual `r = g − x`, returns
    /// the next iterate.
    fn step(&mut self, x: &[f64], g: &[f64], r: &[f64]) -> Vec<f64> {
        if let Some((px, pr)) = self.prev.take() {
            if px.len() == x.len() {
                self.dx.push(x.iter().zip(&px).map(|(a, b)| a - b).collect());
                self.dr.push(r.iter().zip(&pr).map(|(a, b)| a - b).collect());
                if self.dx.len() > self.depth {
                    self.dx.remove(0);
                    self.dr.remove(0);
                }
            } else {
                self.dx.clear();
                self.dr.clear();
            }
        }
        self.prev = Some((x.to_vec(), r.to_vec()));
        let h = self.dr.len();
        if h == 0 {
            return g.to_vec();
        }
        let mut gram = vec![0.0; h * h];
        let mut rhs = vec![0.0; h];
        let mut trace = 0.0;
        for p in 0..h {
            for q in 0..h {
                gram[p * h + q] = dot(&self.dr[p], &self.dr[q]);
            }
            rhs[p] = dot(&self.dr[p], r);
            trace += gram[p * h + p];
        }
        if !(trace > 0.0) || !trace.is_finite() {
            return g.to_vec();
        }
        for p in 0..h {
            gram[p * h + p] += 1e-10 * trace;
        }
        let Some(gamma) = solve_dense(&mut gram, &mut rhs, h) else {
            self.reset();
            return g.to_vec();
        };
        let mut out = g.to_vec();
        for (p, &w) in gamma.iter().enumerate() {
            for (o, (dx, dr)) in out.iter_mut().zip(self.dx[p].iter().zip(&self.dr[p])) {
                *o -= w * (dx + dr);
            }
        }
        if out.iter().all(|v| v.is_finite()) {
            out
        } else {
            self.reset();
            g.to_vec()
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gaussian elimination with partial pivoting on a small `n × n` system.
fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let pivot = (col..n).max_by(|&p, &q| a[p * n + col].abs().total_cmp(&a[q * n + col].abs()))?;
        if a[pivot * n + col].abs() < 1e-300 {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        for row in col + 1..n {
            let factor = a[row * n + col] / a[col * n + col];
            for k in col..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row * n + k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row * n + row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Checks each live column against its proximal fixed point
/// `colsum_j = β_j^f · Y_j^(1−f)` with `Y = Qᵀ A`.
#[allow(clippy::too_many_arguments)]
fn column_residual_ok(
    k: &[f64],
    a: &[f64],
    b: &[f64],
    v: &[f64],
    ln_beta: &[f64],
    f: &[f64],
    live_col: &[bool],
    n: usize,
    m: usize,
    epsilon: f64,
    tol: f64,
) -> bool {
    (0..m).all(|j| {
        if !live_col[j] {
            return true;
        }
        let y: f64 = (0..n).map(|i| k[i * m + j] * a[i]).sum();
        let col = y * b[j];
        let target = if f[j] == 1.0 {
            math::exp(ln_beta[j])
        } else {
            math::exp(f[j] * ln_beta[j] + (1.0 - f[j]) * (math::ln(y) - v[j] / epsilon))
        };
        (col - target).abs() <= tol
    })
}

fn check_simplex(x: &[f64], which: &'static str) -> Result<(), OtError> {
    let sum: f64 = x.iter().sum();
    if x.iter().any(|&v| !v.is_finite() || v < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(OtError::Marginal { which, sum });
    }
    Ok(())
}

/// Balanced entropic OT: both marginals enforced exactly.
pub fn sinkhorn_balanced(cost: &CostMatrix, mu: &[f64], nu: &[f64], config: &SolverConfig) -> Result<Coupling, OtError> {
    config.validate()?;
    if mu.len() != cost.rows() {
        return Err(OtError::DimensionMismatch { expected: cost.rows(), got: mu.len() });
    }
    if nu.len() != cost.cols() {
        return Err(OtError::DimensionMismatch { expected: cost.cols(), got: nu.len() });
    }
    check_simplex(mu, "source")?;
    check_simplex(nu, "target")?;
    let prox = vec![Prox::Fixed; nu.len()];
    Ok(generalized_scaling(cost, mu, nu, &prox, config.epsilon, config.max_iters, config.marginal_tol, None))
}

/// Partial transport plan over `M` real columns plus the slack column.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub coupling: Coupling,
    pub rho: f64,
}

impl TransportPlan {
    pub fn rows(&self) -> usize {
        self.coupling.rows()
    }

    /// Number of real (non-slack) columns.
    pub fn targets(&self) -> usize {
        self.coupling.cols() - 1
    }

    pub fn converged(&self) -> bool {
        self.coupling.converged
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.coupling.get(i, j)
    }

    pub fn slack(&self, i: usize) -> f64 {
        self.coupling.get(i, self.targets())
    }

    pub fn transported_mass(&self) -> f64 {
        let m = self.targets();
        self.coupling.as_slice().chunks(m + 1).map(|r| r[..m].iter().sum::<f64>()).sum()
    }

    pub fn slack_mass(&self) -> f64 {
        (0..self.rows()).map(|i| self.slack(i)).sum()
    }

    /// Real-column masses `Tᵀ 1`.
    pub fn target_masses(&self) -> Vec<f64> {
        let mut cols = self.coupling.column_sums();
        cols.pop();
        cols
    }

    /// `⟨T, C⟩ + λ·KL(Tᵀ1 ‖ ρ/M·1)` over the real columns, with the
    /// generalized KL `Σ x ln(x/β) − x + β`.
    pub fn objective(&self, cost: &CostMatrix, lambda: f64) -> f64 {
        partial_objective(self.coupling.as_slice(), self.targets() + 1, cost, self.rho, lambda)
    }
}

/// Partial-transport objective of a plan stored with `stride` columns per
/// row, of which the first `cost.cols()` are real.
pub fn partial_objective(plan: &[f64], stride: usize, cost: &CostMatrix, rho: f64, lambda: f64) -> f64 {
    let m = cost.cols();
    let mut transport = 0.0;
    let mut cols = vec![0.0; m];
    for (i, row) in plan.chunks(stride).enumerate() {
        for j in 0..m {
            transport += row[j] * cost.get(i, j);
            cols[j] += row[j];
        }
    }
    transport + lambda * generalized_kl(&cols, rho / m as f64)
}

fn generalized_kl(x: &[f64], beta: f64) -> f64 {
    x.iter().map(|&v| if v > 0.0 { v * math::ln(v / beta) - v + beta } else { beta }).sum()
}

/// Slack-column partial OT moving a fraction `rho` of the uniform source
/// mass onto the columns of `cost`.
pub fn solve_partial(cost: &CostMatrix, rho: f64, config: &SolverConfig) -> Result<TransportPlan, OtError> {
    solve_partial_warm(cost, rho, config, None)
}

/// [`solve_partial`] seeded with potentials from a previous solve on the
/// same cost.
pub fn solve_partial_warm(
    cost: &CostMatrix,
    rho: f64,
    config: &SolverConfig,
    warm: Option<&Potentials>,
) -> Result<TransportPlan, OtError> {
    config.validate()?;
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(OtError::InvalidRho(rho));
    }
    let (n, m) = (cost.rows(), cost.cols());
    let extended = cost.with_slack_column();
    let alpha = vec![1.0 / n as f64; n];
    let mut beta = vec![rho / m as f64; m + 1];
    beta[m] = (1.0 - rho).max(0.0);
    let mut prox = vec![Prox::Kl(config.lambda); m + 1];
    prox[m] = Prox::Kl(config.iota);
    let coupling =
        generalized_scaling(&extended, &alpha, &beta, &prox, config.epsilon, config.max_iters, config.marginal_tol, warm);
    Ok(TransportPlan { coupling, rho })
}

/// [`solve_partial`] reached through a decreasing sequence of `ε` values,
/// each solve warm-started from the previous one. The last entry of
/// `schedule` replaces `config.epsilon`. Small `ε` are reached far faster
/// this way than from a cold start.
pub fn solve_partial_annealed(
    cost: &CostMatrix,
    rho: f64,
    config: &SolverConfig,
    schedule: &[f64],
) -> Result<TransportPlan, OtError> {
    let mut warm: Option<Potentials> = None;
    let mut last = None;
    for &epsilon in schedule {
        let cfg = SolverConfig { epsilon, ..*config };
        let plan = solve_partial_warm(cost, rho, &cfg, warm.as_ref())?;
        warm = Some(plan.coupling.potentials());
        last = Some(plan);
    }
    last.ok_or(OtError::InvalidConfig("annealing schedule is empty"))
}

/// Outcome of a progressive ρ scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanOutcome {
    pub plan: TransportPlan,
    /// Every ρ that was solved, in order.
    pub schedule: Vec<f64>,
    /// The probe already fired on the first plan, which is returned anyway.
    pub fired_at_start: bool,
}

/// ρ values `rho0, rho0 + stride, …`, capped at and ending with 1.
pub fn scan_schedule(rho0: f64, stride: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut i = 0usize;
    loop {
        let rho = rho0 + i as f64 * stride;
        if rho >= 1.0 || 1.0 - rho < 1e-9 {
            out.push(1.0);
            return out;
        }
        out.push(rho);
        i += 1;
    }
}

/// Solves at increasing ρ until `probe` reports that the plan has gone too
/// far, returning the last plan before that point. Each step is warm-started
/// from the previous one.
pub fn pot_scan(
    cost: &CostMatrix,
    rho0: f64,
    stride: f64,
    probe: &mut dyn FnMut(&TransportPlan) -> bool,
    config: &SolverConfig,
) -> Result<ScanOutcome, OtError> {
    if !(rho0 > 0.0 && rho0 < 1.0) || !(stride > 0.0) || !stride.is_finite() {
        return Err(OtError::InvalidScan);
    }
    let mut schedule = Vec::new();
    let mut previous: Option<TransportPlan> = None;
    for rho in scan_schedule(rho0, stride) {
        let warm = previous.as_ref().map(|p| p.coupling.potentials());
        let plan = solve_partial_warm(cost, rho, config, warm.as_ref())?;
        schedule.push(rho);
        if probe(&plan) {
            return Ok(match previous {
                Some(prev) => ScanOutcome { plan: prev, schedule, fired_at_start: false },
                None => {
                    log::warn!("stop probe fired at the initial transport fraction {rho}");
                    ScanOutcome { plan, schedule, fired_at_start: true }
                }
            });
        }
        previous = Some(plan);
    }
    let plan = previous.expect("schedule is never empty");
    Ok(ScanOutcome { plan, schedule, fired_at_start: false })
}
