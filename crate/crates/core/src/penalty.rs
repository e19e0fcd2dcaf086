//! The smooth penalty family `psi_n(y) = g(n y)` and the scalar penalised
//! integral equation `f_t = f_0 + g_t + Psi int_0^t psi_n(f_u - l_u) du`.

use serde::Serialize;

use crate::error::{domain, Error, Result};
use crate::rough::{holder_seminorm, TimeGrid};
use crate::stats::log_log_slope;

/// Profile `g(z) = -z - 1/2 + e^{2z}/2` for `z < 0`, glued to `0` on `z >= 0`.
/// It is C^1 with `g(0) = g'(0) = 0`.
fn profile(z: f64) -> f64 {
    if z >= 0.0 {
        0.0
    } else {
        0.5 * (2.0 * z).exp_m1() - z
    }
}

fn profile_prime(z: f64) -> f64 {
    if z >= 0.0 {
        0.0
    } else {
        (2.0 * z).exp_m1()
    }
}

pub fn psi(n: u32, y: f64) -> f64 {
    profile(n as f64 * y)
}

pub fn psi_prime(n: u32, y: f64) -> f64 {
    n as f64 * profile_prime(n as f64 * y)
}

/// The member `psi_n` of the penalty family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PenaltyFamily {
    pub n: u32,
}

impl PenaltyFamily {
    pub fn new(n: u32) -> Result<Self> {
        if n == 0 {
            return Err(domain("penalty index n must be at least 1"));
        }
        Ok(Self { n })
    }

    pub fn value(&self, y: f64) -> f64 {
        psi(self.n, y)
    }

    pub fn derivative(&self, y: f64) -> f64 {
        psi_prime(self.n, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyInvariant {
    LowerBound,
    UpperBound,
    NonPositiveDerivative,
    MonotoneInN,
    NonIncreasingInY,
    DerivativeMatchesDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, thiserror::Error)]
#[error("penalty family violates {invariant:?} at n = {n}, y = {y} (value {value:e}, bound {bound:e})")]
pub struct PenaltyViolation {
    pub invariant: FamilyInvariant,
    pub n: u32,
    pub y: f64,
    pub value: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FamilyReport {
    pub n_values: Vec<u32>,
    pub samples: usize,
    pub checks: usize,
    /// Largest finite-difference mismatch relative to `|psi_n'| + 1e-6 n`.
    pub worst_derivative_mismatch: f64,
}

/// Fourth-order central difference of `psi_n`, kept on one side of the
/// gluing point `y = 0`.
fn psi_difference(n: u32, y: f64) -> f64 {
    if y == 0.0 {
        let e = 1e-3 / n as f64;
        return (psi(n, e) - psi(n, 0.0)) / e;
    }
    let mut e = 1e-3 / n as f64;
    if y.abs() < 2.5 * e {
        e = y.abs() / 2.5;
    }
    (-psi(n, y + 2.0 * e) + 8.0 * psi(n, y + e) - 8.0 * psi(n, y - e) + psi(n, y - 2.0 * e)) / (12.0 * e)
}

/// Checks every family invariant on the product of `n_list` and `ys`.
/// The monotonicity in `n` is checked against `n + 1` and against the next
/// entry of `n_list`.
pub fn verify_family(n_list: &[u32], ys: &[f64]) -> std::result::Result<FamilyReport, PenaltyViolation> {
    assert!(!n_list.is_empty() && !ys.is_empty(), "verify_family needs samples");
    let mut checks = 0;
    let mut worst: f64 = 0.0;
    let fail = |invariant, n, y, value, bound| PenaltyViolation { invariant, n, y, value, bound };
    for (idx, &n) in n_list.iter().enumerate() {
        let nf = n as f64;
        let mut sorted = ys.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut prev: Option<(f64, f64)> = None;
        for &y in &sorted {
            let v = psi(n, y);
            let neg = (-y).max(0.0);
            let lower = (-0.5 + nf * neg).max(0.0);
            let upper = nf * neg;
            if v < lower {
                return Err(fail(FamilyInvariant::LowerBound, n, y, v, lower));
            }
            if v > upper {
                return Err(fail(FamilyInvariant::UpperBound, n, y, v, upper));
            }
            let d = psi_prime(n, y);
            if d > 0.0 {
                return Err(fail(FamilyInvariant::NonPositiveDerivative, n, y, d, 0.0));
            }
            let mut next_ns = vec![n + 1];
            if let Some(&m) = n_list.get(idx + 1) {
                next_ns.push(m);
            }
            for m in next_ns {
                let w = psi(m, y);
                if v > w && m > n {
                    return Err(fail(FamilyInvariant::MonotoneInN, n, y, v, w));
                }
            }
            if let Some((py, pv)) = prev {
                if py < y && pv < v {
                    return Err(fail(FamilyInvariant::NonIncreasingInY, n, y, v, pv));
                }
            }
            prev = Some((y, v));
            let fd = psi_difference(n, y);
            let scale = d.abs() + 1e-6 * nf;
            let mismatch = (fd - d).abs() / scale;
            worst = worst.max(mismatch);
            if (fd - d).abs() > 1e-6 * d.abs() + 1e-12 * nf {
                return Err(fail(FamilyInvariant::DerivativeMatchesDifference, n, y, fd, d));
            }
            checks += 6;
        }
    }
    Ok(FamilyReport {
        n_values: n_list.to_vec(),
        samples: ys.len(),
        checks,
        worst_derivative_mismatch: worst,
    })
}

/// Linear interpolation of a boundary across one grid cell.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CellLine {
    pub t0: f64,
    pub h: f64,
    pub v0: f64,
    pub v1: f64,
}

impl CellLine {
    fn at(&self, t: f64) -> f64 {
        self.v0 + (self.v1 - self.v0) * ((t - self.t0) / self.h)
    }
}

/// Drift phase over one cell: `y' = c + b(y) + Psi psi_n(y - l(t))`, with
/// `b` explicit and the penalty implicit.
pub(crate) struct CellDrift<'a> {
    pub n: u32,
    pub psi_scale: f64,
    pub forcing: f64,
    pub boundary: CellLine,
    pub b: Option<&'a dyn Fn(f64) -> f64>,
}

/// Result of integrating the drift phase: end value plus the increments of
/// `int psi` and `int b`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct DriftIncrement {
    pub y: f64,
    pub k: f64,
    pub b: f64,
}

impl DriftIncrement {
    fn combine(a: Self, wa: f64, b: Self, wb: f64) -> Self {
        Self {
            y: wa * a.y + wb * b.y,
            k: wa * a.k + wb * b.k,
            b: wa * a.b + wb * b.b,
        }
    }

    fn then(self, next: Self) -> Self {
        Self {
            y: next.y,
            k: self.k + next.k,
            b: self.b + next.b,
        }
    }
}

/// Root of `y - dt * Psi * psi_n(y - l) = a`. The left side is increasing
/// and concave below `l`, so Newton from `a` increases monotonically to the
/// root; bisection guards the bracket `[a, l]`.
pub(crate) fn implicit_penalty_root(n: u32, coef: f64, a: f64, l: f64, t: f64) -> Result<f64> {
    if a >= l || coef == 0.0 {
        return Ok(a);
    }
    let (mut lo, mut hi) = (a, l);
    let mut y = a;
    let scale = a.abs().max(l.abs()).max(1.0);
    for _ in 0..200 {
        let f = y - coef * psi(n, y - l) - a;
        if f == 0.0 {
            return Ok(y);
        }
        if f < 0.0 {
            lo = y;
        } else {
            hi = y;
        }
        let fp = 1.0 - coef * psi_prime(n, y - l);
        let mut next = y - f / fp;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - y).abs() <= 4.0 * f64::EPSILON * scale || hi - lo <= 4.0 * f64::EPSILON * scale {
            return Ok(next);
        }
        y = next;
    }
    let residual = y - coef * psi(n, y - l) - a;
    Err(Error::ImplicitStep { t, residual })
}

impl CellDrift<'_> {
    /// One implicit Euler step of length `dt` from `(t, y)`.
    fn euler(&self, t: f64, y: f64, dt: f64) -> Result<DriftIncrement> {
        let bv = self.b.map_or(0.0, |b| b(y));
        let a = y + dt * (self.forcing + bv);
        let l1 = self.boundary.at(t + dt);
        let coef = dt * self.psi_scale;
        let y1 = implicit_penalty_root(self.n, coef, a, l1, t + dt)?;
        let k = dt * psi(self.n, y1 - l1);
        Ok(DriftIncrement { y: y1, k, b: dt * bv })
    }

    /// A single implicit Euler step across the whole cell.
    pub fn single_step(&self, y: f64) -> Result<DriftIncrement> {
        self.euler(self.boundary.t0, y, self.boundary.h)
    }

    /// Adaptive step-halving over the cell: an Euler step is compared with
    /// two half steps, accepted when they differ by less than `tol`, and the
    /// Richardson combination of the two is kept.
    pub fn adaptive(&self, y: f64, tol: f64, max_steps: usize) -> Result<DriftIncrement> {
        let end = self.boundary.t0 + self.boundary.h;
        let mut t = self.boundary.t0;
        let mut acc = DriftIncrement { y, ..Default::default() };
        let mut dt = self.boundary.h;
        let mut steps = 0;
        while t < end {
            if end - t <= 1e-14 * self.boundary.h {
                break;
            }
            dt = dt.min(end - t);
            steps += 1;
            if steps > max_steps {
                return Err(Error::NoConvergence { iterations: max_steps, change: dt });
            }
            let full = self.euler(t, acc.y, dt)?;
            let h1 = self.euler(t, acc.y, 0.5 * dt)?;
            let h2 = self.euler(t + 0.5 * dt, h1.y, 0.5 * dt)?;
            let halves = h1.then(h2);
            let err = (halves.y - full.y).abs();
            if err <= tol {
                let step = DriftIncrement::combine(halves, 2.0, full, -1.0);
                acc = acc.then(step);
                t += dt;
                let grow = if err > 0.0 { (0.9 * (tol / err).sqrt()).min(4.0) } else { 4.0 };
                dt *= grow.max(1.0);
            } else {
                dt *= (0.9 * (tol / err).sqrt()).clamp(0.1, 0.5);
            }
        }
        Ok(acc)
    }
}

/// `f_t = f_0 + g_t + Psi int_0^t psi_n(f_u - l_u) du` on a grid, with `l`
/// and `g` linear between nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarPenalisedProblem {
    pub f0: f64,
    pub ell: Vec<f64>,
    pub forcing: Vec<f64>,
    pub psi_scale: f64,
    pub n: u32,
    pub grid: TimeGrid,
}

impl ScalarPenalisedProblem {
    /// Full hypotheses, including `f0 >= l_0`.
    pub fn validate(&self) -> Result<()> {
        self.check_shape()?;
        if self.f0 < self.ell[0] {
            return Err(domain(format!("f0 = {} lies below l_0 = {}", self.f0, self.ell[0])));
        }
        Ok(())
    }

    /// Everything the solver needs. A start below the boundary is allowed
    /// there since the penalty simply pulls the solution up.
    fn check_shape(&self) -> Result<()> {
        if self.ell.len() != self.grid.nodes() || self.forcing.len() != self.grid.nodes() {
            return Err(domain("boundary and forcing must be sampled on the grid"));
        }
        if self.forcing[0] != 0.0 {
            return Err(domain("forcing path must start at 0"));
        }
        if !(self.psi_scale > 0.0) {
            return Err(domain("drift multiplier Psi must be positive"));
        }
        PenaltyFamily::new(self.n)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarSolution {
    pub f: Vec<f64>,
    /// `int_0^t psi_n(f - l)` at nodes.
    pub k: Vec<f64>,
    /// Sup-distance between the last two refinements.
    pub refinement_gap: f64,
    /// Local tolerance that met the target.
    pub local_tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarSolveOptions {
    /// Target sup-distance between consecutive refinements.
    pub tol: f64,
    pub max_refinements: usize,
}

impl Default for ScalarSolveOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_refinements: 8 }
    }
}

fn scalar_pass(prob: &ScalarPenalisedProblem, local_tol: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let h = prob.grid.step_size();
    let mut f = Vec::with_capacity(prob.grid.nodes());
    let mut k = Vec::with_capacity(prob.grid.nodes());
    f.push(prob.f0);
    k.push(0.0);
    for c in 0..prob.grid.steps() {
        let drift = CellDrift {
            n: prob.n,
            psi_scale: prob.psi_scale,
            forcing: (prob.forcing[c + 1] - prob.forcing[c]) / h,
            boundary: CellLine { t0: prob.grid.time(c), h, v0: prob.ell[c], v1: prob.ell[c + 1] },
            b: None,
        };
        let inc = drift.adaptive(f[c], local_tol, 1 << 22)?;
        // Pin the forcing exactly so that f - g - Psi K is round-off only.
        f.push(inc.y);
        k.push(k[c] + inc.k);
    }
    Ok((f, k))
}

/// Solves the scalar penalised equation, refining the local tolerance by a
/// factor 16 until two consecutive solutions agree within `opts.tol`.
pub fn solve_scalar_penalised(prob: &ScalarPenalisedProblem, opts: ScalarSolveOptions) -> Result<ScalarSolution> {
    prob.check_shape()?;
    let mut local_tol = opts.tol;
    let (mut f, _) = scalar_pass(prob, local_tol)?;
    let mut gap = f64::INFINITY;
    for _ in 0..opts.max_refinements {
        local_tol /= 16.0;
        let (f2, k) = scalar_pass(prob, local_tol)?;
        gap = f.iter().zip(&f2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        f = f2;
        if gap < opts.tol {
            return Ok(ScalarSolution { f, k, refinement_gap: gap, local_tol });
        }
    }
    Err(Error::NoConvergence { iterations: opts.max_refinements, change: gap })
}

/// Sup-norm residual of `f - f0 - g - Psi K`.
pub fn integral_residual(prob: &ScalarPenalisedProblem, sol: &ScalarSolution) -> f64 {
    (0..prob.grid.nodes())
        .map(|i| (sol.f[i] - prob.f0 - prob.forcing[i] - prob.psi_scale * sol.k[i]).abs())
        .fold(0.0, f64::max)
}

pub const SQRT_26: f64 = 5.099_019_513_592_785;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LemmaCertificate {
    /// Largest `|df_{0,t} - dl_{0,t}| - sqrt(26) ||g - dl_{0,.}||_{inf,[0,t]}`.
    pub worst_margin: f64,
    pub worst_node: usize,
    pub lhs_at_worst: f64,
    pub rhs_at_worst: f64,
    /// Bound (i) with explicit constant; violations are hard failures.
    pub part_i_holds: bool,
    /// `max_t psi_n(f_t - l_t)`.
    pub psi_max: f64,
    /// `(||l||_beta + ||g||_beta + Psi T^{1-beta} / 2) (Psi^{-beta} + Psi^{1-beta}) n^{1-beta}`,
    /// the bound of part (ii) without its unspecified constant.
    pub part_ii_shape: f64,
}

/// Checks both uniform estimates on one solved instance. `slack` absorbs the
/// solver's own error in part (i).
pub fn lemma_a1_check(
    f: &ScalarSolution,
    prob: &ScalarPenalisedProblem,
    beta: f64,
    slack: f64,
) -> Result<LemmaCertificate> {
    prob.validate()?;
    let grid = &prob.grid;
    let mut running_sup: f64 = 0.0;
    let mut worst = (f64::NEG_INFINITY, 0, 0.0, 0.0);
    for i in 0..grid.nodes() {
        let dl = prob.ell[i] - prob.ell[0];
        running_sup = running_sup.max((prob.forcing[i] - dl).abs());
        let lhs = (f.f[i] - f.f[0] - dl).abs();
        let rhs = SQRT_26 * running_sup;
        if lhs - rhs > worst.0 {
            worst = (lhs - rhs, i, lhs, rhs);
        }
    }
    let psi_max = (0..grid.nodes())
        .map(|i| psi(prob.n, f.f[i] - prob.ell[i]))
        .fold(0.0, f64::max);
    let range = (0, grid.steps());
    let hl = holder_seminorm(&prob.ell, grid, beta, range)?;
    let hg = holder_seminorm(&prob.forcing, grid, beta, range)?;
    let ps = prob.psi_scale;
    let bar = hl + hg + 0.5 * ps * grid.horizon().powf(1.0 - beta);
    let shape = bar * (ps.powf(-beta) + ps.powf(1.0 - beta)) * (prob.n as f64).powf(1.0 - beta);
    Ok(LemmaCertificate {
        worst_margin: worst.0,
        worst_node: worst.1,
        lhs_at_worst: worst.2,
        rhs_at_worst: worst.3,
        part_i_holds: worst.0 <= slack,
        psi_max,
        part_ii_shape: shape,
    })
}

/// Log-log slope of `max_t psi_n(f^n - l)` against `n` over a sweep of the
/// same problem.
pub fn lemma_ii_exponent(template: &ScalarPenalisedProblem, n_list: &[u32], opts: ScalarSolveOptions) -> Result<f64> {
    let mut ns = Vec::new();
    let mut peaks = Vec::new();
    for &n in n_list {
        let prob = ScalarPenalisedProblem { n, ..template.clone() };
        let sol = solve_scalar_penalised(&prob, opts)?;
        let peak = (0..prob.grid.nodes())
            .map(|i| psi(n, sol.f[i] - prob.ell[i]))
            .fold(0.0, f64::max);
        ns.push(n as f64);
        peaks.push(peak);
    }
    Ok(log_log_slope(&ns, &peaks))
}
