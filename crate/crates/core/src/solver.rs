//! Penalised RDE solvers: a direct Davie/implicit-Euler splitting scheme and
//! the Doss-Sussmann route through the flow of the drift-free equation.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::penalty::{psi, CellDrift, CellLine, PenaltyFamily};
use crate::rough::{p_variation_power_by, RoughPathGrid, TimeGrid};
use crate::stats::median;

/// Diffusion coefficient `sigma: R -> (R^d)'`, one scalar map per driver
/// component, with analytic derivatives up to order four.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SigmaSpec {
    /// `sigma_a(y) = c_a`.
    Constant { c: Vec<f64> },
    /// `sigma_a(y) = offset_a + amplitude_a sin(frequency y)`.
    Sine { offset: Vec<f64>, amplitude: Vec<f64>, frequency: f64 },
    /// `sigma_a(y) = offset_a + amplitude_a tanh(scale y)`.
    Tanh { offset: Vec<f64>, amplitude: Vec<f64>, scale: f64 },
}

/// `d^k/du^k tanh(u)` for `k <= 4`, as polynomials in `t = tanh u`.
fn tanh_derivative(order: usize, u: f64) -> f64 {
    let t = u.tanh();
    let s = 1.0 - t * t;
    match order {
        0 => t,
        1 => s,
        2 => -2.0 * t * s,
        3 => s * (6.0 * t * t - 2.0),
        4 => t * s * (16.0 - 24.0 * t * t),
        _ => panic!("derivatives above order 4 are not provided"),
    }
}

impl SigmaSpec {
    pub fn dim(&self) -> usize {
        match self {
            Self::Constant { c } => c.len(),
            Self::Sine { offset, .. } | Self::Tanh { offset, .. } => offset.len(),
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            Self::Constant { .. } => true,
            Self::Sine { amplitude, frequency, .. } => *frequency == 0.0 || amplitude.iter().all(|a| *a == 0.0),
            Self::Tanh { amplitude, scale, .. } => *scale == 0.0 || amplitude.iter().all(|a| *a == 0.0),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Self::Constant { c } => !c.is_empty() && c.iter().all(|v| v.is_finite()),
            Self::Sine { offset, amplitude, frequency: w } | Self::Tanh { offset, amplitude, scale: w } => {
                !offset.is_empty()
                    && offset.len() == amplitude.len()
                    && w.is_finite()
                    && offset.iter().chain(amplitude).all(|v| v.is_finite())
            }
        };
        if ok {
            Ok(())
        } else {
            Err(domain(format!("malformed sigma {self:?}")))
        }
    }

    /// `d^order sigma_a / dy^order` at `y`, for `order <= 4`.
    pub fn derivative(&self, order: usize, a: usize, y: f64) -> f64 {
        assert!(order <= 4, "derivatives above order 4 are not provided");
        match self {
            Self::Constant { c } => {
                if order == 0 {
                    c[a]
                } else {
                    0.0
                }
            }
            Self::Sine { offset, amplitude, frequency } => {
                let phase = frequency * y + order as f64 * std::f64::consts::FRAC_PI_2;
                let v = amplitude[a] * frequency.powi(order as i32) * phase.sin();
                if order == 0 {
                    offset[a] + v
                } else {
                    v
                }
            }
            Self::Tanh { offset, amplitude, scale } => {
                let v = amplitude[a] * scale.powi(order as i32) * tanh_derivative(order, scale * y);
                if order == 0 {
                    offset[a] + v
                } else {
                    v
                }
            }
        }
    }

    /// `(sigma_a, sigma_a', sigma_a'')` at `y`.
    #[inline]
    fn jet(&self, a: usize, y: f64) -> (f64, f64, f64) {
        match self {
            Self::Constant { c } => (c[a], 0.0, 0.0),
            Self::Sine { offset, amplitude, frequency } => {
                let (s, c) = (frequency * y).sin_cos();
                let amp = amplitude[a];
                (offset[a] + amp * s, amp * frequency * c, -amp * frequency * frequency * s)
            }
            Self::Tanh { offset, amplitude, scale } => {
                let t = (scale * y).tanh();
                let s = 1.0 - t * t;
                let amp = amplitude[a];
                (offset[a] + amp * t, amp * scale * s, -2.0 * amp * scale * scale * t * s)
            }
        }
    }
}

/// Optional extra drift `b` with bounded derivative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DriftSpec {
    #[default]
    None,
    /// `b(y) = intercept + slope y`.
    Affine { intercept: f64, slope: f64 },
    /// `b(y) = amplitude sin(frequency y)`.
    Sine { amplitude: f64, frequency: f64 },
    /// `b(y) = amplitude tanh(scale y)`.
    Tanh { amplitude: f64, scale: f64 },
}

impl DriftSpec {
    pub fn is_none(&self) -> bool {
        matches!(self, Self::None)
    }

    pub fn value(&self, y: f64) -> f64 {
        match *self {
            Self::None => 0.0,
            Self::Affine { intercept, slope } => intercept + slope * y,
            Self::Sine { amplitude, frequency } => amplitude * (frequency * y).sin(),
            Self::Tanh { amplitude, scale } => amplitude * (scale * y).tanh(),
        }
    }

    pub fn derivative(&self, y: f64) -> f64 {
        match *self {
            Self::None => 0.0,
            Self::Affine { slope, .. } => slope,
            Self::Sine { amplitude, frequency } => amplitude * frequency * (frequency * y).cos(),
            Self::Tanh { amplitude, scale } => {
                let t = (scale * y).tanh();
                amplitude * scale * (1.0 - t * t)
            }
        }
    }

    /// `||b'||_inf`.
    pub fn lipschitz(&self) -> f64 {
        match *self {
            Self::None => 0.0,
            Self::Affine { slope, .. } => slope.abs(),
            Self::Sine { amplitude, frequency } => (amplitude * frequency).abs(),
            Self::Tanh { amplitude, scale } => (amplitude * scale).abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorField {
    pub sigma: SigmaSpec,
    #[serde(default)]
    pub drift: DriftSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VectorFieldBounds {
    /// Sampled `sup |sigma^(k)|` for `k = 0..=4`, Euclidean over components.
    pub sigma: [f64; 5],
    pub drift_lipschitz: f64,
}

impl VectorField {
    pub fn new(sigma: SigmaSpec, drift: DriftSpec) -> Result<Self> {
        sigma.validate()?;
        Ok(Self { sigma, drift })
    }

    /// Constant diffusion coefficient, no drift.
    pub fn additive(c: Vec<f64>) -> Self {
        Self { sigma: SigmaSpec::Constant { c }, drift: DriftSpec::None }
    }

    pub fn dim(&self) -> usize {
        self.sigma.dim()
    }

    pub fn is_additive(&self) -> bool {
        self.sigma.is_constant()
    }

    /// Davie increment `sigma(y) dX + sigma'(y) sigma(y) XX` over one cell.
    pub fn noise_increment(&self, y: f64, x0: &[f64], x1: &[f64], area: Option<&[f64]>) -> f64 {
        let d = x0.len();
        if d == 1 {
            let (s, s1, _) = self.sigma.jet(0, y);
            let mut inc = s * (x1[0] - x0[0]);
            if let Some(xx) = area {
                inc += s1 * s * xx[0];
            }
            return inc;
        }
        let mut inc = 0.0;
        for b in 0..d {
            let (sb, sb1, _) = self.sigma.jet(b, y);
            inc += sb * (x1[b] - x0[b]);
            if let Some(xx) = area {
                for j in 0..d {
                    inc += sb1 * self.sigma.jet(j, y).0 * xx[j * d + b];
                }
            }
        }
        inc
    }

    /// Increment of `log J` over one cell, where `J` solves the linearised
    /// equation `dJ = sigma'(U) J dX`.
    fn log_jacobian_increment(&self, u: f64, x0: &[f64], x1: &[f64], area: Option<&[f64]>) -> f64 {
        let d = x0.len();
        let mut inc = 0.0;
        for b in 0..d {
            let (_, sb1, sb2) = self.sigma.jet(b, u);
            inc += sb1 * (x1[b] - x0[b]);
            if let Some(xx) = area {
                for j in 0..d {
                    inc += sb2 * self.sigma.jet(j, u).0 * xx[j * d + b];
                }
            }
        }
        inc
    }

    /// Sampled sup-norms of `sigma` and its derivatives on `[lo, hi]`.
    pub fn spot_check(&self, lo: f64, hi: f64, samples: usize) -> Result<VectorFieldBounds> {
        if !(lo < hi) || samples < 2 {
            return Err(domain("spot check needs lo < hi and at least two samples"));
        }
        let mut sup = [0.0f64; 5];
        for i in 0..samples {
            let y = lo + (hi - lo) * i as f64 / (samples - 1) as f64;
            for (k, s) in sup.iter_mut().enumerate() {
                let v: f64 = (0..self.dim()).map(|a| self.sigma.derivative(k, a, y).powi(2)).sum();
                *s = s.max(v.sqrt());
            }
        }
        if sup.iter().any(|v| !v.is_finite()) {
            return Err(domain("sigma or one of its derivatives is not finite on the range"));
        }
        Ok(VectorFieldBounds { sigma: sup, drift_lipschitz: self.drift.lipschitz() })
    }
}

/// Boundary process `L`, given in closed form or as samples on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BoundarySpec {
    Constant { value: f64 },
    /// `offset + amplitude sin(frequency t)`.
    Sine { offset: f64, amplitude: f64, frequency: f64 },
    Linear { intercept: f64, slope: f64 },
    /// Values at the grid nodes; `alpha` is the declared Hölder exponent.
    Samples { values: Vec<f64>, alpha: f64 },
}

impl Default for BoundarySpec {
    fn default() -> Self {
        Self::Constant { value: 0.0 }
    }
}

impl BoundarySpec {
    pub fn sample(&self, grid: &TimeGrid) -> Result<Vec<f64>> {
        let f = |t: f64| match *self {
            Self::Constant { value } => value,
            Self::Sine { offset, amplitude, frequency } => offset + amplitude * (frequency * t).sin(),
            Self::Linear { intercept, slope } => intercept + slope * t,
            Self::Samples { .. } => unreachable!(),
        };
        match self {
            Self::Samples { values, .. } => {
                if values.len() != grid.nodes() {
                    return Err(domain(format!(
                        "boundary has {} samples but the grid has {} nodes",
                        values.len(),
                        grid.nodes()
                    )));
                }
                Ok(values.clone())
            }
            _ => Ok(grid.times().into_iter().map(f).collect()),
        }
    }

    /// Declared Hölder exponent; closed-form boundaries are Lipschitz.
    pub fn declared_alpha(&self) -> f64 {
        match self {
            Self::Samples { alpha, .. } => *alpha,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DriftScheme {
    /// One implicit Euler step per cell.
    #[default]
    ImplicitEuler,
    /// Adaptive step-halving inside each cell to local tolerance `tol`.
    Adaptive { tol: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Direct,
    DossSussmann,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeshDiagnostics {
    /// Sup-distance at common nodes between this solve and the solve on the
    /// grid coarsened by two.
    pub coarse_gap: f64,
    pub tolerance: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PenalisedSolution {
    pub n: u32,
    pub grid: TimeGrid,
    pub y: Vec<f64>,
    /// `K^n_t = int_0^t psi_n(Y^n - L)`, accumulated with the quadrature the
    /// scheme itself uses.
    pub k: Vec<f64>,
    /// `int_0^t b(Y^n)` with the scheme's quadrature.
    pub b_integral: Vec<f64>,
    pub scheme: Scheme,
    pub mesh: Option<MeshDiagnostics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SolveOptions {
    pub drift: DriftScheme,
    /// When set, the solve is repeated on the coarsened grid and flagged if
    /// the two disagree by more than this.
    pub mesh_tolerance: Option<f64>,
}

fn check_inputs(vf: &VectorField, rp: &RoughPathGrid, boundary: &[f64], y0: f64) -> Result<()> {
    if vf.dim() != rp.dim() {
        return Err(Error::GridMismatch(format!(
            "sigma has {} components, driver has {}",
            vf.dim(),
            rp.dim()
        )));
    }
    if boundary.len() != rp.grid().nodes() {
        return Err(Error::GridMismatch("boundary is not sampled on the driver grid".into()));
    }
    if rp.beta() == 0.5 {
        return Err(domain("beta = 1/2 is excluded; use a slightly smaller exponent"));
    }
    if y0 < boundary[0] {
        return Err(domain(format!("y0 = {y0} lies below L_0 = {}", boundary[0])));
    }
    Ok(())
}

fn direct_pass(
    vf: &VectorField,
    n: u32,
    rp: &RoughPathGrid,
    boundary: &[f64],
    y0: f64,
    drift: DriftScheme,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let grid = *rp.grid();
    let h = grid.step_size();
    let m = grid.steps();
    let mut y = Vec::with_capacity(m + 1);
    let mut k = Vec::with_capacity(m + 1);
    let mut bi = Vec::with_capacity(m + 1);
    y.push(y0);
    k.push(0.0);
    bi.push(0.0);
    let bfn = |v: f64| vf.drift.value(v);
    let b: Option<&dyn Fn(f64) -> f64> = if vf.drift.is_none() { None } else { Some(&bfn) };
    for c in 0..m {
        let a = y[c] + vf.noise_increment(y[c], rp.x(c), rp.x(c + 1), rp.cell_area(c));
        let cell = CellDrift {
            n,
            psi_scale: 1.0,
            forcing: 0.0,
            boundary: CellLine { t0: grid.time(c), h, v0: boundary[c], v1: boundary[c + 1] },
            b,
        };
        let inc = match drift {
            DriftScheme::ImplicitEuler => cell.single_step(a)?,
            DriftScheme::Adaptive { tol } => cell.adaptive(a, tol, 1 << 22)?,
        };
        y.push(inc.y);
        k.push(k[c] + inc.k);
        bi.push(bi[c] + inc.b);
    }
    Ok((y, k, bi))
}

/// Solves `Y = y0 + int sigma(Y) dX + int b(Y) dt + int psi_n(Y - L) dt`.
/// Each cell applies the Davie noise step, then integrates the drift with
/// the penalty implicit and `L` linear across the cell.
pub fn solve_penalised_rde(
    vf: &VectorField,
    n: u32,
    rp: &RoughPathGrid,
    boundary: &[f64],
    y0: f64,
    opts: &SolveOptions,
) -> Result<PenalisedSolution> {
    PenaltyFamily::new(n)?;
    check_inputs(vf, rp, boundary, y0)?;
    let (y, k, b_integral) = direct_pass(vf, n, rp, boundary, y0, opts.drift)?;
    let mesh = match opts.mesh_tolerance {
        Some(tol) => Some(mesh_check(vf, n, rp, boundary, y0, opts.drift, &y, tol)?),
        None => None,
    };
    Ok(PenalisedSolution { n, grid: *rp.grid(), y, k, b_integral, scheme: Scheme::Direct, mesh })
}

#[allow(clippy::too_many_arguments)]
fn mesh_check(
    vf: &VectorField,
    n: u32,
    rp: &RoughPathGrid,
    boundary: &[f64],
    y0: f64,
    drift: DriftScheme,
    fine: &[f64],
    tol: f64,
) -> Result<MeshDiagnostics> {
    let coarse_rp = rp.coarsen(2)?;
    let coarse_l: Vec<f64> = boundary.iter().step_by(2).copied().collect();
    let (coarse, _, _) = direct_pass(vf, n, &coarse_rp, &coarse_l, y0, drift)?;
    let gap = coarse
        .iter()
        .enumerate()
        .map(|(i, v)| (v - fine[2 * i]).abs())
        .fold(0.0, f64::max);
    let flagged = gap > tol;
    if flagged {
        log::warn!("mesh refinement changed the n = {n} solution by {gap:e} (tolerance {tol:e})");
    }
    Ok(MeshDiagnostics { coarse_gap: gap, tolerance: tol, flagged })
}

/// Flow `U_t(y)` of the drift-free equation on a grid of initial values,
/// with its Jacobian.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowTable {
    pub grid: TimeGrid,
    pub ygrid: Vec<f64>,
    /// Node-major: `u[i * ygrid.len() + g] = U_{t_i}(ygrid[g])`.
    pub u: Vec<f64>,
    pub j: Vec<f64>,
    pub jinv: Vec<f64>,
    /// Measured `sup |J| v |J^{-1}|`.
    pub cj_hat: f64,
    /// Largest mismatch between the interpolated flow and a direct solve
    /// from the midpoints of `ygrid`.
    pub interpolation_error: f64,
}

fn flow_from(vf: &VectorField, rp: &RoughPathGrid, y: f64, u: &mut [f64], logj: &mut [f64]) {
    u[0] = y;
    logj[0] = 0.0;
    for c in 0..rp.grid().steps() {
        let (x0, x1, area) = (rp.x(c), rp.x(c + 1), rp.cell_area(c));
        logj[c + 1] = logj[c] + vf.log_jacobian_increment(u[c], x0, x1, area);
        u[c + 1] = u[c] + vf.noise_increment(u[c], x0, x1, area);
    }
}

/// Builds the flow table on `ygrid` (strictly increasing, at least four
/// points).
pub fn compute_flow(vf: &VectorField, rp: &RoughPathGrid, ygrid: &[f64]) -> Result<FlowTable> {
    if ygrid.len() < 4 || ygrid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(domain("ygrid must be strictly increasing with at least four points"));
    }
    if vf.dim() != rp.dim() {
        return Err(Error::GridMismatch("sigma and driver dimensions differ".into()));
    }
    let nodes = rp.grid().nodes();
    let gcount = ygrid.len();
    let mut u = vec![0.0; nodes * gcount];
    let mut j = vec![0.0; nodes * gcount];
    let mut jinv = vec![0.0; nodes * gcount];
    let mut col_u = vec![0.0; nodes];
    let mut col_l = vec![0.0; nodes];
    let mut cj_hat: f64 = 1.0;
    for (g, &y) in ygrid.iter().enumerate() {
        flow_from(vf, rp, y, &mut col_u, &mut col_l);
        for i in 0..nodes {
            let e = col_l[i].exp();
            u[i * gcount + g] = col_u[i];
            j[i * gcount + g] = e;
            jinv[i * gcount + g] = (-col_l[i]).exp();
            cj_hat = cj_hat.max(e).max(1.0 / e);
        }
    }
    let mut table = FlowTable { grid: *rp.grid(), ygrid: ygrid.to_vec(), u, j, jinv, cj_hat, interpolation_error: 0.0 };
    let mut worst: f64 = 0.0;
    for w in ygrid.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        flow_from(vf, rp, mid, &mut col_u, &mut col_l);
        for (i, &exact) in col_u.iter().enumerate() {
            worst = worst.max((table.flow(i, mid) - exact).abs());
        }
    }
    table.interpolation_error = worst;
    Ok(table)
}

impl FlowTable {
    /// `ygrid` covering the range the Doss-Sussmann ODE can reach, from
    /// measured quantities: the state rises from `y0` until the flow clears
    /// `max L`, and the flow displaces a point by at most about
    /// `sum_a ||sigma_a||_inf osc(X^a)`.
    pub fn auto_ygrid(vf: &VectorField, rp: &RoughPathGrid, boundary: &[f64], y0: f64, points: usize) -> Result<Vec<f64>> {
        if points < 4 {
            return Err(domain("ygrid needs at least four points"));
        }
        let lmax = boundary.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probe_lo = y0.min(lmax) - 1.0;
        let mut probe_hi = y0.max(lmax) + 1.0;
        // The displacement sup is sampled on a range that is widened until
        // it contains every state of interest.
        let mut displacement: f64 = 0.0;
        for _ in 0..4 {
            let bounds = vf.spot_check(probe_lo, probe_hi, 64)?;
            let mut disp = 0.0;
            for a in 0..rp.dim() {
                let comp = rp.component(a);
                let osc = comp.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                    - comp.iter().copied().fold(f64::INFINITY, f64::min);
                disp += osc;
            }
            displacement = 2.0 * bounds.sigma[0] * disp + 0.25;
            let (lo, hi) = (y0.min(lmax) - displacement, y0.max(lmax) + 2.0 * displacement);
            if lo >= probe_lo && hi <= probe_hi {
                break;
            }
            probe_lo = probe_lo.min(lo);
            probe_hi = probe_hi.max(hi);
        }
        let drift_room = vf.drift.value(y0).abs() * rp.grid().horizon() + vf.drift.lipschitz();
        let lo = y0 - 0.25 - if vf.drift.is_none() { 0.0 } else { drift_room + displacement };
        let hi = y0.max(lmax) + 2.0 * displacement + drift_room;
        Ok((0..points).map(|g| lo + (hi - lo) * g as f64 / (points - 1) as f64).collect())
    }

    fn bracket(&self, z: f64) -> Option<usize> {
        let g = &self.ygrid;
        if !(z >= g[0] && z <= g[g.len() - 1]) {
            return None;
        }
        Some(g.partition_point(|v| *v <= z).clamp(1, g.len() - 1) - 1)
    }

    pub fn range(&self) -> (f64, f64) {
        (self.ygrid[0], self.ygrid[self.ygrid.len() - 1])
    }

    /// `U_{t_i}(z)` by cubic Hermite interpolation in `y`, using `J` as slope.
    pub fn flow(&self, i: usize, z: f64) -> f64 {
        let g = self.bracket(z).expect("state outside the flow table");
        let gc = self.ygrid.len();
        let (y0, y1) = (self.ygrid[g], self.ygrid[g + 1]);
        let h = y1 - y0;
        let s = (z - y0) / h;
        let (u0, u1) = (self.u[i * gc + g], self.u[i * gc + g + 1]);
        let (m0, m1) = (self.j[i * gc + g] * h, self.j[i * gc + g + 1] * h);
        let s2 = s * s;
        let s3 = s2 * s;
        (2.0 * s3 - 3.0 * s2 + 1.0) * u0 + (s3 - 2.0 * s2 + s) * m0 + (-2.0 * s3 + 3.0 * s2) * u1 + (s3 - s2) * m1
    }

    /// `J^{-1}_{t_i}(z)` by Catmull-Rom interpolation.
    pub fn jacobian_inverse(&self, i: usize, z: f64) -> f64 {
        let g = self.bracket(z).expect("state outside the flow table");
        let gc = self.ygrid.len();
        let row = &self.jinv[i * gc..(i + 1) * gc];
        let y = &self.ygrid;
        let h = y[g + 1] - y[g];
        let s = (z - y[g]) / h;
        let slope = |k: usize| -> f64 {
            if k == 0 {
                (row[1] - row[0]) / (y[1] - y[0])
            } else if k == gc - 1 {
                (row[gc - 1] - row[gc - 2]) / (y[gc - 1] - y[gc - 2])
            } else {
                (row[k + 1] - row[k - 1]) / (y[k + 1] - y[k - 1])
            }
        };
        let (p0, p1) = (row[g], row[g + 1]);
        let (m0, m1) = (slope(g) * h, slope(g + 1) * h);
        let s2 = s * s;
        let s3 = s2 * s;
        (2.0 * s3 - 3.0 * s2 + 1.0) * p0 + (s3 - 2.0 * s2 + s) * m0 + (-2.0 * s3 + 3.0 * s2) * p1 + (s3 - s2) * m1
    }

    pub fn is_adequate(&self, tol: f64) -> bool {
        self.interpolation_error <= tol
    }
}

/// Penalised solution through `Y^n_t = U_t(Z^n_t)`, where
/// `Z' = J^{-1}(t, Z) [psi_n(U_t(Z) - L_t) + b(U_t(Z))]`, integrated by
/// implicit Euler with bisection.
pub fn doss_sussmann_solve(
    vf: &VectorField,
    n: u32,
    rp: &RoughPathGrid,
    boundary: &[f64],
    y0: f64,
    flow: &FlowTable,
) -> Result<PenalisedSolution> {
    PenaltyFamily::new(n)?;
    check_inputs(vf, rp, boundary, y0)?;
    if flow.grid != *rp.grid() {
        return Err(Error::GridMismatch("flow table and driver grids differ".into()));
    }
    let (lo, hi) = flow.range();
    if !(y0 > lo && y0 < hi) {
        return Err(Error::FlowRange { z: y0, lo, hi, t: 0.0 });
    }
    let grid = *rp.grid();
    let h = grid.step_size();
    let nodes = grid.nodes();
    let mut z = y0;
    let mut y = Vec::with_capacity(nodes);
    let mut k = Vec::with_capacity(nodes);
    let mut bi = Vec::with_capacity(nodes);
    y.push(flow.flow(0, y0));
    k.push(0.0);
    bi.push(0.0);
    for i in 1..nodes {
        let t = grid.time(i);
        let parts = |zz: f64| -> Result<(f64, f64, f64)> {
            if !(zz >= lo && zz <= hi) {
                return Err(Error::FlowRange { z: zz, lo, hi, t });
            }
            let u = flow.flow(i, zz);
            let p = psi(n, u - boundary[i]);
            let b = vf.drift.value(u);
            Ok((flow.jacobian_inverse(i, zz) * (p + b), p, b))
        };
        let g = |zz: f64| -> Result<f64> { Ok(zz - h * parts(zz)?.0 - z) };
        // Bracket the root of g, then bisect.
        let w0 = parts(z)?.0;
        let mut width = (h * w0.abs()).max(1e-12 * (1.0 + z.abs()));
        let guess = z + h * w0;
        let (mut a, mut b) = (guess - width, guess + width);
        let (mut ga, mut gb) = (g(a)?, g(b)?);
        let mut expansions = 0;
        while ga > 0.0 || gb < 0.0 {
            width *= 2.0;
            if ga > 0.0 {
                a -= width;
                ga = g(a)?;
            }
            if gb < 0.0 {
                b += width;
                gb = g(b)?;
            }
            expansions += 1;
            if expansions > 200 {
                return Err(Error::ImplicitStep { t, residual: ga.min(gb) });
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if b - a <= 2.0 * f64::EPSILON * (1.0 + mid.abs()) {
                break;
            }
            let gm = g(mid)?;
            if gm == 0.0 {
                a = mid;
                b = mid;
                break;
            }
            if gm < 0.0 {
                a = mid;
            } else {
                b = mid;
            }
        }
        z = 0.5 * (a + b);
        let (_, p, bv) = parts(z)?;
        y.push(flow.flow(i, z));
        k.push(k[i - 1] + h * p);
        bi.push(bi[i - 1] + h * bv);
    }
    Ok(PenalisedSolution { n, grid, y, k, b_integral: bi, scheme: Scheme::DossSussmann, mesh: None })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CrossCheck {
    pub sup_y: f64,
    pub sup_k: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub fn cross_check(a: &PenalisedSolution, b: &PenalisedSolution, tolerance: f64) -> Result<CrossCheck> {
    if a.grid != b.grid || a.n != b.n {
        return Err(Error::GridMismatch(format!(
            "comparing n = {} on {:?} with n = {} on {:?}",
            a.n, a.grid, b.n, b.grid
        )));
    }
    let sup = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    let sup_y = sup(&a.y, &b.y);
    let sup_k = sup(&a.k, &b.k);
    Ok(CrossCheck { sup_y, sup_k, tolerance, pass: sup_y < tolerance && sup_k < tolerance })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AprioriRow {
    pub n: u32,
    /// `||sigma'sigma(Y^n)||_p + ||R^{sigma(Y^n)}||_{p/2}`.
    pub theta: f64,
    /// Smallest constant making the comparison bound hold at every pair of
    /// nodes.
    pub c_hat: f64,
    /// p-variation of `K^n` and its total increment, equal for monotone `K`.
    pub k_variation: f64,
    pub k_increment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AprioriReport {
    pub p: f64,
    pub rows: Vec<AprioriRow>,
    /// `max_n theta / median_n theta` (0 when every theta vanishes).
    pub plateau_ratio: f64,
    /// Same ratio for `c_hat`.
    pub c_hat_ratio: f64,
}

fn ratio_to_median(v: &[f64]) -> f64 {
    let med = median(v);
    let max = v.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        0.0
    } else {
        max / med
    }
}

/// Uniform-in-`n` a priori quantities measured on a family of solutions of
/// the same problem.
pub fn a_priori_probe(sols: &[PenalisedSolution], vf: &VectorField, rp: &RoughPathGrid, boundary: &[f64]) -> Result<AprioriReport> {
    if sols.is_empty() {
        return Err(domain("a priori probe needs at least one solution"));
    }
    let beta = rp.beta();
    let p = 1.0 / beta;
    let d = rp.dim();
    let grid = *rp.grid();
    let nodes = grid.nodes();
    let xnorm = rp.homogeneous_norm();
    let xscale = xnorm.max(xnorm.powf(1.0 / beta));
    let h = grid.step_size();
    let mut rows = Vec::with_capacity(sols.len());
    for sol in sols {
        if sol.grid != grid {
            return Err(Error::GridMismatch("solution and driver grids differ".into()));
        }
        let sig: Vec<f64> = (0..nodes)
            .flat_map(|i| (0..d).map(move |a| (i, a)))
            .map(|(i, a)| vf.sigma.derivative(0, a, sol.y[i]))
            .collect();
        let sig1: Vec<f64> = (0..nodes)
            .flat_map(|i| (0..d).map(move |a| (i, a)))
            .map(|(i, a)| vf.sigma.derivative(1, a, sol.y[i]))
            .collect();
        let sig_dx = |i: usize, j: usize| -> f64 {
            (0..d).map(|b| sig[i * d + b] * (rp.x(j)[b] - rp.x(i)[b])).sum()
        };
        // Gubinelli derivative of sigma(Y): the matrix sigma_a'(Y) sigma_b(Y).
        let gub = |i: usize, j: usize| -> f64 {
            let mut acc = 0.0;
            for a in 0..d {
                for b in 0..d {
                    let v = sig1[j * d + a] * sig[j * d + b] - sig1[i * d + a] * sig[i * d + b];
                    acc += v * v;
                }
            }
            acc.sqrt()
        };
        let rem = |i: usize, j: usize| -> f64 {
            let lin = sig_dx(i, j);
            (0..d)
                .map(|a| {
                    let v = sig[j * d + a] - sig[i * d + a] - sig1[i * d + a] * lin;
                    v * v
                })
                .sum::<f64>()
                .sqrt()
        };
        let theta = if vf.is_additive() {
            0.0
        } else {
            p_variation_power_by(nodes, p, gub).powf(1.0 / p)
                + p_variation_power_by(nodes, p / 2.0, rem).powf(2.0 / p)
        };
        let mut c_hat: f64 = 0.0;
        for i in 0..nodes - 1 {
            let (mut lmin, mut lmax) = (boundary[i], boundary[i]);
            let neg = (boundary[i] - sol.y[i]).max(0.0);
            for j in i + 1..nodes {
                lmin = lmin.min(boundary[j]);
                lmax = lmax.max(boundary[j]);
                let excess = (sol.y[j] - sol.y[i]).abs() - (lmax - lmin) - neg;
                if excess > 0.0 {
                    c_hat = c_hat.max(excess / (xscale * ((j - i) as f64 * h).powf(beta)));
                }
            }
        }
        let k_variation = p_variation_power_by(nodes, p.max(1.0), |i, j| (sol.k[j] - sol.k[i]).abs())
            .powf(1.0 / p.max(1.0));
        rows.push(AprioriRow {
            n: sol.n,
            theta,
            c_hat,
            k_variation,
            k_increment: sol.k[nodes - 1] - sol.k[0],
        });
    }
    let thetas: Vec<f64> = rows.iter().map(|r| r.theta).collect();
    let chats: Vec<f64> = rows.iter().map(|r| r.c_hat).collect();
    Ok(AprioriReport { p, plateau_ratio: ratio_to_median(&thetas), c_hat_ratio: ratio_to_median(&chats), rows })
}
