use serde::Serialize;

use crate::error::{domain, Error, Result};
use crate::penalty::psi_prime;
use crate::rough::RoughPathGrid;
use crate::solver::{solve_penalised_rde, PenalisedSolution, SigmaSpec, SolveOptions, VectorField};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MalliavinKernel {
    /// `Gamma(t, s) = 1_{[0,t]}(s)` (Brownian case).
    Indicator,
    /// The fBm kernel for `H > 1/2`, with its normalising constant.
    Fractional { c_h: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MalliavinReport {
    pub hurst: f64,
    pub n: u32,
    pub t: f64,
    pub sigma: f64,
    pub kernel: MalliavinKernel,
    pub s: Vec<f64>,
    /// `D_s Y^n_t`.
    pub values: Vec<f64>,
    /// Upper bound on `D_s Y^n_t / sigma`: `exp(||b'|| T)`, times `Gamma(t, s)`
    /// when `H > 1/2`; zero for `s > t`.
    pub upper_bound: Vec<f64>,
    pub within_bounds: bool,
    pub fd: Option<Vec<f64>>,
    pub fd_max_rel_err: Option<f64>,
}

impl MalliavinReport {
    /// Records a finite-difference comparison at the same `s` values.
    pub fn attach_fd(&mut self, fd: Vec<f64>) -> Result<()> {
        if fd.len() != self.values.len() {
            return Err(Error::GridMismatch("finite differences and s grid differ in length".into()));
        }
        let err = self
            .values
            .iter()
            .zip(&fd)
            .map(|(d, f)| if *d == 0.0 { f.abs() } else { (f - d).abs() / d.abs() })
            .fold(0.0, f64::max);
        self.fd = Some(fd);
        self.fd_max_rel_err = Some(err);
        Ok(())
    }
}

/// `c_H = [H (2H - 1) / B(2 - 2H, H - 1/2)]^{1/2}` for `H in (1/2, 1)`.
pub fn hurst_constant(hurst: f64) -> Result<f64> {
    if !(hurst > 0.5 && hurst < 1.0) {
        return Err(domain(format!("kernel constant needs H in (1/2, 1), got {hurst}")));
    }
    let b = statrs::function::beta::beta(2.0 - 2.0 * hurst, hurst - 0.5);
    Ok((hurst * (2.0 * hurst - 1.0) / b).sqrt())
}

const QUAD_TOL: f64 = 1e-10;
const QUAD_MAX_PANELS: usize = 1 << 14;

/// `c_H s^{-a} int_s^t (u - s)^{a-1} u^a f(u) du` with `a = H - 1/2`,
/// integrated in `w = (u - s)^a`, which leaves `(c_H / a) int (u/s)^a f(u) dw`
/// with a bounded integrand. Composite Simpson on segments split at the
/// images of `breaks` (where `f` may kink), doubled until it settles.
fn fractional_adjoint(hurst: f64, t: f64, s: f64, f: &dyn Fn(f64) -> f64, breaks: &[f64]) -> Result<f64> {
    let c = hurst_constant(hurst)?;
    if s > t {
        return Ok(0.0);
    }
    if !(s > 0.0) {
        return Err(domain("fractional kernel needs s > 0"));
    }
    if s == t {
        return Ok(0.0);
    }
    let a = hurst - 0.5;
    // Besides the kinks of f, knots at u - s = s 4^k grade the mesh towards
    // the bend of (u/s)^a near w = s^a, which is sharp for small s.
    let mut cuts: Vec<f64> = breaks.iter().copied().filter(|&b| b > s && b < t).collect();
    let mut d = s;
    while s + d < t {
        cuts.push(s + d);
        d *= 4.0;
    }
    cuts.sort_by(f64::total_cmp);
    let mut knots = vec![0.0];
    knots.extend(cuts.iter().map(|b| (b - s).powf(a)));
    knots.push((t - s).powf(a));
    let g = |w: f64| {
        let u = (s + w.powf(1.0 / a)).min(t);
        (u / s).powf(a) * f(u)
    };
    let simpson = |panels: usize| -> f64 {
        knots
            .windows(2)
            .map(|k| {
                let h = (k[1] - k[0]) / panels as f64;
                let mut acc = g(k[0]) + g(k[1]);
                for i in 1..panels {
                    acc += g(k[0] + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
                }
                acc * h / 3.0
            })
            .sum()
    };
    let mut panels = if knots.len() > 2 { 2 } else { 64 };
    let mut prev = simpson(panels);
    let mut change = f64::INFINITY;
    while panels < QUAD_MAX_PANELS {
        panels *= 2;
        let next = simpson(panels);
        change = (next - prev).abs();
        if change <= QUAD_TOL * next.abs() {
            return Ok(c / a * next);
        }
        prev = next;
    }
    Err(Error::NoConvergence { iterations: panels, change })
}

/// The fBm kernel `Gamma(t, s)`; the indicator of `[0, t]` at `H = 1/2`.
pub fn fbm_kernel(t: f64, s: f64, hurst: f64) -> Result<f64> {
    if hurst == 0.5 {
        return Ok(if s <= t { 1.0 } else { 0.0 });
    }
    fractional_adjoint(hurst, t, s, &|_| 1.0, &[])
}

/// `D_s Y^n_t` for constant `sigma`, `d = 1`, `H in [1/2, 1)`:
/// the kernel adjoint applied to `1_{[0,t]} exp(int_. ^t (b' + psi_n')(Y^n))`,
/// times `sigma`. The exponent is integrated by the trapezoid rule on the
/// grid and interpolated linearly in between.
pub fn malliavin_derivative(
    sol: &PenalisedSolution,
    vf: &VectorField,
    boundary: &[f64],
    hurst: f64,
    t: f64,
    s_points: &[f64],
) -> Result<MalliavinReport> {
    if !(0.5..1.0).contains(&hurst) {
        return Err(Error::Unsupported(format!("Malliavin derivative needs H in [1/2, 1), got {hurst}")));
    }
    let sigma = match &vf.sigma {
        SigmaSpec::Constant { c } if c.len() == 1 => c[0],
        _ => return Err(Error::Unsupported("Malliavin derivative needs a constant scalar sigma".into())),
    };
    if sigma == 0.0 {
        return Err(domain("sigma = 0 has a vanishing derivative"));
    }
    let grid = sol.grid;
    if boundary.len() != grid.nodes() {
        return Err(Error::GridMismatch("boundary does not match the solution grid".into()));
    }
    if !(t > 0.0 && t <= grid.horizon()) {
        return Err(domain(format!("t = {t} outside (0, {}]", grid.horizon())));
    }
    let ti = grid.index_of(t);
    let t = grid.time(ti);
    let h = grid.step_size();
    let rate: Vec<f64> = (0..=ti)
        .map(|i| vf.drift.derivative(sol.y[i]) + psi_prime(sol.n, sol.y[i] - boundary[i]))
        .collect();
    let mut cum = vec![0.0; ti + 1];
    for i in 1..=ti {
        cum[i] = cum[i - 1] + 0.5 * h * (rate[i - 1] + rate[i]);
    }
    let cum_at = |u: f64| {
        let x = (u / h).clamp(0.0, ti as f64);
        let k = (x.floor() as usize).min(ti.saturating_sub(1));
        let w = x - k as f64;
        if ti == 0 {
            0.0
        } else {
            cum[k] + w * (cum[k + 1] - cum[k])
        }
    };
    let factor = |u: f64| (cum[ti] - cum_at(u)).exp();
    let nodes: Vec<f64> = (1..ti).map(|i| grid.time(i)).collect();
    let growth = (vf.drift.lipschitz() * grid.horizon()).exp();

    let kernel = if hurst == 0.5 {
        MalliavinKernel::Indicator
    } else {
        MalliavinKernel::Fractional { c_h: hurst_constant(hurst)? }
    };
    let mut values = Vec::with_capacity(s_points.len());
    let mut upper = Vec::with_capacity(s_points.len());
    for &s in s_points {
        if s < 0.0 {
            return Err(domain(format!("s = {s} is negative")));
        }
        if s > t {
            values.push(0.0);
            upper.push(0.0);
            continue;
        }
        if hurst == 0.5 {
            values.push(sigma * factor(s));
            upper.push(growth);
        } else {
            values.push(sigma * fractional_adjoint(hurst, t, s, &factor, &nodes)?);
            upper.push(growth * fbm_kernel(t, s, hurst)?);
        }
    }
    let within_bounds = s_points.iter().zip(&values).zip(&upper).all(|((&s, d), ub)| {
        let r = d / sigma;
        if s > t || (hurst > 0.5 && s == t) {
            *d == 0.0
        } else {
            r > 0.0 && r <= ub * (1.0 + 1e-9)
        }
    });
    if !within_bounds {
        log::warn!("Malliavin derivative left its a priori band");
    }
    Ok(MalliavinReport {
        hurst,
        n: sol.n,
        t,
        sigma,
        kernel,
        s: s_points.to_vec(),
        values,
        upper_bound: upper,
        within_bounds,
        fd: None,
        fd_max_rel_err: None,
    })
}

/// Pathwise finite difference of `Y^n_t` against the driver: the increment
/// over cell `k` is moved by `+-bump` (a slope change of `bump / h` on that
/// cell), the path re-lifted and re-solved, and the central difference
/// divided by `2 bump`. Returns one value per cell, to be compared with the
/// derivative at the cell midpoint.
#[allow(clippy::too_many_arguments)]
pub fn malliavin_fd(
    vf: &VectorField,
    n: u32,
    rp: &RoughPathGrid,
    boundary: &[f64],
    y0: f64,
    opts: &SolveOptions,
    t_index: usize,
    cells: &[usize],
    bump: f64,
) -> Result<Vec<f64>> {
    if rp.dim() != 1 {
        return Err(Error::Unsupported("bump differences are implemented for d = 1".into()));
    }
    if !(bump > 0.0) {
        return Err(domain("bump must be positive"));
    }
    let grid = *rp.grid();
    if t_index > grid.steps() {
        return Err(domain("t index outside the grid"));
    }
    let x = rp.component(0);
    let opts = SolveOptions { mesh_tolerance: None, ..*opts };
    cells
        .iter()
        .map(|&k| {
            if k >= grid.steps() {
                return Err(domain(format!("cell {k} outside the grid")));
            }
            if k >= t_index {
                return Ok(0.0);
            }
            let solve = |sign: f64| -> Result<f64> {
                let xb: Vec<f64> = x
                    .iter()
                    .enumerate()
                    .map(|(j, v)| if j > k { v + sign * bump } else { *v })
                    .collect();
                let rpb = RoughPathGrid::piecewise_linear(grid, 1, xb, rp.beta())?;
                Ok(solve_penalised_rde(vf, n, &rpb, boundary, y0, &opts)?.y[t_index])
            };
            Ok((solve(1.0)? - solve(-1.0)?) / (2.0 * bump))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{FbmSampler, FbmSpec};
    use crate::rough::TimeGrid;
    use crate::solver::DriftSpec;

    fn simpson(f: impl Fn(f64) -> f64, panels: usize) -> f64 {
        let h = 1.0 / panels as f64;
        let mut acc = f(0.0) + f(1.0);
        for i in 1..panels {
            acc += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    fn isometry(t: f64, hurst: f64) -> f64 {
        // int_0^t Gamma(t, s)^2 ds, split at t/2 with s = (t/2) r^m below and
        // t - s = (t/2) q^5 above. Gamma^2 grows like s^{1-2H} at the origin,
        // so m is chosen to leave at least r^3 there.
        let g2 = |s: f64| fbm_kernel(t, s, hurst).unwrap().powi(2);
        let half = 0.5 * t;
        let m = (4.0 / (2.0 - 2.0 * hurst)).ceil() as i32;
        let lower = simpson(
            |r| if r == 0.0 { 0.0 } else { g2(half * r.powi(m)) * m as f64 * half * r.powi(m - 1) },
            200,
        );
        let upper = simpson(|q| if q == 0.0 { 0.0 } else { g2(t - half * q.powi(5)) * 5.0 * half * q.powi(4) }, 200);
        lower + upper
    }

    #[test]
    fn kernel_reproduces_the_variance() {
        for hurst in [0.6, 0.75, 0.9] {
            for t in [0.5, 1.0] {
                let v = isometry(t, hurst);
                let want = f64::powf(t, 2.0 * hurst);
                assert!((v - want).abs() < 2e-4 * want, "H = {hurst}, t = {t}: {v} vs {want}");
            }
        }
    }

    #[test]
    fn kernel_constant_reference() {
        // H = 3/4: B(1/2, 1/4) = Gamma(1/2) Gamma(1/4) / Gamma(3/4).
        let b: f64 = 1.772_453_850_905_516 * 3.625_609_908_221_908 / 1.225_416_702_465_178;
        let want = (0.75 * 0.5 / b).sqrt();
        assert!((hurst_constant(0.75).unwrap() - want).abs() < 1e-13);
        assert!(hurst_constant(0.5).is_err());
    }

    fn solved(hurst: f64, drift: DriftSpec, y0: f64, n: u32) -> (PenalisedSolution, VectorField, Vec<f64>, RoughPathGrid) {
        let grid = TimeGrid::new(1.0, 512).unwrap();
        let rp = FbmSampler::new(FbmSpec::new(hurst, 1, grid, 3).unwrap()).unwrap().sample_rough_path(0).unwrap();
        let vf = VectorField::new(SigmaSpec::Constant { c: vec![0.7] }, drift).unwrap();
        let l = vec![0.0; grid.nodes()];
        let sol = solve_penalised_rde(&vf, n, &rp, &l, y0, &SolveOptions::default()).unwrap();
        (sol, vf, l, rp)
    }

    #[test]
    fn brownian_closed_forms() {
        let (sol, vf, l, _) = solved(0.5, DriftSpec::None, 40.0, 8);
        let r = malliavin_derivative(&sol, &vf, &l, 0.5, 1.0, &[0.0, 0.3, 1.0, 1.5]).unwrap();
        assert_eq!(r.values, vec![0.7, 0.7, 0.7, 0.0]);
        assert!(r.within_bounds);

        let c = -0.8;
        let (sol, vf, l, _) = solved(0.5, DriftSpec::Affine { intercept: 0.0, slope: c }, 40.0, 8);
        let r = malliavin_derivative(&sol, &vf, &l, 0.5, 0.75, &[0.0, 0.125, 0.5]).unwrap();
        for (s, d) in r.s.iter().zip(&r.values) {
            assert!((d - 0.7 * (c * (0.75 - s)).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn fractional_idle_penalty_is_sigma_times_kernel() {
        let (sol, vf, l, _) = solved(0.75, DriftSpec::None, 40.0, 8);
        let r = malliavin_derivative(&sol, &vf, &l, 0.75, 1.0, &[0.1, 0.5, 0.9]).unwrap();
        for (s, d) in r.s.iter().zip(&r.values) {
            let g = fbm_kernel(1.0, *s, 0.75).unwrap();
            assert!((d - 0.7 * g).abs() < 1e-9 * g);
        }
        assert!(r.within_bounds);
    }

    #[test]
    fn active_penalty_keeps_the_band() {
        let (sol, vf, l, _) = solved(0.75, DriftSpec::Sine { amplitude: 0.5, frequency: 2.0 }, 0.0, 64);
        let s: Vec<f64> = (1..=10).map(|k| k as f64 / 10.0).collect();
        let r = malliavin_derivative(&sol, &vf, &l, 0.75, 1.0, &s).unwrap();
        assert!(r.within_bounds, "{:?} vs {:?}", r.values, r.upper_bound);
    }

    #[test]
    fn rough_regime_is_unsupported() {
        let (sol, vf, l, _) = solved(0.5, DriftSpec::None, 0.0, 8);
        assert!(matches!(malliavin_derivative(&sol, &vf, &l, 0.4, 1.0, &[0.5]), Err(Error::Unsupported(_))));
        let state = VectorField::new(SigmaSpec::Tanh { offset: vec![1.0], amplitude: vec![0.5], scale: 1.0 }, DriftSpec::None).unwrap();
        assert!(matches!(malliavin_derivative(&sol, &state, &l, 0.5, 1.0, &[0.5]), Err(Error::Unsupported(_))));
    }

    #[test]
    fn bump_difference_matches_inactive_case() {
        let (sol, vf, l, rp) = solved(0.5, DriftSpec::Affine { intercept: 0.0, slope: -0.5 }, 40.0, 8);
        let cells = [10, 200, 400];
        let fd = malliavin_fd(&vf, 8, &rp, &l, 40.0, &SolveOptions::default(), 512, &cells, 1e-3).unwrap();
        let h = rp.grid().step_size();
        let s: Vec<f64> = cells.iter().map(|&k| (k as f64 + 0.5) * h).collect();
        let mut r = malliavin_derivative(&sol, &vf, &l, 0.5, 1.0, &s).unwrap();
        r.attach_fd(fd).unwrap();
        assert!(r.fd_max_rel_err.unwrap() < 1e-3);
    }
}
