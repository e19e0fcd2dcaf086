//! One-dimensional Skorokhod map with a moving lower barrier, reflected
//! solutions built from it, and the certificate checker for reflected pairs.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::rough::{ControlledCovector, RoughPathGrid};
use crate::solver::{solve_penalised_rde, DriftSpec, PenalisedSolution, SolveOptions, VectorField};

/// `K_t = max(0, max_{s <= t} (L_s - z_s))` and `Y = z + K` at the nodes.
pub fn skorokhod_map(z: &[f64], l: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if z.len() != l.len() || z.is_empty() {
        return Err(Error::GridMismatch("free path and barrier differ in length".into()));
    }
    if z[0] < l[0] {
        return Err(domain(format!("free path starts at {} below the barrier {}", z[0], l[0])));
    }
    let mut k = Vec::with_capacity(z.len());
    let mut y = Vec::with_capacity(z.len());
    let mut run: f64 = 0.0;
    for (zi, li) in z.iter().zip(l) {
        if li - zi >= run && li - zi > 0.0 {
            // Contact node: pin Y to the barrier exactly.
            run = li - zi;
            y.push(*li);
        } else {
            y.push(zi + run);
        }
        k.push(run);
    }
    Ok((y, k))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpTolerances {
    /// Integral identity residual.
    pub integral: f64,
    /// How far `Y` may dip below `L`.
    pub barrier: f64,
    /// How far an increment of `K` may be negative.
    pub monotone: f64,
    pub complementarity: f64,
}

impl SpTolerances {
    /// `5 * mesh_estimate` for the integral identity (never below
    /// `1e-9 * scale`), `1e-6 * scale` for the rest.
    pub fn from_scale(scale: f64, mesh_estimate: f64) -> Self {
        let s = scale.max(1.0);
        Self {
            integral: (5.0 * mesh_estimate).max(1e-9 * s),
            barrier: 1e-6 * s,
            monotone: 1e-6 * s,
            complementarity: 1e-6 * s,
        }
    }
}

/// Residuals of the four conditions a reflected pair must meet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpCertificate {
    /// `sup_t |Y_t - Y_0 - int_0^t sigma(Y) dX - int_0^t b(Y) ds - K_t|`.
    pub integral_residual: f64,
    /// `min_t (Y_t - L_t)`.
    pub barrier_margin: f64,
    /// Smallest increment of `K`.
    pub min_k_increment: f64,
    /// `|sum_k (Y - L)_{k+1} (K_{k+1} - K_k)|`.
    pub complementarity_residual: f64,
    pub tolerances: SpTolerances,
    pub integral_ok: bool,
    pub barrier_ok: bool,
    pub monotone_ok: bool,
    pub complementarity_ok: bool,
}

impl SpCertificate {
    pub fn pass(&self) -> bool {
        self.integral_ok && self.barrier_ok && self.monotone_ok && self.complementarity_ok
    }
}

/// `sup |Y|`, floored at one.
pub fn path_scale(y: &[f64]) -> f64 {
    y.iter().fold(1.0f64, |a, v| a.max(v.abs()))
}

/// Running rough integral of `sigma(Y)` with Gubinelli derivative
/// `sigma'(Y) sigma(Y)`.
pub fn sigma_integral(y: &[f64], vf: &VectorField, rp: &RoughPathGrid) -> Result<Vec<f64>> {
    let d = rp.dim();
    let nodes = rp.grid().nodes();
    if y.len() != nodes || vf.dim() != d {
        return Err(Error::GridMismatch("path, field and driver do not line up".into()));
    }
    let mut values = Vec::with_capacity(nodes * d);
    let mut derivative = Vec::with_capacity(nodes * d * d);
    for &v in y {
        for a in 0..d {
            values.push(vf.sigma.derivative(0, a, v));
        }
        for b in 0..d {
            let sb1 = vf.sigma.derivative(1, b, v);
            for j in 0..d {
                derivative.push(sb1 * vf.sigma.derivative(0, j, v));
            }
        }
    }
    ControlledCovector::new(*rp.grid(), d, values, derivative)?.integral_path(rp)
}

/// Left-point running integral of `b(Y)`.
fn drift_integral(y: &[f64], drift: &DriftSpec, h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(y.len());
    let mut acc = 0.0;
    out.push(0.0);
    for v in &y[..y.len() - 1] {
        acc += h * drift.value(*v);
        out.push(acc);
    }
    out
}

/// Checks a candidate reflected pair `(Y, K)` against barrier `L`.
pub fn verify_sp(
    y: &[f64],
    k: &[f64],
    l: &[f64],
    vf: &VectorField,
    rp: &RoughPathGrid,
    tol: &SpTolerances,
) -> Result<SpCertificate> {
    let nodes = rp.grid().nodes();
    if y.len() != nodes || k.len() != nodes || l.len() != nodes {
        return Err(Error::GridMismatch(format!(
            "Y, K, L have {}, {}, {} samples for {} nodes",
            y.len(),
            k.len(),
            l.len(),
            nodes
        )));
    }
    let integral = sigma_integral(y, vf, rp)?;
    let drift = drift_integral(y, &vf.drift, rp.grid().step_size());
    let integral_residual = (0..nodes)
        .map(|i| (y[i] - y[0] - integral[i] - drift[i] - (k[i] - k[0])).abs())
        .fold(0.0, f64::max);
    let barrier_margin = y.iter().zip(l).map(|(a, b)| a - b).fold(f64::INFINITY, f64::min);
    let min_k_increment = k.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let complementarity: f64 = (0..nodes - 1).map(|i| (y[i + 1] - l[i + 1]) * (k[i + 1] - k[i])).sum();
    let complementarity_residual = complementarity.abs();
    Ok(SpCertificate {
        integral_residual,
        barrier_margin,
        min_k_increment,
        complementarity_residual,
        tolerances: *tol,
        integral_ok: integral_residual <= tol.integral,
        barrier_ok: barrier_margin >= -tol.barrier,
        monotone_ok: min_k_increment >= -tol.monotone && k[0].abs() <= tol.monotone,
        complementarity_ok: complementarity_residual <= tol.complementarity,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkorokhodSolution {
    pub y: Vec<f64>,
    pub k: Vec<f64>,
    pub certificate: SpCertificate,
    /// Fixed-point sweeps used (1 without drift).
    pub iterations: usize,
}

/// Reflected solution for a constant diffusion coefficient: fixed-point
/// iteration of `Y = SM(y0 + sigma X + int b(Y) ds, L)`.
pub fn reflected_solve_additive(
    sigma: &[f64],
    drift: DriftSpec,
    rp: &RoughPathGrid,
    l: &[f64],
    y0: f64,
) -> Result<SkorokhodSolution> {
    if sigma.len() != rp.dim() {
        return Err(Error::GridMismatch("sigma and driver dimensions differ".into()));
    }
    let nodes = rp.grid().nodes();
    let h = rp.grid().step_size();
    let free: Vec<f64> = (0..nodes)
        .map(|i| y0 + sigma.iter().zip(rp.x(i)).zip(rp.x(0)).map(|((s, x), x0)| s * (x - x0)).sum::<f64>())
        .collect();
    let (mut y, mut k) = skorokhod_map(&free, l)?;
    let mut iterations = 1;
    if !drift.is_none() {
        let mut change = f64::INFINITY;
        while change >= 1e-10 {
            if iterations >= 100 {
                return Err(Error::NoConvergence { iterations, change });
            }
            let b = drift_integral(&y, &drift, h);
            let z: Vec<f64> = free.iter().zip(&b).map(|(f, b)| f + b).collect();
            let (y2, k2) = skorokhod_map(&z, l)?;
            change = y.iter().zip(&y2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            y = y2;
            k = k2;
            iterations += 1;
        }
    }
    let vf = VectorField::new(crate::solver::SigmaSpec::Constant { c: sigma.to_vec() }, drift)?;
    let tol = SpTolerances::from_scale(path_scale(&y), 0.0);
    let certificate = verify_sp(&y, &k, l, &vf, rp, &tol)?;
    Ok(SkorokhodSolution { y, k, certificate, iterations })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitSolution {
    pub solution: SkorokhodSolution,
    pub n_max: u32,
    /// `Y^{n_max}` with its mesh diagnostics.
    pub penalised: PenalisedSolution,
    /// Sup-gap between the solves on the grid and on the grid coarsened by
    /// two, at `n_max`.
    pub mesh_estimate: f64,
}

/// Reflected solution as the limit of the penalised sequence. The free parts
/// `Y^n - K^n` at `n_max / 2` and `n_max` are extrapolated with the
/// `n^{-beta}` rate and reflected with the Skorokhod map.
pub fn reflected_solve_limit(
    vf: &VectorField,
    rp: &RoughPathGrid,
    l: &[f64],
    y0: f64,
    n_max: u32,
    opts: &SolveOptions,
) -> Result<LimitSolution> {
    if n_max < 2 || !n_max.is_power_of_two() {
        return Err(domain(format!("n_max = {n_max} must be a power of two, at least 2")));
    }
    let opts = SolveOptions { mesh_tolerance: Some(opts.mesh_tolerance.unwrap_or(f64::INFINITY)), ..*opts };
    let lo = solve_penalised_rde(vf, n_max / 2, rp, l, y0, &opts)?;
    let hi = solve_penalised_rde(vf, n_max, rp, l, y0, &opts)?;
    let grid = rp.grid();
    for i in 0..grid.nodes() {
        let excess = lo.y[i] - hi.y[i];
        if excess > 1e-6 {
            return Err(Error::NonMonotone { n_lo: n_max / 2, n_hi: n_max, t: grid.time(i), excess });
        }
    }
    let w = 2f64.powf(-rp.beta());
    let z: Vec<f64> = (0..grid.nodes())
        .map(|i| {
            let z_hi = hi.y[i] - hi.k[i];
            let z_lo = lo.y[i] - lo.k[i];
            (z_hi - w * z_lo) / (1.0 - w)
        })
        .collect();
    let (y, k) = skorokhod_map(&z, l)?;
    let mesh_estimate = hi.mesh.map_or(0.0, |m| m.coarse_gap);
    let tol = SpTolerances::from_scale(path_scale(&y), mesh_estimate);
    let certificate = verify_sp(&y, &k, l, vf, rp, &tol)?;
    Ok(LimitSolution {
        solution: SkorokhodSolution { y, k, certificate, iterations: 1 },
        n_max,
        penalised: hi,
        mesh_estimate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{FbmSampler, FbmSpec};
    use crate::rough::TimeGrid;
    use crate::solver::SigmaSpec;
    use proptest::prelude::*;

    fn brute_force_k(z: &[f64], l: &[f64]) -> Vec<f64> {
        (0..z.len())
            .map(|t| (0..=t).map(|s| l[s] - z[s]).fold(0.0, f64::max))
            .collect()
    }

    #[test]
    fn pure_pushing() {
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let z: Vec<f64> = grid.times().iter().map(|t| -t).collect();
        let (y, k) = skorokhod_map(&z, &vec![0.0; 101]).unwrap();
        for (i, t) in grid.times().iter().enumerate() {
            assert_eq!(y[i], 0.0);
            assert!((k[i] - t).abs() < 1e-15);
        }
    }

    #[test]
    fn sine_reaches_its_trough() {
        let grid = TimeGrid::new(1.5 * std::f64::consts::PI, 3000).unwrap();
        let z: Vec<f64> = grid.times().iter().map(|t| t.sin()).collect();
        let l = vec![0.0; 3001];
        let (y, k) = skorokhod_map(&z, &l).unwrap();
        let brute = brute_force_k(&z, &l);
        assert!((k[3000] - 1.0).abs() < 1e-12);
        assert!(y[3000].abs() < 1e-12);
        assert!(k.iter().zip(&brute).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn identity_above_barrier() {
        let z = vec![1.0, 2.0, 0.5, 3.0];
        let (y, k) = skorokhod_map(&z, &[0.0; 4]).unwrap();
        assert_eq!(y, z);
        assert!(k.iter().all(|v| *v == 0.0));
        assert!(skorokhod_map(&[-1.0, 0.0], &[0.0, 0.0]).is_err());
    }

    fn bm(m: usize, seed: u64) -> RoughPathGrid {
        let grid = TimeGrid::new(1.0, m).unwrap();
        FbmSampler::new(FbmSpec::new(0.5, 1, grid, seed).unwrap()).unwrap().sample_rough_path(0).unwrap()
    }

    #[test]
    fn certificate_catches_injected_faults() {
        let rp = bm(1024, 3);
        let vf = VectorField::additive(vec![1.0]);
        let l = vec![0.0; 1025];
        let sol = reflected_solve_additive(&[1.0], DriftSpec::None, &rp, &l, 0.0).unwrap();
        assert!(sol.certificate.pass(), "{:?}", sol.certificate);
        let tol = sol.certificate.tolerances;

        let mut k = sol.k.clone();
        let cell = (1..1025).find(|&i| k[i] > k[i - 1]).unwrap();
        k[cell] = k[cell - 1] - 1e-3;
        let bad = verify_sp(&sol.y, &k, &l, &vf, &rp, &tol).unwrap();
        assert!(!bad.monotone_ok);

        let y: Vec<f64> = (0..1025)
            .map(|i| if i > 0 && sol.k[i] > sol.k[i - 1] { sol.y[i] - 2.0 * tol.complementarity } else { sol.y[i] })
            .collect();
        let bad = verify_sp(&y, &sol.k, &l, &vf, &rp, &tol).unwrap();
        assert!(sol.k[1024] > 0.5);
        assert!(!bad.complementarity_ok);
    }

    #[test]
    fn picard_with_lipschitz_drift() {
        let rp = bm(2048, 8);
        let l: Vec<f64> = rp.grid().times().iter().map(|t| 0.1 * (5.0 * t).sin()).collect();
        let drift = DriftSpec::Tanh { amplitude: -0.8, scale: 1.5 };
        let sol = reflected_solve_additive(&[1.0], drift, &rp, &l, 0.0).unwrap();
        assert!(sol.iterations <= 30, "{} sweeps", sol.iterations);
        assert!(sol.certificate.pass(), "{:?}", sol.certificate);
    }

    #[test]
    fn limit_matches_additive_oracle() {
        let rp = bm(2048, 5);
        let l = vec![0.0; 2049];
        let oracle = reflected_solve_additive(&[1.0], DriftSpec::None, &rp, &l, 0.0).unwrap();
        let vf = VectorField::additive(vec![1.0]);
        let lim = reflected_solve_limit(&vf, &rp, &l, 0.0, 256, &SolveOptions::default()).unwrap();
        let gap = lim.solution.y.iter().zip(&oracle.y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-10);
        assert!(lim.solution.certificate.pass());
        assert!(reflected_solve_limit(&vf, &rp, &l, 0.0, 100, &SolveOptions::default()).is_err());
    }

    #[test]
    fn limit_with_idle_barrier_is_free_solution() {
        let rp = bm(512, 2);
        let vf = VectorField::new(SigmaSpec::Tanh { offset: vec![1.0], amplitude: vec![0.5], scale: 1.0 }, DriftSpec::None)
            .unwrap();
        let l = vec![-20.0; 513];
        let lim = reflected_solve_limit(&vf, &rp, &l, 0.0, 64, &SolveOptions::default()).unwrap();
        assert!(lim.solution.k.iter().all(|v| *v == 0.0));
        let free = solve_penalised_rde(&vf, 1, &rp, &l, 0.0, &SolveOptions::default()).unwrap();
        let gap = lim.solution.y.iter().zip(&free.y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-12);
    }

    #[test]
    fn limit_certificate_moving_barrier_state_dependent() {
        let grid = TimeGrid::new(1.0, 2048).unwrap();
        let rp = FbmSampler::new(FbmSpec::new(0.4, 1, grid, 12).unwrap()).unwrap().sample_rough_path(0).unwrap();
        let vf = VectorField::new(SigmaSpec::Tanh { offset: vec![1.0], amplitude: vec![0.5], scale: 1.0 }, DriftSpec::None)
            .unwrap();
        let l: Vec<f64> = grid.times().iter().map(|t| 0.1 * (5.0 * t).sin()).collect();
        let lim = reflected_solve_limit(&vf, &rp, &l, 0.0, 1024, &SolveOptions::default()).unwrap();
        let c = lim.solution.certificate;
        assert!(c.pass(), "{c:?} mesh {}", lim.mesh_estimate);
    }

    fn paths(len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (
            prop::collection::vec(-1.0f64..1.0, len),
            prop::collection::vec(-1.0f64..1.0, len),
            prop::collection::vec(-0.5f64..0.5, len),
        )
    }

    proptest! {
        #[test]
        fn lipschitz_two_in_sup_norm((a, b, l) in paths(40)) {
            let mut z1 = a.iter().scan(1.0, |s, d| { *s += d * 0.2; Some(*s) }).collect::<Vec<_>>();
            let mut z2 = b.iter().scan(1.0, |s, d| { *s += d * 0.2; Some(*s) }).collect::<Vec<_>>();
            z1[0] = z1[0].max(l[0]);
            z2[0] = z2[0].max(l[0]);
            let (y1, _) = skorokhod_map(&z1, &l).unwrap();
            let (y2, _) = skorokhod_map(&z2, &l).unwrap();
            let dz = z1.iter().zip(&z2).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            let dy = y1.iter().zip(&y2).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            prop_assert!(dy <= 2.0 * dz + 1e-12);
        }

        #[test]
        fn reflecting_twice_changes_nothing((a, _b, l) in paths(40)) {
            let mut z = a.iter().scan(0.5, |s, d| { *s += d * 0.3; Some(*s) }).collect::<Vec<_>>();
            z[0] = z[0].max(l[0]);
            let (y, k) = skorokhod_map(&z, &l).unwrap();
            let (y2, k2) = skorokhod_map(&y, &l).unwrap();
            prop_assert!(k2.iter().all(|v| *v <= 1e-15));
            prop_assert!(y2.iter().zip(&y).all(|(p, q)| (p - q).abs() <= 1e-15));
            prop_assert!(k.windows(2).all(|w| w[1] >= w[0]));
            prop_assert!(brute_force_k(&z, &l).iter().zip(&k).all(|(p, q)| (p - q).abs() < 1e-15));
        }

        #[test]
        fn map_output_is_certified(seed in 0u64..50, level in -0.3f64..0.3) {
            let rp = bm(128, seed);
            let l: Vec<f64> = rp.grid().times().iter().map(|t| level + 0.2 * (7.0 * t).cos()).collect();
            let sol = reflected_solve_additive(&[1.0], DriftSpec::None, &rp, &l, l[0].max(0.0)).unwrap();
            prop_assert!(sol.certificate.pass());
        }
    }
}
