//! Fractional Brownian drivers: exact samplers, geometric lift, and the
//! covariance rectangular-increment probes.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::rough::{RoughPathGrid, TimeGrid};

/// Generator for `(seed, path, component)`: ChaCha keyed by the seed, one
/// stream per path and component, so draws do not depend on scheduling.
pub fn keyed_rng(seed: u64, path: u64, component: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((path << 16) | (component & 0xffff));
    rng
}

/// `E[B_s B_t] = (t^{2H} + s^{2H} - |t - s|^{2H}) / 2`.
pub fn fbm_covariance(s: f64, t: f64, hurst: f64) -> Result<f64> {
    if !(hurst > 0.0 && hurst < 1.0) {
        return Err(domain(format!("Hurst parameter {hurst} outside (0, 1)")));
    }
    if s < 0.0 || t < 0.0 {
        return Err(domain("fBm covariance needs non-negative times"));
    }
    let e = 2.0 * hurst;
    Ok(0.5 * (t.powf(e) + s.powf(e) - (t - s).abs().powf(e)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Cholesky,
    #[default]
    Circulant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FbmSpec {
    pub hurst: f64,
    pub dim: usize,
    pub grid: TimeGrid,
    pub seed: u64,
    #[serde(default)]
    pub sampler: SamplerKind,
}

impl FbmSpec {
    pub fn new(hurst: f64, dim: usize, grid: TimeGrid, seed: u64) -> Result<Self> {
        let spec = Self { hurst, dim, grid, seed, sampler: SamplerKind::Circulant };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_sampler(mut self, sampler: SamplerKind) -> Self {
        self.sampler = sampler;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hurst > 1.0 / 3.0 && self.hurst < 1.0) {
            return Err(domain(format!("Hurst parameter {} outside (1/3, 1)", self.hurst)));
        }
        if self.dim == 0 {
            return Err(domain("fBm needs at least one component"));
        }
        Ok(())
    }

    /// Nominal Hölder exponent used for the lift (`H - 0.01`).
    pub fn beta(&self) -> f64 {
        self.hurst - 0.01
    }
}

#[derive(Clone)]
enum Factor {
    /// Lower Cholesky factor of the covariance of `(X_{t_1}, .., X_{t_M})`.
    Cholesky(Arc<DMatrix<f64>>),
    /// `sqrt(lambda_k / N)` for the circulant embedding of size `N = 2M`,
    /// with the forward FFT plan of that size.
    Circulant(Arc<Vec<f64>>, Arc<dyn Fft<f64>>),
}

/// Precomputed exact sampler; cheap to clone and share across threads.
#[derive(Clone)]
pub struct FbmSampler {
    spec: FbmSpec,
    factor: Factor,
}

impl FbmSampler {
    pub fn new(spec: FbmSpec) -> Result<Self> {
        spec.validate()?;
        let factor = match spec.sampler {
            SamplerKind::Cholesky => Factor::Cholesky(Arc::new(cholesky_factor(&spec)?)),
            SamplerKind::Circulant => match circulant_factor(&spec) {
                Some(f) => {
                    let plan = FftPlanner::new().plan_fft_forward(2 * spec.grid.steps());
                    Factor::Circulant(Arc::new(f), plan)
                }
                None => {
                    log::warn!(
                        "circulant embedding has negative eigenvalues (H = {}, M = {}); using Cholesky",
                        spec.hurst,
                        spec.grid.steps()
                    );
                    Factor::Cholesky(Arc::new(cholesky_factor(&spec)?))
                }
            },
        };
        Ok(Self { spec, factor })
    }

    pub fn spec(&self) -> &FbmSpec {
        &self.spec
    }

    /// Which sampler actually runs (after any fallback).
    pub fn kind(&self) -> SamplerKind {
        match self.factor {
            Factor::Cholesky(_) => SamplerKind::Cholesky,
            Factor::Circulant(..) => SamplerKind::Circulant,
        }
    }

    /// One scalar fBm path starting at 0 (`M + 1` values).
    pub fn sample_component(&self, path: u64, component: u64) -> Vec<f64> {
        let mut rng = keyed_rng(self.spec.seed, path, component);
        let m = self.spec.grid.steps();
        match &self.factor {
            Factor::Cholesky(l) => {
                let xi = DVector::from_iterator(m, (0..m).map(|_| StandardNormal.sample(&mut rng)));
                let x = l.as_ref() * xi;
                std::iter::once(0.0).chain(x.iter().copied()).collect()
            }
            Factor::Circulant(scale, plan) => {
                let n = 2 * m;
                let mut z = vec![Complex64::new(0.0, 0.0); n];
                let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
                z[0] = Complex64::new(scale[0] * normal(), 0.0);
                z[m] = Complex64::new(scale[m] * normal(), 0.0);
                for k in 1..m {
                    let s = scale[k] * std::f64::consts::FRAC_1_SQRT_2;
                    let v = Complex64::new(s * normal(), s * normal());
                    z[k] = v;
                    z[n - k] = v.conj();
                }
                plan.process(&mut z);
                let mut out = Vec::with_capacity(m + 1);
                let mut acc = 0.0;
                out.push(0.0);
                for c in &z[..m] {
                    acc += c.re;
                    out.push(acc);
                }
                out
            }
        }
    }

    /// All `d` components of path number `path`.
    pub fn sample(&self, path: u64) -> Vec<Vec<f64>> {
        (0..self.spec.dim as u64).map(|c| self.sample_component(path, c)).collect()
    }

    /// Sample and lift in one go.
    pub fn sample_rough_path(&self, path: u64) -> Result<RoughPathGrid> {
        lift_geometric(&self.sample(path), &self.spec.grid, self.spec.beta())
    }
}

fn cholesky_factor(spec: &FbmSpec) -> Result<DMatrix<f64>> {
    let m = spec.grid.steps();
    let cov = DMatrix::from_fn(m, m, |i, j| {
        fbm_covariance(spec.grid.time(i + 1), spec.grid.time(j + 1), spec.hurst).unwrap_or(f64::NAN)
    });
    cov.cholesky()
        .map(|c| c.l())
        .ok_or_else(|| domain(format!("fBm covariance (H = {}, M = {m}) is not positive definite", spec.hurst)))
}

fn circulant_factor(spec: &FbmSpec) -> Option<Vec<f64>> {
    let m = spec.grid.steps();
    let n = 2 * m;
    let h = spec.grid.step_size();
    let e = 2.0 * spec.hurst;
    let scale = h.powf(e);
    let gamma = |k: usize| {
        let k = k as f64;
        0.5 * scale * ((k + 1.0).powf(e) - 2.0 * k.powf(e) + (k - 1.0).abs().powf(e))
    };
    let mut row: Vec<Complex64> = (0..n)
        .map(|k| Complex64::new(gamma(if k <= m { k } else { n - k }), 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut row);
    let tol = 1e-12 * row[0].re.abs().max(scale);
    let mut out = Vec::with_capacity(m + 1);
    for c in &row[..=m] {
        if c.re < -tol {
            return None;
        }
        out.push((c.re.max(0.0) / n as f64).sqrt());
    }
    Some(out)
}

/// Convenience wrapper: the `d` paths of path index 0.
pub fn sample_fbm(spec: &FbmSpec) -> Result<Vec<Vec<f64>>> {
    Ok(FbmSampler::new(*spec)?.sample(0))
}

/// Geometric lift of sampled paths through their piecewise-linear
/// interpolant (exact for `d = 1`).
pub fn lift_geometric(paths: &[Vec<f64>], grid: &TimeGrid, beta: f64) -> Result<RoughPathGrid> {
    let d = paths.len();
    if d == 0 {
        return Err(domain("lift needs at least one component"));
    }
    if paths.iter().any(|p| p.len() != grid.nodes()) {
        return Err(domain("sampled path does not match the grid"));
    }
    let x: Vec<f64> = (0..grid.nodes())
        .flat_map(|i| paths.iter().map(move |p| p[i]))
        .collect();
    RoughPathGrid::piecewise_linear(*grid, d, x, beta)
}

/// Covariance `R(t_i, t_j)` on every pair of grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceGrid {
    grid: TimeGrid,
    r: Vec<f64>,
}

impl CovarianceGrid {
    pub fn from_fn(grid: TimeGrid, cov: impl Fn(f64, f64) -> f64) -> Self {
        let n = grid.nodes();
        let mut r = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                r[i * n + j] = cov(grid.time(i), grid.time(j));
            }
        }
        Self { grid, r }
    }

    pub fn fbm(grid: TimeGrid, hurst: f64) -> Result<Self> {
        fbm_covariance(0.0, 0.0, hurst)?;
        Ok(Self::from_fn(grid, |s, t| fbm_covariance(s, t, hurst).unwrap()))
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.r[i * self.grid.nodes() + j]
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let n = self.grid.nodes();
        (0..n).all(|i| (0..i).all(|j| (self.at(i, j) - self.at(j, i)).abs() <= tol))
    }

    /// Positive (semi-)definiteness via Cholesky of the block without `t_0`.
    pub fn is_positive_definite(&self) -> bool {
        let m = self.grid.steps();
        DMatrix::from_fn(m, m, |i, j| self.at(i + 1, j + 1)).cholesky().is_some()
    }

    /// `R(t,v) - R(t,u) - R(s,v) + R(s,u)` for node indices.
    pub fn rect_increment(&self, s: usize, t: usize, u: usize, v: usize) -> f64 {
        self.at(t, v) - self.at(t, u) - self.at(s, v) + self.at(s, u)
    }

    fn partition_power(&self, part: &[usize], r: f64) -> f64 {
        let mut sum = 0.0;
        for a in part.windows(2) {
            for b in part.windows(2) {
                sum += self.rect_increment(a[0], a[1], b[0], b[1]).abs().powf(r);
            }
        }
        sum
    }

    /// Grid-based lower estimate of the second-order `r`-variation: the full
    /// grid partition, then a greedy pass merging neighbouring intervals
    /// whenever that increases the sum.
    pub fn second_order_r_variation(&self, r: f64) -> Result<RVariationEstimate> {
        if r < 1.0 {
            return Err(domain(format!("r-variation needs r >= 1, got {r}")));
        }
        let mut part: Vec<usize> = (0..self.grid.nodes()).collect();
        let grid_power = self.partition_power(&part, r);
        let mut best = grid_power;
        let greedy = self.grid.steps() <= GREEDY_LIMIT;
        if greedy {
            let mut k = 1;
            while k + 1 < part.len() {
                let mut trial = part.clone();
                trial.remove(k);
                let p = self.partition_power(&trial, r);
                if p > best {
                    best = p;
                    part = trial;
                } else {
                    k += 1;
                }
            }
        }
        Ok(RVariationEstimate {
            r,
            grid_partition: grid_power.powf(1.0 / r),
            value: best.powf(1.0 / r),
            method: if greedy { "grid-partition+greedy-merge" } else { "grid-partition" }.to_string(),
        })
    }
}

/// Grid size above which the greedy merge pass is skipped.
const GREEDY_LIMIT: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RVariationEstimate {
    pub r: f64,
    pub grid_partition: f64,
    /// Lower estimate of `||R||_{r;[0,T]^2}`.
    pub value: f64,
    pub method: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{autocorrelation, ks_two_sample, variance};

    #[test]
    fn covariance_values() {
        assert_eq!(fbm_covariance(1.0, 2.0, 0.5).unwrap(), 1.0);
        assert!((fbm_covariance(0.7, 0.7, 0.3).unwrap() - 0.7f64.powf(0.6)).abs() < 1e-15);
        assert_eq!(fbm_covariance(1.0, 1.0, 0.75).unwrap(), 1.0);
        assert!(fbm_covariance(1.0, 1.0, 1.0).is_err());
        assert!(fbm_covariance(-1.0, 1.0, 0.5).is_err());
    }

    #[test]
    fn rect_increments_of_brownian_motion() {
        let grid = TimeGrid::new(3.0, 3).unwrap();
        let cov = CovarianceGrid::fbm(grid, 0.5).unwrap();
        assert_eq!(cov.rect_increment(1, 1, 0, 3), 0.0);
        assert!(cov.rect_increment(0, 1, 2, 3).abs() < 1e-15);
        assert!((cov.rect_increment(0, 1, 0, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn r_variation_of_brownian_motion_is_horizon() {
        let grid = TimeGrid::new(2.0, 32).unwrap();
        let cov = CovarianceGrid::fbm(grid, 0.5).unwrap();
        let est = cov.second_order_r_variation(1.0).unwrap();
        assert!((est.grid_partition - 2.0).abs() < 1e-12);
        assert!((est.value - 2.0).abs() < 1e-12);
        let flat = CovarianceGrid::from_fn(grid, |_, _| 1.5);
        assert_eq!(flat.second_order_r_variation(1.2).unwrap().value, 0.0);
    }

    #[test]
    fn r_variation_stable_under_refinement() {
        let h = 0.4;
        let r = 1.0 / (2.0 * h);
        let coarse = CovarianceGrid::fbm(TimeGrid::new(1.0, 32).unwrap(), h).unwrap();
        let fine = CovarianceGrid::fbm(TimeGrid::new(1.0, 64).unwrap(), h).unwrap();
        let a = coarse.second_order_r_variation(r).unwrap().value;
        let b = fine.second_order_r_variation(r).unwrap().value;
        assert!(a.is_finite() && b.is_finite());
        assert!((a - b).abs() / a < 0.10, "{a} vs {b}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = FbmSpec::new(0.4, 2, TimeGrid::new(1.0, 128).unwrap(), 17).unwrap();
        let s = FbmSampler::new(spec).unwrap();
        assert_eq!(s.sample(3), s.sample(3));
        assert_ne!(s.sample(3), s.sample(4));
        assert_ne!(s.sample(3)[0], s.sample(3)[1]);
    }

    #[test]
    fn brownian_variance_and_increments() {
        let spec = FbmSpec::new(0.5, 1, TimeGrid::new(1.0, 16).unwrap(), 5).unwrap();
        let s = FbmSampler::new(spec).unwrap();
        let mut ends = Vec::new();
        let mut lag1 = Vec::new();
        for p in 0..10_000 {
            let x = s.sample_component(p, 0);
            ends.push(x[16]);
            lag1.push((x[1] - x[0], x[2] - x[1]));
        }
        let v = variance(&ends);
        assert!((v - 1.0).abs() < 0.05, "variance {v}");
        let m = lag1.len() as f64;
        let (ma, mb) = lag1.iter().fold((0.0, 0.0), |a, (x, y)| (a.0 + x / m, a.1 + y / m));
        let cov: f64 = lag1.iter().map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / m;
        let va: f64 = lag1.iter().map(|(x, _)| (x - ma).powi(2)).sum::<f64>() / m;
        let vb: f64 = lag1.iter().map(|(_, y)| (y - mb).powi(2)).sum::<f64>() / m;
        assert!((cov / (va * vb).sqrt()).abs() < 0.05);
        // Within a single long path too.
        let long = FbmSampler::new(FbmSpec::new(0.5, 1, TimeGrid::new(1.0, 10_000).unwrap(), 9).unwrap())
            .unwrap()
            .sample_component(0, 0);
        let incr: Vec<f64> = long.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(autocorrelation(&incr, 1).abs() < 0.05);
    }

    #[test]
    fn fractional_increment_correlation() {
        // Lag-1 correlation of fGn is 2^{2H-1} - 1.
        let h = 0.75;
        let long = FbmSampler::new(FbmSpec::new(h, 1, TimeGrid::new(1.0, 1 << 14).unwrap(), 2).unwrap())
            .unwrap()
            .sample_component(0, 0);
        let incr: Vec<f64> = long.windows(2).map(|w| w[1] - w[0]).collect();
        let rho = autocorrelation(&incr, 1);
        assert!((rho - (2f64.powf(2.0 * h - 1.0) - 1.0)).abs() < 0.03, "rho {rho}");
    }

    #[test]
    fn samplers_agree_in_law() {
        let grid = TimeGrid::new(1.0, 32).unwrap();
        let base = FbmSpec::new(0.4, 1, grid, 11).unwrap();
        let chol = FbmSampler::new(base.with_sampler(SamplerKind::Cholesky)).unwrap();
        let circ = FbmSampler::new(FbmSpec { seed: 12, ..base }).unwrap();
        assert_eq!(circ.kind(), SamplerKind::Circulant);
        let a: Vec<f64> = (0..20_000).map(|p| chol.sample_component(p, 0)[32]).collect();
        let b: Vec<f64> = (0..20_000).map(|p| circ.sample_component(p, 0)[32]).collect();
        assert!(ks_two_sample(&a, &b).p_value > 0.01);
    }

    #[test]
    fn covariance_grid_is_symmetric_positive_definite() {
        for h in [0.35, 0.5, 0.9] {
            let cov = CovarianceGrid::fbm(TimeGrid::new(1.0, 256).unwrap(), h).unwrap();
            assert!(cov.is_symmetric(0.0));
            assert!(cov.is_positive_definite());
        }
    }

    #[test]
    fn lift_is_geometric_and_chen_consistent() {
        let spec = FbmSpec::new(0.4, 2, TimeGrid::new(1.0, 64).unwrap(), 3).unwrap();
        let rp = FbmSampler::new(spec).unwrap().sample_rough_path(0).unwrap();
        assert!(rp.geometricity_defect() <= 1e-14);
        let a = rp.chen_extend(0, 64).unwrap();
        let mut b = rp.chen_extend(0, 20).unwrap();
        let right = rp.chen_extend(20, 64).unwrap();
        let l = rp.increment(0, 20);
        let r = rp.increment(20, 64);
        for i in 0..2 {
            for j in 0..2 {
                b[i * 2 + j] += right[i * 2 + j] + l[i] * r[j];
            }
        }
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn one_dimensional_lift_is_half_square() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let x = vec![0.0, 0.3, -0.1, 0.2, 0.6];
        let rp = lift_geometric(std::slice::from_ref(&x), &grid, 0.45).unwrap();
        for k in 0..4 {
            let d = x[k + 1] - x[k];
            assert_eq!(rp.cell_area(k).unwrap()[0], 0.5 * d * d);
        }
    }

    #[test]
    fn linear_path_has_symmetric_signature() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let a: Vec<f64> = grid.times().iter().map(|t| 2.0 * t).collect();
        let b: Vec<f64> = grid.times().iter().map(|t| -0.5 * t).collect();
        let rp = lift_geometric(&[a, b], &grid, 0.4).unwrap();
        let full = rp.chen_extend(0, 10).unwrap();
        let dx = [2.0, -0.5];
        for i in 0..2 {
            for j in 0..2 {
                assert!((full[i * 2 + j] - 0.5 * dx[i] * dx[j]).abs() < 1e-12);
            }
        }
    }
}
