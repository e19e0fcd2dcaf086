use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::error::{Error, Result};
use crate::skorokhod::reflected_solve_additive;
use crate::solver::{solve_penalised_rde, BoundarySpec, SigmaSpec, VectorField};
use crate::stats::{half_normal_cdf, ks_one_sample, mean, normal_cdf, variance, KsResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DensityMethod {
    /// Exact reflection of each path by the Skorokhod map.
    #[default]
    SkorokhodMap,
    /// `Y^n` from the penalised equation.
    Penalised { n: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ReferenceLaw {
    /// Law of `L + |N(0, variance)|`.
    HalfNormal { variance: f64 },
    /// Reflection never active.
    Normal { mean: f64, variance: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityReport {
    pub t: f64,
    pub paths: usize,
    pub method: DensityMethod,
    pub boundary: f64,
    pub bin_edges: Vec<f64>,
    /// Fraction of paths per bin on `(L, max]`.
    pub bin_mass: Vec<f64>,
    pub density: Vec<f64>,
    /// Fraction of paths with `Y_t <= L` (up to `1e-12`).
    pub atom: f64,
    /// `2 / sqrt(paths)`.
    pub mc_band: f64,
    /// `|histogram mass + atom - 1|`.
    pub mass_error: f64,
    /// Total absolute second difference of the histogram density over its
    /// total; small for a smooth law.
    pub roughness: f64,
    /// Fraction of paths whose reflection ever acted before `t`.
    pub touched: f64,
    pub mean: f64,
    pub variance: f64,
    pub reference: Option<ReferenceLaw>,
    pub ks: Option<KsResult>,
    /// Fewer than `10^4` paths; the band above is wide.
    pub low_paths: bool,
    pub pass: bool,
}

/// Samples `Y_t` across `cfg.mc_paths` independent drivers. Constant
/// scalar `sigma`, `H in [1/2, 1)` and a constant boundary are required.
pub fn run_density(cfg: &ExperimentConfig) -> Result<DensityReport> {
    cfg.validate()?;
    let hurst = cfg.noise.hurst;
    if hurst < 0.5 {
        return Err(Error::Unsupported(format!("density study needs H in [1/2, 1), got {hurst}")));
    }
    let c = match &cfg.sigma {
        SigmaSpec::Constant { c } if c.len() == 1 => c[0],
        _ => return Err(Error::Unsupported("density study needs a constant scalar sigma".into())),
    };
    let lv = match cfg.boundary {
        BoundarySpec::Constant { value } => value,
        _ => return Err(Error::Unsupported("density study needs a constant boundary".into())),
    };
    let grid = cfg.grid()?;
    let ti = grid.index_of(cfg.density_time.unwrap_or(grid.horizon()));
    let t = grid.time(ti);
    let sampler = cfg.sampler()?;
    let l = cfg.boundary_values()?;
    let vf = VectorField::new(cfg.sigma.clone(), cfg.drift)?;
    let opts = cfg.solve_options();
    let samples: Vec<(f64, bool)> = (0..cfg.mc_paths as u64)
        .into_par_iter()
        .map(|p| {
            let rp = cfg.driver(&sampler, p)?;
            let (y, k) = match cfg.density_method {
                DensityMethod::SkorokhodMap => {
                    let s = reflected_solve_additive(&[c], cfg.drift, &rp, &l, cfg.y0)?;
                    (s.y, s.k)
                }
                DensityMethod::Penalised { n } => {
                    let s = solve_penalised_rde(&vf, n, &rp, &l, cfg.y0, &opts)?;
                    (s.y, s.k)
                }
            };
            Ok((y[ti], k[ti] > 0.0))
        })
        .collect::<Result<_>>()?;
    let n = samples.len();
    let ys: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let touched = samples.iter().filter(|s| s.1).count() as f64 / n as f64;

    let free: Vec<f64> = ys.iter().copied().filter(|&y| y > lv + 1e-12).collect();
    let atom = (n - free.len()) as f64 / n as f64;
    let bins = cfg.histogram_bins;
    let top = free.iter().copied().fold(lv, f64::max);
    let width = if top > lv { (top - lv) / bins as f64 } else { 1.0 };
    let bin_edges: Vec<f64> = (0..=bins).map(|b| lv + width * b as f64).collect();
    let mut counts = vec![0usize; bins];
    for &y in &free {
        let b = (((y - lv) / width).ceil() as usize).clamp(1, bins) - 1;
        counts[b] += 1;
    }
    let bin_mass: Vec<f64> = counts.iter().map(|&k| k as f64 / n as f64).collect();
    let density: Vec<f64> = bin_mass.iter().map(|m| m / width).collect();
    let total: f64 = density.iter().sum();
    let roughness = if bins >= 3 && total > 0.0 {
        density.windows(3).map(|w| (w[0] - 2.0 * w[1] + w[2]).abs()).sum::<f64>() / total
    } else {
        0.0
    };
    let mass_error = (bin_mass.iter().sum::<f64>() + atom - 1.0).abs();
    let mc_band = 2.0 / (n as f64).sqrt();
    let low_paths = n < 10_000;
    if low_paths {
        log::warn!("density from {n} paths; Monte-Carlo band {mc_band:.3} is wide");
    }

    let reference = if cfg.drift.is_none() && hurst == 0.5 && cfg.y0 == lv {
        Some(ReferenceLaw::HalfNormal { variance: c * c * t })
    } else if cfg.drift.is_none() && touched == 0.0 {
        Some(ReferenceLaw::Normal { mean: cfg.y0, variance: c * c * t.powf(2.0 * hurst) })
    } else {
        None
    };
    let ks = reference.map(|law| match law {
        ReferenceLaw::HalfNormal { variance } => {
            let shifted: Vec<f64> = ys.iter().map(|y| y - lv).collect();
            ks_one_sample(&shifted, |x| half_normal_cdf(x, variance))
        }
        ReferenceLaw::Normal { mean, variance } => ks_one_sample(&ys, |x| normal_cdf(x, mean, variance)),
    });
    let pass = mass_error <= mc_band
        && ks.is_none_or(|k| k.p_value > 0.01)
        && (reference.is_none() || atom < mc_band);
    Ok(DensityReport {
        t,
        paths: n,
        method: cfg.density_method,
        boundary: lv,
        bin_edges,
        bin_mass,
        density,
        atom,
        mc_band,
        mass_error,
        roughness,
        touched,
        mean: mean(&ys),
        variance: variance(&ys),
        reference,
        ks,
        low_paths,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::tests::bm_config;

    #[test]
    fn gaussian_when_far_from_the_barrier() {
        let mut cfg = bm_config(64);
        cfg.noise.horizon = 0.01;
        cfg.y0 = 3.0;
        cfg.mc_paths = 2000;
        let r = run_density(&cfg).unwrap();
        assert_eq!(r.atom, 0.0);
        assert_eq!(r.touched, 0.0);
        assert!(matches!(r.reference, Some(ReferenceLaw::Normal { .. })));
        assert!(r.ks.unwrap().p_value > 0.01);
        assert!(r.mass_error < 1e-12);
        assert!(r.low_paths);
    }

    #[test]
    fn histogram_counts_every_path() {
        let mut cfg = bm_config(128);
        cfg.mc_paths = 500;
        cfg.histogram_bins = 7;
        let r = run_density(&cfg).unwrap();
        let total: f64 = r.bin_mass.iter().sum::<f64>() + r.atom;
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(r.bin_edges.len(), 8);
        assert!(matches!(r.reference, Some(ReferenceLaw::HalfNormal { .. })));
    }

    #[test]
    fn deterministic_under_parallelism() {
        let mut cfg = bm_config(64);
        cfg.mc_paths = 300;
        let a = run_density(&cfg).unwrap();
        let b = run_density(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_the_rough_regime() {
        let mut cfg = bm_config(64);
        cfg.noise.hurst = 0.4;
        assert!(matches!(run_density(&cfg), Err(Error::Unsupported(_))));
    }
}
