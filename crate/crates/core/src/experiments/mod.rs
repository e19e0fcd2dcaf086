//! Reproduction harness: convergence sweeps, the Malliavin derivative,
//! Monte-Carlo densities, the scalar lemma suite, and the files they write.

mod density;
mod lemma;
mod malliavin;
mod output;
mod sweeps;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};
use crate::noise::{lift_geometric, FbmSampler, FbmSpec, SamplerKind};
use crate::rough::{RoughPathGrid, TimeGrid};
use crate::skorokhod::{path_scale, reflected_solve_limit, verify_sp, SpCertificate, SpTolerances};
use crate::solver::{
    compute_flow, doss_sussmann_solve, solve_penalised_rde, BoundarySpec, DriftScheme, DriftSpec, FlowTable,
    PenalisedSolution, Scheme, SigmaSpec, SolveOptions, VectorField,
};

pub use density::{run_density, DensityMethod, DensityReport, ReferenceLaw};
pub use lemma::{run_lemma_suite, LemmaCase, LemmaRow, LemmaSuiteReport};
pub use malliavin::{
    fbm_kernel, hurst_constant, malliavin_derivative, malliavin_fd, MalliavinKernel, MalliavinReport,
};
pub use output::{emit_outputs, emit_to, render_loglog_svg, LogLogPlot, Manifest, Report, Series, Table};
pub use sweeps::{
    run_monotone_convergence, run_rate, scheme_refinement_study, CauchyRow, MonotonePair, MonotoneReport,
    Provenance, RateReport, RateRow, RefinementStudy, Violation, ViolationKind,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub hurst: f64,
    #[serde(default = "one")]
    pub dim: usize,
    pub steps: usize,
    #[serde(default = "unit")]
    pub horizon: f64,
    #[serde(default)]
    pub sampler: SamplerKind,
}

fn one() -> usize {
    1
}

fn unit() -> f64 {
    1.0
}

fn default_n_list() -> Vec<u32> {
    (2..=10).map(|k| 1 << k).collect()
}

fn default_mc_paths() -> usize {
    10_000
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_scheme() -> Scheme {
    Scheme::Direct
}

fn default_bins() -> usize {
    40
}

fn default_ygrid_points() -> usize {
    256
}

/// Everything a run needs; read from JSON. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub noise: NoiseConfig,
    #[serde(default)]
    pub seed: u64,
    /// Which driver path single-path runs use.
    #[serde(default)]
    pub path_index: u64,
    pub sigma: SigmaSpec,
    #[serde(default)]
    pub drift: DriftSpec,
    #[serde(default)]
    pub boundary: BoundarySpec,
    #[serde(default)]
    pub y0: f64,
    /// Hölder exponent of the lift; `H - 0.01` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// Hölder exponent of the boundary; the boundary's declared one when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default = "default_n_list")]
    pub n_list: Vec<u32>,
    #[serde(default = "default_mc_paths")]
    pub mc_paths: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    #[serde(default)]
    pub drift_scheme: DriftScheme,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh_tolerance: Option<f64>,
    /// Observation time of density runs; the horizon when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density_time: Option<f64>,
    #[serde(default)]
    pub density_method: DensityMethod,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    /// Initial-condition grid size of the flow table (Doss-Sussmann scheme).
    #[serde(default = "default_ygrid_points")]
    pub ygrid_points: usize,
}

impl ExperimentConfig {
    /// A config with defaults everywhere except the noise and `sigma`.
    pub fn new(noise: NoiseConfig, sigma: SigmaSpec) -> Self {
        Self {
            noise,
            seed: 0,
            path_index: 0,
            sigma,
            drift: DriftSpec::None,
            boundary: BoundarySpec::default(),
            y0: 0.0,
            beta: None,
            alpha: None,
            n_list: default_n_list(),
            mc_paths: default_mc_paths(),
            output_dir: default_output_dir(),
            scheme: Scheme::Direct,
            drift_scheme: DriftScheme::default(),
            mesh_tolerance: None,
            density_time: None,
            density_method: DensityMethod::default(),
            histogram_bins: default_bins(),
            ygrid_points: default_ygrid_points(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        let grid = self.grid()?;
        self.fbm_spec()?.validate()?;
        let beta = self.beta();
        if !(beta > 1.0 / 3.0 && beta < self.noise.hurst) {
            return cfg_err(format!("beta = {beta} must lie in (1/3, H = {})", self.noise.hurst));
        }
        let alpha = self.alpha();
        let need = 0.5f64.max(1.0 - beta);
        if !(alpha > need) {
            return cfg_err(format!("boundary exponent alpha = {alpha} must exceed {need}"));
        }
        if self.sigma.dim() != self.noise.dim {
            return cfg_err(format!(
                "sigma has {} components but the noise has {}",
                self.sigma.dim(),
                self.noise.dim
            ));
        }
        if self.n_list.is_empty() || self.n_list.contains(&0) {
            return cfg_err("n_list must be non-empty with positive entries".into());
        }
        if self.mc_paths == 0 || self.histogram_bins == 0 {
            return cfg_err("mc_paths and histogram_bins must be positive".into());
        }
        if let Some(t) = self.density_time {
            if !(t > 0.0 && t <= grid.horizon()) {
                return cfg_err(format!("density_time {t} outside (0, {}]", grid.horizon()));
            }
        }
        let l = self.boundary.sample(&grid)?;
        if self.y0 < l[0] {
            return cfg_err(format!("y0 = {} lies below the boundary start {}", self.y0, l[0]));
        }
        self.vector_field()?;
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.noise.horizon, self.noise.steps)
    }

    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or(self.noise.hurst - 0.01)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or_else(|| self.boundary.declared_alpha())
    }

    pub fn fbm_spec(&self) -> Result<FbmSpec> {
        Ok(FbmSpec::new(self.noise.hurst, self.noise.dim, self.grid()?, self.seed)?.with_sampler(self.noise.sampler))
    }

    pub fn sampler(&self) -> Result<FbmSampler> {
        FbmSampler::new(self.fbm_spec()?)
    }

    /// Lifted driver number `path` at this config's `beta`.
    pub fn driver(&self, sampler: &FbmSampler, path: u64) -> Result<RoughPathGrid> {
        lift_geometric(&sampler.sample(path), &self.grid()?, self.beta())
    }

    pub fn vector_field(&self) -> Result<VectorField> {
        VectorField::new(self.sigma.clone(), self.drift)
    }

    pub fn boundary_values(&self) -> Result<Vec<f64>> {
        self.boundary.sample(&self.grid()?)
    }

    pub fn solve_options(&self) -> SolveOptions {
        SolveOptions { drift: self.drift_scheme, mesh_tolerance: self.mesh_tolerance }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Solves `Y^n` with the configured scheme; `flow` is reused when given.
pub(crate) fn solve_configured(
    cfg: &ExperimentConfig,
    vf: &VectorField,
    n: u32,
    rp: &RoughPathGrid,
    l: &[f64],
    flow: Option<&FlowTable>,
) -> Result<PenalisedSolution> {
    match cfg.scheme {
        Scheme::Direct => solve_penalised_rde(vf, n, rp, l, cfg.y0, &cfg.solve_options()),
        Scheme::DossSussmann => match flow {
            Some(flow) => doss_sussmann_solve(vf, n, rp, l, cfg.y0, flow),
            None => {
                let flow = build_flow(cfg, vf, rp, l)?;
                doss_sussmann_solve(vf, n, rp, l, cfg.y0, &flow)
            }
        },
    }
}

pub(crate) fn build_flow(cfg: &ExperimentConfig, vf: &VectorField, rp: &RoughPathGrid, l: &[f64]) -> Result<FlowTable> {
    let ygrid = FlowTable::auto_ygrid(vf, rp, l, cfg.y0, cfg.ygrid_points)?;
    compute_flow(vf, rp, &ygrid)
}

/// A sampled trajectory `(t, Y, K, L)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub y: Vec<f64>,
    pub k: Vec<f64>,
    pub l: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SimulationTarget {
    /// `Y^n` itself; `K` is the accumulated penalty.
    Penalised { n: u32 },
    /// The extrapolated reflected solution built from `n_max / 2` and `n_max`.
    Limit { n_max: u32 },
}

/// Solves the configured driver path.
pub fn simulate(cfg: &ExperimentConfig, target: SimulationTarget) -> Result<Trajectory> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let rp = cfg.driver(&cfg.sampler()?, cfg.path_index)?;
    let vf = cfg.vector_field()?;
    let l = cfg.boundary_values()?;
    let (y, k) = match target {
        SimulationTarget::Penalised { n } => {
            let sol = solve_configured(cfg, &vf, n, &rp, &l, None)?;
            (sol.y, sol.k)
        }
        SimulationTarget::Limit { n_max } => {
            let lim = reflected_solve_limit(&vf, &rp, &l, cfg.y0, n_max, &cfg.solve_options())?;
            (lim.solution.y, lim.solution.k)
        }
    };
    Ok(Trajectory { t: grid.times(), y, k, l })
}

impl Trajectory {
    /// Columns `t,Y,K,L`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
        let csv_err = |e: csv::Error| Error::Csv(format!("{}: {e}", path.display()));
        w.write_record(["t", "Y", "K", "L"]).map_err(csv_err)?;
        for i in 0..self.t.len() {
            w.write_record([self.t[i], self.y[i], self.k[i], self.l[i]].map(|v| v.to_string()))
                .map_err(csv_err)?;
        }
        w.flush().map_err(io_err(path))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
        let header: Vec<String> = r
            .headers()
            .map_err(|e| Error::Csv(e.to_string()))?
            .iter()
            .map(|s| s.trim().to_string())
            .collect();
        if header != ["t", "Y", "K", "L"] {
            return Err(Error::Csv(format!("expected columns t,Y,K,L, found {}", header.join(","))));
        }
        let mut out = Trajectory { t: vec![], y: vec![], k: vec![], l: vec![] };
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
            let v: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Csv(format!("row {}: {e}", line + 2)))?;
            if v.len() != 4 {
                return Err(Error::Csv(format!("row {} has {} fields", line + 2, v.len())));
            }
            out.t.push(v[0]);
            out.y.push(v[1]);
            out.k.push(v[2]);
            out.l.push(v[3]);
        }
        Ok(out)
    }
}

/// Default tolerances for checking a trajectory of `cfg`: the integral
/// identity gets five times the mesh-consistency gap of `Y^{n_max}`.
pub fn default_tolerances(cfg: &ExperimentConfig, y: &[f64]) -> Result<SpTolerances> {
    let rp = cfg.driver(&cfg.sampler()?, cfg.path_index)?;
    let vf = cfg.vector_field()?;
    let l = cfg.boundary_values()?;
    let n = cfg.n_list.iter().copied().max().unwrap_or(1);
    let opts = SolveOptions { mesh_tolerance: Some(f64::INFINITY), ..cfg.solve_options() };
    let sol = solve_penalised_rde(&vf, n, &rp, &l, cfg.y0, &opts)?;
    let gap = sol.mesh.map_or(0.0, |m| m.coarse_gap);
    Ok(SpTolerances::from_scale(path_scale(y), gap))
}

/// Certificate for a trajectory against the driver path `cfg` describes.
pub fn verify_trajectory(cfg: &ExperimentConfig, traj: &Trajectory, tol: &SpTolerances) -> Result<SpCertificate> {
    let grid = cfg.grid()?;
    if traj.t.len() != grid.nodes() {
        return Err(Error::GridMismatch(format!(
            "trajectory has {} rows but the configured grid has {} nodes",
            traj.t.len(),
            grid.nodes()
        )));
    }
    let h = grid.step_size();
    if let Some(i) = (0..grid.nodes()).find(|&i| (traj.t[i] - grid.time(i)).abs() > 1e-9 * h.max(1.0)) {
        return Err(Error::GridMismatch(format!("row {i}: t = {} but the grid has {}", traj.t[i], grid.time(i))));
    }
    let rp = cfg.driver(&cfg.sampler()?, cfg.path_index)?;
    let vf = cfg.vector_field()?;
    verify_sp(&traj.y, &traj.k, &traj.l, &vf, &rp, tol)
}
