//! Grid representation of geometric rough paths and controlled paths.
//!
//! Two-parameter objects (the second level `XX`) are stored once per grid
//! cell and extended to arbitrary pairs of nodes with the Chen identity.
//! Variation and Hölder seminorms are exact over grid subdivisions.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{domain, io_err, Error, Result};
use crate::stats::linear_fit;

/// Uniform grid `t_i = i T / M` on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(domain("a time grid needs at least one step"));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(domain(format!("horizon must be positive, got {horizon}")));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of cells `M`; there are `M + 1` nodes.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn step_size(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        if i == self.steps {
            self.horizon
        } else {
            self.horizon * i as f64 / self.steps as f64
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.nodes()).map(|i| self.time(i)).collect()
    }

    /// Index of the node closest to `t`, clamped to the grid.
    pub fn index_of(&self, t: f64) -> usize {
        let i = (t / self.step_size()).round();
        if i <= 0.0 {
            0
        } else {
            (i as usize).min(self.steps)
        }
    }

    /// The grid keeping every `factor`-th node.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.steps.is_multiple_of(factor) {
            return Err(domain(format!(
                "cannot coarsen {} steps by a factor {factor}",
                self.steps
            )));
        }
        Self::new(self.horizon, self.steps / factor)
    }

    fn check_range(&self, range: (usize, usize)) -> Result<()> {
        if range.0 > range.1 || range.1 > self.steps {
            return Err(domain(format!(
                "interval [{}, {}] is not inside a grid with {} steps",
                range.0, range.1, self.steps
            )));
        }
        Ok(())
    }
}

/// Sampled rough path: first level at nodes, second level per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RoughPathGrid {
    grid: TimeGrid,
    dim: usize,
    /// `(M + 1) * dim`, node-major.
    x: Vec<f64>,
    /// `M * dim * dim`; entry `[k][a][b]` is `int dX^a dX^b` over cell `k`.
    xx: Option<Vec<f64>>,
    beta: f64,
}

impl RoughPathGrid {
    pub fn new(
        grid: TimeGrid,
        dim: usize,
        x: Vec<f64>,
        xx: Option<Vec<f64>>,
        beta: f64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(domain("noise dimension must be at least 1"));
        }
        if !(beta > 1.0 / 3.0 && beta < 1.0) {
            return Err(domain(format!("Hölder exponent {beta} outside (1/3, 1)")));
        }
        if x.len() != grid.nodes() * dim {
            return Err(domain(format!(
                "expected {} first-level values, got {}",
                grid.nodes() * dim,
                x.len()
            )));
        }
        if let Some(xx) = &xx {
            if xx.len() != grid.steps() * dim * dim {
                return Err(domain(format!(
                    "expected {} second-level values, got {}",
                    grid.steps() * dim * dim,
                    xx.len()
                )));
            }
        } else if beta <= 0.5 {
            return Err(domain(
                "a rough path with beta <= 1/2 needs its second level",
            ));
        }
        Ok(Self { grid, dim, x, xx, beta })
    }

    /// Lift of the piecewise-linear interpolant: each cell carries
    /// `dX (x) dX / 2`, its exact iterated integral. The second level is
    /// omitted in the Young regime `beta > 1/2`.
    pub fn piecewise_linear(grid: TimeGrid, dim: usize, x: Vec<f64>, beta: f64) -> Result<Self> {
        if dim == 0 || x.len() != grid.nodes() * dim {
            return Err(domain("first-level values do not match the grid"));
        }
        let xx = (beta <= 0.5).then(|| {
            let mut xx = Vec::with_capacity(grid.steps() * dim * dim);
            for k in 0..grid.steps() {
                for a in 0..dim {
                    let da = x[(k + 1) * dim + a] - x[k * dim + a];
                    for b in 0..dim {
                        let db = x[(k + 1) * dim + b] - x[k * dim + b];
                        xx.push(0.5 * da * db);
                    }
                }
            }
            xx
        });
        Self::new(grid, dim, x, xx, beta)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Whether second-level terms take part in integrals (`beta <= 1/2`).
    pub fn is_rough(&self) -> bool {
        self.beta <= 0.5 && self.xx.is_some()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    /// First component at every node.
    pub fn component(&self, a: usize) -> Vec<f64> {
        (0..self.grid.nodes()).map(|i| self.x[i * self.dim + a]).collect()
    }

    pub fn increment(&self, i: usize, j: usize) -> Vec<f64> {
        self.x(j).iter().zip(self.x(i)).map(|(b, a)| b - a).collect()
    }

    /// Second level of cell `k` (`None` in the Young regime).
    pub fn cell_area(&self, k: usize) -> Option<&[f64]> {
        if !self.is_rough() {
            return None;
        }
        let d2 = self.dim * self.dim;
        self.xx.as_ref().map(|xx| &xx[k * d2..(k + 1) * d2])
    }

    /// Stored second level regardless of regime.
    pub fn raw_area(&self, k: usize) -> Option<&[f64]> {
        let d2 = self.dim * self.dim;
        self.xx.as_ref().map(|xx| &xx[k * d2..(k + 1) * d2])
    }

    /// `XX_{t_i, t_j}` by folding the Chen identity over the cells in between.
    pub fn chen_extend(&self, i: usize, j: usize) -> Result<Vec<f64>> {
        if i > j {
            return Err(domain(format!("chen_extend needs i <= j, got ({i}, {j})")));
        }
        self.grid.check_range((i, j))?;
        let d = self.dim;
        let mut acc = vec![0.0; d * d];
        for k in i..j {
            self.chen_step(&mut acc, i, k);
        }
        Ok(acc)
    }

    /// `acc <- acc + XX_k + (X_k - X_i) (x) dX_k`.
    fn chen_step(&self, acc: &mut [f64], i: usize, k: usize) {
        let d = self.dim;
        let area = self.raw_area(k);
        for a in 0..d {
            let left = self.x[k * d + a] - self.x[i * d + a];
            for b in 0..d {
                let db = self.x[(k + 1) * d + b] - self.x[k * d + b];
                let cell = area.map_or(0.5 * (self.x[(k + 1) * d + a] - self.x[k * d + a]) * db, |xx| {
                    xx[a * d + b]
                });
                acc[a * d + b] += cell + left * db;
            }
        }
    }

    /// Every `factor`-th node, with Chen-extended second level.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let grid = self.grid.coarsen(factor)?;
        let d = self.dim;
        let x: Vec<f64> = (0..grid.nodes())
            .flat_map(|i| self.x(i * factor).to_vec())
            .collect();
        let xx = match &self.xx {
            Some(_) => {
                let mut out = Vec::with_capacity(grid.steps() * d * d);
                for k in 0..grid.steps() {
                    out.extend(self.chen_extend(k * factor, (k + 1) * factor)?);
                }
                Some(out)
            }
            None => None,
        };
        Self::new(grid, d, x, xx, self.beta)
    }

    /// Largest `|Sym(XX) - dX (x) dX / 2|` over cells.
    pub fn geometricity_defect(&self) -> f64 {
        let d = self.dim;
        let mut worst: f64 = 0.0;
        for k in 0..self.grid.steps() {
            let Some(xx) = self.raw_area(k) else { return 0.0 };
            let dx = self.increment(k, k + 1);
            for a in 0..d {
                for b in 0..d {
                    let sym = 0.5 * (xx[a * d + b] + xx[b * d + a]);
                    worst = worst.max((sym - 0.5 * dx[a] * dx[b]).abs());
                }
            }
        }
        worst
    }

    /// Homogeneous norm `||X||_beta + sqrt(||XX||_{2 beta})` over all grid pairs.
    pub fn homogeneous_norm(&self) -> f64 {
        let first = holder_seminorm_by(&self.grid, self.beta, (0, self.grid.steps()), |i, j| {
            norm(&self.increment(i, j))
        });
        if !self.is_rough() {
            return first;
        }
        let d = self.dim;
        let m = self.grid.steps();
        let h = self.grid.step_size();
        let mut second: f64 = 0.0;
        let mut acc = vec![0.0; d * d];
        for i in 0..m {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for k in i..m {
                self.chen_step(&mut acc, i, k);
                let width = (k + 1 - i) as f64 * h;
                second = second.max(norm(&acc) / width.powf(2.0 * self.beta));
            }
        }
        first + second.sqrt()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(io_err(path))?;
        self.write_csv_to(file)
            .map_err(|e| Error::Csv(format!("{}: {e}", path.display())))
    }

    /// Columns `t, X_1..X_d, XX_11..XX_dd`; the second-level columns of row
    /// `i` hold the cell `[t_i, t_{i+1}]` and are empty on the last row.
    pub fn write_csv_to<W: Write>(&self, out: W) -> std::result::Result<(), csv::Error> {
        let d = self.dim;
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|a| format!("X_{a}")));
        if self.xx.is_some() {
            for a in 1..=d {
                for b in 1..=d {
                    header.push(format!("XX_{a}{b}"));
                }
            }
        }
        w.write_record(&header)?;
        for i in 0..self.grid.nodes() {
            let mut row = vec![self.grid.time(i).to_string()];
            row.extend(self.x(i).iter().map(|v| v.to_string()));
            if self.xx.is_some() {
                match (i < self.grid.steps()).then(|| self.raw_area(i)).flatten() {
                    Some(area) => row.extend(area.iter().map(|v| v.to_string())),
                    None => row.extend(std::iter::repeat_n(String::new(), d * d)),
                }
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, beta: f64) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
        let dim = header.iter().filter(|h| h.starts_with("X_")).count();
        let has_area = header.iter().any(|h| h.starts_with("XX_"));
        let mut times = Vec::new();
        let mut x = Vec::new();
        let mut xx = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Csv(format!("bad number {s:?}: {e}")))
            };
            times.push(parse(&rec[0])?);
            for a in 0..dim {
                x.push(parse(&rec[1 + a])?);
            }
            if has_area && !rec[1 + dim].trim().is_empty() {
                for c in 0..dim * dim {
                    xx.push(parse(&rec[1 + dim + c])?);
                }
            }
        }
        if times.len() < 2 {
            return Err(Error::Csv("need at least two rows".into()));
        }
        let grid = TimeGrid::new(*times.last().unwrap(), times.len() - 1)?;
        Self::new(grid, dim, x, has_area.then_some(xx), beta)
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    if v.len() == 1 {
        v[0].abs()
    } else {
        v.iter().map(|a| a * a).sum::<f64>().sqrt()
    }
}

/// Scalar path controlled by a rough path: values `Y`, Gubinelli derivative
/// `Y'` (a covector per node).
#[derive(Debug, Clone, PartialEq)]
pub struct ControlledPath {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
    derivative: Vec<f64>,
}

impl ControlledPath {
    pub fn new(grid: TimeGrid, values: Vec<f64>, derivative: Vec<f64>) -> Result<Self> {
        if values.len() != grid.nodes() || !derivative.len().is_multiple_of(grid.nodes()) || derivative.is_empty() {
            return Err(domain("controlled path does not match its grid"));
        }
        let dim = derivative.len() / grid.nodes();
        Ok(Self { grid, dim, values, derivative })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn derivative(&self, i: usize) -> &[f64] {
        &self.derivative[i * self.dim..(i + 1) * self.dim]
    }

    /// `R^Y_{s,t} = dY_{s,t} - Y'_s dX_{s,t}`.
    pub fn remainder(&self, rp: &RoughPathGrid, i: usize, j: usize) -> f64 {
        let dx = rp.increment(i, j);
        let lin: f64 = self.derivative(i).iter().zip(&dx).map(|(a, b)| a * b).sum();
        self.values[j] - self.values[i] - lin
    }

    /// View as the covector `Y e_component`, so `int Y dX^component` becomes
    /// a covector integral.
    pub fn to_covector(&self, component: usize) -> Result<ControlledCovector> {
        if component >= self.dim {
            return Err(domain(format!("component {component} out of range")));
        }
        let d = self.dim;
        let n = self.grid.nodes();
        let mut values = vec![0.0; n * d];
        let mut derivative = vec![0.0; n * d * d];
        for i in 0..n {
            values[i * d + component] = self.values[i];
            for j in 0..d {
                derivative[i * d * d + component * d + j] = self.derivative[i * d + j];
            }
        }
        ControlledCovector::new(self.grid, d, values, derivative)
    }
}

/// Covector-valued controlled path `Z`, such as `sigma(Y)`; the Gubinelli
/// derivative at each node is a `dim x dim` matrix `[b][j] = dZ^b / dX^j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlledCovector {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
    derivative: Vec<f64>,
}

impl ControlledCovector {
    pub fn new(grid: TimeGrid, dim: usize, values: Vec<f64>, derivative: Vec<f64>) -> Result<Self> {
        if values.len() != grid.nodes() * dim || derivative.len() != grid.nodes() * dim * dim {
            return Err(domain("controlled covector does not match its grid"));
        }
        Ok(Self { grid, dim, values, derivative })
    }

    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn derivative(&self, i: usize) -> &[f64] {
        let d2 = self.dim * self.dim;
        &self.derivative[i * d2..(i + 1) * d2]
    }

    fn check_base(&self, rp: &RoughPathGrid) -> Result<()> {
        if self.grid != *rp.grid() || self.dim != rp.dim() {
            return Err(Error::GridMismatch(format!(
                "integrand on {:?} (d = {}) vs driver on {:?} (d = {})",
                self.grid,
                self.dim,
                rp.grid(),
                rp.dim()
            )));
        }
        Ok(())
    }

    /// Germ `Z_s dX_{s,t} + Z'_s XX_{s,t}` for an arbitrary pair of nodes.
    pub fn germ(&self, rp: &RoughPathGrid, i: usize, j: usize) -> Result<f64> {
        let dx = rp.increment(i, j);
        let mut g: f64 = self.value(i).iter().zip(&dx).map(|(a, b)| a * b).sum();
        if rp.is_rough() {
            let area = rp.chen_extend(i, j)?;
            g += self.area_term(i, &area);
        }
        Ok(g)
    }

    fn area_term(&self, i: usize, area: &[f64]) -> f64 {
        let d = self.dim;
        let zp = self.derivative(i);
        let mut s = 0.0;
        for b in 0..d {
            for j in 0..d {
                s += zp[b * d + j] * area[j * d + b];
            }
        }
        s
    }

    fn cell_term(&self, rp: &RoughPathGrid, k: usize) -> f64 {
        let d = self.dim;
        let z = self.value(k);
        let (x0, x1) = (rp.x(k), rp.x(k + 1));
        let mut s: f64 = (0..d).map(|b| z[b] * (x1[b] - x0[b])).sum();
        if let Some(area) = rp.cell_area(k) {
            s += self.area_term(k, area);
        }
        s
    }

    /// Compensated Riemann sum over the cells of `range`.
    pub fn integral(&self, rp: &RoughPathGrid, range: (usize, usize)) -> Result<f64> {
        self.check_base(rp)?;
        rp.grid().check_range(range)?;
        Ok((range.0..range.1).map(|k| self.cell_term(rp, k)).sum())
    }

    /// Running integral `int_0^{t_i}` at every node.
    pub fn integral_path(&self, rp: &RoughPathGrid) -> Result<Vec<f64>> {
        self.check_base(rp)?;
        let mut out = Vec::with_capacity(self.grid.nodes());
        let mut acc = 0.0;
        out.push(0.0);
        for k in 0..self.grid.steps() {
            acc += self.cell_term(rp, k);
            out.push(acc);
        }
        Ok(out)
    }
}

/// Rough integral of a scalar controlled path against each driver component.
pub fn rough_integral(ctrl: &ControlledPath, rp: &RoughPathGrid, range: (usize, usize)) -> Result<Vec<f64>> {
    if ctrl.grid != *rp.grid() || ctrl.dim != rp.dim() {
        return Err(Error::GridMismatch("integrand and driver live on different grids".into()));
    }
    (0..rp.dim())
        .map(|a| ctrl.to_covector(a)?.integral(rp, range))
        .collect()
}

/// `x v x^p`, the upper-bound helper of variation estimates.
pub fn phi_p(x: f64, p: f64) -> Result<f64> {
    if x < 0.0 || x.is_nan() {
        return Err(domain(format!("phi_p needs x >= 0, got {x}")));
    }
    if p < 1.0 {
        return Err(domain(format!("phi_p needs p >= 1, got {p}")));
    }
    Ok(x.max(x.powf(p)))
}

/// `max |f_{s,t}| / (t - s)^beta` over grid pairs inside `range`, where
/// `incr(i, j)` returns the size of the (one- or two-parameter) increment.
pub fn holder_seminorm_by(
    grid: &TimeGrid,
    beta: f64,
    range: (usize, usize),
    incr: impl Fn(usize, usize) -> f64,
) -> f64 {
    let h = grid.step_size();
    let mut best: f64 = 0.0;
    for i in range.0..range.1 {
        for j in i + 1..=range.1 {
            let w = ((j - i) as f64 * h).powf(beta);
            best = best.max(incr(i, j) / w);
        }
    }
    best
}

/// Hölder seminorm of a scalar path sampled on `grid`.
pub fn holder_seminorm(values: &[f64], grid: &TimeGrid, beta: f64, range: (usize, usize)) -> Result<f64> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(domain(format!("Hölder exponent {beta} outside (0, 1)")));
    }
    if values.len() != grid.nodes() {
        return Err(domain("path does not match its grid"));
    }
    grid.check_range(range)?;
    Ok(holder_seminorm_by(grid, beta, range, |i, j| (values[j] - values[i]).abs()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariationMethod {
    ExactDp,
    DyadicGreedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationReport {
    pub p: f64,
    /// Exact value for `ExactDp`, a lower bound for `DyadicGreedy`.
    pub value: f64,
    /// Upper bound, present for `DyadicGreedy` only.
    pub upper: Option<f64>,
    pub interval: (f64, f64),
    pub method: VariationMethod,
}

/// Point count above which the quadratic DP is replaced by a bracket.
pub const EXACT_DP_LIMIT: usize = 8192;

/// `sup_pi sum |f_{t_i,t_{i+1}}|^p` over subdivisions of the points
/// `0..count`, where `dist(i, j)` is the increment size between points.
/// Returns the p-th power.
pub fn p_variation_power_by(count: usize, p: f64, dist: impl Fn(usize, usize) -> f64) -> f64 {
    if count < 2 {
        return 0.0;
    }
    let mut best = vec![0.0f64; count];
    for j in 1..count {
        let mut b: f64 = 0.0;
        for i in 0..j {
            b = b.max(best[i] + dist(i, j).powf(p));
        }
        best[j] = b;
    }
    best[count - 1]
}

/// Indices of the alternating local extrema of a scalar sequence (plus both
/// endpoints). Interior monotone points never enlarge a p-sum for `p >= 1`.
fn turning_points(v: &[f64]) -> Vec<usize> {
    if v.len() < 2 {
        return vec![0; v.len()];
    }
    let mut idx = vec![0];
    for i in 1..v.len() - 1 {
        let last = v[*idx.last().unwrap()];
        let up = v[i] - last;
        let next = v[i + 1] - v[i];
        if up == 0.0 {
            continue;
        }
        if up * next <= 0.0 {
            idx.push(i);
        }
    }
    idx.push(v.len() - 1);
    idx
}

/// Exact grid p-variation of a scalar path on `range`.
pub fn p_variation(values: &[f64], grid: &TimeGrid, p: f64, range: (usize, usize)) -> Result<VariationReport> {
    if !(p >= 1.0) {
        return Err(domain(format!("p-variation needs p >= 1, got {p}")));
    }
    if values.len() != grid.nodes() {
        return Err(domain("path does not match its grid"));
    }
    grid.check_range(range)?;
    let slice = &values[range.0..=range.1];
    let interval = (grid.time(range.0), grid.time(range.1));
    let pts: Vec<f64> = turning_points(slice).into_iter().map(|i| slice[i]).collect();
    if pts.len() <= EXACT_DP_LIMIT {
        // A monotone run is its own optimal partition; skip the power round trip.
        let value = match pts.len() {
            1 => 0.0,
            2 => (pts[1] - pts[0]).abs(),
            n => p_variation_power_by(n, p, |i, j| (pts[j] - pts[i]).abs()).powf(1.0 / p),
        };
        return Ok(VariationReport {
            p,
            value,
            upper: None,
            interval,
            method: VariationMethod::ExactDp,
        });
    }
    // Lower bound: exact DP over a dyadic thinning of the turning points that
    // keeps the global extrema. Upper bound: osc^{p-1} * total variation.
    let mut stride = 1;
    while pts.len() / stride > EXACT_DP_LIMIT {
        stride *= 2;
    }
    let argmax = (0..pts.len()).max_by(|&a, &b| pts[a].total_cmp(&pts[b])).unwrap();
    let argmin = (0..pts.len()).min_by(|&a, &b| pts[a].total_cmp(&pts[b])).unwrap();
    let mut keep: Vec<usize> = (0..pts.len()).step_by(stride).collect();
    keep.extend([argmax, argmin, pts.len() - 1]);
    keep.sort_unstable();
    keep.dedup();
    let sub: Vec<f64> = keep.iter().map(|&i| pts[i]).collect();
    let lower = p_variation_power_by(sub.len(), p, |i, j| (sub[j] - sub[i]).abs()).powf(1.0 / p);
    let osc = pts[argmax] - pts[argmin];
    let tv: f64 = pts.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    let upper = (osc.powf(p - 1.0) * tv).powf(1.0 / p);
    Ok(VariationReport {
        p,
        value: lower,
        upper: Some(upper),
        interval,
        method: VariationMethod::DyadicGreedy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SewingProbe {
    /// Coarse cell widths, one per level.
    pub widths: Vec<f64>,
    /// Mean over coarse cells of `|int - germ|`.
    pub errors: Vec<f64>,
    /// Fitted log-log slope; `f64::INFINITY` when every error vanishes.
    pub exponent: f64,
}

/// Compares the fine-grid integral over coarse cells of `2^l` fine cells
/// (`l = 1..=levels`) with the single-cell germ and fits the scaling exponent.
pub fn sewing_error_probe(ctrl: &ControlledCovector, rp: &RoughPathGrid, levels: usize) -> Result<SewingProbe> {
    if levels < 3 {
        return Err(domain("the sewing probe needs at least 3 refinement levels"));
    }
    ctrl.check_base(rp)?;
    let m = rp.grid().steps();
    if !m.is_multiple_of(1 << levels) {
        return Err(domain(format!("{m} steps are not divisible by 2^{levels}")));
    }
    let cells: Vec<f64> = (0..m).map(|k| ctrl.cell_term(rp, k)).collect();
    let mut widths = Vec::with_capacity(levels);
    let mut errors = Vec::with_capacity(levels);
    for l in 1..=levels {
        let span = 1usize << l;
        let coarse = m / span;
        let mut total = 0.0;
        for c in 0..coarse {
            let (i, j) = (c * span, (c + 1) * span);
            let fine: f64 = cells[i..j].iter().sum();
            total += (fine - ctrl.germ(rp, i, j)?).abs();
        }
        widths.push(span as f64 * rp.grid().step_size());
        errors.push(total / coarse as f64);
    }
    let scale = cells.iter().fold(0.0f64, |a, c| a.max(c.abs())).max(f64::MIN_POSITIVE);
    let exponent = if errors.iter().all(|e| *e <= 1e-14 * scale) {
        f64::INFINITY
    } else {
        let lx: Vec<f64> = widths.iter().map(|w| w.ln()).collect();
        let ly: Vec<f64> = errors.iter().map(|e| e.max(f64::MIN_POSITIVE).ln()).collect();
        linear_fit(&lx, &ly).slope
    };
    Ok(SewingProbe { widths, errors, exponent })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_driver(m: usize, horizon: f64) -> RoughPathGrid {
        let grid = TimeGrid::new(horizon, m).unwrap();
        RoughPathGrid::piecewise_linear(grid, 1, grid.times(), 0.4).unwrap()
    }

    #[test]
    fn phi_p_branches() {
        assert_eq!(phi_p(0.5, 2.0).unwrap(), 0.5);
        assert_eq!(phi_p(3.0, 2.0).unwrap(), 9.0);
        assert_eq!(phi_p(1.0, 2.7).unwrap(), 1.0);
        assert!(phi_p(-0.1, 2.0).is_err());
    }

    #[test]
    fn holder_of_linear_and_constant() {
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let f: Vec<f64> = grid.times().iter().map(|t| 3.0 * t).collect();
        let v = holder_seminorm(&f, &grid, 0.5, (0, 64)).unwrap();
        assert!((v - 3.0).abs() < 1e-12);
        let c = vec![2.0; 65];
        assert_eq!(holder_seminorm(&c, &grid, 0.5, (0, 64)).unwrap(), 0.0);
        assert_eq!(holder_seminorm(&f, &grid, 0.5, (5, 5)).unwrap(), 0.0);
    }

    #[test]
    fn holder_of_single_jump() {
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let h = grid.step_size();
        let f: Vec<f64> = (0..17).map(|i| if i >= 8 { 1.0 } else { 0.0 }).collect();
        let v = holder_seminorm(&f, &grid, 0.4, (0, 16)).unwrap();
        assert!((v - h.powf(-0.4)).abs() < 1e-12);
    }

    #[test]
    fn p_variation_small_cases() {
        let grid = TimeGrid::new(2.0, 2).unwrap();
        let r = p_variation(&[0.0, 1.0, 0.0], &grid, 2.0, (0, 2)).unwrap();
        assert!((r.value - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(r.method, VariationMethod::ExactDp);
        let g1 = TimeGrid::new(1.0, 1).unwrap();
        let r = p_variation(&[0.3, -1.2], &g1, 2.5, (0, 1)).unwrap();
        assert!((r.value - 1.5).abs() < 1e-15);
        assert!(p_variation(&[0.0, 1.0], &g1, 0.5, (0, 1)).is_err());
    }

    #[test]
    fn turning_points_skip_monotone_runs() {
        let v = [0.0, 1.0, 2.0, 2.0, 1.0, 3.0];
        assert_eq!(turning_points(&v), vec![0, 2, 4, 5]);
    }

    #[test]
    fn p_variation_bracket_for_long_paths() {
        let m = 3 * EXACT_DP_LIMIT;
        let grid = TimeGrid::new(1.0, m).unwrap();
        let v: Vec<f64> = (0..=m).map(|i| if i % 2 == 0 { 0.0 } else { 1.0 }).collect();
        let r = p_variation(&v, &grid, 2.0, (0, m)).unwrap();
        assert_eq!(r.method, VariationMethod::DyadicGreedy);
        let upper = r.upper.unwrap();
        assert!(r.value <= upper + 1e-12);
        assert!((upper - (m as f64).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn chen_extend_linear_path() {
        let grid = TimeGrid::new(2.0, 2).unwrap();
        let rp = RoughPathGrid::piecewise_linear(grid, 1, vec![0.0, 1.0, 2.0], 0.4).unwrap();
        assert_eq!(rp.chen_extend(1, 1).unwrap(), vec![0.0]);
        assert_eq!(rp.chen_extend(0, 2).unwrap(), vec![2.0]);
        assert!(rp.chen_extend(2, 1).is_err());
    }

    #[test]
    fn integral_of_constant_telescopes() {
        let rp = linear_driver(10, 1.0);
        let grid = *rp.grid();
        let ctrl = ControlledPath::new(grid, vec![2.5; 11], vec![0.0; 11]).unwrap();
        let v = rough_integral(&ctrl, &rp, (2, 9)).unwrap();
        assert!((v[0] - 2.5 * 0.7).abs() < 1e-14);
    }

    #[test]
    fn integral_of_x_dx_is_exact_on_one_cell() {
        let rp = linear_driver(1, 1.0);
        let ctrl = ControlledPath::new(*rp.grid(), rp.component(0), vec![1.0; 2]).unwrap();
        assert_eq!(rough_integral(&ctrl, &rp, (0, 1)).unwrap(), vec![0.5]);
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let rp = linear_driver(8, 1.0);
        let other = TimeGrid::new(1.0, 4).unwrap();
        let ctrl = ControlledPath::new(other, vec![0.0; 5], vec![0.0; 5]).unwrap();
        assert!(matches!(rough_integral(&ctrl, &rp, (0, 4)), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn sewing_probe_constant_is_sentinel() {
        let rp = linear_driver(64, 1.0);
        let ctrl = ControlledPath::new(*rp.grid(), vec![1.0; 65], vec![0.0; 65]).unwrap();
        let probe = sewing_error_probe(&ctrl.to_covector(0).unwrap(), &rp, 3).unwrap();
        assert!(probe.exponent.is_infinite());
        assert!(sewing_error_probe(&ctrl.to_covector(0).unwrap(), &rp, 2).is_err());
    }

    #[test]
    fn young_regime_drops_second_level() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let rp = RoughPathGrid::piecewise_linear(grid, 1, grid.times(), 0.7).unwrap();
        assert!(!rp.is_rough());
        assert!(rp.cell_area(0).is_none());
        assert!(RoughPathGrid::new(grid, 1, grid.times(), None, 0.4).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let grid = TimeGrid::new(1.0, 3).unwrap();
        let rp = RoughPathGrid::piecewise_linear(grid, 2, vec![0.0, 0.0, 0.1, -0.2, 0.3, 0.1, 0.2, 0.5], 0.4)
            .unwrap();
        let mut buf = Vec::new();
        rp.write_csv_to(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,X_1,X_2,XX_11,XX_12,XX_21,XX_22\n"));
        let back = RoughPathGrid::read_csv(buf.as_slice(), 0.4).unwrap();
        assert_eq!(back, rp);
    }
}
