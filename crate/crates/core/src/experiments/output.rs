use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{
    DensityReport, ExperimentConfig, LemmaSuiteReport, MalliavinReport, MonotoneReport, RateReport, RefinementStudy,
};
use crate::error::{io_err, Error, Result};

/// A CSV table with a fixed column list.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogLogPlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

/// Something `emit_outputs` can persist.
pub trait Report: Serialize {
    /// File stem of every artefact.
    const KIND: &'static str;
    fn table(&self) -> Table;
    fn plot(&self) -> Option<LogLogPlot> {
        None
    }
    fn passed(&self) -> bool;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub kind: String,
    pub crate_name: String,
    pub version: String,
    pub config_sha256: Option<String>,
    pub seed: u64,
    pub files: Vec<String>,
    pub pass: bool,
    pub report: serde_json::Value,
}

fn num(v: f64) -> String {
    v.to_string()
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// Writes `<kind>.csv`, `<kind>.svg` when the report has a plot, and
/// `<kind>_manifest.json` into `cfg.output_dir`.
pub fn emit_outputs<R: Report>(report: &R, cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    emit_to(report, &cfg.output_dir, Some(cfg.hash()), cfg.seed)
}

/// As [`emit_outputs`], for runs without a config file.
pub fn emit_to<R: Report>(report: &R, dir: &Path, config_sha256: Option<String>, seed: u64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();

    let csv_path = dir.join(format!("{}.csv", R::KIND));
    let table = report.table();
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Csv(format!("{}: {e}", csv_path.display()));
    w.write_record(&table.columns).map_err(csv_err)?;
    for row in &table.rows {
        debug_assert_eq!(row.len(), table.columns.len());
        w.write_record(row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
    fs::write(&csv_path, bytes).map_err(io_err(&csv_path))?;
    written.push(csv_path);

    if let Some(plot) = report.plot() {
        let svg_path = dir.join(format!("{}.svg", R::KIND));
        fs::write(&svg_path, render_loglog_svg(&plot)).map_err(io_err(&svg_path))?;
        written.push(svg_path);
    }

    let manifest_path = dir.join(format!("{}_manifest.json", R::KIND));
    let manifest = Manifest {
        kind: R::KIND.to_string(),
        crate_name: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256,
        seed,
        files: written
            .iter()
            .filter_map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()))
            .collect(),
        pass: report.passed(),
        report: serde_json::to_value(report)?,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;
    written.push(manifest_path);
    Ok(written)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Plain SVG log-log chart with decade ticks.
pub fn render_loglog_svg(plot: &LogLogPlot) -> String {
    let (width, height) = (640.0, 440.0);
    let (left, right, top, bottom) = (72.0, 150.0, 40.0, 56.0);
    let pts: Vec<(f64, f64)> = plot
        .series
        .iter()
        .flat_map(|s| s.x.iter().zip(&s.y).map(|(x, y)| (*x, *y)))
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.log10(), y.log10()))
        .collect();
    let span = |f: fn(&(f64, f64)) -> f64| {
        let lo = pts.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if lo.is_finite() {
            let (lo, hi) = (lo.floor(), hi.ceil());
            (lo, if hi > lo { hi } else { lo + 1.0 })
        } else {
            (0.0, 1.0)
        }
    };
    let (x0, x1) = span(|p| p.0);
    let (y0, y1) = span(|p| p.1);
    let pw = width - left - right;
    let ph = height - top - bottom;
    let sx = |lx: f64| left + (lx - x0) / (x1 - x0) * pw;
    let sy = |ly: f64| top + (y1 - ly) / (y1 - y0) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        left + pw / 2.0,
        escape(&plot.title)
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for d in (x0 as i64)..=(x1 as i64) {
        let x = sx(d as f64);
        let _ = writeln!(
            svg,
            r##"<line x1="{x:.2}" y1="{top}" x2="{x:.2}" y2="{}" stroke="#ddd"/><text x="{x:.2}" y="{}" text-anchor="middle">1e{d}</text>"##,
            top + ph,
            top + ph + 16.0
        );
    }
    for d in (y0 as i64)..=(y1 as i64) {
        let y = sy(d as f64);
        let _ = writeln!(
            svg,
            r##"<line x1="{left}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end">1e{d}</text>"##,
            left + pw,
            left - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        height - 14.0,
        escape(&plot.x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(&plot.y_label)
    );
    for (k, s) in plot.series.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let coords: Vec<(f64, f64)> = s
            .x
            .iter()
            .zip(&s.y)
            .filter(|(x, y)| **x > 0.0 && **y > 0.0 && x.is_finite() && y.is_finite())
            .map(|(x, y)| (sx(x.log10()), sy(y.log10())))
            .collect();
        let line: Vec<String> = coords.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#,
            line.join(" ")
        );
        for (x, y) in &coords {
            let _ = writeln!(svg, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{colour}"/>"#);
        }
        let ly = top + 14.0 + 18.0 * k as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{colour}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

impl Report for RateReport {
    const KIND: &'static str = "rate";

    fn table(&self) -> Table {
        Table {
            columns: vec!["n", "sup_err", "neg_part", "slope_so_far"],
            rows: self
                .rows
                .iter()
                .map(|r| vec![r.n.to_string(), num(r.sup_err), num(r.neg_part), opt(r.slope_so_far)])
                .collect(),
        }
    }

    fn plot(&self) -> Option<LogLogPlot> {
        let x: Vec<f64> = self.rows.iter().map(|r| r.n as f64).collect();
        Some(LogLogPlot {
            title: format!("penalisation error, H = {}", self.hurst),
            x_label: "n".into(),
            y_label: "sup-norm".into(),
            series: vec![
                Series { label: "sup_err".into(), x: x.clone(), y: self.rows.iter().map(|r| r.sup_err).collect() },
                Series { label: "neg_part".into(), x, y: self.rows.iter().map(|r| r.neg_part).collect() },
            ],
        })
    }

    fn passed(&self) -> bool {
        self.pass
    }
}

impl Report for MonotoneReport {
    const KIND: &'static str = "monotone";

    /// One row per compared pair; `kind` is `order` or `cauchy`.
    fn table(&self) -> Table {
        let mut rows: Vec<Vec<String>> = self
            .pairs
            .iter()
            .map(|p| vec!["order".into(), p.n_lo.to_string(), p.n_hi.to_string(), num(p.max_excess), num(p.t_at)])
            .collect();
        rows.extend(self.cauchy.iter().map(|c| {
            vec!["cauchy".into(), c.n.to_string(), (2 * c.n).to_string(), num(c.sup_diff), num(c.t_at)]
        }));
        Table { columns: vec!["kind", "n_lo", "n_hi", "value", "t"], rows }
    }

    fn plot(&self) -> Option<LogLogPlot> {
        Some(LogLogPlot {
            title: "uniform Cauchy gap".into(),
            x_label: "n".into(),
            y_label: "sup |Y^2n - Y^n|".into(),
            series: vec![Series {
                label: "gap".into(),
                x: self.cauchy.iter().map(|c| c.n as f64).collect(),
                y: self.cauchy.iter().map(|c| c.sup_diff).collect(),
            }],
        })
    }

    fn passed(&self) -> bool {
        self.pass
    }
}

impl Report for DensityReport {
    const KIND: &'static str = "density";

    /// Histogram bins; the atom is in the manifest.
    fn table(&self) -> Table {
        Table {
            columns: vec!["bin_lo", "bin_hi", "mass", "density"],
            rows: (0..self.bin_mass.len())
                .map(|b| {
                    vec![
                        num(self.bin_edges[b]),
                        num(self.bin_edges[b + 1]),
                        num(self.bin_mass[b]),
                        num(self.density[b]),
                    ]
                })
                .collect(),
        }
    }

    fn passed(&self) -> bool {
        self.pass
    }
}

impl Report for MalliavinReport {
    const KIND: &'static str = "malliavin";

    fn table(&self) -> Table {
        Table {
            columns: vec!["s", "d_s_y_t", "upper_bound", "fd"],
            rows: (0..self.s.len())
                .map(|i| {
                    vec![
                        num(self.s[i]),
                        num(self.values[i]),
                        num(self.upper_bound[i]),
                        opt(self.fd.as_ref().map(|f| f[i])),
                    ]
                })
                .collect(),
        }
    }

    fn passed(&self) -> bool {
        self.within_bounds && self.fd_max_rel_err.is_none_or(|e| e < 1e-2)
    }
}

impl Report for LemmaSuiteReport {
    const KIND: &'static str = "lemma";

    fn table(&self) -> Table {
        Table {
            columns: vec![
                "case",
                "n",
                "psi_scale",
                "worst_margin",
                "lhs",
                "rhs",
                "holds",
                "psi_max",
                "part_ii_shape",
                "refinement_gap",
            ],
            rows: self
                .rows
                .iter()
                .map(|r| {
                    vec![
                        r.case.to_string(),
                        r.n.to_string(),
                        num(r.psi_scale),
                        num(r.worst_margin),
                        num(r.lhs),
                        num(r.rhs),
                        r.holds.to_string(),
                        num(r.psi_max),
                        num(r.part_ii_shape),
                        num(r.refinement_gap),
                    ]
                })
                .collect(),
        }
    }

    fn passed(&self) -> bool {
        self.pass
    }
}

impl Report for RefinementStudy {
    const KIND: &'static str = "refinement";

    fn table(&self) -> Table {
        Table {
            columns: vec!["steps", "gap", "interpolation_error"],
            rows: (0..self.steps.len())
                .map(|i| vec![self.steps[i].to_string(), num(self.gaps[i]), num(self.interpolation_errors[i])])
                .collect(),
        }
    }

    fn plot(&self) -> Option<LogLogPlot> {
        Some(LogLogPlot {
            title: format!("direct vs flow route, n = {}", self.n),
            x_label: "steps".into(),
            y_label: "sup |difference|".into(),
            series: vec![Series {
                label: "gap".into(),
                x: self.steps.iter().map(|&s| s as f64).collect(),
                y: self.gaps.clone(),
            }],
        })
    }

    fn passed(&self) -> bool {
        self.pass
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::tests::bm_config;
    use crate::experiments::run_rate;

    #[test]
    fn rerun_is_byte_identical_and_directories_appear() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = bm_config(128);
        cfg.n_list = vec![4, 8, 16];
        cfg.output_dir = dir.path().join("a/b");
        let r = run_rate(&cfg).unwrap();
        let files = emit_outputs(&r, &cfg).unwrap();
        assert_eq!(files.len(), 3);
        let first: Vec<Vec<u8>> = files.iter().map(|f| fs::read(f).unwrap()).collect();
        let again = emit_outputs(&run_rate(&cfg).unwrap(), &cfg).unwrap();
        let second: Vec<Vec<u8>> = again.iter().map(|f| fs::read(f).unwrap()).collect();
        assert_eq!(first, second);
        let csv = String::from_utf8(first[0].clone()).unwrap();
        assert!(csv.starts_with("n,sup_err,neg_part,slope_so_far\n4,"));
        let manifest: serde_json::Value = serde_json::from_slice(&first[2]).unwrap();
        assert_eq!(manifest["config_sha256"], cfg.hash());
        assert_eq!(manifest["files"][1], "rate.svg");
    }

    #[test]
    fn unwritable_target_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let mut cfg = bm_config(64);
        cfg.n_list = vec![2, 4];
        cfg.output_dir = blocker.join("sub");
        let err = emit_outputs(&run_rate(&cfg).unwrap(), &cfg).unwrap_err();
        assert!(err.to_string().contains("file"), "{err}");
    }

    #[test]
    fn svg_has_one_polyline_per_series() {
        let plot = LogLogPlot {
            title: "a < b".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![
                Series { label: "one".into(), x: vec![1.0, 10.0], y: vec![1.0, 0.1] },
                Series { label: "two".into(), x: vec![1.0, 10.0, 100.0], y: vec![2.0, 0.0, 0.02] },
            ],
        };
        let svg = render_loglog_svg(&plot);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<circle").count(), 4);
        assert!(svg.contains("a &lt; b"));
    }
}
