//! Method-by-label-fraction tables and plots from stored aggregates.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::config::{Method, FRACTION_GRID};
use super::run::{collect_aggregates, Aggregate};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportCell {
    pub mean: f64,
    pub halfwidth: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub fractions: Vec<f64>,
    /// One row per method; `None` where no completed aggregate exists.
    pub rows: Vec<(Method, Vec<Option<ReportCell>>)>,
}

fn column(fraction: f64) -> Option<usize> {
    FRACTION_GRID.iter().position(|&f| (f - fraction).abs() < 1e-9)
}

/// Builds the grid. Later aggregates for the same cell replace earlier ones.
pub fn build_report(aggregates: &[Aggregate]) -> Report {
    let mut rows: Vec<(Method, Vec<Option<ReportCell>>)> =
        Method::ALL.iter().map(|&m| (m, vec![None; FRACTION_GRID.len()])).collect();
    for a in aggregates {
        let (Some(col), Some(s)) = (column(a.label_fraction), a.summary.as_ref()) else {
            continue;
        };
        if a.method == Method::Picie && col != 0 {
            continue;
        }
        if let Some(row) = rows.iter_mut().find(|(m, _)| *m == a.method) {
            row.1[col] = Some(ReportCell {
                mean: s.mean,
                halfwidth: s.ci_halfwidth,
                seeds: s.values.len(),
            });
        }
    }
    Report {
        fractions: FRACTION_GRID.to_vec(),
        rows,
    }
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,metric");
        for f in &self.fractions {
            let _ = write!(out, ",{}%", (f * 100.0).round());
        }
        out.push('\n');
        for (m, cells) in &self.rows {
            let _ = write!(out, "{},{}", m.name(), m.metric());
            for c in cells {
                match c {
                    Some(c) => {
                        let _ = write!(out, ",{:.4} ± {:.4}", c.mean, c.halfwidth);
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Line plot of mean metric against label fraction with CI error bars.
    pub fn to_svg(&self) -> String {
        const W: f64 = 640.0;
        const H: f64 = 400.0;
        const M: f64 = 50.0;
        const COLORS: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
        let px = |f: f64| M + f * (W - 2.0 * M);
        let py = |v: f64| H - M - v.clamp(0.0, 1.0) * (H - 2.0 * M);
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<line x1="{M}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{M}" y1="{M}" x2="{M}" y2="{}" stroke="black"/>"#,
            H - M,
            W - M,
            H - M,
            H - M
        );
        for &f in &self.fractions {
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}%</text>"#, px(f), H - M + 16.0, (f * 100.0).round());
        }
        for i in 0..=4 {
            let v = i as f64 / 4.0;
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#, M - 6.0, py(v) + 4.0);
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">label fraction</text>"#, W / 2.0, H - 12.0);
        for (i, (m, cells)) in self.rows.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let pts: Vec<(f64, &ReportCell)> = self
                .fractions
                .iter()
                .zip(cells)
                .filter_map(|(&f, c)| c.as_ref().map(|c| (f, c)))
                .collect();
            if pts.is_empty() {
                continue;
            }
            let path: Vec<String> = pts.iter().map(|(f, c)| format!("{:.1},{:.1}", px(*f), py(c.mean))).collect();
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
            for (f, c) in &pts {
                let (x, y) = (px(*f), py(c.mean));
                let _ = writeln!(
                    s,
                    r#"<circle cx="{x:.1}" cy="{y:.1}" r="3" fill="{color}"/><line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="{color}"/>"#,
                    py(c.mean - c.halfwidth),
                    py(c.mean + c.halfwidth)
                );
            }
            let ly = M + 14.0 * i as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}">{} ({})</text>"#,
                W - M - 150.0,
                ly - 9.0,
                W - M - 136.0,
                ly,
                m.name(),
                m.metric()
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Writes `report.csv` and `report.svg` into `out_dir` from every aggregate under `root`.
pub fn render_report(root: &Path, out_dir: &Path) -> Result<Report> {
    let report = build_report(&collect_aggregates(root)?);
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("report.csv"), report.to_csv())?;
    fs::write(out_dir.join("report.svg"), report.to_svg())?;
    Ok(report)
}
