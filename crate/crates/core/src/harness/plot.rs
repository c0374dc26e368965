//! Plot data: one CSV plus one SVG per panel, median with 25th/75th
//! percentile bands of `log10 |error|`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::aggregate::{fmt9, rmse_aggregate, CellSummary};
use super::config::PanelDimension;
use super::run::ExperimentResult;
use crate::error::{parse_err, DiceError, Result};

pub const PANEL_HEADER: &str = "x,estimator,median,p25,p75";

/// One plotted point.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelRow {
    pub x: usize,
    pub estimator: String,
    pub median: f64,
    pub p25: f64,
    pub p75: f64,
}

/// A panel fixes one sweep dimension; the other one is the x-axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub dimension: PanelDimension,
    pub value: usize,
    pub rows: Vec<PanelRow>,
}

impl Panel {
    pub fn title(&self) -> String {
        match self.dimension {
            PanelDimension::Trajectories => format!("# trajectories = {}", self.value),
            PanelDimension::Horizon => format!("trajectory length = {}", self.value),
        }
    }

    fn x_label(&self) -> &'static str {
        match self.dimension {
            PanelDimension::Trajectories => "trajectory length",
            PanelDimension::Horizon => "# trajectories",
        }
    }

    pub fn file_stem(&self) -> String {
        match self.dimension {
            PanelDimension::Trajectories => format!("panel_trajectories_{}", self.value),
            PanelDimension::Horizon => format!("panel_horizon_{}", self.value),
        }
    }
}

/// Groups summaries into panels. Rows are sorted by estimator order then x.
pub fn build_panels(summaries: &[CellSummary], estimators: &[String], dimension: PanelDimension) -> Vec<Panel> {
    let key = |s: &CellSummary| match dimension {
        PanelDimension::Trajectories => (s.trajectories, s.horizon),
        PanelDimension::Horizon => (s.horizon, s.trajectories),
    };
    let mut values: Vec<usize> = summaries.iter().map(|s| key(s).0).collect();
    values.sort_unstable();
    values.dedup();
    values
        .into_iter()
        .map(|value| {
            let mut rows = Vec::new();
            for name in estimators {
                let mut cells: Vec<&CellSummary> = summaries
                    .iter()
                    .filter(|s| &s.estimator == name && key(s).0 == value)
                    .collect();
                cells.sort_by_key(|s| key(s).1);
                rows.extend(cells.into_iter().map(|s| PanelRow {
                    x: key(s).1,
                    estimator: name.clone(),
                    median: s.median_log,
                    p25: s.p25_log,
                    p75: s.p75_log,
                }));
            }
            Panel { dimension, value, rows }
        })
        .collect()
}

pub fn panel_csv(panel: &Panel) -> String {
    let mut out = String::from(PANEL_HEADER);
    out.push('\n');
    for r in &panel.rows {
        writeln!(out, "{},{},{},{},{}", r.x, r.estimator, fmt9(r.median), fmt9(r.p25), fmt9(r.p75)).unwrap();
    }
    out
}

/// Parses a file written by [`panel_csv`].
pub fn read_panel_csv(text: &str) -> Result<Vec<PanelRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == PANEL_HEADER => {}
        _ => return Err(parse_err(1, format!("expected header {PANEL_HEADER:?}"))),
    }
    let num = |line: usize, s: &str| -> Result<f64> {
        s.parse::<f64>().map_err(|e| parse_err(line, format!("{s:?}: {e}")))
    };
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let ln = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(parse_err(ln, format!("expected 5 fields, got {}", f.len())));
        }
        rows.push(PanelRow {
            x: f[0].parse().map_err(|e| parse_err(ln, format!("{:?}: {e}", f[0])))?,
            estimator: f[1].to_string(),
            median: num(ln, f[2])?,
            p25: num(ln, f[3])?,
            p75: num(ln, f[4])?,
        });
    }
    Ok(rows)
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Log-x line plot with shaded percentile bands.
pub fn panel_svg(panel: &Panel, estimators: &[String]) -> String {
    let (w, h) = (480.0, 360.0);
    let (left, right, top, bottom) = (60.0, 130.0, 30.0, 45.0);
    let finite: Vec<&PanelRow> = panel
        .rows
        .iter()
        .filter(|r| r.median.is_finite() && r.p25.is_finite() && r.p75.is_finite())
        .collect();
    let lx = |x: usize| (x.max(1) as f64).log10();
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in &finite {
        x0 = x0.min(lx(r.x));
        x1 = x1.max(lx(r.x));
        y0 = y0.min(r.p25.min(r.median));
        y1 = y1.max(r.p75.max(r.median));
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, -1.0, 0.0);
    }
    if x1 - x0 < 1e-9 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-9 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let (pw, ph) = (w - left - right, h - top - bottom);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (y1 - y) / (y1 - y0) * ph;
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        svg,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    )
    .unwrap();
    writeln!(svg, r#"<text x="{}" y="18" text-anchor="middle">{}</text>"#, left + pw / 2.0, panel.title()).unwrap();
    writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 8.0,
        panel.x_label()
    )
    .unwrap();
    writeln!(
        svg,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">log10 |error|</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    )
    .unwrap();
    let mut xs: Vec<usize> = finite.iter().map(|r| r.x).collect();
    xs.sort_unstable();
    xs.dedup();
    for x in xs {
        let px = sx(lx(x));
        writeln!(
            svg,
            r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{x}</text>"#,
            top + ph + 15.0
        )
        .unwrap();
    }
    for k in 0..=4 {
        let y = y0 + (y1 - y0) * k as f64 / 4.0;
        writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{y:.2}</text>"#,
            left - 4.0,
            sy(y) + 4.0
        )
        .unwrap();
    }
    for (i, name) in estimators.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<&&PanelRow> = finite.iter().filter(|r| &r.estimator == name).collect();
        if !pts.is_empty() {
            let upper = pts.iter().map(|r| format!("{:.1},{:.1}", sx(lx(r.x)), sy(r.p75)));
            let lower = pts.iter().rev().map(|r| format!("{:.1},{:.1}", sx(lx(r.x)), sy(r.p25)));
            let band: Vec<String> = upper.chain(lower).collect();
            writeln!(
                svg,
                r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
                band.join(" ")
            )
            .unwrap();
            let line: Vec<String> = pts.iter().map(|r| format!("{:.1},{:.1}", sx(lx(r.x)), sy(r.median))).collect();
            writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                line.join(" ")
            )
            .unwrap();
        }
        let ly = top + 12.0 + 16.0 * i as f64;
        let lx0 = left + pw + 10.0;
        writeln!(
            svg,
            r#"<line x1="{lx0}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx0 + 18.0,
            lx0 + 22.0,
            ly + 4.0,
            xml_escape(name)
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `<stem>.csv` and `<stem>.svg` per panel into `dir`, plus
/// `curves.csv` when training curves were recorded. Returns the files written.
pub fn emit_plot_data(result: &ExperimentResult, dimension: PanelDimension, dir: &Path) -> Result<Vec<PathBuf>> {
    let estimators = result.estimator_names();
    if estimators.is_empty() {
        return Err(DiceError::Config("no estimators to plot".into()));
    }
    std::fs::create_dir_all(dir)?;
    let summaries = rmse_aggregate(&result.records);
    let mut written = Vec::new();
    for panel in build_panels(&summaries, &estimators, dimension) {
        let csv = dir.join(format!("{}.csv", panel.file_stem()));
        std::fs::write(&csv, panel_csv(&panel))?;
        let svg = dir.join(format!("{}.svg", panel.file_stem()));
        std::fs::write(&svg, panel_svg(&panel, &estimators))?;
        written.push(csv);
        written.push(svg);
    }
    if result.records.iter().any(|r| r.curve.is_some()) {
        let mut out = String::from("estimator,seed,trajectories,horizon,step,estimate,abs_error\n");
        for r in &result.records {
            for &(step, est) in r.curve.iter().flatten() {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    r.estimator,
                    r.seed,
                    r.trajectories,
                    r.horizon,
                    step,
                    fmt9(est),
                    fmt9((est - r.truth).abs())
                )
                .unwrap();
            }
        }
        let path = dir.join("curves.csv");
        std::fs::write(&path, out)?;
        written.push(path);
    }
    Ok(written)
}
