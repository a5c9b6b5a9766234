//! CSV and SVG output for sweep results.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

use super::sweep::{Method, SweepResult, SweepRow};

pub const CSV_HEADER: [&str; 5] = ["N", "method", "delta", "miou", "wall_ms"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChartMetric {
    #[default]
    Delta,
    Miou,
}

impl ChartMetric {
    fn value(self, row: &SweepRow) -> Option<f64> {
        match self {
            ChartMetric::Delta => row.delta,
            ChartMetric::Miou => Some(row.miou),
        }
    }

    fn label(self) -> &'static str {
        match self {
            ChartMetric::Delta => "deviation",
            ChartMetric::Miou => "mIoU",
        }
    }
}

fn check_nonempty(result: &SweepResult) -> Result<()> {
    if result.rows.is_empty() {
        return Err(Error::contract("the sweep result has no rows"));
    }
    Ok(())
}

pub fn render_csv(result: &SweepResult) -> Result<Vec<u8>> {
    check_nonempty(result)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in &result.rows {
        w.write_record([
            r.n.to_string(),
            r.method.to_string(),
            r.delta.map(|d| format!("{d:.6}")).unwrap_or_default(),
            format!("{:.6}", r.miou),
            format!("{:.3}", r.wall_ms),
        ])
        .map_err(io)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

/// Line chart with the N values evenly spaced on the x axis and one
/// polyline per method.
pub fn render_svg(result: &SweepResult, metric: ChartMetric) -> Result<String> {
    check_nonempty(result)?;
    let mut ns: Vec<usize> = result.rows.iter().map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    let mut methods: Vec<Method> = Vec::new();
    for r in &result.rows {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    let values: Vec<f64> = result.rows.iter().filter_map(|r| metric.value(r)).collect();
    let (mut lo, mut hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if values.is_empty() {
        (lo, hi) = (0.0, 1.0);
    } else if hi - lo < 1e-12 {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let x_at = |n: usize| {
        let i = ns.iter().position(|&m| m == n).expect("collected above");
        MARGIN
            + if ns.len() == 1 {
                plot_w / 2.0
            } else {
                plot_w * i as f64 / (ns.len() - 1) as f64
            }
    };
    let y_at = |v: f64| MARGIN + plot_h * (hi - v) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
    let _ = writeln!(
        s,
        r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#
    );
    for &n in &ns {
        let x = x_at(n);
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" font-size="12" text-anchor="middle">{n}</text>"#,
            y0 + 18.0
        );
    }
    for (v, label) in [(lo, lo), (hi, hi)] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="end">{label:.3}</text>"#,
            x0 - 6.0,
            y_at(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-size="13" text-anchor="middle">N</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" font-size="13" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        metric.label()
    );
    for (k, &m) in methods.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let points: Vec<String> = result
            .rows
            .iter()
            .filter(|r| r.method == m)
            .filter_map(|r| {
                metric
                    .value(r)
                    .map(|v| format!("{:.2},{:.2}", x_at(r.n), y_at(v)))
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline data-method="{m}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        let ly = MARGIN + 16.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{ly:.2}" font-size="12" fill="{color}" text-anchor="end">{m}</text>"#,
            WIDTH - MARGIN - 4.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes the CSV table and the deviation chart.
pub fn emit_report(result: &SweepResult, csv_path: &Path, svg_path: &Path) -> Result<()> {
    let csv = render_csv(result)?;
    let svg = render_svg(result, ChartMetric::Delta)?;
    std::fs::write(csv_path, csv)?;
    std::fs::write(svg_path, svg)?;
    Ok(())
}
