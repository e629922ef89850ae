//! Minimal standalone SVG charts. Output depends only on the input values,
//! so identical CSVs render to identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::HarnessError;
use crate::metrics::{read_comparison_csv, read_report_csv, ComparisonRow, ReportRow};

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

fn header(title: &str, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + (W - LEFT - RIGHT) / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{y}" text-anchor="middle" transform="rotate(-90 16 {y})">{}</text>"#,
        escape(y_label),
        y = TOP + (H - TOP - BOTTOM) / 2.0
    );
    s
}

fn axes(s: &mut String, (x0, x1): (f64, f64), (y0, y1): (f64, f64), x_ticks: &[f64]) {
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        TOP + ph,
        LEFT + pw,
        TOP + ph
    );
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#,
        TOP + ph
    );
    for i in 0..=4 {
        let v = y0 + (y1 - y0) * i as f64 / 4.0;
        let y = TOP + ph - ph * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/>"##,
            LEFT + pw
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.1}</text>"#,
            LEFT - 6.0,
            y + 4.0
        );
    }
    for &v in x_ticks {
        let x = LEFT + if x1 > x0 { (v - x0) / (x1 - x0) * pw } else { pw / 2.0 };
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{v}</text>"#,
            TOP + ph + 18.0
        );
    }
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 10.0 + 20.0 * i as f64;
        let x = W - RIGHT + 15.0;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{:.2}" width="12" height="12" fill="{}"/>"#,
            y - 10.0,
            PALETTE[i % PALETTE.len()]
        );
        let _ = writeln!(s, r#"<text x="{}" y="{y:.2}">{}</text>"#, x + 18.0, escape(name));
    }
}

/// One polyline with markers per series.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], x_ticks: Option<&[f64]>) -> String {
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).chain([0.0]));
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;
    let mut s = header(title, x_label, y_label);
    let default_ticks: Vec<f64> = (0..=4)
        .map(|i| ((x0 + (x1 - x0) * i as f64 / 4.0) * 10.0).round() / 10.0)
        .collect();
    axes(&mut s, (x0, x1), (y0, y1), x_ticks.unwrap_or(&default_ticks));
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        if ser.points.len() <= 60 {
            for &(x, y) in &ser.points {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                    px(x),
                    py(y)
                );
            }
        }
    }
    let names: Vec<&str> = series.iter().map(|s| s.name.as_str()).collect();
    legend(&mut s, &names);
    s.push_str("</svg>\n");
    s
}

/// Stacked bars, one per category, one segment per component.
pub fn stacked_bars(
    title: &str,
    y_label: &str,
    categories: &[String],
    components: &[&str],
    values: &[Vec<f64>],
) -> String {
    let totals: Vec<f64> = values.iter().map(|v| v.iter().sum()).collect();
    let (_, top) = bounds(totals.iter().copied().chain([0.0]));
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let mut s = header(title, "policy", y_label);
    axes(&mut s, (0.0, 1.0), (0.0, top), &[]);
    let slot = pw / categories.len().max(1) as f64;
    for (i, cat) in categories.iter().enumerate() {
        let x = LEFT + slot * i as f64 + slot * 0.2;
        let mut base = 0.0;
        for (j, &v) in values[i].iter().enumerate() {
            let y = TOP + ph - (base + v) / top * ph;
            let h = v / top * ph;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{h:.2}" fill="{}"/>"#,
                slot * 0.6,
                PALETTE[j % PALETTE.len()]
            );
            base += v;
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            x + slot * 0.3,
            TOP + ph + 18.0,
            escape(cat)
        );
    }
    legend(&mut s, components);
    s.push_str("</svg>\n");
    s
}

fn comparison_charts(rows: &[ComparisonRow]) -> Vec<(&'static str, String)> {
    let mut dssr: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    let mut lat: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.policy.as_str()) {
            order.push(&r.policy);
        }
        if let Some(d) = r.mean_dssr {
            dssr.entry(&r.policy).or_default().push((r.speed_bucket_mps as f64, d));
        }
        lat.entry(&r.policy)
            .or_default()
            .push((r.speed_bucket_mps as f64, r.mean_latency));
    }
    let ticks: Vec<f64> = {
        let mut t: Vec<f64> = rows.iter().map(|r| r.speed_bucket_mps as f64).collect();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    };
    let to_series = |m: &BTreeMap<&str, Vec<(f64, f64)>>| -> Vec<Series> {
        order
            .iter()
            .filter_map(|p| {
                m.get(p).map(|pts| Series {
                    name: p.to_string(),
                    points: pts.clone(),
                })
            })
            .collect()
    };
    vec![
        (
            "dssr_vs_speed.svg",
            line_chart(
                "Sequencing success vs speed",
                "ego speed (m/s)",
                "DSSR (%)",
                &to_series(&dssr),
                Some(&ticks),
            ),
        ),
        (
            "latency_vs_speed.svg",
            line_chart(
                "Latency vs speed",
                "ego speed (m/s)",
                "mean latency (ms)",
                &to_series(&lat),
                Some(&ticks),
            ),
        ),
    ]
}

fn report_charts(rows: &[ReportRow]) -> Vec<(&'static str, String)> {
    let mut order: Vec<&str> = Vec::new();
    let mut sums: BTreeMap<&str, ([f64; 3], usize)> = BTreeMap::new();
    let mut timeline: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    let first_seed = rows[0].seed;
    for r in rows {
        if !order.contains(&r.policy.as_str()) {
            order.push(&r.policy);
        }
        let e = sums.entry(&r.policy).or_default();
        e.0[0] += r.sequencing_ms;
        e.0[1] += r.connection_ms;
        e.0[2] += r.prediction_ms;
        e.1 += 1;
        if r.seed == first_seed {
            timeline
                .entry(&r.policy)
                .or_default()
                .push((r.cycle as f64, r.latency_ms));
        }
    }
    let categories: Vec<String> = order.iter().map(|s| s.to_string()).collect();
    let values: Vec<Vec<f64>> = order
        .iter()
        .map(|p| {
            let (s, n) = sums[p];
            s.iter().map(|v| v / n as f64).collect()
        })
        .collect();
    let series: Vec<Series> = order
        .iter()
        .map(|p| Series {
            name: p.to_string(),
            points: timeline.get(p).cloned().unwrap_or_default(),
        })
        .collect();
    vec![
        (
            "latency_breakdown.svg",
            stacked_bars(
                "Mean latency breakdown",
                "ms",
                &categories,
                &["sequencing", "connection", "prediction"],
                &values,
            ),
        ),
        (
            "latency_timeline.svg",
            line_chart("Latency per cycle", "cycle", "latency (ms)", &series, None),
        ),
    ]
}

/// Renders charts for whatever `report.csv` / `comparison.csv` exist in
/// `in_dir` and writes them to `out_dir`.
pub fn emit_plots(in_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let io = |path: &Path| {
        let p = path.display().to_string();
        move |source| HarnessError::Io { path: p, source }
    };
    let comparison = in_dir.join("comparison.csv");
    let report = in_dir.join("report.csv");
    let mut charts = Vec::new();
    if comparison.exists() {
        let text = std::fs::read(&comparison).map_err(io(&comparison))?;
        let rows =
            read_comparison_csv(&text[..]).map_err(|e| HarnessError::Plot(format!("{}: {e}", comparison.display())))?;
        charts.extend(comparison_charts(&rows));
    }
    if report.exists() {
        let text = std::fs::read(&report).map_err(io(&report))?;
        let rows = read_report_csv(&text[..]).map_err(|e| HarnessError::Plot(format!("{}: {e}", report.display())))?;
        charts.extend(report_charts(&rows));
    }
    if charts.is_empty() {
        return Err(HarnessError::Plot(format!(
            "no report.csv or comparison.csv in {}",
            in_dir.display()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut written = Vec::new();
    for (name, svg) in charts {
        let path = out_dir.join(name);
        std::fs::write(&path, svg).map_err(io(&path))?;
        written.push(path);
    }
    Ok(written)
}
