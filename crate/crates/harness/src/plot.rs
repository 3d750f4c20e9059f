//! Static SVG line plots of RMSE against the swept variable.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{HarnessError, Result};
use crate::results::{summarize, write_atomic, ResultRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    RmseVsSweep,
    RmseVsDelta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    /// `(sweep value, RMSE x 100)` in sweep order.
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// RMSE series per (method, functional) for the listed methods.
pub fn rmse_series(rows: &[ResultRow], methods: &[&str]) -> Vec<Series> {
    let mut out: Vec<Series> = Vec::new();
    for c in summarize(rows) {
        if !methods.contains(&c.method.as_str()) {
            continue;
        }
        let Some(rmse) = c.rmse else { continue };
        let label = format!("{} ({})", c.method, c.functional);
        match out.iter_mut().find(|s| s.label == label) {
            Some(s) => s.points.push((c.sweep_value, rmse * 100.0)),
            None => out.push(Series {
                label,
                points: vec![(c.sweep_value, rmse * 100.0)],
            }),
        }
    }
    for s in &mut out {
        s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    out
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, lo + 0.5)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn render_svg(series: &[Series], title: &str, x_label: &str) -> Result<String> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(HarnessError::Usage("nothing to plot".into()));
    }
    let (x0, x1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (_, y1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let (y0, y1) = (0.0, y1 * 1.1);
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" data-x-range="{x0:e} {x1:e}" data-y-range="{y0:e} {y1:e}" data-area="{LEFT} {TOP} {pw} {ph}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{}</text>"#,
        LEFT + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{LEFT},{TOP} V{} H{}" fill="none" stroke="black"/>"#,
        TOP + ph,
        LEFT + pw
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="11">{}</text>"#,
            px(fx),
            TOP + ph + 18.0,
            trim(fx)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-family="sans-serif" font-size="11">{}</text>"#,
            LEFT - 6.0,
            py(fy) + 4.0,
            trim(fy)
        );
    }
    let _ = writeln!(
        s,
        r#"<text class="x-label" x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 18.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text class="y-label" x="18" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13" transform="rotate(-90 18 {})">RMSE x 100</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    for (k, ser) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.6},{:.6}", px(x), py(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline data-label="{}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            escape(&ser.label),
            pts.join(" ")
        );
        let ly = TOP + 10.0 + 18.0 * k as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 18.0
        );
        let _ = writeln!(
            s,
            r#"<text class="legend" x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#,
            lx + 24.0,
            ly + 4.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn trim(v: f64) -> String {
    let t = format!("{v:.3}");
    t.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Plot the RMSE curves of `methods`; nothing is written on error.
pub fn emit_plot(rows: &[ResultRow], kind: PlotKind, methods: &[&str], x_label: &str, path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(HarnessError::Usage("no rows to plot".into()));
    }
    if methods.is_empty() {
        return Err(HarnessError::Usage("empty method filter".into()));
    }
    let series = rmse_series(rows, methods);
    if series.is_empty() {
        return Err(HarnessError::Usage(format!("no plottable rows for methods {methods:?}")));
    }
    let title = match kind {
        PlotKind::RmseVsSweep => format!("RMSE against {x_label}"),
        PlotKind::RmseVsDelta => "RMSE under inflated nuisance error".to_string(),
    };
    let svg = render_svg(&series, &title, x_label)?;
    write_atomic(path, &svg)
}

fn attr<'a>(tag: &'a str, name: &str) -> Option<&'a str> {
    let key = format!("{name}=\"");
    let start = tag.find(&key)? + key.len();
    let len = tag[start..].find('"')?;
    Some(&tag[start..start + len])
}

fn numbers(s: &str) -> Option<Vec<f64>> {
    s.split_whitespace().map(|t| t.parse().ok()).collect()
}

/// Recover the series from an SVG written by [`render_svg`].
pub fn parse_svg(svg: &str) -> Result<Vec<Series>> {
    let bad = || HarnessError::Runtime("not a plot written by this tool".into());
    let root = svg.lines().find(|l| l.starts_with("<svg")).ok_or_else(bad)?;
    let xr = numbers(attr(root, "data-x-range").ok_or_else(bad)?).ok_or_else(bad)?;
    let yr = numbers(attr(root, "data-y-range").ok_or_else(bad)?).ok_or_else(bad)?;
    let area = numbers(attr(root, "data-area").ok_or_else(bad)?).ok_or_else(bad)?;
    if xr.len() != 2 || yr.len() != 2 || area.len() != 4 {
        return Err(bad());
    }
    let (left, top, pw, ph) = (area[0], area[1], area[2], area[3]);
    let mut out = Vec::new();
    for line in svg.lines().filter(|l| l.starts_with("<polyline")) {
        let label = attr(line, "data-label")
            .ok_or_else(bad)?
            .replace("&quot;", "\"")
            .replace("&gt;", ">")
            .replace("&lt;", "<")
            .replace("&amp;", "&");
        let mut points = Vec::new();
        for pair in attr(line, "points").ok_or_else(bad)?.split_whitespace() {
            let (a, b) = pair.split_once(',').ok_or_else(bad)?;
            let (sx, sy): (f64, f64) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
            let x = xr[0] + (sx - left) / pw * (xr[1] - xr[0]);
            let y = yr[0] + (top + ph - sy) / ph * (yr[1] - yr[0]);
            points.push((x, y));
        }
        out.push(Series { label, points });
    }
    Ok(out)
}
