//! `plot`: hand-written SVG line charts of a metrics CSV.

use std::collections::BTreeMap;
use std::fmt::Write;

use anyhow::{bail, Result};
use mfdiff_core::eval::MetricRecord;
use mfdiff_core::stats;

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Axes {
    pub log_x: bool,
    pub log_y: bool,
}

/// Mean value per `n` for every `(name, split)` series matching `names`
/// (all series when `names` is empty).
pub fn series(rows: &[MetricRecord], names: &[String]) -> BTreeMap<String, Vec<(f64, f64)>> {
    let mut acc: BTreeMap<String, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in rows.iter().filter(|r| names.is_empty() || names.contains(&r.name)) {
        let label = if r.split.is_empty() { r.name.clone() } else { format!("{} {}", r.name, r.split) };
        acc.entry(label).or_default().entry(r.n).or_default().push(r.value);
    }
    acc.into_iter().map(|(k, v)| (k, v.into_iter().map(|(n, ys)| (n as f64, stats::mean(&ys))).collect())).collect()
}

fn tx(v: f64, log: bool) -> f64 {
    if log { v.log10() } else { v }
}

pub fn render_svg(data: &BTreeMap<String, Vec<(f64, f64)>>, axes: Axes, title: &str) -> Result<String> {
    let pts: Vec<(f64, f64)> = data
        .values()
        .flatten()
        .filter(|(x, y)| (!axes.log_x || *x > 0.0) && (!axes.log_y || *y > 0.0))
        .map(|&(x, y)| (tx(x, axes.log_x), tx(y, axes.log_y)))
        .collect();
    if pts.is_empty() {
        bail!("nothing to plot");
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 == x0 {
        x1 += 1.0;
        x0 -= 1.0;
    }
    if y1 == y0 {
        y1 += 1.0;
        y0 -= 1.0;
    }
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let py = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#)?;
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#)?;
    writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title))?;
    let (l, b, r, t) = (MARGIN, H - MARGIN, W - MARGIN, MARGIN);
    writeln!(s, r#"<path d="M{l} {t} L{l} {b} L{r} {b}" stroke="black" fill="none"/>"#)?;
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let lx = if axes.log_x { format!("1e{xv:.2}") } else { format!("{xv:.3}") };
        let ly = if axes.log_y { format!("1e{yv:.2}") } else { format!("{yv:.3}") };
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{lx}</text>"#, px(xv), b + 18.0)?;
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{ly}</text>"#, l - 6.0, py(yv) + 4.0)?;
    }
    for (k, (label, points)) in data.iter().enumerate() {
        let c = COLORS[k % COLORS.len()];
        let path: Vec<String> = points
            .iter()
            .filter(|(x, y)| (!axes.log_x || *x > 0.0) && (!axes.log_y || *y > 0.0))
            .map(|&(x, y)| format!("{:.1} {:.1}", px(tx(x, axes.log_x)), py(tx(y, axes.log_y))))
            .collect();
        if path.is_empty() {
            continue;
        }
        writeln!(s, r#"<path d="M{}" stroke="{c}" fill="none" stroke-width="1.5"/>"#, path.join(" L"))?;
        for p in &path {
            let (cx, cy) = p.split_once(' ').expect("pair");
            writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{c}"/>"#)?;
        }
        let ly = t + 16.0 * k as f64;
        writeln!(s, r#"<text x="{:.1}" y="{ly:.1}" fill="{c}">{}</text>"#, r - 150.0, escape(label))?;
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
