//! SVG line charts of per-task mean reward.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::metrics::MetricsRow;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// (task, points) in order of first appearance.
pub fn reward_series(rows: &[MetricsRow]) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut out: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for r in rows {
        let p = (r.iteration as f64, r.mean_reward);
        match out.iter_mut().find(|(t, _)| *t == r.task) {
            Some((_, pts)) => pts.push(p),
            None => out.push((r.task.clone(), vec![p])),
        }
    }
    out
}

fn span(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

pub fn reward_svg(rows: &[MetricsRow], title: &str) -> Result<String> {
    let series = reward_series(rows);
    if series.is_empty() {
        return Err(Error::InvalidArgument("no metrics rows to plot".into()));
    }
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("mean_reward at iteration {x}")));
        }
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let (x0, x1) = span(x0, x1);
    let (y0, y1) = span(y0, y1);
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let w = &mut s;
    let _ = writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(w, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        w,
        r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        w,
        r#"<path d="M{l} {t} L{l} {b} L{r} {b}" fill="none" stroke="black"/>"#
    );
    for (v, y) in [(y0, b), (y1, t)] {
        let _ = writeln!(
            w,
            r#"<text x="{}" y="{}" text-anchor="end">{v:.3}</text>"#,
            l - 4.0,
            y + 4.0
        );
    }
    for (v, x) in [(x0, l), (x1, r)] {
        let _ = writeln!(w, r#"<text x="{x}" y="{}" text-anchor="middle">{v}</text>"#, b + 16.0);
    }
    let _ = writeln!(
        w,
        r#"<text x="{}" y="{}" text-anchor="middle">iteration</text>"#,
        WIDTH / 2.0,
        HEIGHT - 10.0
    );
    for (i, (task, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let d: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            w,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            d.join(" ")
        );
        let ly = t + 14.0 * i as f64;
        let _ = writeln!(
            w,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            r - 110.0,
            r - 90.0
        );
        let _ = writeln!(w, r#"<text x="{}" y="{}">{}</text>"#, r - 85.0, ly + 4.0, escape(task));
    }
    let _ = writeln!(w, "</svg>");
    Ok(s)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
