//! Minimal SVG line plots of IC and novelty curves.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// One polyline per series over a shared x axis (seconds). Vertical dashed
/// lines mark `markers`.
pub fn line_plot_svg(title: &str, frame_rate: f64, series: &[(&str, &[f64])], markers: &[f64]) -> String {
    let (w, h, pad) = (900.0, 300.0, 40.0);
    let n = series.iter().map(|s| s.1.len()).max().unwrap_or(0).max(2);
    let finite = series.iter().flat_map(|s| s.1.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0).max(-1.0), lo.max(0.0) + 1.0) };
    let x_max = (n - 1) as f64 / frame_rate;
    let px = |x: f64| pad + (w - 2.0 * pad) * x / x_max;
    let py = |y: f64| h - pad - (h - 2.0 * pad) * (y - lo) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{pad}" y="16">{}</text>"#, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{pad},{} H{} M{pad},{} V{}" stroke="black" fill="none"/>"#,
        h - pad,
        w - pad,
        h - pad,
        pad
    );
    let _ = writeln!(s, r#"<text x="{pad}" y="{}">0 s</text>"#, h - pad + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{x_max:.1} s</text>"#, w - pad, h - pad + 14.0);
    let _ = writeln!(s, r#"<text x="2" y="{}">{hi:.3}</text>"#, pad);
    let _ = writeln!(s, r#"<text x="2" y="{}">{lo:.3}</text>"#, h - pad);
    for &m in markers {
        let x = px(m);
        let _ = writeln!(s, r##"<line x1="{x:.2}" y1="{pad}" x2="{x:.2}" y2="{}" stroke="#888" stroke-dasharray="4 3"/>"##, h - pad);
    }
    for (k, (name, ys)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = ys
            .iter()
            .enumerate()
            .filter(|(_, y)| y.is_finite())
            .map(|(i, &y)| format!("{:.2},{:.2}", px(i as f64 / frame_rate), py(y)))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="1.2"/>"#, pts.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            w - pad - 150.0,
            pad + 14.0 * k as f64,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn write_svg(path: &Path, svg: &str) -> Result<()> {
    std::fs::write(path, svg)?;
    Ok(())
}
