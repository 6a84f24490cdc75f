//! Minimal hand-written SVG: a line chart and a token heatmap.

use std::fmt::Write as _;

/// Colour for a weight `t` in `[0, 1]`: linear from `#ffffff` to `#0000ff`.
pub fn ramp(t: f32) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let c = (255.0 * (1.0 - t)).round() as u8;
    format!("#{c:02x}{c:02x}ff")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const PALETTE: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// One polyline per series. Each series is `(name, [(x, y)])`.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, m) = (640.0, 400.0, 60.0);
    let points = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(out, r##"<rect width="{w}" height="{h}" fill="#ffffff"/>"##);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r##"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="#000000"/><line x1="{m}" y1="{m}" x2="{m}" y2="{b}" stroke="#000000"/>"##,
        b = h - m,
        r = w - m
    );
    for (v, pos) in [(x0, sx(x0)), (x1, sx(x1))] {
        let _ = writeln!(
            out,
            r#"<text x="{pos:.1}" y="{}" text-anchor="middle" font-size="11">{v:.2}</text>"#,
            h - m + 16.0
        );
    }
    for (v, pos) in [(y0, sy(y0)), (y1, sy(y1))] {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{pos:.1}" text-anchor="end" font-size="11">{v:.3}</text>"#,
            m - 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#,
        w / 2.0,
        h - 16.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(y_label)
    );
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"><title>{}</title></polyline>"#,
            coords.join(" "),
            escape(name)
        );
        let ly = m + 16.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{ly:.1}" font-size="12" fill="{color}">{}</text>"#,
            w - m - 100.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// A grid with one column per token and one row per named weight vector.
/// Each row is scaled by its own maximum before colouring.
pub fn heatmap(tokens: &[String], rows: &[(String, Vec<f32>)]) -> String {
    let (cell_w, cell_h, left, top) = (64.0, 28.0, 90.0, 40.0);
    let w = left + cell_w * tokens.len() as f64 + 10.0;
    let h = top + cell_h * rows.len() as f64 + 10.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(out, r##"<rect width="{w}" height="{h}" fill="#ffffff"/>"##);
    for (j, t) in tokens.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle" font-size="11">{}</text>"#,
            left + cell_w * (j as f64 + 0.5),
            top - 8.0,
            escape(t)
        );
    }
    for (i, (name, values)) in rows.iter().enumerate() {
        let y = top + cell_h * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{:.1}" text-anchor="end" font-size="11">{}</text>"#,
            left - 6.0,
            y + cell_h * 0.65,
            escape(name)
        );
        let max = values.iter().copied().fold(0.0f32, f32::max);
        for (j, &v) in values.iter().enumerate() {
            let t = if max > 0.0 { v / max } else { 0.0 };
            let _ = writeln!(
                out,
                r##"<rect x="{:.1}" y="{y:.1}" width="{cell_w}" height="{cell_h}" fill="{}" stroke="#cccccc"><title>{v:.3}</title></rect>"##,
                left + cell_w * j as f64,
                ramp(t)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}
