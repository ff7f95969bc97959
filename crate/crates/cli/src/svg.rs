//! A bare-bones SVG line chart.

use std::fmt::Write as _;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 300.0;
const MARGIN: f64 = 40.0;

/// Polyline of `values` against their index, y from `y_min` to `y_max`.
pub fn line_chart(title: &str, values: &[f64], y_min: f64, y_max: f64) -> String {
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let span = (values.len().max(2) - 1) as f64;
    let mut points = String::new();
    for (i, v) in values.iter().enumerate() {
        let x = MARGIN + plot_w * i as f64 / span;
        let t = ((v - y_min) / (y_max - y_min)).clamp(0.0, 1.0);
        let y = MARGIN + plot_h * (1.0 - t);
        let _ = write!(points, "{x:.2},{y:.2} ");
    }
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{MARGIN}" y="{:.0}" font-family="sans-serif" font-size="14">{}</text>"#,
        MARGIN - 15.0,
        escape(title)
    );
    let (x0, y0, x1, y1) = (MARGIN, MARGIN, MARGIN + plot_w, MARGIN + plot_h);
    let _ = writeln!(
        svg,
        r#"<polyline points="{x0},{y0} {x0},{y1} {x1},{y1}" fill="none" stroke="black"/>"#
    );
    for (label, y) in [(y_max, y0), (y_min, y1)] {
        let _ = writeln!(
            svg,
            r#"<text x="{:.0}" y="{y:.0}" font-family="sans-serif" font-size="11" text-anchor="end">{label}</text>"#,
            MARGIN - 5.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{x1:.0}" y="{:.0}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"#,
        y1 + 15.0,
        values.len()
    );
    let _ = writeln!(
        svg,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="1"/>"#,
        points.trim_end()
    );
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
