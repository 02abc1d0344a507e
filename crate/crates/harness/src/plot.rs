//! Minimal SVG views of result tables. The CSV files remain the data of record.

use std::fmt::Write as _;

use mbq_core::linalg::Matrix;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;

pub struct Series {
    pub label: String,
    pub color: &'static str,
    pub points: Vec<(f64, f64)>,
    /// Connect the points instead of drawing markers.
    pub line: bool,
}

pub const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#7f7f7f"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-300 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Scatter/line chart; `log_y` plots `log10 |y|` of nonzero values.
pub fn xy_plot(title: &str, x_label: &str, y_label: &str, series: &[Series], log_y: bool) -> String {
    let ty = |y: f64| if log_y { y.abs().log10() } else { y };
    let keep = |&(_, y): &(f64, f64)| !log_y || y != 0.0;
    let (x0, x1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = range(
        series
            .iter()
            .flat_map(|s| s.points.iter().filter(|p| keep(p)).map(|p| ty(p.1))),
    );
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (ty(y) - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 16.0,
        escape(x_label)
    );
    let y_text = if log_y {
        format!("log10 |{y_label}|")
    } else {
        y_label.to_string()
    };
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(&y_text)
    );
    for (v, anchor, x, y) in [
        (x0, "start", MARGIN, HEIGHT - MARGIN + 14.0),
        (x1, "end", WIDTH - MARGIN, HEIGHT - MARGIN + 14.0),
    ] {
        let _ = writeln!(out, r#"<text x="{x}" y="{y}" text-anchor="{anchor}">{v:.3}</text>"#);
    }
    for (v, y) in [(y0, HEIGHT - MARGIN), (y1, MARGIN + 10.0)] {
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{y}" text-anchor="end">{v:.3}</text>"#,
            MARGIN - 4.0
        );
    }
    for (i, s) in series.iter().enumerate() {
        let pts: Vec<(f64, f64)> = s
            .points
            .iter()
            .filter(|p| keep(p) && p.0.is_finite() && ty(p.1).is_finite())
            .map(|&(x, y)| (sx(x), sy(y)))
            .collect();
        if s.line {
            let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
            let _ = writeln!(
                out,
                r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
                s.color,
                path.join(" ")
            );
        } else {
            for (x, y) in pts {
                let _ = writeln!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="2.5" fill="{}"/>"#, s.color);
            }
        }
        let ly = MARGIN + 14.0 + 14.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{ly}" fill="{}">{}</text>"#,
            MARGIN + 8.0,
            s.color,
            escape(&s.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Grayscale image of `levels` (entries in `[0, 1]`, 0 black, 1 white).
pub fn heatmap(title: &str, levels: &Matrix) -> String {
    let size = (HEIGHT - 2.0 * MARGIN) / levels.rows().max(levels.cols()).max(1) as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{HEIGHT}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        HEIGHT / 2.0,
        escape(title)
    );
    for i in 0..levels.rows() {
        for j in 0..levels.cols() {
            let g = (levels[(i, j)].clamp(0.0, 1.0) * 255.0).round() as u8;
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{size:.2}" height="{size:.2}" fill="rgb({g},{g},{g})"/>"#,
                MARGIN + j as f64 * size,
                MARGIN + i as f64 * size
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_well_formed_documents() {
        let s = Series {
            label: "a<b".into(),
            color: PALETTE[0],
            points: vec![(0.0, 1.0), (1.0, 0.0), (2.0, f64::NAN)],
            line: true,
        };
        let svg = xy_plot("t", "x", "y", &[s], true);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a&lt;b"));
        let h = heatmap("h", &Matrix::identity(3));
        assert_eq!(h.matches("rgb(255,255,255)").count(), 3);
        assert_eq!(h.matches("rgb(0,0,0)").count(), 6);
    }
}
