//! Minimal SVG charts: line charts and scatter plots.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 48.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

pub fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series {
            name: name.into(),
            points,
        }
    }
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit<'a>(points: impl Iterator<Item = &'a (f64, f64)>) -> Frame {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in points {
            if !(x.is_finite() && y.is_finite()) {
                continue;
            }
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if x0 > x1 {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x1 - x0 < 1e-12 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y1 - y0 < 1e-12 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        Frame { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN_L + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - MARGIN_L - MARGIN_R)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_B - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(s: &mut String, title: &str, frame: &Frame, x_label: &str, y_label: &str) {
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        escape(title)
    );
    let (left, right, top, bottom) = (MARGIN_L, WIDTH - MARGIN_R, MARGIN_T, HEIGHT - MARGIN_B);
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        right - left,
        bottom - top
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = frame.x0 + f * (frame.x1 - frame.x0);
        let yv = frame.y0 + f * (frame.y1 - frame.y0);
        let (xp, yp) = (frame.px(xv), frame.py(yv));
        let _ = writeln!(s, r#"<line x1="{xp:.2}" y1="{bottom}" x2="{xp:.2}" y2="{}" stroke="black"/>"#, bottom + 4.0);
        let _ = writeln!(s, r#"<text x="{xp:.2}" y="{}" text-anchor="middle">{}</text>"#, bottom + 17.0, tick(xv));
        let _ = writeln!(s, r#"<line x1="{}" y1="{yp:.2}" x2="{left}" y2="{yp:.2}" stroke="black"/>"#, left - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, left - 6.0, yp + 4.0, tick(yv));
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (left + right) / 2.0,
        HEIGHT - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        (top + bottom) / 2.0,
        escape(y_label)
    );
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 || (v != 0.0 && v.abs() < 0.01) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}").trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, n) in names.iter().enumerate() {
        let y = MARGIN_T + 14.0 + 18.0 * i as f64;
        let x = WIDTH - MARGIN_R + 12.0;
        let _ = writeln!(s, r#"<rect x="{x}" y="{}" width="12" height="12" fill="{}"/>"#, y - 10.0, color(i));
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, x + 18.0, escape(n));
    }
}

/// Line chart of one or more series. Non-finite points are skipped.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let frame = Frame::fit(series.iter().flat_map(|s| s.points.iter()));
    let mut s = String::new();
    header(&mut s, title, &frame, x_label, y_label);
    for (i, ser) in series.iter().enumerate() {
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            color(i),
            pts.join(" ")
        );
        for p in &pts {
            let (x, y) = p.split_once(',').expect("formatted point");
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="2.5" fill="{}"/>"#, color(i));
        }
    }
    legend(&mut s, &series.iter().map(|x| x.name.as_str()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Scatter plot; each group gets its own color.
pub fn scatter(title: &str, groups: &[Series]) -> String {
    let frame = Frame::fit(groups.iter().flat_map(|s| s.points.iter()));
    let mut s = String::new();
    header(&mut s, title, &frame, "x0", "x1");
    for (i, g) in groups.iter().enumerate() {
        for &(x, y) in &g.points {
            if x.is_finite() && y.is_finite() {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="1.6" fill="{}" fill-opacity="0.6"/>"#,
                    frame.px(x),
                    frame.py(y),
                    color(i)
                );
            }
        }
    }
    legend(&mut s, &groups.iter().map(|x| x.name.as_str()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_chart_is_well_formed() {
        let svg = line_chart(
            "F1 <vs> openness",
            "openness",
            "F1",
            &[Series::new("a", vec![(0.0, 0.5), (0.2, 0.7)]), Series::new("b", vec![(0.1, f64::NAN)])],
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("&lt;vs&gt;"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn scatter_counts_points() {
        let svg = scatter("s", &[Series::new("g", vec![(0.0, 0.0), (1.0, 1.0), (0.5, 0.5)])]);
        assert_eq!(svg.matches("<circle").count(), 3);
    }

    #[test]
    fn degenerate_ranges() {
        let svg = line_chart("t", "x", "y", &[Series::new("c", vec![(1.0, 2.0)])]);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }
}
