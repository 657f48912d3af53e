//! Minimal static SVG charts.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        MARGIN + (v - self.x0) / (self.x1 - self.x0).max(1e-12) * (WIDTH - 2.0 * MARGIN)
    }

    fn y(&self, v: f64) -> f64 {
        HEIGHT - MARGIN - (v - self.y0) / (self.y1 - self.y0).max(1e-12) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn header(title: &str, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    s
}

fn axes(s: &mut String, f: &Frame) {
    let (l, r) = (MARGIN, WIDTH - MARGIN);
    let (t, b) = (MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        s,
        r#"<path d="M{l} {t} L{l} {b} L{r} {b}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let v = f.y0 + (f.y1 - f.y0) * k as f64 / 4.0;
        let y = f.y(v);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
            l - 6.0,
            y + 4.0,
            tick(v)
        );
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == 0.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.4}")
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

/// Line chart of named series over a shared integer x axis.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(&str, Vec<f64>)]) -> String {
    let values = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (y0, y1) = if lo.is_finite() { padded(lo, hi) } else { (0.0, 1.0) };
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let f = Frame {
        x0: 0.0,
        x1: n.saturating_sub(1).max(1) as f64,
        y0,
        y1,
    };
    let mut s = header(title, x_label, y_label);
    axes(&mut s, &f);
    for (k, (name, values)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, v)| format!("{:.1},{:.1}", f.x(i as f64), f.y(*v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            WIDTH - MARGIN - 120.0,
            MARGIN + 16.0 * k as f64,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Dots at `mean` with bars spanning `mean ± std`, one per label.
pub fn error_bars(title: &str, y_label: &str, labels: &[String], mean: &[f64], std: &[f64]) -> String {
    let lo = mean.iter().zip(std).map(|(m, s)| m - s).fold(f64::INFINITY, f64::min);
    let hi = mean.iter().zip(std).map(|(m, s)| m + s).fold(f64::NEG_INFINITY, f64::max);
    let (y0, y1) = if lo.is_finite() { padded(lo.min(0.0), hi) } else { (0.0, 1.0) };
    let f = Frame {
        x0: -0.5,
        x1: mean.len() as f64 - 0.5,
        y0,
        y1,
    };
    let mut s = header(title, "", y_label);
    axes(&mut s, &f);
    for (i, ((m, sd), label)) in mean.iter().zip(std).zip(labels).enumerate() {
        let x = f.x(i as f64);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="{}"/>"#,
            f.y(m - sd),
            f.y(m + sd),
            COLORS[0]
        );
        let _ = writeln!(
            s,
            r#"<circle cx="{x:.1}" cy="{:.1}" r="3" fill="{}"/>"#,
            f.y(*m),
            COLORS[0]
        );
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="end" transform="rotate(-45 {x:.1} {:.1})" font-size="10">{}</text>"#,
            HEIGHT - MARGIN + 12.0,
            HEIGHT - MARGIN + 12.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}
