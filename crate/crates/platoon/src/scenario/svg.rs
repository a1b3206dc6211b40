//! Minimal self-contained SVG line charts.

use std::fmt::Write;

const WIDTH: f64 = 900.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 90.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const MAX_POINTS: usize = 1500;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

pub struct Series<'a> {
    pub label: String,
    pub values: &'a [f64],
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - TOP - BOTTOM)
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    padded(values, 0.05)
}

fn padded(values: impl Iterator<Item = f64>, pad: f64) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 1.0, hi + 1.0);
    }
    let pad = pad * (hi - lo);
    (lo - pad, hi + pad)
}

fn header(out: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, WIDTH / 2.0, escape(title));
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + (WIDTH - LEFT - RIGHT) / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="18" y="{y}" text-anchor="middle" transform="rotate(-90 18 {y})">{}</text>"#,
        escape(y_label),
        y = TOP + (HEIGHT - TOP - BOTTOM) / 2.0
    );
}

fn axes(out: &mut String, f: &Frame, y_ticks: &[(f64, String)]) {
    let (l, r, t, b) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);
    let _ = writeln!(out, r#"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="black"/>"#, r - l, b - t);
    for k in 0..=5 {
        let x = f.x0 + (f.x1 - f.x0) * k as f64 / 5.0;
        let px = f.px(x);
        let _ = writeln!(out, r##"<line x1="{px:.2}" y1="{t}" x2="{px:.2}" y2="{b}" stroke="#dddddd"/>"##);
        let _ = writeln!(out, r#"<text x="{px:.2}" y="{}" text-anchor="middle">{}</text>"#, b + 16.0, tick(x));
    }
    for (y, label) in y_ticks {
        let py = f.py(*y);
        let _ = writeln!(out, r##"<line x1="{l}" y1="{py:.2}" x2="{r}" y2="{py:.2}" stroke="#dddddd"/>"##);
        let _ = writeln!(out, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, l - 6.0, py + 4.0, escape(label));
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn polyline(out: &mut String, f: &Frame, times: &[f64], values: &[f64], color: &str, step: bool) {
    let stride = times.len().div_ceil(MAX_POINTS).max(1);
    let mut pts = String::new();
    let mut prev_y: Option<f64> = None;
    let push = |x: f64, y: f64, pts: &mut String| {
        let _ = write!(pts, "{:.2},{:.2} ", f.px(x), f.py(y));
    };
    for (k, (&x, &y)) in times.iter().zip(values).enumerate() {
        let last = k + 1 == times.len();
        if step {
            // Step charts keep every level change.
            if prev_y != Some(y) {
                if let Some(py) = prev_y {
                    push(x, py, &mut pts);
                }
                push(x, y, &mut pts);
                prev_y = Some(y);
            } else if last {
                push(x, y, &mut pts);
            }
        } else if k % stride == 0 || last {
            if y.is_finite() {
                push(x, y, &mut pts);
            }
        }
    }
    let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.trim_end());
}

fn legend(out: &mut String, labels: &[String]) {
    for (k, label) in labels.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * k as f64;
        let x = WIDTH - RIGHT + 12.0;
        let color = COLORS[k % COLORS.len()];
        let _ = writeln!(out, r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/>"#, x + 20.0);
        let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, x + 26.0, y + 4.0, escape(label));
    }
}

/// One line per series over a shared time axis.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, times: &[f64], series: &[Series<'_>]) -> String {
    let mut out = String::new();
    header(&mut out, title, x_label, y_label);
    let (x0, x1) = padded(times.iter().copied(), 0.0);
    let (y0, y1) = range(series.iter().flat_map(|s| s.values.iter().copied()));
    let f = Frame { x0, x1, y0, y1 };
    let ticks: Vec<(f64, String)> = (0..=5)
        .map(|k| {
            let y = y0 + (y1 - y0) * k as f64 / 5.0;
            (y, tick(y))
        })
        .collect();
    axes(&mut out, &f, &ticks);
    for (k, s) in series.iter().enumerate() {
        polyline(&mut out, &f, times, s.values, COLORS[k % COLORS.len()], false);
    }
    legend(&mut out, &series.iter().map(|s| s.label.clone()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Piecewise-constant signal over named levels, in order of first use.
pub fn step_chart(title: &str, x_label: &str, times: &[f64], levels: &[String]) -> String {
    let mut names: Vec<&str> = Vec::new();
    for l in levels {
        if !names.contains(&l.as_str()) {
            names.push(l);
        }
    }
    let values: Vec<f64> = levels
        .iter()
        .map(|l| names.iter().position(|n| n == l).unwrap_or(0) as f64)
        .collect();
    let mut out = String::new();
    header(&mut out, title, x_label, "active phase");
    let (x0, x1) = padded(times.iter().copied(), 0.0);
    let f = Frame { x0, x1, y0: -0.5, y1: names.len().max(1) as f64 - 0.5 };
    let ticks: Vec<(f64, String)> = names.iter().enumerate().map(|(k, n)| (k as f64, n.to_string())).collect();
    axes(&mut out, &f, &ticks);
    polyline(&mut out, &f, times, &values, COLORS[0], true);
    out.push_str("</svg>\n");
    out
}
