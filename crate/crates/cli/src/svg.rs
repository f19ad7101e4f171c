//! Static SVG line plots of mode-of-variation bundles.

use std::fmt::Write;

use sltraj::anomaly::PlotBundle;

const WIDTH: f64 = 640.0;
const PANEL: f64 = 220.0;
const PAD: f64 = 36.0;

struct Series<'a> {
    dim: usize,
    role: &'a str,
    points: Vec<(f64, f64)>,
}

fn collect(bundle: &PlotBundle) -> Vec<Series<'_>> {
    let mut out: Vec<Series> = Vec::new();
    for r in &bundle.rows {
        match out.last_mut() {
            Some(s) if s.dim == r.dim && s.role == r.role && s.points.last().is_some_and(|p| p.0 < r.t) => s.points.push((r.t, r.value)),
            _ => out.push(Series { dim: r.dim, role: &r.role, points: vec![(r.t, r.value)] }),
        }
    }
    out
}

pub fn render(bundle: &PlotBundle, title: &str) -> String {
    let series = collect(bundle);
    let dims = series.iter().map(|s| s.dim + 1).max().unwrap_or(1);
    let (t0, t1) = bundle.rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r.t), b.max(r.t)));
    let span = if t1 > t0 { t1 - t0 } else { 1.0 };
    let x = |t: f64| PAD + (t - t0) / span * (WIDTH - 2.0 * PAD);
    let height = PAD + dims as f64 * PANEL;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{PAD}" y="20" font-family="sans-serif" font-size="13">{}</text>"#, escape(title));
    for d in 0..dims {
        let top = PAD + d as f64 * PANEL;
        let bottom = top + PANEL - PAD;
        let (lo, hi) = bundle
            .rows
            .iter()
            .filter(|r| r.dim == d)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r.value), b.max(r.value)));
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 1.0, lo + 1.0) };
        let y = |v: f64| bottom - (v - lo) / (hi - lo) * (bottom - top);
        for &(_, a, b, flagged) in &bundle.windows {
            if !flagged {
                continue;
            }
            let (a, b) = (a.max(t0), b.min(t1));
            if b > a {
                let _ = writeln!(s, r##"<rect x="{:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="#f4c7c3" opacity="0.6"/>"##, x(a), x(b) - x(a), bottom - top);
            }
        }
        let _ = writeln!(s, r#"<rect x="{PAD}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black" stroke-width="0.5"/>"#, WIDTH - 2.0 * PAD, bottom - top);
        let _ = writeln!(s, r#"<text x="4" y="{:.2}" font-family="sans-serif" font-size="11">d{}</text>"#, top + 12.0, d + 1);
        // cohort first so mean and subject draw on top
        for role in ["cohort", "mean", "subject"] {
            let (stroke, w, op) = match role {
                "cohort" => ("#9e9e9e", 0.8, 0.5),
                "mean" => ("#000000", 2.0, 1.0),
                _ => ("#c62828", 2.0, 1.0),
            };
            for se in series.iter().filter(|se| se.dim == d && se.role == role) {
                let pts: Vec<String> = se.points.iter().map(|&(t, v)| format!("{:.2},{:.2}", x(t), y(v))).collect();
                let _ = writeln!(s, r#"<polyline fill="none" stroke="{stroke}" stroke-width="{w}" stroke-opacity="{op}" points="{}"/>"#, pts.join(" "));
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
