//! Static SVG charts for sweep series and ablation tables.

use std::fmt::Write;

use crate::experiments::{AblationReport, SweepPoint};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 3] = ["#1f77b4", "#d62728", "#2ca02c"];

pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = write!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = write!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
}

/// Plot area: y in [0, 1] mapped to the inner rectangle.
fn y_axis(out: &mut String, y_label: &str) {
    let (top, bottom) = (MARGIN, HEIGHT - MARGIN);
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let y = bottom - v * (bottom - top);
        let _ = write!(
            out,
            r##"<line x1="{MARGIN}" x2="{}" y1="{y:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{v:.1}</text>"##,
            WIDTH - MARGIN,
            MARGIN - 6.0,
            y + 4.0
        );
    }
    let _ = write!(
        out,
        r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
}

fn legend(out: &mut String, labels: &[&str]) {
    for (i, label) in labels.iter().enumerate() {
        let x = WIDTH - MARGIN - 110.0;
        let y = MARGIN + 10.0 + 18.0 * i as f64;
        let _ = write!(
            out,
            r#"<rect x="{x}" y="{}" width="12" height="12" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            y - 10.0,
            COLORS[i % COLORS.len()],
            x + 18.0,
            y,
            escape(label)
        );
    }
}

/// Line chart of one or more series over a shared integer x axis, y in [0, 1].
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    y_axis(&mut out, y_label);
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let (x_min, x_max) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let (x_min, x_max) = if x_min.is_finite() { (x_min, x_max.max(x_min + 1.0)) } else { (0.0, 1.0) };
    let px = |x: f64| MARGIN + (x - x_min) / (x_max - x_min) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - y.clamp(0.0, 1.0) * (HEIGHT - 2.0 * MARGIN);
    let mut x = x_min.ceil();
    while x <= x_max {
        let _ = write!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{x}</text>"#,
            px(x),
            HEIGHT - MARGIN + 18.0
        );
        x += 1.0;
    }
    let _ = write!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = write!(
            out,
            r#"<g class="series" data-label="{}"><polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            escape(s.label),
            pts.join(" ")
        );
        for &(x, y) in &s.points {
            let _ = write!(out, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, px(x), py(y));
        }
        out.push_str("</g>");
    }
    legend(&mut out, &series.iter().map(|s| s.label).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// SSC and SS mIoU against the time slice.
pub fn sweep_chart(points: &[SweepPoint]) -> String {
    let series = [
        Series {
            label: "SSC",
            points: points.iter().map(|p| (p.t as f64, p.ssc_miou)).collect(),
        },
        Series {
            label: "SS",
            points: points.iter().map(|p| (p.t as f64, p.ss_miou)).collect(),
        },
    ];
    line_chart("Accuracy vs iterations", "t", "mIoU", &series)
}

/// Grouped bars (SS, SSC, SC) per ablation row.
pub fn ablation_chart(report: &AblationReport) -> String {
    let mut out = String::new();
    header(&mut out, "Ablation");
    y_axis(&mut out, "IoU");
    let n = report.rows.len().max(1) as f64;
    let group = (WIDTH - 2.0 * MARGIN) / n;
    let bar = group / 4.0;
    let scale = HEIGHT - 2.0 * MARGIN;
    for (g, row) in report.rows.iter().enumerate() {
        let x0 = MARGIN + g as f64 * group + bar / 2.0;
        for (i, v) in [row.ss_miou, row.ssc_miou, row.sc_iou].into_iter().enumerate() {
            let h = v.clamp(0.0, 1.0) * scale;
            let _ = write!(
                out,
                r#"<rect x="{:.1}" y="{:.1}" width="{bar:.1}" height="{h:.1}" fill="{}"/>"#,
                x0 + i as f64 * bar,
                HEIGHT - MARGIN - h,
                COLORS[i]
            );
        }
        let _ = write!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            x0 + 1.5 * bar,
            HEIGHT - MARGIN + 18.0,
            row.label
        );
    }
    legend(&mut out, &["SS", "SSC", "SC"]);
    out.push_str("</svg>\n");
    out
}
