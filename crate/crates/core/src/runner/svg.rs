// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal static SVG charts.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 140.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

const COLORS: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf", "#393b79", "#637939",
];

pub struct LineSeries {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Y range with headroom; a constant range is widened around its value.
fn y_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.5 };
        return (lo - pad, hi + pad);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn header(out: &mut String, title: &str) {
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        out,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    )
    .unwrap();
}

fn axes(out: &mut String, x_label: &str, y_label: &str, (lo, hi): (f64, f64)) {
    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, HEIGHT - BOTTOM, TOP);
    writeln!(
        out,
        r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#
    )
    .unwrap();
    writeln!(
        out,
        r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#
    )
    .unwrap();
    for (v, y) in [(lo, y0), (hi, y1)] {
        writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#,
            x0 - 4.0,
            y + 4.0
        )
        .unwrap();
    }
    writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    )
    .unwrap();
}

fn legend(out: &mut String, labels: &[&str]) {
    for (i, label) in labels.iter().enumerate() {
        let y = TOP + 16.0 * i as f64;
        let x = WIDTH - RIGHT + 12.0;
        writeln!(
            out,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/>"#,
            y - 9.0,
            COLORS[i % COLORS.len()]
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{}" y="{y}">{}</text>"#,
            x + 14.0,
            escape(label)
        )
        .unwrap();
    }
}

fn sy(v: f64, (lo, hi): (f64, f64)) -> f64 {
    let (y0, y1) = (HEIGHT - BOTTOM, TOP);
    y0 - (v - lo) / (hi - lo) * (y0 - y1)
}

/// Lines over x in [0, 1].
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[LineSeries]) -> String {
    let range = y_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, x_label, y_label, range);
    let (x0, x1) = (LEFT, WIDTH - RIGHT);
    writeln!(
        out,
        r#"<text x="{x0}" y="{}" text-anchor="middle">0</text>"#,
        HEIGHT - BOTTOM + 16.0
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="{x1}" y="{}" text-anchor="middle">1</text>"#,
        HEIGHT - BOTTOM + 16.0
    )
    .unwrap();
    for (i, s) in series.iter().enumerate() {
        let points: Vec<String> = s
            .points
            .iter()
            .map(|(x, y)| format!("{:.2},{:.2}", x0 + x * (x1 - x0), sy(*y, range)))
            .collect();
        writeln!(
            out,
            r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
            COLORS[i % COLORS.len()],
            points.join(" ")
        )
        .unwrap();
    }
    legend(
        &mut out,
        &series.iter().map(|s| s.label.as_str()).collect::<Vec<_>>(),
    );
    out.push_str("</svg>\n");
    out
}

/// Grouped bars: `values[g][s]` is series `s` in group `g`.
pub fn bar_chart(
    title: &str,
    y_label: &str,
    groups: &[String],
    series: &[String],
    values: &[Vec<Option<f64>>],
) -> String {
    let max = values
        .iter()
        .flatten()
        .flatten()
        .copied()
        .fold(0.0, f64::max);
    let range = (0.0, if max > 0.0 { max * 1.05 } else { 1.0 });
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, "", y_label, range);
    let (x0, x1) = (LEFT, WIDTH - RIGHT);
    let group_w = (x1 - x0) / groups.len().max(1) as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    for (g, name) in groups.iter().enumerate() {
        let gx = x0 + g as f64 * group_w + group_w * 0.1;
        for (s, v) in values[g].iter().enumerate() {
            let Some(v) = v else { continue };
            let top = sy(*v, range);
            writeln!(
                out,
                r#"<rect x="{:.2}" y="{top:.2}" width="{bar_w:.2}" height="{:.2}" fill="{}"/>"#,
                gx + s as f64 * bar_w,
                HEIGHT - BOTTOM - top,
                COLORS[s % COLORS.len()]
            )
            .unwrap();
        }
        writeln!(
            out,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            gx + group_w * 0.4,
            HEIGHT - BOTTOM + 16.0,
            escape(name)
        )
        .unwrap();
    }
    legend(
        &mut out,
        &series.iter().map(String::as_str).collect::<Vec<_>>(),
    );
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_series_is_flat() {
        let s = LineSeries {
            label: "de".into(),
            points: (0..5).map(|i| (i as f64 / 4.0, 0.7)).collect(),
        };
        let svg = line_chart("t", "relative depth", "S", &[s]);
        let poly = svg.lines().find(|l| l.starts_with("<polyline")).unwrap();
        let pts = poly
            .split("points=\"")
            .nth(1)
            .unwrap()
            .trim_end_matches("\"/>");
        let ys: Vec<&str> = pts
            .split(' ')
            .map(|p| p.split(',').nth(1).unwrap())
            .collect();
        assert!(ys.windows(2).all(|w| w[0] == w[1]));
        // The flat line sits mid-height, i.e. at its own value.
        let y: f64 = ys[0].parse().unwrap();
        assert!((y - (TOP + (HEIGHT - BOTTOM - TOP) / 2.0)).abs() < 0.01);
        assert!(svg.contains(">0.35<") && svg.contains(">1.05<"));
    }

    #[test]
    fn bars_skip_missing_values() {
        let svg = bar_chart(
            "t",
            "MRD",
            &["de".into(), "es".into()],
            &["question".into()],
            &[vec![Some(3.0)], vec![None]],
        );
        // One bar plus one legend swatch.
        assert_eq!(svg.matches("<rect x=").count(), 2);
    }
}
