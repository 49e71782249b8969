//! Minimal deterministic SVG bar charts with optional error bars.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 80.0;
const PALETTE: [&str; 6] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948"];

/// One colored series; `values[i]` belongs to category `i`. Missing values
/// draw no bar.
#[derive(Debug, Clone, PartialEq)]
pub struct BarSeries {
    pub name: String,
    pub values: Vec<Option<f64>>,
    /// Symmetric error half-widths, same indexing as `values`.
    pub errors: Option<Vec<f64>>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Grouped vertical bar chart. The y axis always includes zero.
pub fn bar_chart(title: &str, y_label: &str, categories: &[String], series: &[BarSeries]) -> String {
    let mut lo: f64 = 0.0;
    let mut hi: f64 = 0.0;
    for s in series {
        for (i, v) in s.values.iter().enumerate() {
            if let Some(v) = v.filter(|v| v.is_finite()) {
                let e = s.errors.as_ref().and_then(|e| e.get(i)).copied().unwrap_or(0.0);
                lo = lo.min(v - e);
                hi = hi.max(v + e);
            }
        }
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (if lo < 0.0 { lo - pad } else { lo }, hi + pad);
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let y = |v: f64| MARGIN_TOP + plot_h * (hi - v) / (hi - lo);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    // Axes and ticks.
    let _ = writeln!(
        out,
        r#"<line x1="{MARGIN_LEFT}" y1="{MARGIN_TOP}" x2="{MARGIN_LEFT}" y2="{:.2}" stroke="black"/>"#,
        MARGIN_TOP + plot_h
    );
    for t in 0..=5 {
        let v = lo + (hi - lo) * t as f64 / 5.0;
        let _ = writeln!(
            out,
            r##"<line x1="{:.2}" y1="{:.2}" x2="{MARGIN_LEFT}" y2="{:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.3}</text>"##,
            MARGIN_LEFT - 4.0,
            y(v),
            y(v),
            MARGIN_LEFT - 6.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<line x1="{MARGIN_LEFT}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#,
        y(0.0),
        MARGIN_LEFT + plot_w,
        y(0.0)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0,
        escape(y_label)
    );

    let n_cat = categories.len().max(1) as f64;
    let group_w = plot_w / n_cat;
    let bar_w = 0.8 * group_w / series.len().max(1) as f64;
    for (i, cat) in categories.iter().enumerate() {
        let gx = MARGIN_LEFT + group_w * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            gx + group_w / 2.0,
            MARGIN_TOP + plot_h + 18.0,
            escape(cat)
        );
        for (si, s) in series.iter().enumerate() {
            let Some(v) = s.values.get(i).copied().flatten().filter(|v| v.is_finite()) else {
                continue;
            };
            let x = gx + 0.1 * group_w + bar_w * si as f64;
            let (top, bottom) = if v >= 0.0 { (y(v), y(0.0)) } else { (y(0.0), y(v)) };
            let _ = writeln!(
                out,
                r#"<rect x="{x:.2}" y="{top:.2}" width="{bar_w:.2}" height="{:.2}" fill="{}"/>"#,
                bottom - top,
                PALETTE[si % PALETTE.len()]
            );
            if let Some(e) = s.errors.as_ref().and_then(|e| e.get(i)).copied().filter(|e| *e > 0.0) {
                let cx = x + bar_w / 2.0;
                let _ = writeln!(
                    out,
                    r#"<path d="M{:.2} {:.2}H{:.2}M{cx:.2} {:.2}V{:.2}M{:.2} {:.2}H{:.2}" stroke="black" fill="none"/>"#,
                    cx - bar_w / 4.0,
                    y(v + e),
                    cx + bar_w / 4.0,
                    y(v + e),
                    y(v - e),
                    cx - bar_w / 4.0,
                    y(v - e),
                    cx + bar_w / 4.0
                );
            }
        }
    }
    // Legend.
    for (si, s) in series.iter().enumerate() {
        let lx = MARGIN_LEFT + 150.0 * si as f64;
        let ly = HEIGHT - 30.0;
        let _ = writeln!(
            out,
            r#"<rect x="{lx:.2}" y="{:.2}" width="12" height="12" fill="{}"/><text x="{:.2}" y="{ly:.2}">{}</text>"#,
            ly - 10.0,
            PALETTE[si % PALETTE.len()],
            lx + 16.0,
            escape(&s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}
