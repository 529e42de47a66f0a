//! Twin-axis SVG line charts: a statistic on the left axis, a score on the right.

use std::fmt::Write;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 70.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const Y_TICKS: usize = 5;
const STAT_COLOR: &str = "#1f77b4";
const SCORE_COLOR: &str = "#d62728";

struct Axis {
    lo: f64,
    hi: f64,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = values
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            });
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
            lo -= pad;
            hi += pad;
        } else {
            let pad = (hi - lo) * 0.05;
            lo -= pad;
            hi += pad;
        }
        Self { lo, hi }
    }

    fn frac(&self, v: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn label(v: f64) -> String {
    let s = format!("{v:.3}");
    if s == "-0.000" {
        "0.000".into()
    } else {
        s
    }
}

/// Epoch-axis tick positions, at most about 20 labels.
fn epoch_ticks(lo: u64, hi: u64) -> Vec<u64> {
    let span = hi - lo;
    let step = (span / 20 + 1).max(1);
    let mut ticks: Vec<u64> = (lo..=hi).step_by(step as usize).collect();
    if ticks.last() != Some(&hi) {
        ticks.push(hi);
    }
    ticks
}

/// Renders `stat` over `epochs`, with an optional per-epoch `score` series on
/// a second axis.
pub fn twin_axis_chart(
    title: &str,
    epochs: &[u64],
    stat: (&str, &[f64]),
    score: Option<(&str, &[(u64, f64)])>,
) -> String {
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let (e_lo, e_hi) = match (epochs.iter().min(), epochs.iter().max()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => (0, 0),
    };
    let x = |e: u64| {
        if e_hi == e_lo {
            LEFT + plot_w / 2.0
        } else {
            LEFT + plot_w * (e - e_lo) as f64 / (e_hi - e_lo) as f64
        }
    };
    let y = |axis: &Axis, v: f64| TOP + plot_h * (1.0 - axis.frac(v));

    let stat_axis = Axis::fit(stat.1.iter().copied());
    let score_axis = score.map(|(_, s)| Axis::fit(s.iter().map(|p| p.1)));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );

    // axes frame
    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);
    let _ = writeln!(svg, r#"<g class="axes" stroke="black" fill="none">"#);
    let _ = writeln!(svg, r#"<line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}"/>"#);
    let _ = writeln!(svg, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/>"#);
    if score_axis.is_some() {
        let _ = writeln!(svg, r#"<line x1="{x1}" y1="{y0}" x2="{x1}" y2="{y1}"/>"#);
    }
    let _ = writeln!(svg, "</g>");

    let _ = writeln!(svg, r#"<g class="epoch-axis" text-anchor="middle">"#);
    for e in epoch_ticks(e_lo, e_hi) {
        let px = x(e);
        let _ = writeln!(
            svg,
            r#"<line x1="{px:.2}" y1="{y1}" x2="{px:.2}" y2="{}" stroke="black"/><text x="{px:.2}" y="{}">{e}</text>"#,
            y1 + 5.0,
            y1 + 18.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}">epoch</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(svg, "</g>");

    let mut y_axis = |axis: &Axis,
                      name: &str,
                      color: &str,
                      at_x: f64,
                      anchor: &str,
                      dx: f64,
                      class: &str| {
        let _ = writeln!(
            svg,
            r#"<g class="{class}" fill="{color}" text-anchor="{anchor}">"#
        );
        for i in 0..=Y_TICKS {
            let v = axis.lo + (axis.hi - axis.lo) * i as f64 / Y_TICKS as f64;
            let py = y(axis, v);
            let _ = writeln!(
                svg,
                r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
                at_x + dx,
                py + 4.0,
                label(v)
            );
        }
        let _ = writeln!(
            svg,
            r#"<text transform="translate({:.2},{:.2}) rotate(-90)" text-anchor="middle">{}</text>"#,
            at_x + 3.2 * dx,
            TOP + plot_h / 2.0,
            escape(name)
        );
        let _ = writeln!(svg, "</g>");
    };
    y_axis(&stat_axis, stat.0, STAT_COLOR, x0, "end", -6.0, "stat-axis");
    if let (Some(axis), Some((name, _))) = (&score_axis, score) {
        y_axis(axis, name, SCORE_COLOR, x1, "start", 6.0, "score-axis");
    }

    let points = |pts: Vec<(f64, f64)>| {
        pts.iter()
            .map(|(a, b)| format!("{a:.2},{b:.2}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let stat_pts = epochs
        .iter()
        .zip(stat.1)
        .filter(|(_, v)| v.is_finite())
        .map(|(&e, &v)| (x(e), y(&stat_axis, v)))
        .collect();
    let _ = writeln!(
        svg,
        r#"<polyline class="stat" fill="none" stroke="{STAT_COLOR}" stroke-width="2" points="{}"/>"#,
        points(stat_pts)
    );
    if let (Some(axis), Some((_, series))) = (&score_axis, score) {
        let score_pts = series.iter().map(|&(e, v)| (x(e), y(axis, v))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="score" fill="none" stroke="{SCORE_COLOR}" stroke-width="2" stroke-dasharray="6 3" points="{}"/>"#,
            points(score_pts)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_cover_range() {
        assert_eq!(epoch_ticks(0, 19), (0..=19).collect::<Vec<_>>());
        let t = epoch_ticks(0, 100);
        assert_eq!(t.first(), Some(&0));
        assert_eq!(t.last(), Some(&100));
        assert!(t.len() <= 22);
        assert_eq!(epoch_ticks(3, 3), vec![3]);
    }

    #[test]
    fn single_series_chart() {
        let svg = twin_axis_chart("k", &[0, 1, 2], ("kurtosis", &[1.0, 2.0, 3.0]), None);
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(!svg.contains("score-axis"));
    }

    #[test]
    fn constant_series_does_not_divide_by_zero() {
        let svg = twin_axis_chart(
            "k",
            &[0, 1],
            ("kurtosis", &[2.0, 2.0]),
            Some(("spider", &[(0, 0.1), (1, 0.1)])),
        );
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }

    #[test]
    fn title_is_escaped() {
        assert!(twin_axis_chart("a<b", &[0], ("k", &[1.0]), None).contains("a&lt;b"));
    }
}
