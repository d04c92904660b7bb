//! SVG training curves and per-log summaries.

use std::fmt::Write;

use fsar_core::engine::MetricsRow;

const WIDTH: f64 = 720.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 56.0;
const ROW_H: f64 = 20.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub name: String,
    pub episodes: usize,
    /// Episodes whose losses were not finite.
    pub skipped: usize,
    /// Means over the last `window` finite episodes.
    pub accuracy: f64,
    pub ce: f64,
    pub total: f64,
}

fn finite(rows: &[MetricsRow]) -> Vec<&MetricsRow> {
    rows.iter().filter(|r| r.total.is_finite() && r.accuracy.is_finite()).collect()
}

pub fn summarize(name: &str, rows: &[MetricsRow], window: usize) -> Summary {
    let ok = finite(rows);
    let tail = &ok[ok.len().saturating_sub(window)..];
    let mean = |f: fn(&MetricsRow) -> f64| {
        if tail.is_empty() {
            f64::NAN
        } else {
            tail.iter().map(|r| f(r)).sum::<f64>() / tail.len() as f64
        }
    };
    Summary {
        name: name.to_string(),
        episodes: rows.len(),
        skipped: rows.len() - ok.len(),
        accuracy: mean(|r| r.accuracy),
        ce: mean(|r| r.l_ce),
        total: mean(|r| r.total),
    }
}

/// Trailing moving average, one point per finite episode.
fn smoothed(rows: &[&MetricsRow], window: usize, f: fn(&MetricsRow) -> f64) -> Vec<(f64, f64)> {
    let mut sum = 0.0;
    let mut out = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        sum += f(r);
        if i >= window {
            sum -= f(rows[i - window]);
        }
        out.push((r.episode as f64, sum / (i + 1).min(window) as f64));
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn panel(svg: &mut String, top: f64, title: &str, series: &[Vec<(f64, f64)>], fixed: Option<(f64, f64)>) {
    let pts = series.iter().flatten();
    let x_max = pts.clone().map(|p| p.0).fold(1.0, f64::max);
    let (y_min, y_max) = fixed.unwrap_or_else(|| {
        let lo = pts.clone().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let hi = pts.map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        if lo.is_finite() && hi > lo {
            (lo, hi)
        } else if lo.is_finite() {
            (lo - 0.5, lo + 0.5)
        } else {
            (0.0, 1.0)
        }
    });
    let (x0, x1) = (MARGIN, WIDTH - 16.0);
    let (y0, y1) = (top + 24.0, top + PANEL_H - 24.0);
    let sx = |x: f64| x0 + (x1 - x0) * x / x_max;
    let sy = |y: f64| y1 - (y1 - y0) * (y - y_min) / (y_max - y_min);
    let _ = writeln!(svg, r#"<text x="{x0}" y="{}" font-weight="bold">{}</text>"#, top + 16.0, escape(title));
    let _ = writeln!(svg, r##"<rect x="{x0}" y="{y0}" width="{}" height="{}" fill="none" stroke="#999"/>"##, x1 - x0, y1 - y0);
    for (v, y) in [(y_max, y0), (y_min, y1)] {
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end" font-size="11">{v:.3}</text>"#, x0 - 4.0, y + 4.0);
    }
    let _ = writeln!(svg, r#"<text x="{x1}" y="{}" text-anchor="end" font-size="11">episode {x_max:.0}</text>"#, y1 + 16.0);
    for (i, s) in series.iter().enumerate() {
        let points: Vec<String> = s.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            COLORS[i % COLORS.len()],
            points.join(" ")
        );
    }
}

/// Accuracy and cross-entropy panels followed by the summary table.
pub fn render_svg(logs: &[(String, Vec<MetricsRow>)], summaries: &[Summary], window: usize) -> String {
    let height = 2.0 * PANEL_H + 40.0 + ROW_H * (summaries.len() + 1) as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" font-family="sans-serif" font-size="13">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let rows: Vec<Vec<&MetricsRow>> = logs.iter().map(|(_, r)| finite(r)).collect();
    let acc: Vec<_> = rows.iter().map(|r| smoothed(r, window, |m| m.accuracy)).collect();
    let ce: Vec<_> = rows.iter().map(|r| smoothed(r, window, |m| m.l_ce)).collect();
    panel(&mut svg, 0.0, &format!("episode accuracy ({window}-episode mean)"), &acc, Some((0.0, 1.0)));
    panel(&mut svg, PANEL_H, &format!("L_CE ({window}-episode mean)"), &ce, None);

    let top = 2.0 * PANEL_H + 24.0;
    let cols = [MARGIN, 260.0, 350.0, 430.0, 530.0, 630.0];
    let header = ["log", "episodes", "skipped", "accuracy", "L_CE", "total"];
    for (x, h) in cols.iter().zip(header) {
        let _ = writeln!(svg, r#"<text x="{x}" y="{top}" font-weight="bold">{h}</text>"#);
    }
    for (i, s) in summaries.iter().enumerate() {
        let y = top + ROW_H * (i + 1) as f64;
        let cells = [
            escape(&s.name),
            s.episodes.to_string(),
            s.skipped.to_string(),
            format!("{:.4}", s.accuracy),
            format!("{:.4}", s.ce),
            format!("{:.4}", s.total),
        ];
        let color = COLORS[i % COLORS.len()];
        for (j, (x, c)) in cols.iter().zip(cells).enumerate() {
            let fill = if j == 0 { color } else { "black" };
            let _ = writeln!(svg, r#"<text x="{x}" y="{y}" fill="{fill}">{c}</text>"#);
        }
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(episode: usize, accuracy: f64, l_ce: f64) -> MetricsRow {
        MetricsRow { episode, l_ce, l_h: 0.0, l_s: 0.0, total: l_ce, accuracy }
    }

    #[test]
    fn summary_uses_the_last_window_of_finite_rows() {
        let mut rows: Vec<MetricsRow> = (0..10).map(|i| row(i, i as f64 / 10.0, 1.0)).collect();
        rows.push(MetricsRow { total: f64::NAN, accuracy: f64::NAN, ..row(10, 0.0, f64::NAN) });
        let s = summarize("a", &rows, 2);
        assert_eq!((s.episodes, s.skipped), (11, 1));
        assert!((s.accuracy - 0.85).abs() < 1e-12);
    }

    #[test]
    fn moving_average_warms_up() {
        let rows: Vec<MetricsRow> = [1.0, 3.0, 5.0].iter().enumerate().map(|(i, &a)| row(i, a, 0.0)).collect();
        let refs: Vec<&MetricsRow> = rows.iter().collect();
        let s = smoothed(&refs, 2, |m| m.accuracy);
        assert_eq!(s, vec![(0.0, 1.0), (1.0, 2.0), (2.0, 4.0)]);
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let rows: Vec<MetricsRow> = (0..5).map(|i| row(i, 0.5, 1.0)).collect();
        let logs = vec![("run<1>".to_string(), rows.clone())];
        let svg = render_svg(&logs, &[summarize("run<1>", &rows, 3)], 3);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("run&lt;1&gt;"));
    }
}
