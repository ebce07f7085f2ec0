//! Level-up interval charts for one cluster, as structured series or SVG.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::model::{IntervalSequence, Verdict};

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];
const WIDTH: f64 = 820.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartSeries {
    pub character_id: String,
    /// Level reached at the end of each interval.
    pub levels: Vec<u32>,
    pub minutes: Vec<f64>,
    /// Verifier decision when one exists.
    #[serde(default)]
    pub is_bot: Option<bool>,
    pub color: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartData {
    pub cluster_id: u32,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<ChartSeries>,
}

/// One series per member in character-id order; colors cycle in that order.
pub fn chart_data(cluster_id: u32, members: &[&IntervalSequence], verdicts: &[Verdict]) -> ChartData {
    let mut sorted = members.to_vec();
    sorted.sort_by(|a, b| a.character_id.cmp(&b.character_id));
    let series = sorted
        .iter()
        .enumerate()
        .map(|(i, s)| ChartSeries {
            character_id: s.character_id.clone(),
            levels: (0..s.len() as u32).map(|l| l + 2).collect(),
            minutes: s.intervals.clone(),
            is_bot: verdicts.iter().find(|v| v.character_id == s.character_id).map(|v| v.is_bot),
            color: PALETTE[i % PALETTE.len()].to_string(),
        })
        .collect();
    ChartData { cluster_id, x_label: "level".into(), y_label: "minutes".into(), series }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Tick step from {1, 2, 5} x 10^k giving at most `max_ticks` intervals.
fn nice_step(span: f64, max_ticks: f64) -> f64 {
    let raw = (span / max_ticks).max(f64::MIN_POSITIVE);
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0].into_iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag)
}

/// Linear axes, one polyline per series, legend on the right. Members the
/// verifier judged human are drawn dashed.
pub fn render_svg(data: &ChartData) -> String {
    let x_max = data.series.iter().flat_map(|s| s.levels.iter()).copied().max().unwrap_or(2).max(3) as f64;
    let x_min = 2.0;
    let y_top = data.series.iter().flat_map(|s| s.minutes.iter()).copied().fold(0.0, f64::max);
    let y_step = nice_step(if y_top > 0.0 { y_top } else { 1.0 }, 5.0);
    let y_max = (y_top / y_step).ceil().max(1.0) * y_step;

    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let px = |x: f64| LEFT + (x - x_min) / (x_max - x_min) * plot_w;
    let py = |y: f64| TOP + plot_h - y / y_max * plot_h;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<title>cluster {} level-up intervals</title>"#, data.cluster_id);
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);

    let _ = writeln!(out, r#"<g class="axes" stroke="black" fill="none">"#);
    let _ = writeln!(out, r#"<line x1="{LEFT}" y1="{:.2}" x2="{:.2}" y2="{:.2}"/>"#, py(0.0), LEFT + plot_w, py(0.0));
    let _ = writeln!(out, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.2}"/>"#, py(0.0));
    let _ = writeln!(out, "</g>");

    let _ = writeln!(out, r#"<g class="ticks" fill="black">"#);
    let x_step = nice_step(x_max - x_min, 10.0).max(1.0);
    let mut x = (x_min / x_step).ceil() * x_step;
    while x <= x_max + 1e-9 {
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{x}</text>"#, px(x), py(0.0) + 16.0);
        x += x_step;
    }
    let mut y = 0.0;
    while y <= y_max + 1e-9 {
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 6.0, py(y) + 4.0, format_tick(y));
        y += y_step;
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 12.0,
        escape(&data.x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        escape(&data.y_label)
    );
    let _ = writeln!(out, "</g>");

    let _ = writeln!(out, r#"<g class="series" fill="none" stroke-width="1.5">"#);
    for s in &data.series {
        let points: Vec<String> =
            s.levels.iter().zip(&s.minutes).map(|(l, m)| format!("{:.2},{:.2}", px(f64::from(*l)), py(*m))).collect();
        let dash = if s.is_bot == Some(false) { r#" stroke-dasharray="6 3""# } else { "" };
        let _ = writeln!(
            out,
            r#"<polyline data-character="{}" stroke="{}"{dash} points="{}"/>"#,
            escape(&s.character_id),
            s.color,
            points.join(" ")
        );
    }
    let _ = writeln!(out, "</g>");

    let _ = writeln!(out, r#"<g class="legend">"#);
    for (i, s) in data.series.iter().enumerate() {
        let y = TOP + 14.0 * i as f64;
        let lx = WIDTH - RIGHT + 14.0;
        let _ = writeln!(out, r#"<rect x="{lx}" y="{:.2}" width="10" height="10" fill="{}"/>"#, y, s.color);
        let tag = match s.is_bot {
            Some(false) => " (human)",
            _ => "",
        };
        let _ = writeln!(out, r#"<text x="{}" y="{:.2}">{}{tag}</text>"#, lx + 14.0, y + 9.0, escape(&s.character_id));
    }
    let _ = writeln!(out, "</g>");
    out.push_str("</svg>\n");
    out
}

fn format_tick(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::VerdictSource;

    fn s(id: &str, v: &[f64]) -> IntervalSequence {
        IntervalSequence::new(id, v.to_vec(), v.len() as u32 + 1).unwrap()
    }

    #[test]
    fn one_polyline_per_member() {
        let seqs = [s("b", &[3.0, 4.0, 5.0]), s("a", &[3.0, 4.0, 5.0]), s("c", &[3.0, 4.0, 5.0])];
        let refs: Vec<_> = seqs.iter().collect();
        let data = chart_data(2, &refs, &[]);
        assert_eq!(data.series.iter().map(|s| s.character_id.as_str()).collect::<Vec<_>>(), ["a", "b", "c"]);
        assert_eq!(data.series[0].levels, vec![2, 3, 4]);
        let svg = render_svg(&data);
        assert_eq!(svg.matches("<polyline").count(), 3);
        // Identical series give identical point lists.
        let pts: Vec<&str> = svg.lines().filter(|l| l.contains("<polyline")).map(|l| l.split("points=").nth(1).unwrap()).collect();
        assert!(pts.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(svg, render_svg(&chart_data(2, &[&seqs[2], &seqs[0], &seqs[1]], &[])));
    }

    #[test]
    fn human_members_are_dashed_and_ids_escaped() {
        let seqs = [s("a<1>", &[1.0, 2.0]), s("b", &[10.0, 20.0])];
        let verdicts = [Verdict {
            character_id: "b".into(),
            is_bot: false,
            confidence: 0.8,
            rationale: String::new(),
            source: VerdictSource::Heuristic,
        }];
        let svg = render_svg(&chart_data(0, &[&seqs[0], &seqs[1]], &verdicts));
        assert_eq!(svg.matches("stroke-dasharray").count(), 1);
        assert!(svg.contains("a&lt;1&gt;") && svg.contains("b (human)"));
    }

    #[test]
    fn colors_cycle() {
        let seqs: Vec<_> = (0..12).map(|i| s(&format!("c{i:02}"), &[1.0])).collect();
        let refs: Vec<_> = seqs.iter().collect();
        let d = chart_data(0, &refs, &[]);
        assert_eq!(d.series[10].color, d.series[0].color);
        assert_ne!(d.series[1].color, d.series[0].color);
    }

    #[test]
    fn tick_steps() {
        assert_eq!(nice_step(60.0, 5.0), 20.0);
        assert_eq!(nice_step(48.0, 10.0), 5.0);
        assert!((nice_step(0.3, 5.0) - 0.1).abs() < 1e-12);
    }
}
