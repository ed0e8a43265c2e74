//! SVG rendering of analysis and training outputs. Pure formatting: every
//! number drawn comes from the input file.

use std::f64::consts::PI;
use std::fmt::Write;

use mlselect_core::stats::RankReversalGraph;
use serde::Deserialize;
use thiserror::Error;

use crate::analysis::{Analysis, ANALYSIS_SCHEMA, ANALYSIS_VERSION};
use crate::train::{TrainSummary, TRAIN_SCHEMA, TRAIN_VERSION};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("unsupported input schema {found:?} version {version}; this build reads {ANALYSIS_SCHEMA} v{ANALYSIS_VERSION} and {TRAIN_SCHEMA} v{TRAIN_VERSION}")]
    Schema { found: String, version: u64 },
    #[error("malformed report input: {0}")]
    Json(#[from] serde_json::Error),
}

pub enum ReportInput {
    Analysis(Analysis),
    Train(TrainSummary),
}

#[derive(Deserialize)]
struct Header {
    #[serde(default)]
    schema: String,
    #[serde(default)]
    version: u64,
}

pub fn load_report_input(text: &str) -> Result<ReportInput, ReportError> {
    let header: Header = serde_json::from_str(text)?;
    match (header.schema.as_str(), header.version) {
        (ANALYSIS_SCHEMA, v) if v == u64::from(ANALYSIS_VERSION) => {
            Ok(ReportInput::Analysis(serde_json::from_str(text)?))
        }
        (TRAIN_SCHEMA, v) if v == u64::from(TRAIN_VERSION) => Ok(ReportInput::Train(serde_json::from_str(text)?)),
        (found, version) => Err(ReportError::Schema {
            found: found.to_string(),
            version,
        }),
    }
}

/// File name and contents of every plot for `input`.
pub fn render(input: &ReportInput) -> Vec<(&'static str, String)> {
    match input {
        ReportInput::Analysis(a) => vec![("bars.svg", bars_svg(a)), ("graph.svg", graph_svg(a.graph.as_ref()))],
        ReportInput::Train(t) => vec![("curves.svg", curves_svg(t))],
    }
}

fn xml(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn open_svg(out: &mut String, width: f64, height: f64, title: &str) {
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\" font-size=\"11\">"
    );
    let _ = writeln!(out, "<title>{}</title>", xml(title));
    let _ = writeln!(out, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
}

const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

/// Mean reward per condition, grouped by task. Significant conditions are
/// dark, the baseline blue, the blind condition orange, the rest grey.
pub fn bars_svg(analysis: &Analysis) -> String {
    let bar = 22.0;
    let gap = 26.0;
    let left = 60.0;
    let plot_h = 200.0;
    let top = 40.0;
    let mut tasks: Vec<&str> = analysis.conditions.iter().map(|c| c.task.as_str()).collect();
    tasks.dedup();
    let n_bars = analysis.conditions.len() as f64;
    let width = (left + n_bars * bar + tasks.len() as f64 * gap + 20.0).max(240.0);
    let height = top + plot_h + 110.0;
    let mut out = String::new();
    open_svg(&mut out, width, height, "Mean reward per condition");
    let _ = writeln!(out, "<text x=\"{left:.0}\" y=\"20\" font-size=\"13\">Mean reward per condition</text>");

    let lo = analysis.conditions.iter().map(|c| c.mean_reward).fold(0.0, f64::min);
    let hi = analysis.conditions.iter().map(|c| c.mean_reward).fold(0.0, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let y_of = |v: f64| top + plot_h * (hi - v) / span;
    let zero = y_of(0.0);
    let _ = writeln!(
        out,
        "<line x1=\"{:.2}\" y1=\"{zero:.2}\" x2=\"{:.2}\" y2=\"{zero:.2}\" stroke=\"black\"/>",
        left - 5.0,
        width - 10.0
    );
    for (v, label) in [(hi, hi), (lo, lo)] {
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{label:.2}</text>",
            left - 8.0,
            y_of(v) + 4.0
        );
    }

    let significant = |task: &str, condition: &str| {
        analysis.tables.iter().any(|t| {
            t.task == task && t.rows.iter().any(|r| r.feature == condition && r.significant)
        })
    };
    let mut x = left;
    for task in &tasks {
        let start = x;
        for c in analysis.conditions.iter().filter(|c| c.task == *task) {
            let fill = if Some(&c.condition) == analysis.baseline.as_ref() {
                PALETTE[0]
            } else if Some(&c.condition) == analysis.blind.as_ref() {
                PALETTE[1]
            } else if significant(task, &c.condition) {
                "#333333"
            } else {
                "#bbbbbb"
            };
            let (y0, y1) = (y_of(c.mean_reward.max(0.0)), y_of(c.mean_reward.min(0.0)));
            let _ = writeln!(
                out,
                "<rect x=\"{:.2}\" y=\"{y0:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{fill}\"><title>{}: {:.3}</title></rect>",
                x + 2.0,
                bar - 4.0,
                y1 - y0,
                xml(&c.condition),
                c.mean_reward
            );
            let lx = x + bar / 2.0;
            let ly = top + plot_h + 12.0;
            let _ = writeln!(
                out,
                "<text x=\"{lx:.2}\" y=\"{ly:.2}\" text-anchor=\"end\" transform=\"rotate(-45 {lx:.2} {ly:.2})\">{}</text>",
                xml(&c.condition)
            );
            x += bar;
        }
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-weight=\"bold\">{}</text>",
            (start + x) / 2.0,
            height - 12.0,
            xml(task)
        );
        x += gap;
    }
    out.push_str("</svg>\n");
    out
}

/// Conditions on a circle; one arrow per dominance edge pointing at the
/// winner, colored by task. Each arrow bows to its left so that opposing
/// arrows between the same pair stay apart.
pub fn graph_svg(graph: Option<&RankReversalGraph>) -> String {
    let size = 420.0;
    let (cx, cy, radius) = (size / 2.0, size / 2.0 + 10.0, 140.0);
    let legend = 20.0 * graph.map_or(0, |g| g.tasks.len()) as f64;
    let mut out = String::new();
    open_svg(&mut out, size, size + 30.0 + legend, "Rank-reversal graph");
    let _ = writeln!(out, "<text x=\"20\" y=\"20\" font-size=\"13\">Rank-reversal graph</text>");
    let Some(graph) = graph else {
        out.push_str("</svg>\n");
        return out;
    };
    out.push_str("<defs>\n");
    for (ti, _) in graph.tasks.iter().enumerate() {
        let _ = writeln!(
            out,
            "<marker id=\"arrow-{ti}\" viewBox=\"0 0 10 10\" refX=\"10\" refY=\"5\" markerWidth=\"7\" markerHeight=\"7\" orient=\"auto-start-reverse\"><path d=\"M 0 0 L 10 5 L 0 10 z\" fill=\"{}\"/></marker>",
            PALETTE[ti % PALETTE.len()]
        );
    }
    out.push_str("</defs>\n");

    let n = graph.conditions.len().max(1) as f64;
    let position = |name: &str| {
        let i = graph.conditions.iter().position(|c| c == name).unwrap_or(0) as f64;
        let angle = -PI / 2.0 + 2.0 * PI * i / n;
        (cx + radius * angle.cos(), cy + radius * angle.sin())
    };
    let node_r = 18.0;
    for e in &graph.edges {
        let ti = graph.tasks.iter().position(|t| *t == e.task).unwrap_or(0);
        let (x1, y1) = position(&e.loser);
        let (x2, y2) = position(&e.winner);
        let (dx, dy) = (x2 - x1, y2 - y1);
        let len = dx.hypot(dy).max(1e-9);
        let (ux, uy) = (dx / len, dy / len);
        // Left normal in screen coordinates, scaled by task so that edges of
        // different tasks between the same pair do not overlap.
        let bow = 22.0 + 14.0 * ti as f64;
        let (nx, ny) = (uy, -ux);
        let (sx, sy) = (x1 + ux * node_r, y1 + uy * node_r);
        let (ex, ey) = (x2 - ux * node_r, y2 - uy * node_r);
        let (qx, qy) = ((x1 + x2) / 2.0 + nx * bow, (y1 + y2) / 2.0 + ny * bow);
        let _ = writeln!(
            out,
            "<path d=\"M {sx:.2} {sy:.2} Q {qx:.2} {qy:.2} {ex:.2} {ey:.2}\" fill=\"none\" stroke=\"{}\" stroke-width=\"{}\" marker-end=\"url(#arrow-{ti})\"><title>{}: {} beats {} (alpha {})</title></path>",
            PALETTE[ti % PALETTE.len()],
            e.weight,
            xml(&e.task),
            xml(&e.winner),
            xml(&e.loser),
            e.alpha
        );
    }
    for c in &graph.conditions {
        let (x, y) = position(c);
        let universal = graph.universal.contains(c);
        let _ = writeln!(
            out,
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"{node_r:.0}\" fill=\"{}\" stroke=\"black\"/>",
            if universal { "#f2d544" } else { "#eeeeee" }
        );
        let _ = writeln!(
            out,
            "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            y + 4.0,
            xml(c)
        );
    }
    for (ti, task) in graph.tasks.iter().enumerate() {
        let y = size + 20.0 + 20.0 * ti as f64;
        let _ = writeln!(
            out,
            "<line x1=\"20\" y1=\"{y:.2}\" x2=\"50\" y2=\"{y:.2}\" stroke=\"{}\" stroke-width=\"2\"/><text x=\"58\" y=\"{:.2}\">{}</text>",
            PALETTE[ti % PALETTE.len()],
            y + 4.0,
            xml(task)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Per-iteration training return with the evaluation means of the trained
/// and random policies overlaid as dashed lines.
pub fn curves_svg(summary: &TrainSummary) -> String {
    let (width, height) = (520.0, 300.0);
    let (left, right, top, bottom) = (60.0, 20.0, 40.0, 40.0);
    let mut out = String::new();
    open_svg(&mut out, width, height, "Training curve");
    let _ = writeln!(
        out,
        "<text x=\"{left:.0}\" y=\"20\" font-size=\"13\">{}: return per iteration</text>",
        xml(&summary.task)
    );
    let rewards = &summary.iteration_rewards;
    let e = &summary.evaluation;
    let values = rewards.iter().chain([&e.trained_mean, &e.random_mean]);
    let lo = values.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = values.copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 1.0, lo + 1.0) };
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;
    let y_of = |v: f64| top + plot_h * (hi - v) / (hi - lo);
    let x_of = |i: usize| left + plot_w * i as f64 / rewards.len().saturating_sub(1).max(1) as f64;
    let _ = writeln!(
        out,
        "<rect x=\"{left:.2}\" y=\"{top:.2}\" width=\"{plot_w:.2}\" height=\"{plot_h:.2}\" fill=\"none\" stroke=\"black\"/>"
    );
    for v in [lo, hi] {
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{v:.2}</text>",
            left - 6.0,
            y_of(v) + 4.0
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">iteration (0 to {})</text>",
        left + plot_w / 2.0,
        height - 12.0,
        rewards.len().saturating_sub(1)
    );
    if !rewards.is_empty() {
        let points: Vec<String> = rewards
            .iter()
            .enumerate()
            .map(|(i, r)| format!("{:.2},{:.2}", x_of(i), y_of(*r)))
            .collect();
        let _ = writeln!(
            out,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>",
            points.join(" "),
            PALETTE[0]
        );
    }
    for (i, (label, value, color)) in [
        ("test: trained", e.trained_mean, PALETTE[2]),
        ("test: random", e.random_mean, PALETTE[3]),
    ]
    .into_iter()
    .enumerate()
    {
        let y = y_of(value);
        let _ = writeln!(
            out,
            "<line x1=\"{left:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"{color}\" stroke-dasharray=\"6 4\"/>",
            left + plot_w
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" fill=\"{color}\">{label} {value:.2}</text>",
            left + plot_w - 4.0,
            y - 4.0 - 12.0 * i as f64
        );
    }
    out.push_str("</svg>\n");
    out
}
