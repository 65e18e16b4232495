//! Attention and score dumps for one image, with plain SVG renderings: a
//! word-by-object attention heatmap and per-object attention curves.

use std::fmt::Write as _;

use serde::Serialize;

use crate::captioner::Attended;
use crate::generate::Analysis;
use crate::types::{content_words, Vocabulary};

/// Per-image dump. Pair-indexed arrays share the order of `pairs`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InspectDump {
    pub image_id: String,
    /// One token per decoding step, including the closing `<eos>`.
    pub caption: Vec<String>,
    pub object_ids: Vec<usize>,
    /// `attention[i][t]`: weight on object `i` when emitting word `t`.
    pub attention: Vec<Vec<f64>>,
    pub gamma: Vec<f64>,
    /// `(subject_id, object_id)`
    pub pairs: Vec<(usize, usize)>,
    pub pair_captions: Vec<Vec<String>>,
    pub delta: Vec<f64>,
    pub beta: Vec<f64>,
    pub s: Option<Vec<f64>>,
    pub eta: Option<Vec<f64>>,
    pub likelihoods: Vec<f64>,
}

impl InspectDump {
    pub fn from_analysis(a: &Analysis, vocab: &Vocabulary) -> Self {
        let trace = &a.caption.trace;
        let object_ids = trace
            .attended
            .iter()
            .map(|x| match *x {
                Attended::Object(id) => id,
                Attended::Union { subject, .. } => subject,
            })
            .collect();
        Self {
            image_id: a.image_id.clone(),
            caption: trace
                .words
                .iter()
                .map(|&w| vocab.token(w).to_string())
                .collect(),
            object_ids,
            attention: (0..trace.alpha.rows())
                .map(|i| trace.alpha.row(i).to_vec())
                .collect(),
            gamma: a.gamma.clone(),
            pairs: a.pairs.clone(),
            pair_captions: a
                .relational
                .iter()
                .map(|d| content_words(&d.words, vocab))
                .collect(),
            delta: a.delta.clone(),
            beta: a.beta.clone(),
            s: a.s.clone(),
            eta: a.eta.clone(),
            likelihoods: a.likelihoods(),
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Heatmap with one row per label in `rows` and one column per label in
/// `cols`; darker cells carry more weight.
pub fn heatmap_svg(values: &[Vec<f64>], rows: &[String], cols: &[String]) -> String {
    let cell = 28.0;
    let (left, top) = (70.0, 80.0);
    let width = left + cell * cols.len() as f64 + 20.0;
    let height = top + cell * rows.len() as f64 + 20.0;
    let max = values
        .iter()
        .flatten()
        .fold(0.0f64, |m, &v| m.max(v))
        .max(1e-12);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    for (j, c) in cols.iter().enumerate() {
        let x = left + cell * (j as f64 + 0.5);
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{}" transform="rotate(-60 {x} {})">{}</text>"#,
            top - 6.0,
            top - 6.0,
            escape(c)
        );
    }
    for (i, r) in rows.iter().enumerate() {
        let y = top + cell * i as f64;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            left - 6.0,
            y + cell * 0.65,
            escape(r)
        );
        for j in 0..cols.len() {
            let v = values
                .get(i)
                .and_then(|row| row.get(j))
                .copied()
                .unwrap_or(0.0);
            let shade = (255.0 * (1.0 - v / max)).round() as u8;
            let _ = writeln!(
                svg,
                r##"<rect x="{}" y="{y}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="#ccc"><title>{v:.4}</title></rect>"##,
                left + cell * j as f64
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// One polyline per series over shared x labels, y in `[0, 1]`.
pub fn line_chart_svg(series: &[Vec<f64>], names: &[String], x_labels: &[String]) -> String {
    let (left, top, plot_w, plot_h) = (50.0, 20.0, 40.0 * x_labels.len().max(2) as f64, 220.0);
    let width = left + plot_w + 130.0;
    let height = top + plot_h + 90.0;
    let steps = x_labels.len().max(2) - 1;
    let x_at = |t: usize| left + plot_w * t as f64 / steps as f64;
    let y_at = |v: f64| top + plot_h * (1.0 - v.clamp(0.0, 1.0));
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        svg,
        r##"<rect x="{left}" y="{top}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#888"/>"##
    );
    for tick in [0.0, 0.5, 1.0] {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{tick}</text>"#,
            left - 4.0,
            y_at(tick) + 4.0
        );
    }
    for (t, label) in x_labels.iter().enumerate() {
        let (x, y) = (x_at(t), top + plot_h + 12.0);
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{y}" transform="rotate(45 {x} {y})">{}</text>"#,
            escape(label)
        );
    }
    for (k, (values, name)) in series.iter().zip(names).enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(t, &v)| format!("{:.2},{:.2}", x_at(t), y_at(v)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            points.join(" ")
        );
        let ly = top + 14.0 * k as f64 + 8.0;
        let lx = left + plot_w + 12.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 14.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}">{}</text>"#,
            lx + 18.0,
            ly + 4.0,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// `(heatmap, line chart)` for a dump.
pub fn render(dump: &InspectDump) -> (String, String) {
    let names: Vec<String> = dump
        .object_ids
        .iter()
        .map(|id| format!("obj {id}"))
        .collect();
    let heat = heatmap_svg(&dump.attention, &names, &dump.caption);
    let lines = line_chart_svg(&dump.attention, &names, &dump.caption);
    (heat, lines)
}
