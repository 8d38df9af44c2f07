//! Report rows and their CSV, JSON, SVG and plain-text renderings.
//!
//! Every float that leaves this module is rounded to six significant digits,
//! so identical inputs give byte-identical output.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::analysis::Analysis;
use crate::ir::{DType, FusionRole};
use crate::roofline::Bound;

pub const SCHEMA_VERSION: u32 = 1;

pub const SUMMARY_CSV_HEADER: &str = "model,macs,flops_pre,flops_post,params,param_bytes,bw_pre_bytes,bw_post_bytes,weight_bytes,activation_bytes,intensity,bound";

pub const LAYER_CSV_HEADER: &str = "node,op,output_shape,macs,flops,param_bytes,traffic_bytes,fused";

/// Rounds to six significant digits.
pub fn round6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().unwrap_or(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummaryRow {
    pub model: String,
    pub macs: u64,
    pub flops_pre: u64,
    pub flops_post: u64,
    /// Parameter count before BN folding (the stored model's size).
    pub params: u64,
    pub param_bytes: u64,
    pub bw_pre_bytes: u64,
    pub bw_post_bytes: u64,
    pub weight_bytes: u64,
    pub activation_bytes: u64,
    /// Post-fusion FLOPs per post-fusion byte.
    pub intensity: f64,
    pub bound: Option<Bound>,
}

impl ModelSummaryRow {
    pub fn from_analysis(a: &Analysis) -> Self {
        ModelSummaryRow {
            model: a.model.clone(),
            macs: a.cost_post.macs,
            flops_pre: a.cost_pre.flops,
            flops_post: a.cost_post.flops,
            params: a.cost_pre.params,
            param_bytes: a.cost_pre.param_bytes,
            bw_pre_bytes: a.traffic_pre.grand_total,
            bw_post_bytes: a.traffic_post.grand_total,
            weight_bytes: a.traffic_post.weight_bytes,
            activation_bytes: a.traffic_post.activation_bytes,
            intensity: round6(a.intensity()),
            bound: a.classification.map(|c| c.bound),
        }
    }

    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            csv_field(&self.model),
            self.macs,
            self.flops_pre,
            self.flops_post,
            self.params,
            self.param_bytes,
            self.bw_pre_bytes,
            self.bw_post_bytes,
            self.weight_bytes,
            self.activation_bytes,
            self.intensity,
            self.bound.map(Bound::as_str).unwrap_or("")
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub node: String,
    pub op: String,
    pub output_shape: Vec<i64>,
    pub macs: u64,
    pub flops: u64,
    pub param_bytes: u64,
    pub traffic_bytes: u64,
    pub fused: bool,
}

pub fn layer_rows(a: &Analysis) -> Vec<LayerRow> {
    a.fused
        .nodes
        .iter()
        .zip(&a.cost_post.nodes)
        .map(|(n, c)| LayerRow {
            node: n.name.clone(),
            op: n.op_type.clone(),
            output_shape: a.fused.tensors[n.outputs[0]].shape.clone().unwrap_or_default(),
            macs: c.macs,
            flops: c.flops,
            param_bytes: c.param_bytes,
            traffic_bytes: a.traffic_post.per_node[n.id],
            fused: matches!(n.fusion, Some(FusionRole::Anchor(_) | FusionRole::Absorbed(_))),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RooflineSummary {
    pub profile: String,
    pub peak_gflops: f64,
    pub bandwidth_gbps: f64,
    pub ridge_intensity: f64,
    pub bound: Bound,
    pub compute_time_s: f64,
    pub transfer_time_s: f64,
    pub latency_floor_s: f64,
    pub overlap: bool,
}

fn roofline_summary(a: &Analysis) -> Option<RooflineSummary> {
    let (p, c) = (a.options.profile.as_ref()?, a.classification?);
    Some(RooflineSummary {
        profile: p.name.clone(),
        peak_gflops: round6(p.peak_gflops),
        bandwidth_gbps: round6(p.bandwidth_gbps),
        ridge_intensity: round6(p.ridge_intensity()),
        bound: c.bound,
        compute_time_s: round6(c.compute_time),
        transfer_time_s: round6(c.transfer_time),
        latency_floor_s: round6(c.latency_floor),
        overlap: a.options.overlap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeReport {
    pub schema_version: u32,
    pub model: String,
    pub dtype: DType,
    pub fusion: bool,
    pub per_consumer_reads: bool,
    pub input_shape: Vec<i64>,
    pub totals: ModelSummaryRow,
    pub roofline: Option<RooflineSummary>,
    pub layers: Vec<LayerRow>,
}

impl AnalyzeReport {
    pub fn new(a: &Analysis) -> Self {
        AnalyzeReport {
            schema_version: SCHEMA_VERSION,
            model: a.model.clone(),
            dtype: a.options.dtype,
            fusion: a.options.fusion,
            per_consumer_reads: a.options.per_consumer_reads,
            input_shape: a.input_shape(),
            totals: ModelSummaryRow::from_analysis(a),
            roofline: roofline_summary(a),
            layers: layer_rows(a),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelFailure {
    pub model: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub schema_version: u32,
    pub dtype: DType,
    pub fusion: bool,
    pub per_consumer_reads: bool,
    pub profile: Option<String>,
    pub models: Vec<ModelSummaryRow>,
    pub errors: Vec<ModelFailure>,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn summary_csv(rows: &[ModelSummaryRow]) -> String {
    let mut out = String::from(SUMMARY_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// Per-layer CSV closed by a `TOTAL` row.
pub fn layers_csv(report: &AnalyzeReport) -> String {
    let mut out = String::from(LAYER_CSV_HEADER);
    out.push('\n');
    let shape = |s: &[i64]| s.iter().map(i64::to_string).collect::<Vec<_>>().join("x");
    for l in &report.layers {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            csv_field(&l.node),
            csv_field(&l.op),
            shape(&l.output_shape),
            l.macs,
            l.flops,
            l.param_bytes,
            l.traffic_bytes,
            l.fused
        );
    }
    let t = &report.totals;
    let _ = writeln!(
        out,
        "TOTAL,,,{},{},{},{},",
        t.macs, t.flops_post, t.param_bytes, t.bw_post_bytes
    );
    out
}

fn mega(x: u64) -> f64 {
    x as f64 / 1e6
}

fn giga(x: u64) -> f64 {
    x as f64 / 1e9
}

/// Plain-text report for one model.
pub fn render_analyze_text(r: &AnalyzeReport) -> String {
    let mut out = String::new();
    let shape = r
        .input_shape
        .iter()
        .map(i64::to_string)
        .collect::<Vec<_>>()
        .join("x");
    let _ = writeln!(
        out,
        "model {}  dtype {}  fusion {}  input {}",
        r.model,
        r.dtype,
        if r.fusion { "on" } else { "off" },
        shape
    );
    let _ = writeln!(out);
    let name_w = r.layers.iter().map(|l| l.node.len()).max().unwrap_or(4).clamp(4, 40);
    let _ = writeln!(
        out,
        "{:<name_w$}  {:<18}  {:<18}  {:>14}  {:>14}  {:>12}  {:>12}  fused",
        "node", "op", "output", "MACs", "FLOPs", "param B", "traffic B"
    );
    for l in &r.layers {
        let dims = l.output_shape.iter().map(i64::to_string).collect::<Vec<_>>().join("x");
        let _ = writeln!(
            out,
            "{:<name_w$}  {:<18}  {:<18}  {:>14}  {:>14}  {:>12}  {:>12}  {}",
            l.node,
            l.op,
            dims,
            l.macs,
            l.flops,
            l.param_bytes,
            l.traffic_bytes,
            if l.fused { "yes" } else { "" }
        );
    }
    let t = &r.totals;
    let _ = writeln!(out);
    let _ = writeln!(out, "MACs        {:.3} G", giga(t.macs));
    let _ = writeln!(
        out,
        "FLOPs       {:.3} GFLOPs (before fusion {:.3})",
        giga(t.flops_post),
        giga(t.flops_pre)
    );
    let _ = writeln!(out, "params      {:.3} M ({:.2} MB)", mega(t.params), mega(t.param_bytes));
    let _ = writeln!(
        out,
        "bandwidth   {:.2} MB/inference (before fusion {:.2}; weights {:.2}, activations {:.2})",
        mega(t.bw_post_bytes),
        mega(t.bw_pre_bytes),
        mega(t.weight_bytes),
        mega(t.activation_bytes)
    );
    let _ = writeln!(out, "intensity   {} FLOPs/byte", t.intensity);
    if let Some(rf) = &r.roofline {
        let _ = writeln!(
            out,
            "roofline    {}: {}-bound, floor {:.4} ms (compute {:.4} ms, transfer {:.4} ms)",
            rf.profile,
            rf.bound.as_str(),
            rf.latency_floor_s * 1e3,
            rf.compute_time_s * 1e3,
            rf.transfer_time_s * 1e3
        );
    }
    out
}

/// Plain-text comparison table.
pub fn render_compare_text(r: &CompareReport) -> String {
    let mut out = String::new();
    let name_w = r.models.iter().map(|m| m.model.len()).max().unwrap_or(5).max(5);
    let _ = writeln!(
        out,
        "{:<name_w$}  {:>10}  {:>10}  {:>10}  {:>10}  {:>12}  {:>10}  bound",
        "model", "GFLOPs", "M params", "param MB", "bw MB", "bw MB (pre)", "FLOPs/B"
    );
    for m in &r.models {
        let _ = writeln!(
            out,
            "{:<name_w$}  {:>10.3}  {:>10.3}  {:>10.2}  {:>10.2}  {:>12.2}  {:>10}  {}",
            m.model,
            giga(m.flops_post),
            mega(m.params),
            mega(m.param_bytes),
            mega(m.bw_post_bytes),
            mega(m.bw_pre_bytes),
            m.intensity,
            m.bound.map(Bound::as_str).unwrap_or("-")
        );
    }
    if !r.errors.is_empty() {
        let _ = writeln!(out, "\nerrors:");
        for e in &r.errors {
            let _ = writeln!(out, "  {}: {}", e.model, e.error);
        }
    }
    out
}

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// Decade range covering all values, at least one decade wide.
fn decades(values: impl Iterator<Item = u64>) -> (i32, i32) {
    let logs: Vec<f64> = values.map(|v| (v.max(1) as f64).log10()).collect();
    let lo = logs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        return (0, 1);
    }
    let (lo, hi) = (lo.floor() as i32, hi.ceil() as i32);
    if hi > lo { (lo, hi) } else { (lo, lo + 1) }
}

/// Log-log scatter of post-fusion FLOPs against post-fusion bytes moved,
/// one labeled point per model. The document has no external references.
pub fn render_svg(rows: &[ModelSummaryRow]) -> String {
    const W: f64 = 760.0;
    const H: f64 = 540.0;
    const LEFT: f64 = 90.0;
    const RIGHT: f64 = 40.0;
    const TOP: f64 = 50.0;
    const BOTTOM: f64 = 70.0;
    let (x0, x1) = decades(rows.iter().map(|r| r.flops_post));
    let (y0, y1) = decades(rows.iter().map(|r| r.bw_post_bytes));
    let px = |v: u64| LEFT + ((v.max(1) as f64).log10() - f64::from(x0)) / f64::from(x1 - x0) * (W - LEFT - RIGHT);
    let py = |v: u64| H - BOTTOM - ((v.max(1) as f64).log10() - f64::from(y0)) / f64::from(y1 - y0) * (H - TOP - BOTTOM);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r##"<rect x="0" y="0" width="{W}" height="{H}" fill="#ffffff"/>"##);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="28" text-anchor="middle" font-size="16">Compute vs memory traffic per inference</text>"#,
        W / 2.0
    );
    let _ = writeln!(s, r##"<g class="grid" stroke="#dddddd">"##);
    for d in x0..=x1 {
        let x = LEFT + f64::from(d - x0) / f64::from(x1 - x0) * (W - LEFT - RIGHT);
        let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{TOP:.2}" x2="{x:.2}" y2="{:.2}"/>"#, H - BOTTOM);
    }
    for d in y0..=y1 {
        let y = H - BOTTOM - f64::from(d - y0) / f64::from(y1 - y0) * (H - TOP - BOTTOM);
        let _ = writeln!(s, r#"<line x1="{LEFT:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}"/>"#, W - RIGHT);
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r##"<g class="ticks" fill="#333333">"##);
    for d in x0..=x1 {
        let x = LEFT + f64::from(d - x0) / f64::from(x1 - x0) * (W - LEFT - RIGHT);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">1e{d}</text>"#, H - BOTTOM + 18.0);
    }
    for d in y0..=y1 {
        let y = H - BOTTOM - f64::from(d - y0) / f64::from(y1 - y0) * (H - TOP - BOTTOM);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">1e{d}</text>"#, LEFT - 8.0, y + 4.0);
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(
        s,
        r##"<rect x="{LEFT:.2}" y="{TOP:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#333333"/>"##,
        W - LEFT - RIGHT,
        H - TOP - BOTTOM
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">FLOPs per inference (log scale)</text>"#,
        LEFT + (W - LEFT - RIGHT) / 2.0,
        H - 20.0
    );
    let _ = writeln!(
        s,
        r#"<text x="24" y="{:.2}" text-anchor="middle" transform="rotate(-90 24 {:.2})">Bytes moved per inference (log scale)</text>"#,
        TOP + (H - TOP - BOTTOM) / 2.0,
        TOP + (H - TOP - BOTTOM) / 2.0
    );
    for r in rows {
        let (x, y) = (px(r.flops_post), py(r.bw_post_bytes));
        let name = xml_escape(&r.model);
        let _ = writeln!(
            s,
            r##"<g class="point"><title>{name}</title><circle cx="{x:.2}" cy="{y:.2}" r="5" fill="#1f77b4"/><text x="{:.2}" y="{:.2}">{name}</text></g>"##,
            x + 8.0,
            y - 6.0
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(name: &str, flops: u64, bw: u64) -> ModelSummaryRow {
        ModelSummaryRow {
            model: name.into(),
            macs: flops / 2,
            flops_pre: flops,
            flops_post: flops,
            params: 10,
            param_bytes: 40,
            bw_pre_bytes: bw,
            bw_post_bytes: bw,
            weight_bytes: 40,
            activation_bytes: bw - 40,
            intensity: round6(flops as f64 / bw as f64),
            bound: Some(Bound::Bandwidth),
        }
    }

    #[test]
    fn round6_examples() {
        assert_eq!(round6(864.0 / 4272.0), 0.202247);
        assert_eq!(round6(123_456_789.0), 123_457_000.0);
        assert_eq!(round6(0.0), 0.0);
    }

    #[test]
    fn csv_header_and_escape() {
        let csv = summary_csv(&[row("a,b", 100, 50)]);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(SUMMARY_CSV_HEADER));
        assert_eq!(lines.next(), Some("\"a,b\",50,100,100,10,40,50,50,40,10,2,bandwidth"));
    }

    #[test]
    fn svg_escapes_and_counts_points() {
        let svg = render_svg(&[row("x<y", 1_000, 100), row("z", 10_000_000, 5_000)]);
        assert!(svg.contains("x&lt;y"));
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!(!svg.contains("href"));
    }

    #[test]
    fn decade_range_never_empty() {
        assert_eq!(decades([100u64].into_iter()), (2, 3));
        assert_eq!(decades([5u64, 5_000].into_iter()), (0, 4));
    }
}
