//! End-to-end pipeline: decode, build IR, infer shapes, fuse, cost, traffic.

use std::path::Path;

use thiserror::Error;

use crate::cost::{model_cost, CostError, ModelCost};
use crate::fusion::apply_fusion;
use crate::ir::{build_ir, DType, GraphIR, IrError};
use crate::model_io::{load_model, ModelIoError, RawModel};
use crate::roofline::{classify, Classification, HardwareProfile};
use crate::shape::{conformance, infer_shapes, Conformance, ShapeError};
use crate::traffic::{model_traffic, TrafficOptions, TrafficReport};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    ModelIo(#[from] ModelIoError),
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Cost(#[from] CostError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisOptions {
    pub dtype: DType,
    pub fusion: bool,
    pub per_consumer_reads: bool,
    /// Replaces the first graph input's shape.
    pub input_shape: Option<Vec<i64>>,
    pub batch: i64,
    pub profile: Option<HardwareProfile>,
    /// Overlap compute and transfer in latency floors.
    pub overlap: bool,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            dtype: DType::Fp32,
            fusion: true,
            per_consumer_reads: false,
            input_shape: None,
            batch: 1,
            profile: None,
            overlap: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub model: String,
    pub options: AnalysisOptions,
    /// Shape-inferred graph before fusion.
    pub unfused: GraphIR,
    /// Graph the "post" numbers come from; equal to `unfused` without fusion.
    pub fused: GraphIR,
    pub conformance: Conformance,
    pub cost_pre: ModelCost,
    pub cost_post: ModelCost,
    pub traffic_pre: TrafficReport,
    pub traffic_post: TrafficReport,
    pub classification: Option<Classification>,
}

impl Analysis {
    /// Post-fusion FLOPs per post-fusion byte; zero for a model moving nothing.
    pub fn intensity(&self) -> f64 {
        match self.traffic_post.grand_total {
            0 => 0.0,
            b => self.cost_post.flops as f64 / b as f64,
        }
    }

    pub fn input_shape(&self) -> Vec<i64> {
        self.unfused
            .inputs
            .first()
            .and_then(|&i| self.unfused.tensors[i].shape.clone())
            .unwrap_or_default()
    }
}

pub fn analyze_raw(model: &str, raw: &RawModel, opts: &AnalysisOptions) -> Result<Analysis, AnalysisError> {
    let ir = build_ir(raw, opts.batch)?.retyped(opts.dtype);
    let unfused = infer_shapes(&ir, opts.input_shape.as_deref())?;
    let fused = apply_fusion(&unfused, opts.fusion);
    let traffic_opts = TrafficOptions {
        per_consumer_reads: opts.per_consumer_reads,
    };
    let cost_pre = model_cost(&unfused, opts.dtype)?;
    let cost_post = model_cost(&fused, opts.dtype)?;
    let traffic_pre = model_traffic(&unfused, opts.dtype, traffic_opts);
    let traffic_post = model_traffic(&fused, opts.dtype, traffic_opts);
    let classification = opts
        .profile
        .as_ref()
        .map(|p| classify(cost_post.flops, traffic_post.grand_total, p, opts.overlap));
    Ok(Analysis {
        model: model.to_string(),
        options: opts.clone(),
        conformance: conformance(&unfused),
        unfused,
        fused,
        cost_pre,
        cost_post,
        traffic_pre,
        traffic_post,
        classification,
    })
}

/// Analyzes an ONNX file; the model is named after the file stem.
pub fn analyze_file(path: &Path, opts: &AnalysisOptions) -> Result<Analysis, AnalysisError> {
    let raw = load_model(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| raw.graph_name.clone());
    analyze_raw(&name, &raw, opts)
}
