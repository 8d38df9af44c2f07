//! Static cost analysis of ONNX convolutional networks.
//!
//! The pipeline decodes a model ([`model_io`]), builds a typed graph
//! ([`ir`]), propagates shapes ([`shape`]), applies batch-norm folding and
//! activation fusion ([`fusion`]), then counts arithmetic ([`cost`]) and
//! memory traffic ([`traffic`]) per inference. [`roofline`] classifies the
//! result against a hardware profile and [`report`] renders it.
//! [`analysis`] wires the stages together.

pub mod analysis;
pub mod cost;
pub mod fusion;
pub mod ir;
pub mod model_io;
pub mod report;
pub mod roofline;
pub mod shape;
pub mod traffic;

pub use analysis::{analyze_file, analyze_raw, Analysis, AnalysisError, AnalysisOptions};
pub use ir::DType;
