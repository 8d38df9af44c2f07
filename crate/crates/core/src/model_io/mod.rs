//! ONNX model ingestion.
//!
//! [`load_model`] decodes the subset of `ModelProto` the analyzer needs into a
//! [`RawModel`]. Tensor payloads are never copied: initializers keep only their
//! dims and byte length (small integer tensors additionally keep their values,
//! since they are shape operands such as `Reshape` targets).
//!
//! The [`zoo`] submodule fetches registry models into a local cache.

mod onnx;
pub mod wire;
pub mod zoo;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use onnx::{decode_model, encode_model};
pub use zoo::{default_cache_dir, fetch_model, registry, CacheManifest, Fetcher, ZooEntry};

/// Integer tensors up to this many elements keep their values.
pub const MAX_RETAINED_INT_ELEMENTS: u64 = 64;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("file not found: {0}")]
    NotFound(PathBuf),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed ONNX file: {0}")]
    MalformedFile(String),
    #[error("unsupported model: {0}")]
    UnsupportedModel(String),
    #[error("unknown model '{0}' (see `edgecost fetch --list`)")]
    UnknownModel(String),
    #[error("model '{0}' has no download source; use a local file")]
    NotDownloadable(String),
    #[error("download failed: {0}")]
    NetworkError(String),
    #[error("checksum mismatch for {name}: expected {expected}, got {actual}")]
    ChecksumMismatch {
        name: String,
        expected: String,
        actual: String,
    },
    #[error("cache error: {0}")]
    Cache(String),
}

impl From<wire::WireError> for ModelIoError {
    fn from(e: wire::WireError) -> Self {
        ModelIoError::MalformedFile(e.to_string())
    }
}

/// ONNX `TensorProto.DataType`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ElemType {
    Float,
    Uint8,
    Int8,
    Uint16,
    Int16,
    Int32,
    Int64,
    String,
    Bool,
    Float16,
    Double,
    Uint32,
    Uint64,
    Bfloat16,
    Other(i32),
}

impl ElemType {
    pub fn from_code(code: i32) -> Self {
        match code {
            1 => ElemType::Float,
            2 => ElemType::Uint8,
            3 => ElemType::Int8,
            4 => ElemType::Uint16,
            5 => ElemType::Int16,
            6 => ElemType::Int32,
            7 => ElemType::Int64,
            8 => ElemType::String,
            9 => ElemType::Bool,
            10 => ElemType::Float16,
            11 => ElemType::Double,
            12 => ElemType::Uint32,
            13 => ElemType::Uint64,
            16 => ElemType::Bfloat16,
            other => ElemType::Other(other),
        }
    }

    pub fn code(self) -> i32 {
        match self {
            ElemType::Float => 1,
            ElemType::Uint8 => 2,
            ElemType::Int8 => 3,
            ElemType::Uint16 => 4,
            ElemType::Int16 => 5,
            ElemType::Int32 => 6,
            ElemType::Int64 => 7,
            ElemType::String => 8,
            ElemType::Bool => 9,
            ElemType::Float16 => 10,
            ElemType::Double => 11,
            ElemType::Uint32 => 12,
            ElemType::Uint64 => 13,
            ElemType::Bfloat16 => 16,
            ElemType::Other(c) => c,
        }
    }

    /// Storage width in bytes; `None` for strings and unknown codes.
    pub fn byte_width(self) -> Option<u64> {
        match self {
            ElemType::Uint8 | ElemType::Int8 | ElemType::Bool => Some(1),
            ElemType::Uint16 | ElemType::Int16 | ElemType::Float16 | ElemType::Bfloat16 => Some(2),
            ElemType::Float | ElemType::Int32 | ElemType::Uint32 => Some(4),
            ElemType::Int64 | ElemType::Double | ElemType::Uint64 => Some(8),
            ElemType::String | ElemType::Other(_) => None,
        }
    }

    pub fn is_integer(self) -> bool {
        matches!(
            self,
            ElemType::Uint8
                | ElemType::Int8
                | ElemType::Uint16
                | ElemType::Int16
                | ElemType::Int32
                | ElemType::Int64
                | ElemType::Uint32
                | ElemType::Uint64
                | ElemType::Bool
        )
    }
}

/// A stored tensor: initializer or `Constant` attribute value.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub elem_type: ElemType,
    pub dims: Vec<i64>,
    pub payload_byte_length: u64,
    /// Values of small integer tensors; `None` otherwise.
    pub int_values: Option<Vec<i64>>,
}

impl RawTensor {
    pub fn element_count(&self) -> u64 {
        self.dims.iter().map(|&d| d.max(0) as u64).product()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RawDim {
    Fixed(i64),
    Symbolic(String),
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawValueInfo {
    pub name: String,
    pub elem_type: Option<ElemType>,
    /// `None` when the type carries no shape at all.
    pub dims: Option<Vec<RawDim>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttrValue {
    Int(i64),
    Float(f32),
    Ints(Vec<i64>),
    Floats(Vec<f32>),
    Text(String),
    Tensor(RawTensor),
    /// Subgraph-valued attribute (control flow); contents are not decoded.
    Graph,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawNode {
    pub name: String,
    pub op_type: String,
    pub domain: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub attributes: BTreeMap<String, AttrValue>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawModel {
    pub opset_version: i64,
    pub graph_name: String,
    pub nodes: Vec<RawNode>,
    pub initializers: Vec<RawTensor>,
    /// Graph inputs, excluding names that are also initializers.
    pub graph_inputs: Vec<RawValueInfo>,
    pub graph_outputs: Vec<RawValueInfo>,
    pub value_infos: Vec<RawValueInfo>,
}

impl RawModel {
    pub fn graph_output_names(&self) -> impl Iterator<Item = &str> {
        self.graph_outputs.iter().map(|o| o.name.as_str())
    }
}

/// Reads and decodes an ONNX file. The file buffer is dropped before return.
pub fn load_model(path: impl AsRef<Path>) -> Result<RawModel, ModelIoError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            ModelIoError::NotFound(path.to_path_buf())
        } else {
            ModelIoError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })?;
    decode_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn relu_model() -> RawModel {
        RawModel {
            opset_version: 13,
            graph_name: "relu".into(),
            nodes: vec![RawNode {
                name: "r".into(),
                op_type: "Relu".into(),
                domain: String::new(),
                inputs: vec!["x".into()],
                outputs: vec!["y".into()],
                attributes: BTreeMap::new(),
            }],
            initializers: vec![],
            graph_inputs: vec![RawValueInfo {
                name: "x".into(),
                elem_type: Some(ElemType::Float),
                dims: Some(vec![RawDim::Symbolic("N".into()), RawDim::Fixed(8)]),
            }],
            graph_outputs: vec![RawValueInfo {
                name: "y".into(),
                elem_type: Some(ElemType::Float),
                dims: None,
            }],
            value_infos: vec![],
        }
    }

    #[test]
    fn single_relu_model_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("relu.onnx");
        std::fs::write(&path, encode_model(&relu_model())).unwrap();
        let m = load_model(&path).unwrap();
        assert_eq!(m.nodes.len(), 1);
        assert_eq!(m.initializers.len(), 0);
        assert_eq!(m.nodes[0].op_type, "Relu");
    }

    #[test]
    fn truncated_file_is_malformed() {
        let bytes = encode_model(&relu_model());
        let err = decode_model(&bytes[..10]).unwrap_err();
        assert!(matches!(err, ModelIoError::MalformedFile(_)), "{err}");
    }

    #[test]
    fn missing_file_reports_not_found() {
        let err = load_model("/definitely/not/here.onnx").unwrap_err();
        assert!(matches!(err, ModelIoError::NotFound(_)));
        assert!(err.to_string().contains("file not found"));
    }

    #[test]
    fn zero_nodes_is_unsupported() {
        let mut m = relu_model();
        m.nodes.clear();
        let err = decode_model(&encode_model(&m)).unwrap_err();
        assert!(matches!(err, ModelIoError::UnsupportedModel(_)));
    }

    #[test]
    fn byte_widths() {
        assert_eq!(ElemType::Float.byte_width(), Some(4));
        assert_eq!(ElemType::Float16.byte_width(), Some(2));
        assert_eq!(ElemType::Int64.byte_width(), Some(8));
        assert_eq!(ElemType::String.byte_width(), None);
        assert_eq!(ElemType::from_code(ElemType::Bfloat16.code()), ElemType::Bfloat16);
    }
}
