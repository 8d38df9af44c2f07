//! Typed operator attributes for the supported ONNX op set.

use std::collections::BTreeMap;

use crate::model_io::{AttrValue, RawNode, RawTensor};

use super::IrError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AutoPad {
    NotSet,
    SameUpper,
    SameLower,
    Valid,
}

/// Window attributes shared by Conv and the pooling ops. Per-axis vectors are
/// empty when the attribute was absent; rules fill in defaults once the
/// spatial rank is known.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub kernel_shape: Option<Vec<i64>>,
    pub strides: Vec<i64>,
    pub pads: Vec<i64>,
    pub dilations: Vec<i64>,
    pub auto_pad: AutoPad,
    pub ceil_mode: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    LeakyRelu,
    Clip,
    Sigmoid,
    HardSigmoid,
    PRelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Conv { window: Window, group: i64 },
    Gemm { trans_a: bool, trans_b: bool },
    MatMul,
    BatchNorm,
    Activation(Activation),
    MaxPool(Window),
    AveragePool(Window),
    GlobalAveragePool,
    Binary(Binary),
    Concat { axis: i64 },
    Flatten { axis: i64 },
    Reshape { allow_zero: bool },
    Transpose { perm: Option<Vec<i64>> },
    Squeeze { axes: Option<Vec<i64>> },
    Unsqueeze { axes: Option<Vec<i64>> },
    Softmax { axis: i64 },
    Dropout,
    Identity,
    Lrn { size: i64 },
    Pad { pads: Option<Vec<i64>> },
    ReduceMean { axes: Option<Vec<i64>>, keep_dims: bool },
    Split { axis: i64, split: Option<Vec<i64>> },
    Slice { attrs: Option<SliceAttrs> },
    Constant { value: ConstValue },
    Shape { start: i64, end: Option<i64> },
    Gather { axis: i64 },
    Cast,
}

/// Opset < 10 carries Slice bounds as attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceAttrs {
    pub starts: Vec<i64>,
    pub ends: Vec<i64>,
    pub axes: Option<Vec<i64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstValue {
    pub dims: Vec<i64>,
    pub int_values: Option<Vec<i64>>,
}

impl From<&RawTensor> for ConstValue {
    fn from(t: &RawTensor) -> Self {
        ConstValue {
            dims: t.dims.clone(),
            int_values: t.int_values.clone(),
        }
    }
}

impl Op {
    /// Output aliases input 0 without moving data.
    pub fn is_alias(&self) -> bool {
        matches!(
            self,
            Op::Reshape { .. }
                | Op::Flatten { .. }
                | Op::Squeeze { .. }
                | Op::Unsqueeze { .. }
                | Op::Transpose { .. }
                | Op::Identity
                | Op::Dropout
        )
    }

    /// May be evaluated at analysis time when every data input has a known value.
    pub fn is_foldable(&self) -> bool {
        matches!(
            self,
            Op::Constant { .. }
                | Op::Shape { .. }
                | Op::Gather { .. }
                | Op::Unsqueeze { .. }
                | Op::Squeeze { .. }
                | Op::Concat { .. }
                | Op::Slice { .. }
                | Op::Binary(_)
                | Op::Cast
                | Op::Reshape { .. }
                | Op::Identity
        )
    }

    /// Whether input slot `slot` carries tensor data. Other slots are static
    /// operands (shapes, axes, clip bounds) and never count as weights.
    pub fn is_data_slot(&self, slot: usize) -> bool {
        match self {
            Op::Conv { .. } | Op::Gemm { .. } => slot <= 2,
            Op::BatchNorm => slot <= 4,
            Op::MatMul | Op::Binary(_) | Op::Activation(Activation::PRelu) => slot <= 1,
            Op::Concat { .. } => true,
            Op::Gather { .. } => slot == 0,
            _ => slot == 0,
        }
    }

    pub fn is_conv_like(&self) -> bool {
        matches!(self, Op::Conv { .. } | Op::Gemm { .. })
    }
}

struct Attrs<'a> {
    node: &'a RawNode,
    map: &'a BTreeMap<String, AttrValue>,
}

impl<'a> Attrs<'a> {
    fn bad(&self, name: &str, why: &str) -> IrError {
        IrError::InvalidAttribute {
            node: self.node.name.clone(),
            op_type: self.node.op_type.clone(),
            attr: name.to_string(),
            reason: why.to_string(),
        }
    }

    fn int(&self, name: &str, default: i64) -> Result<i64, IrError> {
        match self.map.get(name) {
            None => Ok(default),
            Some(AttrValue::Int(i)) => Ok(*i),
            Some(_) => Err(self.bad(name, "expected int")),
        }
    }

    fn float(&self, name: &str) -> Result<Option<f32>, IrError> {
        match self.map.get(name) {
            None => Ok(None),
            Some(AttrValue::Float(f)) => Ok(Some(*f)),
            Some(_) => Err(self.bad(name, "expected float")),
        }
    }

    fn ints(&self, name: &str) -> Result<Option<Vec<i64>>, IrError> {
        match self.map.get(name) {
            None => Ok(None),
            Some(AttrValue::Ints(v)) => Ok(Some(v.clone())),
            Some(_) => Err(self.bad(name, "expected int list")),
        }
    }

    fn text(&self, name: &str) -> Result<Option<&'a str>, IrError> {
        match self.map.get(name) {
            None => Ok(None),
            Some(AttrValue::Text(s)) => Ok(Some(s.as_str())),
            Some(_) => Err(self.bad(name, "expected string")),
        }
    }

    fn positive_list(&self, name: &str) -> Result<Vec<i64>, IrError> {
        let v = self.ints(name)?.unwrap_or_default();
        if v.iter().any(|&x| x < 1) {
            return Err(self.bad(name, "values must be >= 1"));
        }
        Ok(v)
    }

    fn window(&self, kernel_required: bool) -> Result<Window, IrError> {
        let kernel_shape = self.ints("kernel_shape")?;
        match &kernel_shape {
            Some(k) if k.iter().any(|&x| x < 1) => {
                return Err(self.bad("kernel_shape", "values must be >= 1"))
            }
            None if kernel_required => return Err(self.bad("kernel_shape", "required")),
            _ => {}
        }
        let pads = self.ints("pads")?.unwrap_or_default();
        if pads.iter().any(|&p| p < 0) {
            return Err(self.bad("pads", "negative padding"));
        }
        if !pads.is_empty() && pads.len() % 2 != 0 {
            return Err(self.bad("pads", "length must be even"));
        }
        let auto_pad = match self.text("auto_pad")?.unwrap_or("NOTSET") {
            "NOTSET" | "" => AutoPad::NotSet,
            "SAME_UPPER" => AutoPad::SameUpper,
            "SAME_LOWER" => AutoPad::SameLower,
            "VALID" => AutoPad::Valid,
            _ => return Err(self.bad("auto_pad", "unknown mode")),
        };
        Ok(Window {
            kernel_shape,
            strides: self.positive_list("strides")?,
            pads,
            dilations: self.positive_list("dilations")?,
            auto_pad,
            ceil_mode: self.int("ceil_mode", 0)? != 0,
        })
    }
}

/// Parses and validates a node's op type and attributes.
pub fn parse_op(node: &RawNode, opset: i64) -> Result<Op, IrError> {
    let a = Attrs {
        node,
        map: &node.attributes,
    };
    if !(node.domain.is_empty() || node.domain == "ai.onnx") {
        return Err(unsupported(node));
    }
    let op = match node.op_type.as_str() {
        "Conv" => {
            let group = a.int("group", 1)?;
            if group < 1 {
                return Err(a.bad("group", "must be >= 1"));
            }
            Op::Conv {
                window: a.window(false)?,
                group,
            }
        }
        "Gemm" => Op::Gemm {
            trans_a: a.int("transA", 0)? != 0,
            trans_b: a.int("transB", 0)? != 0,
        },
        "MatMul" => Op::MatMul,
        "BatchNormalization" => Op::BatchNorm,
        "Relu" => Op::Activation(Activation::Relu),
        "LeakyRelu" => Op::Activation(Activation::LeakyRelu),
        "Clip" => {
            a.float("min")?;
            a.float("max")?;
            Op::Activation(Activation::Clip)
        }
        "Sigmoid" => Op::Activation(Activation::Sigmoid),
        "HardSigmoid" => Op::Activation(Activation::HardSigmoid),
        "PRelu" => Op::Activation(Activation::PRelu),
        "MaxPool" => Op::MaxPool(a.window(true)?),
        "AveragePool" => Op::AveragePool(a.window(true)?),
        "GlobalAveragePool" => Op::GlobalAveragePool,
        "Add" => Op::Binary(Binary::Add),
        "Sub" => Op::Binary(Binary::Sub),
        "Mul" => Op::Binary(Binary::Mul),
        "Div" => Op::Binary(Binary::Div),
        "Concat" => Op::Concat {
            axis: a.int("axis", i64::MIN)?,
        },
        "Flatten" => Op::Flatten {
            axis: a.int("axis", 1)?,
        },
        "Reshape" => Op::Reshape {
            allow_zero: a.int("allowzero", 0)? != 0,
        },
        "Transpose" => Op::Transpose {
            perm: a.ints("perm")?,
        },
        "Squeeze" => Op::Squeeze { axes: a.ints("axes")? },
        "Unsqueeze" => Op::Unsqueeze { axes: a.ints("axes")? },
        "Softmax" => Op::Softmax {
            axis: a.int("axis", if opset >= 13 { -1 } else { 1 })?,
        },
        "Dropout" => Op::Dropout,
        "Identity" => Op::Identity,
        "LRN" => {
            let size = a.int("size", 0)?;
            if size < 1 {
                return Err(a.bad("size", "required and >= 1"));
            }
            Op::Lrn { size }
        }
        "Pad" => {
            let pads = a.ints("pads")?.or(a.ints("paddings")?);
            if let Some(p) = &pads {
                if p.len() % 2 != 0 {
                    return Err(a.bad("pads", "length must be even"));
                }
            }
            Op::Pad { pads }
        }
        "ReduceMean" => Op::ReduceMean {
            axes: a.ints("axes")?,
            keep_dims: a.int("keepdims", 1)? != 0,
        },
        "Split" => Op::Split {
            axis: a.int("axis", 0)?,
            split: a.ints("split")?,
        },
        "Slice" => {
            let attrs = match (a.ints("starts")?, a.ints("ends")?) {
                (Some(starts), Some(ends)) => {
                    if starts.len() != ends.len() {
                        return Err(a.bad("ends", "length differs from starts"));
                    }
                    Some(SliceAttrs {
                        starts,
                        ends,
                        axes: a.ints("axes")?,
                    })
                }
                (None, None) => None,
                _ => return Err(a.bad("starts", "starts and ends must both be present")),
            };
            Op::Slice { attrs }
        }
        "Constant" => {
            let value = match node.attributes.get("value") {
                Some(AttrValue::Tensor(t)) => ConstValue::from(t),
                Some(AttrValue::Int(i)) => ConstValue {
                    dims: vec![],
                    int_values: Some(vec![*i]),
                },
                Some(AttrValue::Ints(v)) => ConstValue {
                    dims: vec![v.len() as i64],
                    int_values: Some(v.clone()),
                },
                Some(AttrValue::Float(_)) => ConstValue {
                    dims: vec![],
                    int_values: None,
                },
                Some(AttrValue::Floats(v)) => ConstValue {
                    dims: vec![v.len() as i64],
                    int_values: None,
                },
                _ => {
                    // value_int / value_ints / value_float(s) spellings (opset 12+)
                    if let Some(i) = node.attributes.get("value_int") {
                        let AttrValue::Int(i) = i else {
                            return Err(a.bad("value_int", "expected int"));
                        };
                        ConstValue {
                            dims: vec![],
                            int_values: Some(vec![*i]),
                        }
                    } else if let Some(v) = a.ints("value_ints")? {
                        ConstValue {
                            dims: vec![v.len() as i64],
                            int_values: Some(v),
                        }
                    } else if a.float("value_float")?.is_some() {
                        ConstValue {
                            dims: vec![],
                            int_values: None,
                        }
                    } else if let Some(AttrValue::Floats(v)) = node.attributes.get("value_floats") {
                        ConstValue {
                            dims: vec![v.len() as i64],
                            int_values: None,
                        }
                    } else {
                        return Err(a.bad("value", "Constant without a supported value"));
                    }
                }
            };
            Op::Constant { value }
        }
        "Shape" => Op::Shape {
            start: a.int("start", 0)?,
            end: match a.map.get("end") {
                None => None,
                Some(_) => Some(a.int("end", 0)?),
            },
        },
        "Gather" => Op::Gather {
            axis: a.int("axis", 0)?,
        },
        "Cast" => Op::Cast,
        _ => return Err(unsupported(node)),
    };
    if let Op::Concat { axis: i64::MIN } = op {
        return Err(a.bad("axis", "required"));
    }
    Ok(op)
}

fn unsupported(node: &RawNode) -> IrError {
    IrError::UnsupportedOp {
        op_type: if node.domain.is_empty() {
            node.op_type.clone()
        } else {
            format!("{}::{}", node.domain, node.op_type)
        },
        node: node.name.clone(),
    }
}
