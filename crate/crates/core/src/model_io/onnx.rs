//! `ModelProto` subset: field numbers follow onnx.proto (IR version 3 through 10).

use std::collections::{BTreeMap, HashSet};

use super::wire::{count_repeated, push_floats, push_varints, utf8, FieldValue, Reader, Writer};
use super::{
    AttrValue, ElemType, ModelIoError, RawDim, RawModel, RawNode, RawTensor, RawValueInfo,
    MAX_RETAINED_INT_ELEMENTS,
};

// ModelProto
const MODEL_IR_VERSION: u32 = 1;
const MODEL_GRAPH: u32 = 7;
const MODEL_OPSET_IMPORT: u32 = 8;
// OperatorSetIdProto
const OPSET_DOMAIN: u32 = 1;
const OPSET_VERSION: u32 = 2;
// GraphProto
const GRAPH_NODE: u32 = 1;
const GRAPH_NAME: u32 = 2;
const GRAPH_INITIALIZER: u32 = 5;
const GRAPH_INPUT: u32 = 11;
const GRAPH_OUTPUT: u32 = 12;
const GRAPH_VALUE_INFO: u32 = 13;
// NodeProto
const NODE_INPUT: u32 = 1;
const NODE_OUTPUT: u32 = 2;
const NODE_NAME: u32 = 3;
const NODE_OP_TYPE: u32 = 4;
const NODE_ATTRIBUTE: u32 = 5;
const NODE_DOMAIN: u32 = 7;
// AttributeProto
const ATTR_NAME: u32 = 1;
const ATTR_F: u32 = 2;
const ATTR_I: u32 = 3;
const ATTR_S: u32 = 4;
const ATTR_T: u32 = 5;
const ATTR_G: u32 = 6;
const ATTR_FLOATS: u32 = 7;
const ATTR_INTS: u32 = 8;
const ATTR_TYPE: u32 = 20;
// AttributeProto.AttributeType
const ATYPE_FLOAT: u64 = 1;
const ATYPE_INT: u64 = 2;
const ATYPE_STRING: u64 = 3;
const ATYPE_TENSOR: u64 = 4;
const ATYPE_GRAPH: u64 = 5;
const ATYPE_FLOATS: u64 = 6;
const ATYPE_INTS: u64 = 7;
// TensorProto
const TENSOR_DIMS: u32 = 1;
const TENSOR_DATA_TYPE: u32 = 2;
const TENSOR_FLOAT_DATA: u32 = 4;
const TENSOR_INT32_DATA: u32 = 5;
const TENSOR_STRING_DATA: u32 = 6;
const TENSOR_INT64_DATA: u32 = 7;
const TENSOR_NAME: u32 = 8;
const TENSOR_RAW_DATA: u32 = 9;
const TENSOR_DOUBLE_DATA: u32 = 10;
const TENSOR_UINT64_DATA: u32 = 11;
const TENSOR_EXTERNAL_DATA: u32 = 13;
const TENSOR_DATA_LOCATION: u32 = 14;
const DATA_LOCATION_EXTERNAL: u64 = 1;
// StringStringEntryProto
const ENTRY_KEY: u32 = 1;
const ENTRY_VALUE: u32 = 2;
// ValueInfoProto / TypeProto / TensorShapeProto
const VI_NAME: u32 = 1;
const VI_TYPE: u32 = 2;
const TYPE_TENSOR: u32 = 1;
const TT_ELEM_TYPE: u32 = 1;
const TT_SHAPE: u32 = 2;
const SHAPE_DIM: u32 = 1;
const DIM_VALUE: u32 = 1;
const DIM_PARAM: u32 = 2;

type Result<T> = std::result::Result<T, ModelIoError>;

fn malformed(msg: impl Into<String>) -> ModelIoError {
    ModelIoError::MalformedFile(msg.into())
}

fn expect_len<'a>(field: u32, v: FieldValue<'a>) -> Result<&'a [u8]> {
    v.as_bytes()
        .ok_or_else(|| malformed(format!("field {field}: expected length-delimited value")))
}

fn expect_int(field: u32, v: FieldValue<'_>) -> Result<i64> {
    v.as_u64()
        .map(|x| x as i64)
        .ok_or_else(|| malformed(format!("field {field}: expected scalar value")))
}

/// Decodes a serialized `ModelProto`.
pub fn decode_model(bytes: &[u8]) -> Result<RawModel> {
    let mut r = Reader::new(bytes);
    let mut graph = None;
    let mut opset = None;
    while let Some((field, value)) = r.next_field()? {
        match field {
            MODEL_GRAPH => graph = Some(expect_len(field, value)?),
            MODEL_OPSET_IMPORT => {
                let (domain, version) = decode_opset(r.nested(expect_len(field, value)?))?;
                if domain.is_empty() || domain == "ai.onnx" {
                    opset = Some(version);
                }
            }
            _ => {}
        }
    }
    let graph = graph.ok_or_else(|| ModelIoError::UnsupportedModel("model has no graph".into()))?;
    let mut model = decode_graph(r.nested(graph))?;
    model.opset_version = opset.unwrap_or(1);
    if model.nodes.is_empty() {
        return Err(ModelIoError::UnsupportedModel("graph has zero nodes".into()));
    }
    Ok(model)
}

fn decode_opset(mut r: Reader<'_>) -> Result<(String, i64)> {
    let mut domain = String::new();
    let mut version = 0;
    while let Some((field, value)) = r.next_field()? {
        match field {
            OPSET_DOMAIN => domain = utf8(field, expect_len(field, value)?)?,
            OPSET_VERSION => version = expect_int(field, value)?,
            _ => {}
        }
    }
    Ok((domain, version))
}

fn decode_graph(mut r: Reader<'_>) -> Result<RawModel> {
    let mut model = RawModel {
        opset_version: 0,
        graph_name: String::new(),
        nodes: vec![],
        initializers: vec![],
        graph_inputs: vec![],
        graph_outputs: vec![],
        value_infos: vec![],
    };
    while let Some((field, value)) = r.next_field()? {
        match field {
            GRAPH_NODE => model.nodes.push(decode_node(r.nested(expect_len(field, value)?))?),
            GRAPH_NAME => model.graph_name = utf8(field, expect_len(field, value)?)?,
            GRAPH_INITIALIZER => model
                .initializers
                .push(decode_tensor(r.nested(expect_len(field, value)?))?),
            GRAPH_INPUT => model
                .graph_inputs
                .push(decode_value_info(r.nested(expect_len(field, value)?))?),
            GRAPH_OUTPUT => model
                .graph_outputs
                .push(decode_value_info(r.nested(expect_len(field, value)?))?),
            GRAPH_VALUE_INFO => model
                .value_infos
                .push(decode_value_info(r.nested(expect_len(field, value)?))?),
            _ => {}
        }
    }
    // IR < 4 lists every initializer among the graph inputs as well.
    let init_names: HashSet<&str> = model.initializers.iter().map(|t| t.name.as_str()).collect();
    model
        .graph_inputs
        .retain(|vi| !init_names.contains(vi.name.as_str()));
    Ok(model)
}

fn decode_node(mut r: Reader<'_>) -> Result<RawNode> {
    let mut node = RawNode {
        name: String::new(),
        op_type: String::new(),
        domain: String::new(),
        inputs: vec![],
        outputs: vec![],
        attributes: BTreeMap::new(),
    };
    while let Some((field, value)) = r.next_field()? {
        match field {
            NODE_INPUT => node.inputs.push(utf8(field, expect_len(field, value)?)?),
            NODE_OUTPUT => node.outputs.push(utf8(field, expect_len(field, value)?)?),
            NODE_NAME => node.name = utf8(field, expect_len(field, value)?)?,
            NODE_OP_TYPE => node.op_type = utf8(field, expect_len(field, value)?)?,
            NODE_DOMAIN => node.domain = utf8(field, expect_len(field, value)?)?,
            NODE_ATTRIBUTE => {
                if let Some((name, attr)) = decode_attribute(r.nested(expect_len(field, value)?))? {
                    node.attributes.insert(name, attr);
                }
            }
            _ => {}
        }
    }
    if node.op_type.is_empty() {
        return Err(malformed(format!("node '{}' has empty op_type", node.name)));
    }
    if node.outputs.is_empty() {
        return Err(malformed(format!("node '{}' has no outputs", node.name)));
    }
    Ok(node)
}

fn decode_attribute(mut r: Reader<'_>) -> Result<Option<(String, AttrValue)>> {
    let mut name = String::new();
    let mut declared = None;
    let (mut f, mut i, mut s, mut t, mut g) = (None, None, None, None, false);
    let mut floats = vec![];
    let mut ints = vec![];
    let mut saw_floats = false;
    let mut saw_ints = false;
    while let Some((field, value)) = r.next_field()? {
        match field {
            ATTR_NAME => name = utf8(field, expect_len(field, value)?)?,
            ATTR_TYPE => declared = value.as_u64(),
            ATTR_F => f = value.as_u64().map(|b| f32::from_bits(b as u32)),
            ATTR_I => i = Some(expect_int(field, value)?),
            ATTR_S => s = Some(expect_len(field, value)?),
            ATTR_T => t = Some(decode_tensor(r.nested(expect_len(field, value)?))?),
            ATTR_G => g = true,
            ATTR_FLOATS => {
                saw_floats = true;
                push_floats(value, &mut floats)?;
            }
            ATTR_INTS => {
                saw_ints = true;
                push_varints(value, &mut ints)?;
            }
            _ => {}
        }
    }
    // Older writers omit `type`; infer it from whichever field is present.
    let attr = match declared {
        Some(ATYPE_FLOAT) => AttrValue::Float(f.unwrap_or_default()),
        Some(ATYPE_INT) => AttrValue::Int(i.unwrap_or_default()),
        Some(ATYPE_STRING) => AttrValue::Text(utf8(ATTR_S, s.unwrap_or_default())?),
        Some(ATYPE_TENSOR) => match t {
            Some(t) => AttrValue::Tensor(t),
            None => return Err(malformed(format!("attribute '{name}' missing tensor"))),
        },
        Some(ATYPE_GRAPH) => AttrValue::Graph,
        Some(ATYPE_FLOATS) => AttrValue::Floats(floats),
        Some(ATYPE_INTS) => AttrValue::Ints(ints),
        Some(_) => return Ok(None),
        None => {
            if let Some(t) = t {
                AttrValue::Tensor(t)
            } else if g {
                AttrValue::Graph
            } else if saw_ints {
                AttrValue::Ints(ints)
            } else if saw_floats {
                AttrValue::Floats(floats)
            } else if let Some(s) = s {
                AttrValue::Text(utf8(ATTR_S, s)?)
            } else if let Some(f) = f {
                AttrValue::Float(f)
            } else if let Some(i) = i {
                AttrValue::Int(i)
            } else {
                return Ok(None);
            }
        }
    };
    Ok(Some((name, attr)))
}

fn decode_int_payload(raw: &[u8], elem_type: ElemType) -> Vec<i64> {
    let width = elem_type.byte_width().unwrap_or(1) as usize;
    raw.chunks_exact(width)
        .map(|c| match elem_type {
            ElemType::Int64 | ElemType::Uint64 => i64::from_le_bytes(c.try_into().unwrap()),
            ElemType::Int32 => i32::from_le_bytes(c.try_into().unwrap()) as i64,
            ElemType::Uint32 => u32::from_le_bytes(c.try_into().unwrap()) as i64,
            ElemType::Int16 => i16::from_le_bytes(c.try_into().unwrap()) as i64,
            ElemType::Uint16 => u16::from_le_bytes(c.try_into().unwrap()) as i64,
            ElemType::Int8 => c[0] as i8 as i64,
            _ => c[0] as i64,
        })
        .collect()
}

fn decode_tensor(mut r: Reader<'_>) -> Result<RawTensor> {
    let mut name = String::new();
    let mut dims = vec![];
    let mut elem_type = ElemType::Other(0);
    let mut raw_len: Option<u64> = None;
    let mut raw_bytes: Option<&[u8]> = None;
    let mut typed_count = 0u64;
    let mut typed_ints: Vec<i64> = vec![];
    let mut external = false;
    let mut external_length: Option<u64> = None;

    while let Some((field, value)) = r.next_field()? {
        match field {
            TENSOR_DIMS => push_varints(value, &mut dims)?,
            TENSOR_DATA_TYPE => elem_type = ElemType::from_code(expect_int(field, value)? as i32),
            TENSOR_NAME => name = utf8(field, expect_len(field, value)?)?,
            TENSOR_RAW_DATA => {
                let body = expect_len(field, value)?;
                raw_len = Some(body.len() as u64);
                // Only a borrow into the file buffer; dropped with it.
                raw_bytes = Some(body);
            }
            TENSOR_FLOAT_DATA => typed_count += count_repeated(value, Some(4))?,
            TENSOR_DOUBLE_DATA => typed_count += count_repeated(value, Some(8))?,
            TENSOR_UINT64_DATA => typed_count += count_repeated(value, None)?,
            TENSOR_STRING_DATA => typed_count += 1,
            TENSOR_INT32_DATA | TENSOR_INT64_DATA => {
                let n = count_repeated(value, None)?;
                typed_count += n;
                if typed_ints.len() as u64 <= MAX_RETAINED_INT_ELEMENTS {
                    push_varints(value, &mut typed_ints)?;
                }
            }
            TENSOR_DATA_LOCATION => external = value.as_u64() == Some(DATA_LOCATION_EXTERNAL),
            TENSOR_EXTERNAL_DATA => {
                let (k, v) = decode_entry(r.nested(expect_len(field, value)?))?;
                let parse = |v: &str| {
                    v.parse::<u64>()
                        .map_err(|_| malformed(format!("tensor '{name}': bad external {k} '{v}'")))
                };
                // Only the declared length matters; location/offset are never read.
                if k == "length" {
                    external_length = Some(parse(&v)?);
                }
            }
            _ => {}
        }
    }

    if dims.iter().any(|&d| d < 0) {
        return Err(malformed(format!("tensor '{name}' has negative dim {dims:?}")));
    }
    let count: u64 = dims.iter().map(|&d| d as u64).product();
    let width = elem_type.byte_width();
    let declared = width.map(|w| count * w);

    let payload_byte_length = if external {
        match (external_length, declared) {
            (Some(len), _) => len,
            (None, Some(d)) => d,
            (None, None) => 0,
        }
    } else if let Some(len) = raw_len {
        len
    } else {
        // int32_data also carries 8/16-bit and fp16 payloads one element per entry.
        typed_count * width.unwrap_or(0)
    };

    if let Some(expected) = declared {
        if payload_byte_length != expected {
            return Err(malformed(format!(
                "tensor '{name}': payload is {payload_byte_length} bytes, dims {dims:?} of {elem_type:?} need {expected}"
            )));
        }
    }

    let int_values = if elem_type.is_integer() && count <= MAX_RETAINED_INT_ELEMENTS && !external {
        match raw_bytes {
            Some(raw) => Some(decode_int_payload(raw, elem_type)),
            None => Some(typed_ints),
        }
    } else {
        None
    };

    Ok(RawTensor {
        name,
        elem_type,
        dims,
        payload_byte_length,
        int_values,
    })
}

fn decode_entry(mut r: Reader<'_>) -> Result<(String, String)> {
    let (mut k, mut v) = (String::new(), String::new());
    while let Some((field, value)) = r.next_field()? {
        match field {
            ENTRY_KEY => k = utf8(field, expect_len(field, value)?)?,
            ENTRY_VALUE => v = utf8(field, expect_len(field, value)?)?,
            _ => {}
        }
    }
    Ok((k, v))
}

fn decode_value_info(mut r: Reader<'_>) -> Result<RawValueInfo> {
    let mut vi = RawValueInfo {
        name: String::new(),
        elem_type: None,
        dims: None,
    };
    while let Some((field, value)) = r.next_field()? {
        match field {
            VI_NAME => vi.name = utf8(field, expect_len(field, value)?)?,
            VI_TYPE => {
                let mut tr = r.nested(expect_len(field, value)?);
                while let Some((tf, tv)) = tr.next_field()? {
                    if tf == TYPE_TENSOR {
                        decode_tensor_type(tr.nested(expect_len(tf, tv)?), &mut vi)?;
                    }
                }
            }
            _ => {}
        }
    }
    Ok(vi)
}

fn decode_tensor_type(mut r: Reader<'_>, vi: &mut RawValueInfo) -> Result<()> {
    while let Some((field, value)) = r.next_field()? {
        match field {
            TT_ELEM_TYPE => vi.elem_type = Some(ElemType::from_code(expect_int(field, value)? as i32)),
            TT_SHAPE => {
                let mut dims = vec![];
                let mut sr = r.nested(expect_len(field, value)?);
                while let Some((sf, sv)) = sr.next_field()? {
                    if sf == SHAPE_DIM {
                        dims.push(decode_dim(sr.nested(expect_len(sf, sv)?))?);
                    }
                }
                vi.dims = Some(dims);
            }
            _ => {}
        }
    }
    Ok(())
}

fn decode_dim(mut r: Reader<'_>) -> Result<RawDim> {
    let mut dim = RawDim::Unknown;
    while let Some((field, value)) = r.next_field()? {
        match field {
            DIM_VALUE => dim = RawDim::Fixed(expect_int(field, value)?),
            DIM_PARAM => dim = RawDim::Symbolic(utf8(field, expect_len(field, value)?)?),
            _ => {}
        }
    }
    Ok(dim)
}

/// Serializes a [`RawModel`] as a `ModelProto`.
///
/// Payloads are zero-filled to their recorded byte length (or hold the
/// retained integer values). Used to build test fixtures.
pub fn encode_model(model: &RawModel) -> Vec<u8> {
    let mut graph = Writer::new();
    for n in &model.nodes {
        graph.message(GRAPH_NODE, encode_node(n));
    }
    graph.string(GRAPH_NAME, &model.graph_name);
    for t in &model.initializers {
        graph.message(GRAPH_INITIALIZER, encode_tensor(t));
    }
    for vi in &model.graph_inputs {
        graph.message(GRAPH_INPUT, encode_value_info(vi));
    }
    for vi in &model.graph_outputs {
        graph.message(GRAPH_OUTPUT, encode_value_info(vi));
    }
    for vi in &model.value_infos {
        graph.message(GRAPH_VALUE_INFO, encode_value_info(vi));
    }

    let mut opset = Writer::new();
    opset.string(OPSET_DOMAIN, "").int(OPSET_VERSION, model.opset_version);

    let mut m = Writer::new();
    m.int(MODEL_IR_VERSION, 7);
    m.message(MODEL_GRAPH, graph);
    m.message(MODEL_OPSET_IMPORT, opset);
    m.into_bytes()
}

fn encode_node(n: &RawNode) -> Writer {
    let mut w = Writer::new();
    for i in &n.inputs {
        w.string(NODE_INPUT, i);
    }
    for o in &n.outputs {
        w.string(NODE_OUTPUT, o);
    }
    w.string(NODE_NAME, &n.name).string(NODE_OP_TYPE, &n.op_type);
    if !n.domain.is_empty() {
        w.string(NODE_DOMAIN, &n.domain);
    }
    for (name, value) in &n.attributes {
        let mut a = Writer::new();
        a.string(ATTR_NAME, name);
        match value {
            AttrValue::Int(i) => a.int(ATTR_I, *i).varint(ATTR_TYPE, ATYPE_INT),
            AttrValue::Float(f) => a.float(ATTR_F, *f).varint(ATTR_TYPE, ATYPE_FLOAT),
            AttrValue::Ints(v) => a.packed_ints(ATTR_INTS, v).varint(ATTR_TYPE, ATYPE_INTS),
            AttrValue::Floats(v) => a.packed_floats(ATTR_FLOATS, v).varint(ATTR_TYPE, ATYPE_FLOATS),
            AttrValue::Text(s) => a.string(ATTR_S, s).varint(ATTR_TYPE, ATYPE_STRING),
            AttrValue::Tensor(t) => a.message(ATTR_T, encode_tensor(t)).varint(ATTR_TYPE, ATYPE_TENSOR),
            AttrValue::Graph => a.message(ATTR_G, Writer::new()).varint(ATTR_TYPE, ATYPE_GRAPH),
        };
        w.message(NODE_ATTRIBUTE, a);
    }
    w
}

fn encode_tensor(t: &RawTensor) -> Writer {
    let mut w = Writer::new();
    w.packed_ints(TENSOR_DIMS, &t.dims);
    w.int(TENSOR_DATA_TYPE, t.elem_type.code() as i64);
    w.string(TENSOR_NAME, &t.name);
    match (&t.int_values, t.elem_type.byte_width()) {
        (Some(vals), Some(width)) => {
            let raw: Vec<u8> = vals
                .iter()
                .flat_map(|v| v.to_le_bytes()[..width as usize].to_vec())
                .collect();
            w.bytes(TENSOR_RAW_DATA, &raw);
        }
        _ => {
            w.bytes(TENSOR_RAW_DATA, &vec![0u8; t.payload_byte_length as usize]);
        }
    }
    w
}

fn encode_value_info(vi: &RawValueInfo) -> Writer {
    let mut tt = Writer::new();
    if let Some(e) = vi.elem_type {
        tt.int(TT_ELEM_TYPE, e.code() as i64);
    }
    if let Some(dims) = &vi.dims {
        let mut shape = Writer::new();
        for d in dims {
            let mut dw = Writer::new();
            match d {
                RawDim::Fixed(v) => {
                    dw.int(DIM_VALUE, *v);
                }
                RawDim::Symbolic(s) => {
                    dw.string(DIM_PARAM, s);
                }
                RawDim::Unknown => {}
            }
            shape.message(SHAPE_DIM, dw);
        }
        tt.message(TT_SHAPE, shape);
    }
    let mut ty = Writer::new();
    ty.message(TYPE_TENSOR, tt);
    let mut w = Writer::new();
    w.string(VI_NAME, &vi.name).message(VI_TYPE, ty);
    w
}
