//! Validated, topologically ordered computation graph.
//!
//! A [`GraphIR`] is built once from a [`RawModel`] and never mutated in place:
//! shape inference and the fusion passes each return a new IR.

mod op;

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::model_io::{ElemType, RawDim, RawModel};

pub use op::{parse_op, Activation, AutoPad, Binary, ConstValue, Op, SliceAttrs, Window};

pub type TensorId = usize;
pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IrError {
    #[error("graph contains a cycle through node(s): {}", .0.join(", "))]
    CyclicGraph(Vec<String>),
    #[error("tensor '{tensor}' consumed by node '{node}' is never produced")]
    DanglingInput { tensor: String, node: String },
    #[error("unsupported op '{op_type}' at node '{node}'")]
    UnsupportedOp { op_type: String, node: String },
    #[error("node '{node}' ({op_type}): attribute '{attr}': {reason}")]
    InvalidAttribute {
        node: String,
        op_type: String,
        attr: String,
        reason: String,
    },
    #[error("tensor '{0}' has more than one producer")]
    DuplicateProducer(String),
    #[error("batch must be positive, got {0}")]
    InvalidBatch(i64),
}

/// Element type used for byte accounting. Every tensor is re-typed uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    Fp32,
    Fp16,
    Int8,
}

impl DType {
    pub fn byte_width(self) -> u64 {
        match self {
            DType::Fp32 => 4,
            DType::Fp16 => 2,
            DType::Int8 => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::Fp32 => "fp32",
            DType::Fp16 => "fp16",
            DType::Int8 => "int8",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fp32" | "float32" | "float" => Ok(DType::Fp32),
            "fp16" | "float16" | "half" => Ok(DType::Fp16),
            "int8" => Ok(DType::Int8),
            other => Err(format!("unknown dtype '{other}' (expected fp32, fp16 or int8)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorOrigin {
    GraphInput,
    Initializer,
    NodeOutput,
    /// Output of a `Constant` node or of a subgraph folded at analysis time.
    Constant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub dtype: DType,
    pub elem_type: Option<ElemType>,
    /// `None` until known; dims may be non-positive only in invalid graphs.
    pub shape: Option<Vec<i64>>,
    pub origin: TensorOrigin,
    pub is_graph_output: bool,
    /// Known integer contents (shape operands).
    pub value: Option<Vec<i64>>,
    /// Shape recorded in the file (value_info, graph input/output types).
    pub stored_shape: Option<Vec<RawDim>>,
    /// Cleared by fusion for edges that never reach system memory.
    pub materialized: bool,
    /// BatchNormalization parameter absorbed into a preceding conv.
    pub folded: bool,
}

impl TensorSpec {
    fn new(name: &str, origin: TensorOrigin) -> Self {
        TensorSpec {
            name: name.to_string(),
            dtype: DType::Fp32,
            elem_type: None,
            shape: None,
            origin,
            is_graph_output: false,
            value: None,
            stored_shape: None,
            materialized: true,
            folded: false,
        }
    }

    pub fn element_count(&self) -> Option<u64> {
        self.shape
            .as_ref()
            .map(|s| s.iter().map(|&d| d.max(0) as u64).product())
    }

    /// `product(dims) * dtype.byte_width`.
    pub fn byte_size(&self, dtype: DType) -> Option<u64> {
        self.element_count().map(|n| n * dtype.byte_width())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionRole {
    Anchor(usize),
    Absorbed(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub name: String,
    pub op_type: String,
    pub op: Op,
    /// `None` marks an omitted optional input.
    pub inputs: Vec<Option<TensorId>>,
    pub outputs: Vec<TensorId>,
    pub fusion: Option<FusionRole>,
}

/// Conv/Gemm anchor plus the BatchNormalization and activation folded into it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionGroup {
    pub anchor: NodeId,
    pub absorbed: Vec<NodeId>,
    pub output: TensorId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphIR {
    pub name: String,
    pub opset: i64,
    pub batch: i64,
    pub nodes: Vec<Node>,
    pub tensors: Vec<TensorSpec>,
    pub inputs: Vec<TensorId>,
    pub outputs: Vec<TensorId>,
    pub fusion_groups: Vec<FusionGroup>,
    by_name: HashMap<String, TensorId>,
    /// consumers[t] = (node, input slot) pairs in node order.
    consumers: Vec<Vec<(NodeId, usize)>>,
}

impl GraphIR {
    /// Assembles an IR from parts and rebuilds the lookup indexes. Performs
    /// no validation; see [`validate`].
    pub fn from_parts(
        name: String,
        opset: i64,
        batch: i64,
        mut nodes: Vec<Node>,
        tensors: Vec<TensorSpec>,
        inputs: Vec<TensorId>,
        outputs: Vec<TensorId>,
    ) -> Self {
        for (i, n) in nodes.iter_mut().enumerate() {
            n.id = i;
        }
        let mut ir = GraphIR {
            name,
            opset,
            batch,
            nodes,
            tensors,
            inputs,
            outputs,
            fusion_groups: vec![],
            by_name: HashMap::new(),
            consumers: vec![],
        };
        ir.reindex();
        ir
    }

    pub(crate) fn reindex(&mut self) {
        self.by_name = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (t.name.clone(), i))
            .collect();
        let mut consumers = vec![vec![]; self.tensors.len()];
        for n in &self.nodes {
            for (slot, input) in n.inputs.iter().enumerate() {
                if let Some(t) = input {
                    consumers[*t].push((n.id, slot));
                }
            }
        }
        self.consumers = consumers;
    }

    pub fn tensor(&self, id: TensorId) -> &TensorSpec {
        &self.tensors[id]
    }

    pub fn tensor_id(&self, name: &str) -> Option<TensorId> {
        self.by_name.get(name).copied()
    }

    pub fn tensor_by_name(&self, name: &str) -> Option<&TensorSpec> {
        self.tensor_id(name).map(|i| &self.tensors[i])
    }

    pub fn consumers(&self, id: TensorId) -> &[(NodeId, usize)] {
        &self.consumers[id]
    }

    /// Node whose outputs include `id`, if any.
    pub fn producer(&self, id: TensorId) -> Option<NodeId> {
        self.nodes
            .iter()
            .find(|n| n.outputs.contains(&id))
            .map(|n| n.id)
    }

    /// Producer map for every tensor, computed in one pass.
    pub fn producers(&self) -> Vec<Option<NodeId>> {
        let mut out = vec![None; self.tensors.len()];
        for n in &self.nodes {
            for &o in &n.outputs {
                out[o].get_or_insert(n.id);
            }
        }
        out
    }

    /// Stored constant (initializer or folded constant) read at a data slot:
    /// the analyzer's notion of a weight.
    pub fn is_weight(&self, id: TensorId) -> bool {
        let t = &self.tensors[id];
        matches!(t.origin, TensorOrigin::Initializer | TensorOrigin::Constant)
            && self.consumers[id]
                .iter()
                .any(|&(n, slot)| self.nodes[n].op.is_data_slot(slot))
    }

    pub fn is_fused(&self) -> bool {
        !self.fusion_groups.is_empty()
    }

    /// Same graph with every tensor re-typed to `dtype`.
    pub fn retyped(&self, dtype: DType) -> GraphIR {
        let mut ir = self.clone();
        for t in &mut ir.tensors {
            t.dtype = dtype;
        }
        ir
    }
}

/// Builds the IR: resolves names, parses ops, sorts topologically.
///
/// A symbolic leading dim on a graph input resolves to `batch`; other symbolic
/// dims stay unknown until shape inference.
pub fn build_ir(raw: &RawModel, batch: i64) -> Result<GraphIR, IrError> {
    if batch < 1 {
        return Err(IrError::InvalidBatch(batch));
    }
    let mut tensors: Vec<TensorSpec> = vec![];
    let mut by_name: HashMap<String, TensorId> = HashMap::new();
    let mut add = |spec: TensorSpec,
                   tensors: &mut Vec<TensorSpec>|
     -> Result<TensorId, IrError> {
        if by_name.contains_key(&spec.name) {
            return Err(IrError::DuplicateProducer(spec.name));
        }
        let id = tensors.len();
        by_name.insert(spec.name.clone(), id);
        tensors.push(spec);
        Ok(id)
    };

    let mut inputs = vec![];
    for vi in &raw.graph_inputs {
        let mut t = TensorSpec::new(&vi.name, TensorOrigin::GraphInput);
        t.elem_type = vi.elem_type;
        t.stored_shape = vi.dims.clone();
        t.shape = vi.dims.as_ref().and_then(|dims| {
            dims.iter()
                .enumerate()
                .map(|(i, d)| match d {
                    RawDim::Fixed(v) if *v > 0 => Some(*v),
                    RawDim::Symbolic(_) | RawDim::Unknown | RawDim::Fixed(_) if i == 0 => Some(batch),
                    _ => None,
                })
                .collect()
        });
        inputs.push(add(t, &mut tensors)?);
    }
    for init in &raw.initializers {
        let mut t = TensorSpec::new(&init.name, TensorOrigin::Initializer);
        t.elem_type = Some(init.elem_type);
        t.shape = Some(init.dims.clone());
        t.value = init.int_values.clone();
        add(t, &mut tensors)?;
    }
    for n in &raw.nodes {
        for o in &n.outputs {
            if o.is_empty() {
                continue;
            }
            add(TensorSpec::new(o, TensorOrigin::NodeOutput), &mut tensors)?;
        }
    }
    let lookup = |name: &str| by_name.get(name).copied();

    for vi in &raw.value_infos {
        if let Some(id) = lookup(&vi.name) {
            tensors[id].stored_shape = vi.dims.clone();
            tensors[id].elem_type = tensors[id].elem_type.or(vi.elem_type);
        }
    }
    let mut outputs = vec![];
    for vi in &raw.graph_outputs {
        let id = lookup(&vi.name).ok_or_else(|| IrError::DanglingInput {
            tensor: vi.name.clone(),
            node: "<graph output>".into(),
        })?;
        tensors[id].is_graph_output = true;
        if vi.dims.is_some() {
            tensors[id].stored_shape = vi.dims.clone();
        }
        tensors[id].elem_type = tensors[id].elem_type.or(vi.elem_type);
        outputs.push(id);
    }

    let mut nodes = Vec::with_capacity(raw.nodes.len());
    for (i, n) in raw.nodes.iter().enumerate() {
        let op = parse_op(n, raw.opset_version)?;
        let ins = n
            .inputs
            .iter()
            .map(|name| {
                if name.is_empty() {
                    Ok(None)
                } else {
                    lookup(name).map(Some).ok_or_else(|| IrError::DanglingInput {
                        tensor: name.clone(),
                        node: n.name.clone(),
                    })
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        let outs = n
            .outputs
            .iter()
            .filter(|o| !o.is_empty())
            .map(|o| lookup(o).expect("registered above"))
            .collect();
        nodes.push(Node {
            id: i,
            name: if n.name.is_empty() {
                format!("{}_{i}", n.op_type)
            } else {
                n.name.clone()
            },
            op_type: n.op_type.clone(),
            op,
            inputs: ins,
            outputs: outs,
            fusion: None,
        });
    }

    let order = topo_order(&nodes, tensors.len())?;
    let mut slots: Vec<Option<Node>> = nodes.into_iter().map(Some).collect();
    let sorted = order
        .into_iter()
        .map(|i| slots[i].take().expect("each index once"))
        .collect();

    Ok(GraphIR::from_parts(
        raw.graph_name.clone(),
        raw.opset_version,
        batch,
        sorted,
        tensors,
        inputs,
        outputs,
    ))
}

/// Kahn's algorithm; ties broken by original position so already-ordered
/// graphs keep their order.
fn topo_order(nodes: &[Node], n_tensors: usize) -> Result<Vec<usize>, IrError> {
    let mut producer: Vec<Option<usize>> = vec![None; n_tensors];
    for (i, n) in nodes.iter().enumerate() {
        for &o in &n.outputs {
            producer[o] = Some(i);
        }
    }
    let mut indegree = vec![0usize; nodes.len()];
    let mut dependents: Vec<Vec<usize>> = vec![vec![]; nodes.len()];
    for (i, n) in nodes.iter().enumerate() {
        for t in n.inputs.iter().flatten() {
            if let Some(p) = producer[*t] {
                indegree[i] += 1;
                dependents[p].push(i);
            }
        }
    }
    let mut ready: BinaryHeap<Reverse<usize>> = indegree
        .iter()
        .enumerate()
        .filter(|(_, &d)| d == 0)
        .map(|(i, _)| Reverse(i))
        .collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(Reverse(i)) = ready.pop() {
        order.push(i);
        for &d in &dependents[i] {
            indegree[d] -= 1;
            if indegree[d] == 0 {
                ready.push(Reverse(d));
            }
        }
    }
    if order.len() != nodes.len() {
        let stuck = indegree
            .iter()
            .enumerate()
            .filter(|(_, &d)| d > 0)
            .map(|(i, _)| nodes[i].name.clone())
            .collect();
        return Err(IrError::CyclicGraph(stuck));
    }
    Ok(order)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// Input not produced by an earlier node, graph input or constant.
    NotTopological { node: String, tensor: String },
    SingleProducer { tensor: String, producers: usize },
    PositiveDims { tensor: String, shape: Vec<i64> },
    ByteSize { tensor: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NotTopological { node, tensor } => {
                write!(f, "node '{node}' reads '{tensor}' before it is produced")
            }
            Violation::SingleProducer { tensor, producers } => {
                write!(f, "tensor '{tensor}' has {producers} producers")
            }
            Violation::PositiveDims { tensor, shape } => {
                write!(f, "tensor '{tensor}' has non-positive dims {shape:?}")
            }
            Violation::ByteSize { tensor } => write!(f, "tensor '{tensor}' byte size overflows"),
        }
    }
}

/// Checks the GraphIR invariants. Empty iff the graph is well formed.
pub fn validate(ir: &GraphIR) -> Vec<Violation> {
    let mut out = vec![];
    let mut producers = vec![0usize; ir.tensors.len()];
    for (i, t) in ir.tensors.iter().enumerate() {
        if matches!(t.origin, TensorOrigin::GraphInput | TensorOrigin::Initializer) {
            producers[i] += 1;
        }
    }
    for n in &ir.nodes {
        for &o in &n.outputs {
            producers[o] += 1;
        }
    }
    for (i, &count) in producers.iter().enumerate() {
        if count > 1 {
            out.push(Violation::SingleProducer {
                tensor: ir.tensors[i].name.clone(),
                producers: count,
            });
        }
    }

    let mut available: Vec<bool> = ir
        .tensors
        .iter()
        .map(|t| t.origin != TensorOrigin::NodeOutput)
        .collect();
    for n in &ir.nodes {
        for t in n.inputs.iter().flatten() {
            if !available[*t] {
                out.push(Violation::NotTopological {
                    node: n.name.clone(),
                    tensor: ir.tensors[*t].name.clone(),
                });
            }
        }
        for &o in &n.outputs {
            available[o] = true;
        }
    }

    for t in &ir.tensors {
        if let Some(shape) = &t.shape {
            if shape.iter().any(|&d| d <= 0) {
                out.push(Violation::PositiveDims {
                    tensor: t.name.clone(),
                    shape: shape.clone(),
                });
            } else if shape
                .iter()
                .try_fold(t.dtype.byte_width(), |acc, &d| acc.checked_mul(d as u64))
                .is_none()
            {
                out.push(Violation::ByteSize {
                    tensor: t.name.clone(),
                });
            }
        }
    }
    out
}
