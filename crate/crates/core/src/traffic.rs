//! Bytes moved between system memory and local memory per inference.
//!
//! Weights, the graph input and the graph output cross the boundary once.
//! Every materialized intermediate is written out and read back, so it moves
//! twice. Tensors kept on chip by fusion move zero times, and outputs of
//! metadata-only ops (Reshape, Flatten and friends) alias their source.

use serde::Serialize;

use crate::ir::{DType, FusionRole, GraphIR, NodeId, TensorId, TensorOrigin, TensorSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TrafficRole {
    Weight,
    GraphInput,
    GraphOutput,
    Intermediate,
    /// Edge kept in local memory by fusion.
    Fused,
    /// Output of a shape-only op; storage belongs to another tensor.
    Alias,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TrafficItem {
    pub tensor: String,
    pub role: TrafficRole,
    pub bytes_each_way: u64,
    pub multiplier: u64,
    pub total_bytes: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrafficOptions {
    /// Charge one read per consumer instead of a single shared read.
    pub per_consumer_reads: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TrafficReport {
    pub dtype: DType,
    pub fused: bool,
    pub per_consumer_reads: bool,
    pub items: Vec<TrafficItem>,
    pub weight_bytes: u64,
    pub input_bytes: u64,
    pub output_bytes: u64,
    /// Everything except weights: input, output and intermediates.
    pub activation_bytes: u64,
    pub grand_total: u64,
    /// Bytes attributed to each node, indexed by node id. A fused group's
    /// traffic is charged to its anchor.
    pub per_node: Vec<u64>,
}

/// `product(dims) * dtype.byte_width`; zero for a tensor without a shape.
pub fn tensor_bytes(spec: &TensorSpec, dtype: DType) -> u64 {
    spec.byte_size(dtype).unwrap_or(0)
}

/// Consumers that actually read the data behind `t`, looking through
/// chains of alias ops. Sorted by node id.
fn real_consumers(ir: &GraphIR, t: TensorId) -> Vec<NodeId> {
    let mut out = vec![];
    let mut stack = vec![t];
    while let Some(t) = stack.pop() {
        for &(n, _) in ir.consumers(t) {
            let node = &ir.nodes[n];
            if node.op.is_alias() {
                stack.push(node.outputs[0]);
            } else {
                out.push(n);
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Whether the data behind `t` reaches a graph output through alias ops.
fn reaches_output(ir: &GraphIR, t: TensorId) -> bool {
    let mut stack = vec![t];
    while let Some(t) = stack.pop() {
        if ir.tensors[t].is_graph_output {
            return true;
        }
        for &(n, _) in ir.consumers(t) {
            if ir.nodes[n].op.is_alias() {
                stack.push(ir.nodes[n].outputs[0]);
            }
        }
    }
    false
}

/// Node that pays for traffic of `n`: the anchor of its fusion group, if any.
fn owner(ir: &GraphIR, n: NodeId) -> NodeId {
    match ir.nodes[n].fusion {
        Some(FusionRole::Absorbed(g)) => ir.fusion_groups[g].anchor,
        _ => n,
    }
}

pub fn model_traffic(ir: &GraphIR, dtype: DType, opts: TrafficOptions) -> TrafficReport {
    let producers = ir.producers();
    let mut items = vec![];
    let mut charged = vec![0u64; ir.nodes.len()];
    let (mut weight_bytes, mut input_bytes, mut output_bytes) = (0, 0, 0);

    for (id, t) in ir.tensors.iter().enumerate() {
        let bytes = tensor_bytes(t, dtype);
        let producer = producers[id];
        let (role, multiplier) = match t.origin {
            TensorOrigin::GraphInput => {
                let readers = real_consumers(ir, id);
                if let Some(&n) = readers.first().or(ir.consumers(id).first().map(|(n, _)| n)) {
                    charged[owner(ir, n)] += bytes;
                }
                input_bytes += bytes;
                (TrafficRole::GraphInput, 1)
            }
            TensorOrigin::Initializer | TensorOrigin::Constant => {
                if !ir.is_weight(id) || t.folded {
                    continue;
                }
                let first = ir
                    .consumers(id)
                    .iter()
                    .find(|&&(n, s)| ir.nodes[n].op.is_data_slot(s))
                    .map(|&(n, _)| n);
                if let Some(n) = first {
                    charged[owner(ir, n)] += bytes;
                }
                weight_bytes += bytes;
                (TrafficRole::Weight, 1)
            }
            TensorOrigin::NodeOutput => {
                let is_alias = producer.is_some_and(|p| ir.nodes[p].op.is_alias());
                let readers = real_consumers(ir, id);
                if t.is_graph_output {
                    if let Some(p) = producer {
                        charged[owner(ir, p)] += bytes;
                    }
                    output_bytes += bytes;
                    (TrafficRole::GraphOutput, 1)
                } else if is_alias {
                    (TrafficRole::Alias, 0)
                } else if !t.materialized {
                    (TrafficRole::Fused, 0)
                } else if readers.is_empty() && reaches_output(ir, id) {
                    // Written straight to a graph output under another name.
                    (TrafficRole::Alias, 0)
                } else {
                    if let Some(p) = producer {
                        charged[owner(ir, p)] += bytes;
                    }
                    if opts.per_consumer_reads {
                        for &r in &readers {
                            charged[owner(ir, r)] += bytes;
                        }
                        (TrafficRole::Intermediate, 1 + readers.len() as u64)
                    } else {
                        if let Some(&r) = readers.first().or(producer.as_ref()) {
                            charged[owner(ir, r)] += bytes;
                        }
                        (TrafficRole::Intermediate, 2)
                    }
                }
            }
        };
        items.push(TrafficItem {
            tensor: t.name.clone(),
            role,
            bytes_each_way: bytes,
            multiplier,
            total_bytes: bytes * multiplier,
        });
    }

    let grand_total: u64 = items.iter().map(|i| i.total_bytes).sum();
    TrafficReport {
        dtype,
        fused: ir.is_fused(),
        per_consumer_reads: opts.per_consumer_reads,
        items,
        weight_bytes,
        input_bytes,
        output_bytes,
        activation_bytes: grand_total - weight_bytes,
        grand_total,
        per_node: charged,
    }
}
