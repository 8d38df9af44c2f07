//! MAC, FLOP and parameter counting.
//!
//! Counting conventions: a multiply-accumulate is two FLOPs, bias adds are
//! FLOPs but not MACs, average pooling costs one op per kernel tap per output
//! element, max pooling is free, and elementwise ops cost one op per output
//! element (standalone BatchNormalization two, LRN and Softmax five).

use serde::Serialize;
use thiserror::Error;

use crate::ir::{DType, FusionRole, GraphIR, Node, NodeId, Op, TensorId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CostError {
    #[error("group {group} does not divide channel counts C_in={c_in}, C_out={c_out}")]
    InvalidGroup { c_in: u64, c_out: u64, group: u64 },
    #[error("no cost rule for op '{op_type}' at node '{node}'")]
    MissingCostRule { op_type: String, node: String },
    #[error("node '{node}': tensor '{tensor}' has no inferred shape")]
    MissingShape { node: String, tensor: String },
}

/// Arithmetic cost of one operator instance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct OpCost {
    pub macs: u64,
    pub flops: u64,
    pub params: u64,
}

/// Standard or grouped convolution. Dimensions are per image.
#[allow(clippy::too_many_arguments)]
pub fn conv_cost(
    c_in: u64,
    c_out: u64,
    h_out: u64,
    w_out: u64,
    h_k: u64,
    w_k: u64,
    group: u64,
    has_bias: bool,
) -> Result<OpCost, CostError> {
    if group == 0 || !c_in.is_multiple_of(group) || !c_out.is_multiple_of(group) {
        return Err(CostError::InvalidGroup { c_in, c_out, group });
    }
    let macs = (c_in / group) * h_out * w_out * c_out * h_k * w_k;
    let bias = if has_bias { c_out * h_out * w_out } else { 0 };
    Ok(OpCost {
        macs,
        flops: 2 * macs + bias,
        params: c_out * (c_in / group) * h_k * w_k + if has_bias { c_out } else { 0 },
    })
}

/// Fully connected layer (matrix-vector product).
pub fn fc_cost(n_in: u64, n_out: u64, has_bias: bool) -> OpCost {
    let macs = n_in * n_out;
    let bias = if has_bias { n_out } else { 0 };
    OpCost {
        macs,
        flops: 2 * macs + bias,
        params: macs + bias,
    }
}

/// Average pooling: `k_h * k_w` ops per output element.
pub fn avgpool_cost(c: u64, h_out: u64, w_out: u64, h_k: u64, w_k: u64) -> OpCost {
    OpCost {
        macs: 0,
        flops: c * h_out * w_out * h_k * w_k,
        params: 0,
    }
}

/// One op per element of the (broadcast) output shape.
pub fn eltwise_cost(output_shape: &[i64]) -> OpCost {
    OpCost {
        macs: 0,
        flops: elements(output_shape),
        params: 0,
    }
}

const BN_OPS_PER_ELEMENT: u64 = 2;
const LRN_OPS_PER_ELEMENT: u64 = 5;
const SOFTMAX_OPS_PER_ELEMENT: u64 = 5;

fn elements(shape: &[i64]) -> u64 {
    shape.iter().map(|&d| d.max(0) as u64).product()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NodeCost {
    pub node: NodeId,
    pub name: String,
    pub op_type: String,
    pub macs: u64,
    pub flops: u64,
    pub params: u64,
    pub param_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ModelCost {
    pub dtype: DType,
    pub fused: bool,
    pub nodes: Vec<NodeCost>,
    pub macs: u64,
    pub flops: u64,
    pub params: u64,
    pub param_bytes: u64,
}

fn shape_of<'a>(ir: &'a GraphIR, node: &Node, t: TensorId) -> Result<&'a [i64], CostError> {
    ir.tensors[t]
        .shape
        .as_deref()
        .ok_or_else(|| CostError::MissingShape {
            node: node.name.clone(),
            tensor: ir.tensors[t].name.clone(),
        })
}

fn input_shape<'a>(ir: &'a GraphIR, node: &Node, slot: usize) -> Result<&'a [i64], CostError> {
    let t = node
        .inputs
        .get(slot)
        .copied()
        .flatten()
        .ok_or_else(|| CostError::MissingShape {
            node: node.name.clone(),
            tensor: format!("<input {slot}>"),
        })?;
    shape_of(ir, node, t)
}

fn has_input(node: &Node, slot: usize) -> bool {
    node.inputs.get(slot).copied().flatten().is_some()
}

/// Arithmetic cost of a node, ignoring fusion.
pub fn op_cost(ir: &GraphIR, node: &Node) -> Result<OpCost, CostError> {
    let out = shape_of(ir, node, node.outputs[0])?;
    let cost = match &node.op {
        Op::Conv { group, .. } => {
            let x = input_shape(ir, node, 0)?;
            let w = input_shape(ir, node, 1)?;
            let spatial_out = elements(&out[2..]);
            let kernel = elements(&w[2..]);
            let batch = out[0].max(0) as u64;
            let c = conv_cost(
                x[1] as u64,
                w[0] as u64,
                spatial_out,
                1,
                kernel,
                1,
                *group as u64,
                has_input(node, 2),
            )?;
            OpCost {
                macs: c.macs * batch,
                flops: c.flops * batch,
                params: c.params,
            }
        }
        Op::Gemm { trans_b, .. } => {
            let b = input_shape(ir, node, 1)?;
            let (k, n) = if *trans_b { (b[1], b[0]) } else { (b[0], b[1]) };
            let rows = out[0].max(0) as u64;
            let c = fc_cost(k as u64, n as u64, has_input(node, 2));
            let bias_params = if has_input(node, 2) {
                elements(input_shape(ir, node, 2)?)
            } else {
                0
            };
            OpCost {
                macs: c.macs * rows,
                flops: c.flops * rows,
                params: c.macs + bias_params,
            }
        }
        Op::MatMul => {
            let a = input_shape(ir, node, 0)?;
            let k = *a.last().unwrap_or(&1) as u64;
            let macs = elements(out) * k;
            OpCost {
                macs,
                flops: 2 * macs,
                params: 0,
            }
        }
        Op::AveragePool(w) => {
            let kernel = elements(w.kernel_shape.as_deref().unwrap_or_default());
            avgpool_cost(elements(&out[..2]), elements(&out[2..]), 1, kernel, 1)
        }
        Op::GlobalAveragePool => {
            let x = input_shape(ir, node, 0)?;
            avgpool_cost(elements(&out[..2]), 1, 1, elements(&x[2..]), 1)
        }
        Op::MaxPool(_) => OpCost::default(),
        Op::Binary(_) | Op::Activation(_) => eltwise_cost(out),
        Op::BatchNorm => scaled(eltwise_cost(out), BN_OPS_PER_ELEMENT),
        Op::Lrn { .. } => scaled(eltwise_cost(out), LRN_OPS_PER_ELEMENT),
        Op::Softmax { .. } => scaled(eltwise_cost(out), SOFTMAX_OPS_PER_ELEMENT),
        Op::ReduceMean { .. } => eltwise_cost(input_shape(ir, node, 0)?),
        Op::Reshape { .. }
        | Op::Flatten { .. }
        | Op::Transpose { .. }
        | Op::Concat { .. }
        | Op::Squeeze { .. }
        | Op::Unsqueeze { .. }
        | Op::Pad { .. }
        | Op::Dropout
        | Op::Identity
        | Op::Split { .. }
        | Op::Slice { .. }
        | Op::Cast
        | Op::Constant { .. }
        | Op::Shape { .. }
        | Op::Gather { .. } => OpCost::default(),
    };
    Ok(cost)
}

fn scaled(c: OpCost, k: u64) -> OpCost {
    OpCost {
        flops: c.flops * k,
        ..c
    }
}

/// Parameter tensors charged to `node`: weights read at a data slot, each
/// counted at its first consumer only. Folded BN parameters are skipped.
fn charged_params(ir: &GraphIR, node: &Node) -> Vec<TensorId> {
    let mut out: Vec<TensorId> = vec![];
    for (slot, t) in node.inputs.iter().enumerate() {
        let Some(t) = *t else { continue };
        if !node.op.is_data_slot(slot) || !ir.is_weight(t) || ir.tensors[t].folded || out.contains(&t) {
            continue;
        }
        let first = ir
            .consumers(t)
            .iter()
            .find(|&&(n, s)| ir.nodes[n].op.is_data_slot(s))
            .map(|&(n, _)| n);
        if first == Some(node.id) {
            out.push(t);
        }
    }
    out
}

/// Cost of one node under the IR's fusion annotations.
pub fn node_cost(ir: &GraphIR, node: &Node, dtype: DType) -> Result<NodeCost, CostError> {
    let mut c = op_cost(ir, node)?;
    if matches!(node.op, Op::BatchNorm) && matches!(node.fusion, Some(FusionRole::Absorbed(_))) {
        c.flops = 0;
    }
    let params: u64 = charged_params(ir, node)
        .iter()
        .map(|&t| ir.tensors[t].element_count().unwrap_or(0))
        .sum();
    Ok(NodeCost {
        node: node.id,
        name: node.name.clone(),
        op_type: node.op_type.clone(),
        macs: c.macs,
        flops: c.flops,
        params,
        param_bytes: params * dtype.byte_width(),
    })
}

/// Sums node costs over the whole graph.
pub fn model_cost(ir: &GraphIR, dtype: DType) -> Result<ModelCost, CostError> {
    let nodes = ir
        .nodes
        .iter()
        .map(|n| node_cost(ir, n, dtype))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ModelCost {
        dtype,
        fused: ir.is_fused(),
        macs: nodes.iter().map(|n| n.macs).sum(),
        flops: nodes.iter().map(|n| n.flops).sum(),
        params: nodes.iter().map(|n| n.params).sum(),
        param_bytes: nodes.iter().map(|n| n.param_bytes).sum(),
        nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Counts multiply-accumulates of a direct convolution one tap at a time.
    fn naive_conv_macs(c_in: u64, c_out: u64, h_out: u64, w_out: u64, k_h: u64, k_w: u64, group: u64) -> u64 {
        let per_group_in = c_in / group;
        let mut n = 0;
        for _oc in 0..c_out {
            for _y in 0..h_out {
                for _x in 0..w_out {
                    for _ic in 0..per_group_in {
                        for _ky in 0..k_h {
                            for _kx in 0..k_w {
                                n += 1;
                            }
                        }
                    }
                }
            }
        }
        n
    }

    #[test]
    fn conv_small_example() {
        let c = conv_cost(3, 4, 2, 2, 3, 3, 1, false).unwrap();
        assert_eq!((c.macs, c.flops), (432, 864));
        assert_eq!(c.params, 108);
    }

    #[test]
    fn depthwise_example() {
        assert_eq!(conv_cost(8, 8, 4, 4, 3, 3, 8, false).unwrap().macs, 1152);
    }

    #[test]
    fn unit_conv() {
        let c = conv_cost(1, 1, 1, 1, 1, 1, 1, false).unwrap();
        assert_eq!((c.macs, c.flops), (1, 2));
    }

    #[test]
    fn bias_adds_flops_not_macs() {
        let c = conv_cost(3, 4, 2, 2, 3, 3, 1, true).unwrap();
        assert_eq!((c.macs, c.flops, c.params), (432, 864 + 16, 112));
    }

    #[test]
    fn invalid_group() {
        assert!(matches!(
            conv_cost(3, 4, 2, 2, 3, 3, 2, false),
            Err(CostError::InvalidGroup { .. })
        ));
        assert!(conv_cost(4, 4, 2, 2, 3, 3, 0, false).is_err());
    }

    #[test]
    fn fc_examples() {
        let c = fc_cost(4, 3, false);
        assert_eq!((c.macs, c.flops), (12, 24));
        assert_eq!(fc_cost(1, 1, false).macs, 1);
        assert_eq!(fc_cost(9216, 4096, false).macs, 37_748_736);
        assert_eq!(fc_cost(4, 3, true).flops, 27);
    }

    #[test]
    fn pool_examples() {
        assert_eq!(avgpool_cost(2, 2, 2, 2, 2).flops, 32);
        assert_eq!(avgpool_cost(512, 1, 1, 7, 7).flops, 25_088);
    }

    #[test]
    fn eltwise_examples() {
        assert_eq!(eltwise_cost(&[1, 64, 56, 56]).flops, 200_704);
        assert_eq!(eltwise_cost(&[1, 1000]).flops, 1000);
    }

    #[test]
    fn resnet_conv1() {
        assert_eq!(conv_cost(3, 64, 112, 112, 7, 7, 1, false).unwrap().macs, 118_013_952);
    }

    #[test]
    fn depthwise_separable_ratio() {
        let (c, h) = (256u64, 56u64);
        let standard = conv_cost(c, c, h, h, 3, 3, 1, false).unwrap().macs as f64;
        let dw = conv_cost(c, c, h, h, 3, 3, c, false).unwrap().macs as f64;
        let pw = conv_cost(c, c, h, h, 1, 1, 1, false).unwrap().macs as f64;
        let ratio = (dw + pw) / standard;
        let expected = 1.0 / 256.0 + 1.0 / 9.0;
        assert!(((ratio - expected) / expected).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn matches_naive_loop(
            c_in in 1u64..=16, c_out in 1u64..=16, h in 1u64..=16, w in 1u64..=16,
            kh in 1u64..=5, kw in 1u64..=5, depthwise in any::<bool>(),
        ) {
            let (c_out, group) = if depthwise { (c_in, c_in) } else { (c_out, 1) };
            let c = conv_cost(c_in, c_out, h, w, kh, kw, group, false).unwrap();
            prop_assert_eq!(c.macs, naive_conv_macs(c_in, c_out, h, w, kh, kw, group));
            prop_assert_eq!(c.flops, 2 * c.macs);
        }

        #[test]
        fn linear_in_each_dim(c_out in 1u64..=32, h in 1u64..=32, w in 1u64..=32, k in 1u64..=7) {
            let base = conv_cost(8, c_out, h, w, k, k, 1, false).unwrap().macs;
            prop_assert_eq!(conv_cost(8, 2 * c_out, h, w, k, k, 1, false).unwrap().macs, 2 * base);
            prop_assert_eq!(conv_cost(8, c_out, 2 * h, w, k, k, 1, false).unwrap().macs, 2 * base);
            prop_assert_eq!(conv_cost(8, c_out, h, 2 * w, k, k, 1, false).unwrap().macs, 2 * base);
            prop_assert_eq!(conv_cost(8, c_out, h, w, 2 * k, k, 1, false).unwrap().macs, 2 * base);
            prop_assert_eq!(conv_cost(8, c_out, h, w, k, 2 * k, 1, false).unwrap().macs, 2 * base);
        }

        #[test]
        fn group_law(c in 1u64..=8, mult_in in 1u64..=4, mult_out in 1u64..=4, h in 1u64..=8) {
            let g = c;
            let (c_in, c_out) = (g * mult_in, g * mult_out);
            let one = conv_cost(c_in, c_out, h, h, 3, 3, 1, false).unwrap().macs;
            let grouped = conv_cost(c_in, c_out, h, h, 3, 3, g, false).unwrap().macs;
            prop_assert_eq!(grouped * g, one);
        }
    }
}
