//! Inference-time rewrites: batch-norm folding and activation fusion.
//!
//! Both passes only annotate the IR. Nodes are never removed; absorbed nodes
//! carry [`FusionRole::Absorbed`], edges that stay in local memory get
//! `materialized = false`, and folded BN parameters get `folded = true`.

use crate::ir::{FusionGroup, FusionRole, GraphIR, NodeId, Op, TensorId};

/// Tensor consumed by exactly one node and not a graph output.
fn private_edge(ir: &GraphIR, t: TensorId) -> bool {
    ir.consumers(t).len() == 1 && !ir.tensors[t].is_graph_output
}

fn group_of(ir: &GraphIR, node: NodeId) -> Option<usize> {
    match ir.nodes[node].fusion {
        Some(FusionRole::Anchor(g)) | Some(FusionRole::Absorbed(g)) => Some(g),
        None => None,
    }
}

/// Folds every BatchNormalization whose input comes straight from a Conv or
/// Gemm through a single-consumer edge.
pub fn fold_batchnorm(ir: &GraphIR) -> GraphIR {
    let mut out = ir.clone();
    let producers = ir.producers();
    for bn in 0..out.nodes.len() {
        if !matches!(out.nodes[bn].op, Op::BatchNorm) || out.nodes[bn].fusion.is_some() {
            continue;
        }
        let Some(x) = out.nodes[bn].inputs[0] else { continue };
        let Some(anchor) = producers[x] else { continue };
        if !out.nodes[anchor].op.is_conv_like()
            || out.nodes[anchor].fusion.is_some()
            || !private_edge(&out, x)
        {
            continue;
        }
        let g = out.fusion_groups.len();
        out.fusion_groups.push(FusionGroup {
            anchor,
            absorbed: vec![bn],
            output: out.nodes[bn].outputs[0],
        });
        out.nodes[anchor].fusion = Some(FusionRole::Anchor(g));
        out.nodes[bn].fusion = Some(FusionRole::Absorbed(g));
        out.tensors[x].materialized = false;
        let params: Vec<TensorId> = out.nodes[bn].inputs[1..].iter().flatten().copied().collect();
        for p in params {
            // A parameter shared with another node still has to be loaded.
            if out.consumers(p).iter().all(|&(n, _)| n == bn) {
                out.tensors[p].folded = true;
            }
        }
    }
    out
}

/// Absorbs activations that consume a Conv/Gemm output (or the output of a
/// folded group) through a single-consumer edge.
pub fn fuse_activations(ir: &GraphIR) -> GraphIR {
    let mut out = ir.clone();
    let producers = ir.producers();
    for act in 0..out.nodes.len() {
        if !matches!(out.nodes[act].op, Op::Activation(_)) || out.nodes[act].fusion.is_some() {
            continue;
        }
        let Some(x) = out.nodes[act].inputs[0] else { continue };
        let Some(prod) = producers[x] else { continue };
        if !private_edge(&out, x) {
            continue;
        }
        let group = match (&out.nodes[prod].op, out.nodes[prod].fusion) {
            (op, None) if op.is_conv_like() => None,
            (op, Some(FusionRole::Anchor(_))) if op.is_conv_like() => {
                // The anchor already feeds an absorbed BN, so its output is not `x`.
                continue;
            }
            (Op::BatchNorm, Some(FusionRole::Absorbed(g))) => Some(g),
            _ => continue,
        };
        let g = match group {
            Some(g) => {
                out.fusion_groups[g].absorbed.push(act);
                out.fusion_groups[g].output = out.nodes[act].outputs[0];
                g
            }
            None => {
                let g = out.fusion_groups.len();
                out.fusion_groups.push(FusionGroup {
                    anchor: prod,
                    absorbed: vec![act],
                    output: out.nodes[act].outputs[0],
                });
                out.nodes[prod].fusion = Some(FusionRole::Anchor(g));
                g
            }
        };
        debug_assert_eq!(group_of(&out, prod), Some(g));
        out.nodes[act].fusion = Some(FusionRole::Absorbed(g));
        out.tensors[x].materialized = false;
    }
    out
}

/// Runs both passes when `enabled`, otherwise returns an unchanged copy.
pub fn apply_fusion(ir: &GraphIR, enabled: bool) -> GraphIR {
    if enabled {
        fuse_activations(&fold_batchnorm(ir))
    } else {
        ir.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{Activation, Binary, DType, Node, TensorOrigin, TensorSpec, Window};

    struct Builder {
        nodes: Vec<Node>,
        tensors: Vec<TensorSpec>,
    }

    impl Builder {
        fn new() -> Self {
            Builder { nodes: vec![], tensors: vec![] }
        }

        fn tensor(&mut self, name: &str, origin: TensorOrigin, shape: &[i64]) -> TensorId {
            self.tensors.push(TensorSpec {
                name: name.into(),
                dtype: DType::Fp32,
                elem_type: None,
                shape: Some(shape.to_vec()),
                origin,
                is_graph_output: false,
                value: None,
                stored_shape: None,
                materialized: true,
                folded: false,
            });
            self.tensors.len() - 1
        }

        fn node(&mut self, op: Op, op_type: &str, ins: &[TensorId], out: &str, shape: &[i64]) -> TensorId {
            let o = self.tensor(out, TensorOrigin::NodeOutput, shape);
            self.nodes.push(Node {
                id: self.nodes.len(),
                name: format!("{op_type}_{}", self.nodes.len()),
                op_type: op_type.into(),
                op,
                inputs: ins.iter().map(|&i| Some(i)).collect(),
                outputs: vec![o],
                fusion: None,
            });
            o
        }

        fn finish(mut self, input: TensorId, output: TensorId) -> GraphIR {
            self.tensors[output].is_graph_output = true;
            GraphIR::from_parts("t".into(), 13, 1, self.nodes, self.tensors, vec![input], vec![output])
        }
    }

    fn conv() -> Op {
        Op::Conv {
            window: Window {
                kernel_shape: Some(vec![3, 3]),
                strides: vec![],
                pads: vec![1; 4],
                dilations: vec![],
                auto_pad: crate::ir::AutoPad::NotSet,
                ceil_mode: false,
            },
            group: 1,
        }
    }

    fn conv_bn(b: &mut Builder) -> (TensorId, TensorId, TensorId) {
        let x = b.tensor("x", TensorOrigin::GraphInput, &[1, 3, 8, 8]);
        let w = b.tensor("w", TensorOrigin::Initializer, &[4, 3, 3, 3]);
        let c = b.node(conv(), "Conv", &[x, w], "c", &[1, 4, 8, 8]);
        let params: Vec<TensorId> = ["s", "b", "m", "v"]
            .iter()
            .map(|n| b.tensor(n, TensorOrigin::Initializer, &[4]))
            .collect();
        let bn = b.node(Op::BatchNorm, "BatchNormalization", &[c, params[0], params[1], params[2], params[3]], "bn", &[1, 4, 8, 8]);
        (x, c, bn)
    }

    #[test]
    fn conv_bn_relu_forms_one_group() {
        let mut b = Builder::new();
        let (x, c, bn) = conv_bn(&mut b);
        let y = b.node(Op::Activation(Activation::Relu), "Relu", &[bn], "y", &[1, 4, 8, 8]);
        let ir = apply_fusion(&b.finish(x, y), true);
        assert_eq!(
            ir.fusion_groups,
            vec![FusionGroup { anchor: 0, absorbed: vec![1, 2], output: y }]
        );
        assert!(!ir.tensors[c].materialized);
        assert!(!ir.tensors[bn].materialized);
        assert!(ir.tensors[y].materialized);
        for p in ["s", "b", "m", "v"] {
            assert!(ir.tensor_by_name(p).unwrap().folded);
        }
    }

    #[test]
    fn bn_with_second_consumer_not_folded() {
        let mut b = Builder::new();
        let (x, c, bn) = conv_bn(&mut b);
        let y = b.node(Op::Binary(Binary::Add), "Add", &[bn, c], "y", &[1, 4, 8, 8]);
        let ir = apply_fusion(&b.finish(x, y), true);
        assert!(ir.fusion_groups.is_empty());
        assert!(ir.tensors[c].materialized);
        assert!(ir.nodes.iter().all(|n| n.fusion.is_none()));
    }

    #[test]
    fn swish_sigmoid_not_fused() {
        let mut b = Builder::new();
        let x = b.tensor("x", TensorOrigin::GraphInput, &[1, 3, 8, 8]);
        let w = b.tensor("w", TensorOrigin::Initializer, &[4, 3, 3, 3]);
        let c = b.node(conv(), "Conv", &[x, w], "c", &[1, 4, 8, 8]);
        let s = b.node(Op::Activation(Activation::Sigmoid), "Sigmoid", &[c], "s", &[1, 4, 8, 8]);
        let y = b.node(Op::Binary(Binary::Mul), "Mul", &[c, s], "y", &[1, 4, 8, 8]);
        let ir = apply_fusion(&b.finish(x, y), true);
        assert!(ir.fusion_groups.is_empty());
        assert!(ir.tensors[c].materialized);
    }

    #[test]
    fn activation_on_graph_output_edge_is_kept() {
        let mut b = Builder::new();
        let x = b.tensor("x", TensorOrigin::GraphInput, &[1, 3, 8, 8]);
        let w = b.tensor("w", TensorOrigin::Initializer, &[4, 3, 3, 3]);
        let c = b.node(conv(), "Conv", &[x, w], "c", &[1, 4, 8, 8]);
        let _ = b.node(Op::Activation(Activation::Relu), "Relu", &[c], "y", &[1, 4, 8, 8]);
        let ir = apply_fusion(&b.finish(x, c), true);
        assert!(ir.fusion_groups.is_empty());
    }

    #[test]
    fn disabled_is_identity() {
        let mut b = Builder::new();
        let (x, _, bn) = conv_bn(&mut b);
        let ir = b.finish(x, bn);
        assert_eq!(apply_fusion(&ir, false), ir);
    }
}
