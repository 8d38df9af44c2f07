//! Static shape propagation.
//!
//! [`infer_shapes`] walks the IR in topological order, computing every output
//! shape from the fixed network input. Small integer tensors (shape vectors,
//! axes, gather indices) are evaluated along the way so that
//! `Shape -> Gather -> Unsqueeze -> Concat -> Reshape` chains resolve to
//! static shapes; the nodes of such chains are then folded out of the graph.

use thiserror::Error;

use crate::ir::{AutoPad, Binary, GraphIR, Node, Op, TensorOrigin, Window};
use crate::model_io::RawDim;

/// Network input used when the model does not pin one: 1x3x224x224.
pub const DEFAULT_INPUT: [i64; 4] = [1, 3, 224, 224];

/// Largest integer tensor evaluated during folding.
const MAX_FOLD_ELEMENTS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("shape conflict on '{tensor}': inferred {inferred:?}, file declares {stored}")]
    ShapeConflict {
        tensor: String,
        inferred: Vec<i64>,
        stored: String,
    },
    #[error("node '{node}' ({op_type}): {reason}")]
    RuleFailure {
        node: String,
        op_type: String,
        reason: String,
    },
    #[error("no shape rule for op '{op_type}' at node '{node}'")]
    MissingRule { node: String, op_type: String },
    #[error("graph input '{0}' has no usable shape; pass an input shape override")]
    UnresolvedInput(String),
}

/// One node input as seen by a shape rule.
#[derive(Debug, Clone, Copy)]
pub struct Operand<'a> {
    pub shape: &'a [i64],
    pub value: Option<&'a [i64]>,
}

impl<'a> Operand<'a> {
    pub fn shape(shape: &'a [i64]) -> Self {
        Operand { shape, value: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inferred {
    pub shape: Vec<i64>,
    pub value: Option<Vec<i64>>,
}

impl Inferred {
    fn shape(shape: Vec<i64>) -> Self {
        Inferred { shape, value: None }
    }
}

type RuleResult<T> = Result<T, String>;

fn norm_axis(axis: i64, rank: usize) -> RuleResult<usize> {
    let r = rank as i64;
    let a = if axis < 0 { axis + r } else { axis };
    if a < 0 || a >= r.max(1) {
        return Err(format!("axis {axis} out of range for rank {rank}"));
    }
    Ok(a as usize)
}

fn numel(shape: &[i64]) -> i64 {
    shape.iter().product()
}

fn operand<'a>(inputs: &'a [Option<Operand<'a>>], i: usize) -> RuleResult<Operand<'a>> {
    inputs
        .get(i)
        .copied()
        .flatten()
        .ok_or_else(|| format!("missing required input {i}"))
}

fn opt_values<'a>(inputs: &'a [Option<Operand<'a>>], i: usize, what: &str) -> RuleResult<Option<&'a [i64]>> {
    match inputs.get(i).copied().flatten() {
        None => Ok(None),
        Some(op) => op
            .value
            .map(Some)
            .ok_or_else(|| format!("{what} (input {i}) is not a constant")),
    }
}

/// Multidirectional (numpy) broadcast of two shapes.
pub fn broadcast(a: &[i64], b: &[i64]) -> RuleResult<Vec<i64>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(format!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

/// Value at flat output index `flat` of an operand broadcast to `out`.
fn broadcast_get(values: &[i64], shape: &[i64], out: &[i64], mut flat: usize) -> i64 {
    let mut src = 0usize;
    let mut stride = 1usize;
    let offset = out.len() - shape.len();
    for axis in (0..out.len()).rev() {
        let od = out[axis] as usize;
        let idx = flat % od;
        flat /= od;
        if axis >= offset {
            let sd = shape[axis - offset] as usize;
            if sd != 1 {
                src += idx * stride;
            }
            stride *= sd;
        }
    }
    values[src]
}

struct WindowOut {
    spatial: Vec<i64>,
}

/// Output spatial dims for Conv/pool windows per ONNX semantics.
fn window_output(in_spatial: &[i64], kernel: &[i64], w: &Window) -> RuleResult<WindowOut> {
    let r = in_spatial.len();
    if kernel.len() != r {
        return Err(format!(
            "kernel rank {} does not match spatial rank {r}",
            kernel.len()
        ));
    }
    let pick = |v: &[i64], n: usize, default: i64| -> RuleResult<Vec<i64>> {
        match v.len() {
            0 => Ok(vec![default; n]),
            l if l == n => Ok(v.to_vec()),
            l => Err(format!("attribute length {l}, expected {n}")),
        }
    };
    let strides = pick(&w.strides, r, 1)?;
    let dilations = pick(&w.dilations, r, 1)?;
    let mut pads = pick(&w.pads, 2 * r, 0)?;

    let mut spatial = Vec::with_capacity(r);
    for i in 0..r {
        let (n, k, s, d) = (in_spatial[i], kernel[i], strides[i], dilations[i]);
        let eff_k = d * (k - 1) + 1;
        match w.auto_pad {
            AutoPad::NotSet => {}
            AutoPad::Valid => {
                pads[i] = 0;
                pads[i + r] = 0;
            }
            AutoPad::SameUpper | AutoPad::SameLower => {
                let out = (n + s - 1) / s;
                let total = ((out - 1) * s + eff_k - n).max(0);
                let small = total / 2;
                let (begin, end) = if w.auto_pad == AutoPad::SameUpper {
                    (small, total - small)
                } else {
                    (total - small, small)
                };
                pads[i] = begin;
                pads[i + r] = end;
            }
        }
        let span = n + pads[i] + pads[i + r] - eff_k;
        if span < 0 {
            return Err(format!(
                "kernel {k} (dilation {d}) larger than padded input {}",
                n + pads[i] + pads[i + r]
            ));
        }
        let mut out = if w.ceil_mode {
            (span + s - 1) / s + 1
        } else {
            span / s + 1
        };
        // The last window must start inside the input or left padding.
        if w.ceil_mode && (out - 1) * s >= n + pads[i] {
            out -= 1;
        }
        spatial.push(out);
    }
    Ok(WindowOut { spatial })
}

fn same(inputs: &[Option<Operand<'_>>], n_outputs: usize) -> RuleResult<Vec<Inferred>> {
    let x = operand(inputs, 0)?;
    Ok((0..n_outputs.max(1))
        .map(|_| Inferred {
            shape: x.shape.to_vec(),
            value: x.value.map(<[i64]>::to_vec),
        })
        .collect())
}

/// Applies one op's shape rule.
pub fn infer_node(op: &Op, inputs: &[Option<Operand<'_>>], n_outputs: usize) -> Result<Vec<Inferred>, ShapeError> {
    rule(op, inputs, n_outputs).map_err(|reason| ShapeError::RuleFailure {
        node: String::new(),
        op_type: format!("{op:?}").split([' ', '(', '{']).next().unwrap_or("").to_string(),
        reason,
    })
}

fn rule(op: &Op, inputs: &[Option<Operand<'_>>], n_outputs: usize) -> RuleResult<Vec<Inferred>> {
    let one = |shape: Vec<i64>| Ok(vec![Inferred::shape(shape)]);
    match op {
        Op::Conv { window, group } => {
            let x = operand(inputs, 0)?.shape;
            let w = operand(inputs, 1)?.shape;
            if x.len() < 3 || w.len() != x.len() {
                return Err(format!("input rank {} / weight rank {} unsupported", x.len(), w.len()));
            }
            let (c_in, c_out) = (x[1], w[0]);
            if c_in % group != 0 || c_out % group != 0 {
                return Err(format!("group {group} does not divide C_in {c_in} and C_out {c_out}"));
            }
            if w[1] * group != c_in {
                return Err(format!(
                    "weight expects {} input channels per group, input has {c_in} over {group} groups",
                    w[1]
                ));
            }
            let kernel = window.kernel_shape.clone().unwrap_or_else(|| w[2..].to_vec());
            if kernel != w[2..] {
                return Err(format!("kernel_shape {kernel:?} disagrees with weight {w:?}"));
            }
            if let Some(b) = inputs.get(2).copied().flatten() {
                if b.shape != [c_out] {
                    return Err(format!("bias shape {:?}, expected [{c_out}]", b.shape));
                }
            }
            let out = window_output(&x[2..], &kernel, window)?;
            let mut shape = vec![x[0], c_out];
            shape.extend(out.spatial);
            one(shape)
        }
        Op::MaxPool(window) | Op::AveragePool(window) => {
            let x = operand(inputs, 0)?.shape;
            if x.len() < 3 {
                return Err(format!("pooling needs rank >= 3, got {x:?}"));
            }
            let kernel = window.kernel_shape.clone().unwrap_or_default();
            let out = window_output(&x[2..], &kernel, window)?;
            let mut shape = vec![x[0], x[1]];
            shape.extend(out.spatial);
            let mut v = vec![Inferred::shape(shape.clone())];
            if n_outputs > 1 {
                v.push(Inferred::shape(shape));
            }
            Ok(v)
        }
        Op::GlobalAveragePool => {
            let x = operand(inputs, 0)?.shape;
            if x.len() < 3 {
                return Err(format!("pooling needs rank >= 3, got {x:?}"));
            }
            let mut shape = x[..2].to_vec();
            shape.resize(x.len(), 1);
            one(shape)
        }
        Op::Gemm { trans_a, trans_b } => {
            let a = operand(inputs, 0)?.shape;
            let b = operand(inputs, 1)?.shape;
            if a.len() != 2 || b.len() != 2 {
                return Err(format!("Gemm needs 2-D operands, got {a:?} x {b:?}"));
            }
            let (m, k) = if *trans_a { (a[1], a[0]) } else { (a[0], a[1]) };
            let (k2, n) = if *trans_b { (b[1], b[0]) } else { (b[0], b[1]) };
            if k != k2 {
                return Err(format!("inner dims differ: {k} vs {k2}"));
            }
            if let Some(c) = inputs.get(2).copied().flatten() {
                let bc = broadcast(&[m, n], c.shape)?;
                if bc != [m, n] {
                    return Err(format!("bias {:?} does not broadcast to [{m}, {n}]", c.shape));
                }
            }
            one(vec![m, n])
        }
        Op::MatMul => {
            let a = operand(inputs, 0)?.shape;
            let b = operand(inputs, 1)?.shape;
            if a.is_empty() || b.is_empty() {
                return Err("MatMul operands must have rank >= 1".into());
            }
            let a2: Vec<i64> = if a.len() == 1 { vec![1, a[0]] } else { a.to_vec() };
            let b2: Vec<i64> = if b.len() == 1 { vec![b[0], 1] } else { b.to_vec() };
            let (m, k) = (a2[a2.len() - 2], a2[a2.len() - 1]);
            let (k2, n) = (b2[b2.len() - 2], b2[b2.len() - 1]);
            if k != k2 {
                return Err(format!("inner dims differ: {k} vs {k2}"));
            }
            let mut shape = broadcast(&a2[..a2.len() - 2], &b2[..b2.len() - 2])?;
            if a.len() > 1 {
                shape.push(m);
            }
            if b.len() > 1 {
                shape.push(n);
            }
            one(shape)
        }
        Op::BatchNorm | Op::Activation(_) | Op::Softmax { .. } | Op::Lrn { .. } => {
            let x = operand(inputs, 0)?;
            if let Op::Softmax { axis } = op {
                norm_axis(*axis, x.shape.len())?;
            }
            one(x.shape.to_vec())
        }
        Op::Dropout => same(inputs, n_outputs),
        Op::Identity | Op::Cast => same(inputs, 1),
        Op::Binary(kind) => {
            let a = operand(inputs, 0)?;
            let b = operand(inputs, 1)?;
            let shape = broadcast(a.shape, b.shape)?;
            let value = match (a.value, b.value) {
                (Some(va), Some(vb)) if (numel(&shape) as usize) <= MAX_FOLD_ELEMENTS => {
                    let n = numel(&shape) as usize;
                    let mut out = Vec::with_capacity(n);
                    for i in 0..n {
                        let x = broadcast_get(va, a.shape, &shape, i);
                        let y = broadcast_get(vb, b.shape, &shape, i);
                        out.push(match kind {
                            Binary::Add => x.wrapping_add(y),
                            Binary::Sub => x.wrapping_sub(y),
                            Binary::Mul => x.wrapping_mul(y),
                            Binary::Div => x
                                .checked_div(y)
                                .ok_or_else(|| "integer division by zero".to_string())?,
                        });
                    }
                    Some(out)
                }
                _ => None,
            };
            Ok(vec![Inferred { shape, value }])
        }
        Op::Concat { axis } => {
            let parts: Vec<Operand<'_>> = inputs.iter().copied().flatten().collect();
            let first = parts.first().ok_or("Concat without inputs")?;
            let rank = first.shape.len();
            let ax = norm_axis(*axis, rank)?;
            let mut shape = first.shape.to_vec();
            shape[ax] = 0;
            for p in &parts {
                if p.shape.len() != rank {
                    return Err(format!("rank mismatch {:?} vs {:?}", p.shape, first.shape));
                }
                for (i, (&d, &f)) in p.shape.iter().zip(first.shape).enumerate() {
                    if i != ax && d != f {
                        return Err(format!("dim {i} mismatch {:?} vs {:?}", p.shape, first.shape));
                    }
                }
                shape[ax] += p.shape[ax];
            }
            let value = if rank == 1 && parts.iter().all(|p| p.value.is_some()) {
                Some(parts.iter().flat_map(|p| p.value.unwrap().iter().copied()).collect())
            } else {
                None
            };
            Ok(vec![Inferred { shape, value }])
        }
        Op::Flatten { axis } => {
            let x = operand(inputs, 0)?.shape;
            let r = x.len() as i64;
            let a = if *axis < 0 { axis + r } else { *axis };
            if a < 0 || a > r {
                return Err(format!("axis {axis} out of range for rank {r}"));
            }
            let a = a as usize;
            one(vec![numel(&x[..a]), numel(&x[a..])])
        }
        Op::Reshape { allow_zero } => {
            let x = operand(inputs, 0)?;
            let target = opt_values(inputs, 1, "target shape")?
                .ok_or("Reshape without a target shape")?;
            let mut shape = Vec::with_capacity(target.len());
            let mut infer_at = None;
            for (i, &d) in target.iter().enumerate() {
                match d {
                    -1 => {
                        if infer_at.replace(i).is_some() {
                            return Err("more than one -1 in target shape".into());
                        }
                        shape.push(1);
                    }
                    0 if !allow_zero => shape.push(
                        *x.shape
                            .get(i)
                            .ok_or_else(|| format!("0 at position {i} beyond input rank"))?,
                    ),
                    d if d < 0 => return Err(format!("invalid target dim {d}")),
                    d => shape.push(d),
                }
            }
            let total = numel(x.shape);
            if let Some(i) = infer_at {
                let known = numel(&shape);
                if known == 0 || total % known != 0 {
                    return Err(format!("cannot reshape {:?} into {target:?}", x.shape));
                }
                shape[i] = total / known;
            }
            if numel(&shape) != total {
                return Err(format!("cannot reshape {:?} into {shape:?}", x.shape));
            }
            Ok(vec![Inferred {
                shape,
                value: x.value.map(<[i64]>::to_vec),
            }])
        }
        Op::Transpose { perm } => {
            let x = operand(inputs, 0)?.shape;
            let r = x.len();
            let perm: Vec<usize> = match perm {
                Some(p) => p.iter().map(|&a| norm_axis(a, r)).collect::<RuleResult<_>>()?,
                None => (0..r).rev().collect(),
            };
            let mut seen = vec![false; r];
            if perm.len() != r || perm.iter().any(|&p| std::mem::replace(&mut seen[p], true)) {
                return Err(format!("perm {perm:?} is not a permutation of rank {r}"));
            }
            one(perm.iter().map(|&p| x[p]).collect())
        }
        Op::Squeeze { axes } => {
            let x = operand(inputs, 0)?;
            let axes = match axes {
                Some(a) => Some(a.clone()),
                None => opt_values(inputs, 1, "axes")?.map(<[i64]>::to_vec),
            };
            let r = x.shape.len();
            let drop: Vec<usize> = match axes {
                Some(a) => a.iter().map(|&ax| norm_axis(ax, r)).collect::<RuleResult<_>>()?,
                None => (0..r).filter(|&i| x.shape[i] == 1).collect(),
            };
            if let Some(&bad) = drop.iter().find(|&&i| x.shape[i] != 1) {
                return Err(format!("cannot squeeze axis {bad} of {:?}", x.shape));
            }
            let shape = (0..r).filter(|i| !drop.contains(i)).map(|i| x.shape[i]).collect();
            Ok(vec![Inferred {
                shape,
                value: x.value.map(<[i64]>::to_vec),
            }])
        }
        Op::Unsqueeze { axes } => {
            let x = operand(inputs, 0)?;
            let axes = match axes {
                Some(a) => a.clone(),
                None => opt_values(inputs, 1, "axes")?
                    .ok_or("Unsqueeze without axes")?
                    .to_vec(),
            };
            let out_rank = x.shape.len() + axes.len();
            let mut ins: Vec<usize> = axes
                .iter()
                .map(|&a| norm_axis(a, out_rank))
                .collect::<RuleResult<_>>()?;
            ins.sort_unstable();
            ins.dedup();
            if ins.len() != axes.len() {
                return Err(format!("duplicate axes {axes:?}"));
            }
            let mut src = x.shape.iter();
            let shape = (0..out_rank)
                .map(|i| if ins.contains(&i) { 1 } else { *src.next().unwrap() })
                .collect();
            Ok(vec![Inferred {
                shape,
                value: x.value.map(<[i64]>::to_vec),
            }])
        }
        Op::Pad { pads } => {
            let x = operand(inputs, 0)?.shape;
            let pads: Vec<i64> = match pads {
                Some(p) => p.clone(),
                None => opt_values(inputs, 1, "pads")?.ok_or("Pad without pads")?.to_vec(),
            };
            let r = x.len();
            if pads.len() != 2 * r {
                return Err(format!("pads length {} for rank {r}", pads.len()));
            }
            one((0..r).map(|i| x[i] + pads[i] + pads[i + r]).collect())
        }
        Op::ReduceMean { axes, keep_dims } => {
            let x = operand(inputs, 0)?.shape;
            let r = x.len();
            let axes = match axes {
                Some(a) => Some(a.clone()),
                None => opt_values(inputs, 1, "axes")?.map(<[i64]>::to_vec),
            };
            let reduced: Vec<usize> = match axes {
                Some(a) if !a.is_empty() => a.iter().map(|&ax| norm_axis(ax, r)).collect::<RuleResult<_>>()?,
                _ => (0..r).collect(),
            };
            let shape = (0..r)
                .filter_map(|i| match (reduced.contains(&i), keep_dims) {
                    (true, true) => Some(1),
                    (true, false) => None,
                    (false, _) => Some(x[i]),
                })
                .collect();
            one(shape)
        }
        Op::Split { axis, split } => {
            let x = operand(inputs, 0)?.shape;
            let ax = norm_axis(*axis, x.len())?;
            let sizes: Vec<i64> = match split {
                Some(s) => s.clone(),
                None => match opt_values(inputs, 1, "split")? {
                    Some(s) => s.to_vec(),
                    None => {
                        let n = n_outputs.max(1) as i64;
                        let chunk = (x[ax] + n - 1) / n;
                        (0..n).map(|i| chunk.min(x[ax] - i * chunk)).collect()
                    }
                },
            };
            if sizes.len() != n_outputs || sizes.iter().sum::<i64>() != x[ax] {
                return Err(format!("split {sizes:?} does not partition dim {} into {n_outputs}", x[ax]));
            }
            Ok(sizes
                .iter()
                .map(|&s| {
                    let mut shape = x.to_vec();
                    shape[ax] = s;
                    Inferred::shape(shape)
                })
                .collect())
        }
        Op::Slice { attrs } => {
            let x = operand(inputs, 0)?;
            let r = x.shape.len();
            let (starts, ends, axes, steps) = match attrs {
                Some(a) => (a.starts.clone(), a.ends.clone(), a.axes.clone(), None),
                None => (
                    opt_values(inputs, 1, "starts")?.ok_or("Slice without starts")?.to_vec(),
                    opt_values(inputs, 2, "ends")?.ok_or("Slice without ends")?.to_vec(),
                    opt_values(inputs, 3, "axes")?.map(<[i64]>::to_vec),
                    opt_values(inputs, 4, "steps")?.map(<[i64]>::to_vec),
                ),
            };
            let axes: Vec<usize> = match axes {
                Some(a) => a.iter().map(|&ax| norm_axis(ax, r)).collect::<RuleResult<_>>()?,
                None => (0..starts.len()).collect(),
            };
            let steps = steps.unwrap_or_else(|| vec![1; starts.len()]);
            if ends.len() != starts.len() || axes.len() != starts.len() || steps.len() != starts.len() {
                return Err("starts/ends/axes/steps lengths differ".into());
            }
            let mut shape = x.shape.to_vec();
            let mut ranges: Vec<(i64, i64, i64)> = (0..r).map(|i| (0, x.shape[i], 1)).collect();
            for i in 0..starts.len() {
                let (ax, step) = (axes[i], steps[i]);
                if step == 0 {
                    return Err("slice step 0".into());
                }
                let dim = x.shape[ax];
                let fix = |v: i64| if v < 0 { v + dim } else { v };
                let (start, end) = if step > 0 {
                    (fix(starts[i]).clamp(0, dim), fix(ends[i]).clamp(0, dim))
                } else {
                    (fix(starts[i]).clamp(0, dim - 1), fix(ends[i]).clamp(-1, dim - 1))
                };
                let len = if step > 0 {
                    ((end - start) + step - 1).div_euclid(step).max(0)
                } else {
                    ((start - end) + (-step) - 1).div_euclid(-step).max(0)
                };
                shape[ax] = len;
                ranges[ax] = (start, end, step);
            }
            let value = match x.value {
                Some(v) if r == 1 => {
                    let (start, _, step) = ranges[0];
                    Some((0..shape[0]).map(|k| v[(start + k * step) as usize]).collect())
                }
                _ => None,
            };
            Ok(vec![Inferred { shape, value }])
        }
        Op::Constant { value } => Ok(vec![Inferred {
            shape: value.dims.clone(),
            value: value.int_values.clone(),
        }]),
        Op::Shape { start, end } => {
            let x = operand(inputs, 0)?.shape;
            let r = x.len() as i64;
            let clampi = |v: i64| (if v < 0 { v + r } else { v }).clamp(0, r) as usize;
            let (s, e) = (clampi(*start), clampi(end.unwrap_or(r)));
            let dims: Vec<i64> = if s < e { x[s..e].to_vec() } else { vec![] };
            Ok(vec![Inferred {
                shape: vec![dims.len() as i64],
                value: Some(dims),
            }])
        }
        Op::Gather { axis } => {
            let data = operand(inputs, 0)?;
            let idx = operand(inputs, 1)?;
            let Some(dv) = data.value else {
                return Err("Gather is supported only on constant shape data".into());
            };
            let iv = idx.value.ok_or("Gather indices are not constant")?;
            let ax = norm_axis(*axis, data.shape.len())?;
            let mut shape = data.shape[..ax].to_vec();
            shape.extend_from_slice(idx.shape);
            shape.extend_from_slice(&data.shape[ax + 1..]);
            let value = if data.shape.len() == 1 {
                let n = data.shape[0];
                let picked = iv
                    .iter()
                    .map(|&i| {
                        let j = if i < 0 { i + n } else { i };
                        dv.get(j as usize).copied().ok_or_else(|| format!("index {i} out of range"))
                    })
                    .collect::<RuleResult<Vec<_>>>()?;
                Some(picked)
            } else {
                None
            };
            Ok(vec![Inferred { shape, value }])
        }
    }
}

fn node_error(node: &Node, reason: String) -> ShapeError {
    ShapeError::RuleFailure {
        node: node.name.clone(),
        op_type: node.op_type.clone(),
        reason,
    }
}

fn format_stored(dims: &[RawDim]) -> String {
    let parts: Vec<String> = dims
        .iter()
        .map(|d| match d {
            RawDim::Fixed(v) => v.to_string(),
            RawDim::Symbolic(s) => s.clone(),
            RawDim::Unknown => "?".into(),
        })
        .collect();
    format!("[{}]", parts.join(", "))
}

/// Whether an inferred shape agrees with a stored annotation. Symbolic and
/// unknown dims are unconstrained.
pub fn agrees(inferred: &[i64], stored: &[RawDim]) -> bool {
    inferred.len() == stored.len()
        && inferred.iter().zip(stored).all(|(&i, s)| match s {
            RawDim::Fixed(v) => *v == i,
            RawDim::Symbolic(_) | RawDim::Unknown => true,
        })
}

/// Agreement of inferred shapes with the shapes stored in the model file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Conformance {
    pub checked: usize,
    pub mismatches: Vec<(String, Vec<i64>, String)>,
}

/// Compares every annotated node output against its stored shape.
pub fn conformance(ir: &GraphIR) -> Conformance {
    let mut c = Conformance::default();
    for t in &ir.tensors {
        if matches!(t.origin, TensorOrigin::GraphInput | TensorOrigin::Initializer) {
            continue;
        }
        let (Some(stored), Some(shape)) = (&t.stored_shape, &t.shape) else {
            continue;
        };
        c.checked += 1;
        if !agrees(shape, stored) {
            c.mismatches
                .push((t.name.clone(), shape.clone(), format_stored(stored)));
        }
    }
    c
}

/// Returns a copy of `ir` with every tensor shape concrete and constant
/// shape-computation subgraphs folded away.
///
/// `input_override` replaces the first graph input's shape. When the effective
/// input shapes match those declared in the file, inferred shapes must also
/// match every stored `value_info` shape.
pub fn infer_shapes(ir: &GraphIR, input_override: Option<&[i64]>) -> Result<GraphIR, ShapeError> {
    let mut out = ir.clone();

    for (k, &id) in out.inputs.clone().iter().enumerate() {
        let t = &mut out.tensors[id];
        if k == 0 {
            if let Some(shape) = input_override {
                t.shape = Some(shape.to_vec());
            }
        }
        if t.shape.is_none() {
            if k == 0 && t.stored_shape.as_ref().is_none_or(|d| d.len() == 4) {
                let mut s = DEFAULT_INPUT.to_vec();
                s[0] = ir.batch;
                t.shape = Some(s);
            } else {
                return Err(ShapeError::UnresolvedInput(t.name.clone()));
            }
        }
        if t.shape.as_ref().unwrap().iter().any(|&d| d < 1) {
            return Err(ShapeError::UnresolvedInput(t.name.clone()));
        }
    }
    let inputs_as_stored = out.inputs.iter().all(|&id| {
        let t = &out.tensors[id];
        match &t.stored_shape {
            Some(stored) => agrees(t.shape.as_ref().unwrap(), stored),
            None => true,
        }
    });

    for idx in 0..out.nodes.len() {
        let node = &out.nodes[idx];
        let mut missing = None;
        let operands: Vec<Option<Operand<'_>>> = node
            .inputs
            .iter()
            .map(|i| {
                i.and_then(|t| {
                    let spec = &out.tensors[t];
                    match &spec.shape {
                        Some(shape) => Some(Operand {
                            shape,
                            value: spec.value.as_deref(),
                        }),
                        None => {
                            missing.get_or_insert(spec.name.clone());
                            None
                        }
                    }
                })
            })
            .collect();
        if let Some(name) = missing {
            return Err(node_error(node, format!("input '{name}' has no shape")));
        }
        let results = rule(&node.op, &operands, node.outputs.len()).map_err(|r| node_error(node, r))?;
        if results.len() < node.outputs.len() {
            return Err(node_error(
                node,
                format!("rule produced {} outputs, node has {}", results.len(), node.outputs.len()),
            ));
        }
        let outputs = node.outputs.clone();
        for (&o, res) in outputs.iter().zip(results) {
            if res.shape.iter().any(|&d| d < 1) && !matches!(out.nodes[idx].op, Op::Constant { .. } | Op::Shape { .. }) {
                return Err(node_error(
                    &out.nodes[idx],
                    format!("non-positive output shape {:?}", res.shape),
                ));
            }
            let t = &mut out.tensors[o];
            t.shape = Some(res.shape);
            t.value = res
                .value
                .filter(|v| v.len() <= MAX_FOLD_ELEMENTS);
        }
    }

    if inputs_as_stored {
        let c = conformance(&out);
        if let Some((tensor, inferred, stored)) = c.mismatches.into_iter().next() {
            return Err(ShapeError::ShapeConflict {
                tensor,
                inferred,
                stored,
            });
        }
    }

    Ok(fold_constants(out))
}

/// Removes nodes whose outputs are all compile-time constants.
fn fold_constants(mut ir: GraphIR) -> GraphIR {
    let folded: Vec<bool> = ir
        .nodes
        .iter()
        .map(|n| {
            let outs_static = n.outputs.iter().all(|&o| {
                let t = &ir.tensors[o];
                t.value.is_some() && !t.is_graph_output
            });
            matches!(n.op, Op::Constant { .. }) || (n.op.is_foldable() && outs_static)
        })
        .collect();
    if !folded.iter().any(|&f| f) {
        return ir;
    }
    let mut kept = Vec::with_capacity(ir.nodes.len());
    for (n, f) in std::mem::take(&mut ir.nodes).into_iter().zip(folded) {
        if f {
            for &o in &n.outputs {
                ir.tensors[o].origin = TensorOrigin::Constant;
            }
        } else {
            kept.push(n);
        }
    }
    let fusion_groups = std::mem::take(&mut ir.fusion_groups);
    let mut rebuilt = GraphIR::from_parts(
        ir.name, ir.opset, ir.batch, kept, ir.tensors, ir.inputs, ir.outputs,
    );
    rebuilt.fusion_groups = fusion_groups;
    rebuilt
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{AutoPad, Window};

    fn win(k: i64, s: i64, p: i64) -> Window {
        Window {
            kernel_shape: Some(vec![k, k]),
            strides: vec![s, s],
            pads: vec![p; 4],
            dilations: vec![],
            auto_pad: AutoPad::NotSet,
            ceil_mode: false,
        }
    }

    fn shapes(op: &Op, ins: &[&[i64]]) -> Vec<Vec<i64>> {
        let ops: Vec<Option<Operand<'_>>> = ins.iter().map(|s| Some(Operand::shape(s))).collect();
        infer_node(op, &ops, 1)
            .unwrap()
            .into_iter()
            .map(|r| r.shape)
            .collect()
    }

    #[test]
    fn conv_7x7_stride2() {
        let op = Op::Conv {
            window: win(7, 2, 3),
            group: 1,
        };
        assert_eq!(
            shapes(&op, &[&[1, 3, 224, 224], &[64, 3, 7, 7]]),
            vec![vec![1, 64, 112, 112]]
        );
    }

    #[test]
    fn maxpool_3_stride2_no_pad() {
        let op = Op::MaxPool(win(3, 2, 0));
        assert_eq!(shapes(&op, &[&[1, 64, 112, 112]]), vec![vec![1, 64, 55, 55]]);
    }

    #[test]
    fn ceil_mode_rounds_up() {
        let mut w = win(3, 2, 0);
        w.ceil_mode = true;
        assert_eq!(
            shapes(&Op::MaxPool(w), &[&[1, 64, 112, 112]]),
            vec![vec![1, 64, 56, 56]]
        );
    }

    #[test]
    fn same_upper_keeps_spatial_over_stride() {
        let mut w = win(3, 2, 0);
        w.pads.clear();
        w.auto_pad = AutoPad::SameUpper;
        let op = Op::Conv { window: w, group: 1 };
        assert_eq!(
            shapes(&op, &[&[1, 3, 225, 225], &[8, 3, 3, 3]]),
            vec![vec![1, 8, 113, 113]]
        );
    }

    #[test]
    fn global_pool_collapses() {
        assert_eq!(
            shapes(&Op::GlobalAveragePool, &[&[1, 512, 7, 7]]),
            vec![vec![1, 512, 1, 1]]
        );
    }

    #[test]
    fn add_same_shape() {
        assert_eq!(
            shapes(&Op::Binary(Binary::Add), &[&[1, 64, 56, 56], &[1, 64, 56, 56]]),
            vec![vec![1, 64, 56, 56]]
        );
    }

    #[test]
    fn mul_broadcasts_channel_scale() {
        assert_eq!(
            shapes(&Op::Binary(Binary::Mul), &[&[1, 32, 1, 1], &[1, 32, 14, 14]]),
            vec![vec![1, 32, 14, 14]]
        );
    }

    #[test]
    fn gemm_trans_b() {
        let op = Op::Gemm {
            trans_a: false,
            trans_b: true,
        };
        assert_eq!(shapes(&op, &[&[1, 9216], &[4096, 9216]]), vec![vec![1, 4096]]);
    }

    #[test]
    fn concat_channels() {
        let op = Op::Concat { axis: 1 };
        assert_eq!(
            shapes(&op, &[&[1, 64, 28, 28], &[1, 32, 28, 28]]),
            vec![vec![1, 96, 28, 28]]
        );
    }

    #[test]
    fn kernel_larger_than_input_fails() {
        let op = Op::Conv {
            window: win(5, 1, 0),
            group: 1,
        };
        let ops = [Some(Operand::shape(&[1, 3, 4, 4])), Some(Operand::shape(&[8, 3, 5, 5]))];
        assert!(matches!(
            infer_node(&op, &ops, 1),
            Err(ShapeError::RuleFailure { .. })
        ));
    }

    #[test]
    fn group_must_divide_channels() {
        let op = Op::Conv {
            window: win(3, 1, 1),
            group: 2,
        };
        let ops = [Some(Operand::shape(&[1, 3, 8, 8])), Some(Operand::shape(&[4, 1, 3, 3]))];
        assert!(infer_node(&op, &ops, 1).is_err());
    }

    #[test]
    fn reshape_infers_minus_one() {
        let target = [1, -1];
        let ops = [
            Some(Operand::shape(&[1, 256, 6, 6])),
            Some(Operand {
                shape: &[2],
                value: Some(&target),
            }),
        ];
        let r = infer_node(&Op::Reshape { allow_zero: false }, &ops, 1).unwrap();
        assert_eq!(r[0].shape, vec![1, 9216]);
    }

    #[test]
    fn flatten_axis1() {
        assert_eq!(
            shapes(&Op::Flatten { axis: 1 }, &[&[1, 512, 1, 1]]),
            vec![vec![1, 512]]
        );
    }

    #[test]
    fn shape_gather_chain_values() {
        let s = infer_node(
            &Op::Shape { start: 0, end: None },
            &[Some(Operand::shape(&[1, 116, 28, 28]))],
            1,
        )
        .unwrap();
        assert_eq!(s[0].value, Some(vec![1, 116, 28, 28]));
        let idx = [1];
        let g = infer_node(
            &Op::Gather { axis: 0 },
            &[
                Some(Operand {
                    shape: &s[0].shape,
                    value: s[0].value.as_deref(),
                }),
                Some(Operand {
                    shape: &[1],
                    value: Some(&idx),
                }),
            ],
            1,
        )
        .unwrap();
        assert_eq!(g[0].value, Some(vec![116]));
    }

    #[test]
    fn slice_channel_halves() {
        let (starts, ends, axes) = ([58], [116], [1]);
        let v = |x: &'static [i64]| Operand {
            shape: &[1],
            value: Some(x),
        };
        let _ = v;
        let ops = [
            Some(Operand::shape(&[1, 116, 28, 28])),
            Some(Operand { shape: &[1], value: Some(&starts) }),
            Some(Operand { shape: &[1], value: Some(&ends) }),
            Some(Operand { shape: &[1], value: Some(&axes) }),
        ];
        let r = infer_node(&Op::Slice { attrs: None }, &ops, 1).unwrap();
        assert_eq!(r[0].shape, vec![1, 58, 28, 28]);
    }

    #[test]
    fn slice_huge_end_clamps() {
        let (starts, ends, axes) = ([0], [i64::MAX], [1]);
        let ops = [
            Some(Operand::shape(&[1, 116, 28, 28])),
            Some(Operand { shape: &[1], value: Some(&starts) }),
            Some(Operand { shape: &[1], value: Some(&ends) }),
            Some(Operand { shape: &[1], value: Some(&axes) }),
        ];
        let r = infer_node(&Op::Slice { attrs: None }, &ops, 1).unwrap();
        assert_eq!(r[0].shape, vec![1, 116, 28, 28]);
    }

    #[test]
    fn split_equal() {
        let ops = [Some(Operand::shape(&[1, 116, 28, 28]))];
        let r = infer_node(&Op::Split { axis: 1, split: None }, &ops, 2).unwrap();
        assert_eq!(r[0].shape, vec![1, 58, 28, 28]);
        assert_eq!(r[1].shape, vec![1, 58, 28, 28]);
    }

    #[test]
    fn reduce_mean_spatial() {
        let op = Op::ReduceMean {
            axes: Some(vec![2, 3]),
            keep_dims: false,
        };
        assert_eq!(shapes(&op, &[&[1, 1024, 7, 7]]), vec![vec![1, 1024]]);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast(&[1, 64, 1, 1], &[64, 56, 56]).unwrap(), vec![1, 64, 56, 56]);
        assert!(broadcast(&[3], &[4]).is_err());
    }
}
