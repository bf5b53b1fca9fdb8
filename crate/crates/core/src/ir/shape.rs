//! Per-kind shape rules.

use super::{Axis, AxisTag, Direction, EwOp, Node, OpKind, TensorSpec};

fn arity(node: &Node, n: usize, inputs: &[&TensorSpec]) -> Result<(), String> {
    if inputs.len() != n {
        return Err(format!("{} expects {n} inputs, got {}", node.kind, inputs.len()));
    }
    Ok(())
}

fn is_suffix(short: &TensorSpec, long: &TensorSpec) -> bool {
    short.rank() <= long.rank()
        && short.extents() == long.extents()[long.rank() - short.rank()..]
}

fn last(spec: &TensorSpec) -> Result<usize, String> {
    spec.axes.last().map(|a| a.extent).ok_or_else(|| "expected rank >= 1".to_string())
}

/// Checks a node's inputs against its kind's rule. Returns the derived output
/// spec when the kind determines it, or `None` when the node's declared `out`
/// is authoritative (placeholders, reshapes, collectives, ...).
pub fn expected_out(node: &Node, inputs: &[&TensorSpec]) -> Result<Option<TensorSpec>, String> {
    use OpKind::*;
    match node.kind {
        Input | Parameter | CausalMaskIndex | PositionIndex | GradMarker => {
            arity(node, 0, inputs)?;
            match node.kind {
                CausalMaskIndex => {
                    let e = node.out.extents();
                    if e.len() != 2 || e[0] != e[1] {
                        return Err("causal mask must be square rank-2".into());
                    }
                }
                PositionIndex => {
                    if node.out.rank() != 1 {
                        return Err("position index must be rank-1".into());
                    }
                    if node.usize_attr("shard_len") != Some(node.out.axes[0].extent) {
                        return Err("position index shard_len must equal its extent".into());
                    }
                }
                _ => {}
            }
            Ok(None)
        }
        Embedding => {
            arity(node, 2, inputs)?;
            let (ids, table) = (inputs[0], inputs[1]);
            if table.rank() < 2 {
                return Err("embedding table must be rank >= 2".into());
            }
            let mut axes = ids.axes.clone();
            axes.extend_from_slice(&table.axes[1..]);
            Ok(Some(TensorSpec::new(axes, table.elem_bytes).dedup_tags()))
        }
        Linear => {
            arity(node, 2, inputs)?;
            let (x, w) = (inputs[0], inputs[1]);
            if w.rank() != 2 {
                return Err("linear weight must be rank-2".into());
            }
            if last(x)? != w.axes[1].extent {
                return Err(format!(
                    "shape mismatch: linear input width {} != weight columns {}",
                    last(x)?,
                    w.axes[1].extent
                ));
            }
            let mut axes = x.axes[..x.rank() - 1].to_vec();
            axes.push(w.axes[0]);
            Ok(Some(TensorSpec::new(axes, x.elem_bytes).dedup_tags()))
        }
        RmsNorm | Elementwise(EwOp::RmsNorm) => {
            arity(node, 2, inputs)?;
            if inputs[1].rank() != 1 || inputs[1].axes[0].extent != last(inputs[0])? {
                return Err("shape mismatch: norm gain must match the last axis".into());
            }
            Ok(Some(inputs[0].clone()))
        }
        AttentionCore => {
            arity(node, 2, inputs)?;
            let (qkv, mask) = (inputs[0], inputs[1]);
            if qkv.rank() != 5 || qkv.axes[2].extent != 3 {
                return Err("attention expects stacked qkv [b, s, 3, h, d]".into());
            }
            let s = qkv.axes[1].extent;
            if mask.extents() != vec![s, s] {
                return Err(format!("shape mismatch: mask {mask} vs sequence {s}"));
            }
            let axes = vec![qkv.axes[0], qkv.axes[1], qkv.axes[3], qkv.axes[4]];
            Ok(Some(TensorSpec::new(axes, qkv.elem_bytes)))
        }
        Elementwise(op) => {
            arity(node, op.arity(), inputs)?;
            match op {
                EwOp::Add | EwOp::Mul => {
                    if !is_suffix(inputs[1], inputs[0]) {
                        return Err(format!(
                            "shape mismatch: {} does not broadcast onto {}",
                            inputs[1], inputs[0]
                        ));
                    }
                    Ok(Some(inputs[0].clone()))
                }
                EwOp::Silu => Ok(Some(inputs[0].clone())),
                EwOp::Scale => {
                    if node.float_attr("scale").is_none() {
                        return Err("scale attribute missing".into());
                    }
                    Ok(Some(inputs[0].clone()))
                }
                EwOp::Sinusoid => {
                    let e = node.out.extents();
                    if inputs[0].rank() != 1 || e.len() != 2 || e[0] != inputs[0].axes[0].extent {
                        return Err("sinusoid maps [S] to [S, D]".into());
                    }
                    Ok(None)
                }
                EwOp::SiluBackward | EwOp::RmsNormGainGrad | EwOp::SoftmaxBackward => {
                    if inputs[0].extents() != inputs[1].extents() {
                        return Err("shape mismatch between value and gradient".into());
                    }
                    Ok(Some(inputs[0].clone()))
                }
                EwOp::RmsNormBackward => {
                    if inputs[0].extents() != inputs[2].extents()
                        || inputs[1].extents() != vec![last(inputs[0])?]
                    {
                        return Err("shape mismatch in norm backward".into());
                    }
                    Ok(Some(inputs[0].clone()))
                }
                EwOp::RmsNorm => unreachable!(),
            }
        }
        Reshape => {
            arity(node, 1, inputs)?;
            if inputs[0].numel() != node.out.numel() {
                return Err(format!("shape mismatch: reshape {} -> {}", inputs[0], node.out));
            }
            Ok(None)
        }
        Permute => {
            arity(node, 1, inputs)?;
            let perm = node.perm().ok_or("permute needs a perm attribute")?;
            let mut sorted = perm.clone();
            sorted.sort_unstable();
            if sorted != (0..inputs[0].rank()).collect::<Vec<_>>() {
                return Err(format!("invalid permutation {perm:?}"));
            }
            let axes: Vec<Axis> = perm.iter().map(|&p| inputs[0].axes[p]).collect();
            Ok(Some(TensorSpec::new(axes, inputs[0].elem_bytes)))
        }
        Softmax => {
            arity(node, 1, inputs)?;
            last(inputs[0])?;
            Ok(Some(inputs[0].clone()))
        }
        Loss => {
            arity(node, 1, inputs)?;
            Ok(Some(TensorSpec::scalar(inputs[0].elem_bytes)))
        }
        AllToAll(dir) => {
            arity(node, 1, inputs)?;
            let p = node.usize_attr("world_size").ok_or("all-to-all needs world_size")?;
            let x = inputs[0];
            let (si, hi) = match (x.find(AxisTag::Sequence), x.find(AxisTag::Heads)) {
                (Some(s), Some(h)) => (s, h),
                _ => return Err("all-to-all input needs Sequence and Heads axes".into()),
            };
            let (s, h) = (x.axes[si].extent, x.axes[hi].extent);
            let expected = match dir {
                Direction::SeqToHead => {
                    if h % p != 0 {
                        return Err(format!("heads {h} not divisible by {p}"));
                    }
                    x.with_extent(AxisTag::Sequence, s * p).with_extent(AxisTag::Heads, h / p)
                }
                Direction::HeadToSeq => {
                    if s % p != 0 {
                        return Err(format!("sequence {s} not divisible by {p}"));
                    }
                    x.with_extent(AxisTag::Sequence, s / p).with_extent(AxisTag::Heads, h * p)
                }
            };
            Ok(Some(expected))
        }
        MatMul => {
            arity(node, 2, inputs)?;
            let (a, b) = (inputs[0], inputs[1]);
            if b.rank() != 2 || a.rank() < 1 || last(a)? != b.axes[0].extent {
                return Err(format!("shape mismatch: matmul {a} x {b}"));
            }
            let mut axes = a.axes[..a.rank() - 1].to_vec();
            axes.push(b.axes[1]);
            Ok(Some(TensorSpec::new(axes, a.elem_bytes).dedup_tags()))
        }
        BatchMatMul => {
            arity(node, 2, inputs)?;
            let (a, b) = (inputs[0], inputs[1]);
            let r = a.rank();
            if r < 3
                || b.rank() != r
                || a.extents()[..r - 2] != b.extents()[..r - 2]
                || a.axes[r - 1].extent != b.axes[r - 2].extent
            {
                return Err(format!("shape mismatch: batch matmul {a} x {b}"));
            }
            let mut axes = a.axes[..r - 1].to_vec();
            axes.push(b.axes[r - 1]);
            Ok(Some(TensorSpec::new(axes, a.elem_bytes).dedup_tags()))
        }
        ReduceSum => {
            arity(node, 1, inputs)?;
            if !is_suffix(&node.out, inputs[0]) {
                return Err("reduce-sum output must be a suffix of its input".into());
            }
            Ok(None)
        }
        Broadcast => {
            arity(node, 1, inputs)?;
            if !is_suffix(inputs[0], &node.out) {
                return Err("broadcast input must be a suffix of its output".into());
            }
            Ok(None)
        }
        Slice => {
            arity(node, 1, inputs)?;
            let (axis, start, len) = slice_attrs(node)?;
            let x = inputs[0];
            if axis >= x.rank() || start + len > x.axes[axis].extent {
                return Err("slice out of bounds".into());
            }
            let mut out = x.clone();
            out.axes[axis].extent = len;
            Ok(Some(out))
        }
        Pad => {
            arity(node, 1, inputs)?;
            let axis = node.usize_attr("axis").ok_or("pad needs axis")?;
            let start = node.usize_attr("start").ok_or("pad needs start")?;
            let x = inputs[0];
            if axis >= x.rank() || node.out.rank() != x.rank() {
                return Err("pad axis out of range".into());
            }
            for i in 0..x.rank() {
                let ok = if i == axis {
                    start + x.axes[i].extent <= node.out.axes[i].extent
                } else {
                    x.axes[i].extent == node.out.axes[i].extent
                };
                if !ok {
                    return Err("pad shape mismatch".into());
                }
            }
            Ok(None)
        }
        ScatterAdd => {
            arity(node, 2, inputs)?;
            let (ids, dy) = (inputs[0], inputs[1]);
            let mut expect = ids.extents();
            expect.extend_from_slice(&node.out.extents()[1..]);
            if dy.extents() != expect {
                return Err("scatter-add gradient shape mismatch".into());
            }
            Ok(None)
        }
    }
}

pub(crate) fn slice_attrs(node: &Node) -> Result<(usize, usize, usize), String> {
    match (node.usize_attr("axis"), node.usize_attr("start"), node.usize_attr("len")) {
        (Some(a), Some(s), Some(l)) => Ok((a, s, l)),
        _ => Err("slice needs axis/start/len".into()),
    }
}
