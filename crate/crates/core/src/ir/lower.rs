use std::collections::BTreeMap;

use super::{Attr, Axis, AxisTag, EwOp, Graph, Level, Node, NodeId, OpKind, Origin, TensorSpec};
use crate::error::{Error, Result};

struct Lowering<'a> {
    high: &'a Graph,
    low: Graph,
    origin: Origin,
}

impl Lowering<'_> {
    fn emit(&mut self, kind: OpKind, inputs: Vec<NodeId>, out: TensorSpec, attrs: &[(&str, Attr)]) -> NodeId {
        let mut node = Node::new(0, kind, inputs, out);
        for (k, v) in attrs {
            node.attrs.insert((*k).to_string(), v.clone());
        }
        node.origin = Some(self.origin);
        self.low.push_node(node)
    }

    fn spec(&self, id: NodeId) -> TensorSpec {
        self.low.spec(id).clone()
    }

    fn permute(&mut self, x: NodeId, perm: &[usize]) -> NodeId {
        let src = self.spec(x);
        let axes: Vec<Axis> = perm.iter().map(|&p| src.axes[p]).collect();
        let out = TensorSpec::new(axes, src.elem_bytes);
        let perm = perm.iter().map(|&p| p as i64).collect();
        self.emit(OpKind::Permute, vec![x], out, &[("perm", Attr::Ints(perm))])
    }

    fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let mut out = self.spec(x);
        out.axes[axis].extent = len;
        self.emit(
            OpKind::Slice,
            vec![x],
            out,
            &[("axis", Attr::Int(axis as i64)), ("start", Attr::Int(start as i64)), ("len", Attr::Int(len as i64))],
        )
    }

    fn matmul_like(&mut self, kind: OpKind, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.spec(a), self.spec(b));
        let mut axes = sa.axes[..sa.rank() - 1].to_vec();
        axes.push(*sb.axes.last().unwrap());
        let out = TensorSpec::new(axes, sa.elem_bytes).dedup_tags();
        self.emit(kind, vec![a, b], out, &[])
    }
}

/// Lowers a high-level graph to matmul/permute-level ops.
///
/// `Linear` becomes `Permute(weight) + MatMul`; `AttentionCore` becomes the
/// q/k/v slices, `BatchMatMul`, scale, sliced mask add, `Softmax` and a second
/// `BatchMatMul`; `RmsNorm` and `Loss` become an elementwise norm and a full
/// `ReduceSum`. Everything else maps one to one. Every low node records the
/// high node it came from.
pub fn lower(g: &Graph) -> Result<Graph> {
    if g.level != Level::High {
        return Err(Error::Parse("lower expects a high-level graph".into()));
    }
    let diags = super::validate(g);
    if !diags.is_empty() {
        return Err(Error::Validation(diags));
    }

    let mut map: BTreeMap<NodeId, NodeId> = BTreeMap::new();
    let mut lw = Lowering {
        high: g,
        low: Graph::new(Level::Low),
        origin: Origin { id: 0, kind: super::KindTag::Input },
    };

    for n in &g.nodes {
        lw.origin = Origin { id: n.id, kind: n.kind.tag() };
        let ins: Vec<NodeId> = n.inputs.iter().map(|i| map[i]).collect();
        let last = match n.kind {
            OpKind::Linear => {
                let wt = lw.permute(ins[1], &[1, 0]);
                lw.matmul_like(OpKind::MatMul, ins[0], wt)
            }
            OpKind::RmsNorm => {
                let eps = n.attrs.get("eps").cloned().unwrap_or(Attr::Float(super::build::RMS_EPS));
                lw.emit(OpKind::Elementwise(EwOp::RmsNorm), ins, n.out.clone(), &[("eps", eps)])
            }
            OpKind::Loss => lw.emit(OpKind::ReduceSum, ins, n.out.clone(), &[]),
            OpKind::AttentionCore => lower_attention(&mut lw, ins[0], ins[1]),
            kind if kind.allowed_in_low() => {
                let mut node = n.clone();
                node.inputs = ins;
                node.origin = Some(lw.origin);
                lw.low.push_node(node)
            }
            kind => return Err(Error::Unlowerable { node: n.id, kind: kind.to_string() }),
        };
        debug_assert_eq!(lw.low.spec(last), &n.out, "lowering of node {} changed its shape", n.id);
        map.insert(n.id, last);
    }

    lw.low.inputs = lw.high.inputs.iter().map(|i| map[i]).collect();
    lw.low.outputs = lw.high.outputs.iter().map(|i| map[i]).collect();
    Ok(lw.low)
}

fn lower_attention(lw: &mut Lowering<'_>, qkv: NodeId, mask: NodeId) -> NodeId {
    let spec = lw.spec(qkv);
    let (b, s, h, d) = (spec.axes[0], spec.axes[1], spec.axes[3], spec.axes[4]);
    let bshd = TensorSpec::new(vec![b, s, h, d], spec.elem_bytes);

    let mut parts = Vec::with_capacity(3);
    for i in 0..3 {
        let sl = lw.slice(qkv, 2, i, 1);
        parts.push(lw.emit(OpKind::Reshape, vec![sl], bshd.clone(), &[]));
    }
    let q = lw.permute(parts[0], &[0, 2, 1, 3]);
    let k = lw.permute(parts[1], &[0, 2, 3, 1]);
    let v = lw.permute(parts[2], &[0, 2, 1, 3]);

    let scores = lw.matmul_like(OpKind::BatchMatMul, q, k);
    let scale = 1.0 / (d.extent as f64).sqrt();
    let scaled = lw.emit(OpKind::Elementwise(EwOp::Scale), vec![scores], lw.spec(scores), &[("scale", Attr::Float(scale))]);
    let m = lw.slice(mask, 0, 0, s.extent);
    let masked = lw.emit(OpKind::Elementwise(EwOp::Add), vec![scaled, m], lw.spec(scaled), &[]);
    let probs = lw.emit(OpKind::Softmax, vec![masked], lw.spec(masked), &[]);
    let ctx = lw.matmul_like(OpKind::BatchMatMul, probs, v);
    debug_assert_eq!(lw.spec(ctx).axes[3].tag, AxisTag::HeadDim);
    lw.permute(ctx, &[0, 2, 1, 3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dims::ModelDims;
    use crate::ir::{build_transformer_graph, validate, AxisTag::*, KindTag};

    #[test]
    fn linear_becomes_permute_and_matmul() {
        let mut g = Graph::new(Level::High);
        let x = g.push(OpKind::Input, vec![], TensorSpec::of(&[(Sequence, 3), (Model, 4)]));
        let w = g.push(OpKind::Parameter, vec![], TensorSpec::of(&[(FFN, 5), (Free, 4)]));
        let y = g.push(OpKind::Linear, vec![x, w], TensorSpec::of(&[(Sequence, 3), (FFN, 5)]));
        g.inputs = vec![x, w];
        g.outputs = vec![y];
        let low = lower(&g).unwrap();
        let computed: Vec<_> = low.nodes.iter().filter(|n| !n.kind.is_placeholder()).map(|n| n.kind.tag()).collect();
        assert_eq!(computed, vec![KindTag::Permute, KindTag::MatMul]);
        assert!(validate(&low).is_empty());
        assert_eq!(low.spec(low.outputs[0]), g.spec(y));
    }

    #[test]
    fn elementwise_maps_one_to_one() {
        let mut g = Graph::new(Level::High);
        let spec = TensorSpec::of(&[(Sequence, 3), (Model, 4)]);
        let a = g.push(OpKind::Input, vec![], spec.clone());
        let b = g.push(OpKind::Parameter, vec![], spec.clone());
        let c = g.push(OpKind::Elementwise(EwOp::Add), vec![a, b], spec);
        g.inputs = vec![a, b];
        g.outputs = vec![c];
        let low = lower(&g).unwrap();
        assert_eq!(low.nodes.len(), 3);
        assert_eq!(low.nodes[2].kind, OpKind::Elementwise(EwOp::Add));
        assert_eq!(low.nodes[2].inputs, vec![0, 1]);
    }

    #[test]
    fn transformer_lowers_validly_with_total_provenance() {
        let g = build_transformer_graph(&ModelDims::new(2, 6, 2, 3, 8, 2)).unwrap();
        let low = lower(&g).unwrap();
        assert!(validate(&low).is_empty(), "{:?}", validate(&low));
        assert_eq!(low.count(KindTag::AttentionCore) + low.count(KindTag::Linear), 0);
        assert!(low.nodes.iter().all(|n| n.origin.is_some()));
        for hn in &g.nodes {
            let last = low.nodes.iter().rfind(|n| n.origin.unwrap().id == hn.id).unwrap();
            assert_eq!(last.out, hn.out);
        }
    }

    #[test]
    fn rejects_low_graph() {
        let g = lower(&build_transformer_graph(&ModelDims::new(1, 2, 1, 2, 4, 1)).unwrap()).unwrap();
        assert!(lower(&g).is_err());
    }
}
