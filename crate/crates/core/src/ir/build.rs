use super::{Attr, AxisTag::*, EwOp, Graph, Level, Node, NodeId, OpKind, TensorSpec};
use crate::dims::ModelDims;
use crate::error::{Error, Result};

pub const RMS_EPS: f64 = 1e-6;

struct Builder {
    g: Graph,
}

impl Builder {
    fn param(&mut self, spec: TensorSpec) -> NodeId {
        let id = self.g.push(OpKind::Parameter, vec![], spec);
        self.g.inputs.push(id);
        id
    }

    fn op(&mut self, kind: OpKind, inputs: Vec<NodeId>, out: TensorSpec) -> NodeId {
        self.g.push(kind, inputs, out)
    }

    fn rms_norm(&mut self, x: NodeId, d_model: usize) -> NodeId {
        let gain = self.param(TensorSpec::of(&[(Model, d_model)]));
        let out = self.g.spec(x).clone();
        let node = Node::new(0, OpKind::RmsNorm, vec![x, gain], out).with_attr("eps", Attr::Float(RMS_EPS));
        self.g.push_node(node)
    }

    fn linear(&mut self, x: NodeId, weight: TensorSpec) -> NodeId {
        let mut out = self.g.spec(x).clone();
        *out.axes.last_mut().unwrap() = weight.axes[0];
        let w = self.param(weight);
        self.op(OpKind::Linear, vec![x, w], out)
    }
}

/// Builds a decoder-only transformer over token ids `[Batch=b, Sequence=s]`.
///
/// Each block is pre-norm attention (fused QKV projection stacked as
/// `[b, s, 3, h, d]`, causal attention, output projection, residual) followed
/// by a pre-norm `Linear -> silu -> Linear` MLP with residual. Positions enter
/// through a sinusoidal encoding added to the token embedding. The loss is the
/// sum of the LM-head logits; outputs are `[logits, loss]`.
pub fn build_transformer_graph(dims: &ModelDims) -> Result<Graph> {
    dims.validate()?;
    let ModelDims { batch: b, seq: s, heads: h, head_dim: d, d_model: dm, d_ffn: ff, layers, vocab, .. } = *dims;
    let mut bld = Builder { g: Graph::new(Level::High) };

    let tokens = bld.g.push(OpKind::Input, vec![], TensorSpec::of(&[(Batch, b), (Sequence, s)]));
    bld.g.inputs.push(tokens);
    let table = bld.param(TensorSpec::of(&[(Vocab, vocab), (Model, dm)]));
    let emb = bld.op(OpKind::Embedding, vec![tokens, table], TensorSpec::of(&[(Batch, b), (Sequence, s), (Model, dm)]));

    let pos = bld.g.push_node(
        Node::new(0, OpKind::PositionIndex, vec![], TensorSpec::of(&[(Sequence, s)]))
            .with_attr("shard_len", Attr::Int(s as i64)),
    );
    let enc = bld.op(OpKind::Elementwise(EwOp::Sinusoid), vec![pos], TensorSpec::of(&[(Sequence, s), (Model, dm)]));
    let mask = bld.op(OpKind::CausalMaskIndex, vec![], TensorSpec::of(&[(Sequence, s), (Free, s)]));
    let hidden = TensorSpec::of(&[(Batch, b), (Sequence, s), (Model, dm)]);
    let mut x = bld.op(OpKind::Elementwise(EwOp::Add), vec![emb, enc], hidden.clone());

    for _ in 0..layers {
        let n1 = bld.rms_norm(x, dm);
        let qkv = bld.linear(n1, TensorSpec::of(&[(Free, 3 * dm), (Free, dm)]));
        let qkv5 = bld.op(
            OpKind::Reshape,
            vec![qkv],
            TensorSpec::of(&[(Batch, b), (Sequence, s), (Free, 3), (Heads, h), (HeadDim, d)]),
        );
        let att = bld.op(
            OpKind::AttentionCore,
            vec![qkv5, mask],
            TensorSpec::of(&[(Batch, b), (Sequence, s), (Heads, h), (HeadDim, d)]),
        );
        let att_flat = bld.op(OpKind::Reshape, vec![att], hidden.clone());
        let o = bld.linear(att_flat, TensorSpec::of(&[(Model, dm), (Free, dm)]));
        let h1 = bld.op(OpKind::Elementwise(EwOp::Add), vec![x, o], hidden.clone());

        let n2 = bld.rms_norm(h1, dm);
        let up = bld.linear(n2, TensorSpec::of(&[(FFN, ff), (Free, dm)]));
        let act = bld.op(OpKind::Elementwise(EwOp::Silu), vec![up], bld.g.spec(up).clone());
        let down = bld.linear(act, TensorSpec::of(&[(Model, dm), (Free, ff)]));
        x = bld.op(OpKind::Elementwise(EwOp::Add), vec![h1, down], hidden.clone());
    }

    let nf = bld.rms_norm(x, dm);
    let logits = bld.linear(nf, TensorSpec::of(&[(Vocab, vocab), (Free, dm)]));
    let loss = bld.op(OpKind::Loss, vec![logits], TensorSpec::scalar(super::DEFAULT_ELEM_BYTES));
    bld.g.outputs = vec![logits, loss];

    let diags = super::validate(&bld.g);
    if !diags.is_empty() {
        return Err(Error::Validation(diags));
    }
    Ok(bld.g)
}
