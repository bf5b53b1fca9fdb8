//! Ulysses-style sequence-parallel rewrite of a high graph.
//!
//! Outside attention every rank holds a contiguous `s/P` slice of the
//! sequence; around each attention op an all-to-all swaps that layout for the
//! full sequence over `h/P` heads, and a second one swaps it back.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dims::{ModelDims, DEFAULT_VOCAB};
use crate::error::{Error, Result};
use crate::ir::{Attr, AxisTag, Direction, Graph, GraphJson, KindTag, Level, Node, NodeId, OpKind, TensorSpec};

/// Kind sets driving the rewrite.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpConfig {
    pub world_size: usize,
    /// Kinds whose buffers are resized.
    pub resize_set: BTreeSet<KindTag>,
    /// Generators whose values depend on the rank's position in the sequence.
    pub index_set: BTreeSet<KindTag>,
    /// Ops that must see the whole sequence.
    pub attn_set: Vec<KindTag>,
}

impl SpConfig {
    pub fn new(world_size: usize) -> Self {
        use KindTag::*;
        let resize_set = [
            Input, Embedding, Linear, RmsNorm, AttentionCore, Elementwise, Reshape, Permute, Softmax, MatMul,
            BatchMatMul, Slice, Pad, Broadcast, ReduceSum,
        ]
        .into_iter()
        .collect();
        SpConfig {
            world_size,
            resize_set,
            index_set: [CausalMaskIndex, PositionIndex].into_iter().collect(),
            attn_set: vec![AttentionCore],
        }
    }
}

impl Default for SpConfig {
    fn default() -> Self {
        SpConfig::new(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpReason {
    ResizedBuffer,
    RecomputedIndex,
    InsertedCollective,
}

/// A transformed graph valid for every rank; the rank id is bound only when
/// the graph is executed.
#[derive(Debug, Clone, PartialEq)]
pub struct SpGraph {
    pub graph: Graph,
    pub world_size: usize,
    pub dims: ModelDims,
    pub provenance: BTreeMap<NodeId, SpReason>,
}

#[derive(Serialize, Deserialize)]
struct SpGraphJson {
    #[serde(flatten)]
    graph: GraphJson,
    world_size: usize,
    provenance: BTreeMap<NodeId, SpReason>,
}

impl SpGraph {
    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&SpGraphJson {
            graph: GraphJson::from_graph(&self.graph),
            world_size: self.world_size,
            provenance: self.provenance.clone(),
        })?)
    }

    /// Count of inserted collectives, both directions.
    pub fn collective_count(&self) -> usize {
        self.graph.count(KindTag::AllToAll)
    }
}

/// Reads the model dimensions off a high graph: `b, s` from the rank-2 token
/// input, `h, d` from the last two axes of the first attention output.
/// The returned dims have `world_size = 1`.
pub fn infer_dims(g: &Graph) -> Result<ModelDims> {
    let input = g
        .inputs
        .iter()
        .map(|&i| g.node(i))
        .find(|n| n.kind == OpKind::Input)
        .ok_or(Error::InputNotRank2(0))?;
    if input.out.rank() != 2 {
        return Err(Error::InputNotRank2(input.out.rank()));
    }
    let (b, s) = (input.out.axes[0].extent, input.out.axes[1].extent);
    let att = g.nodes_of(KindTag::AttentionCore).next().ok_or(Error::NoAttention)?;
    let r = att.out.rank();
    if r < 2 {
        return Err(Error::NoAttention);
    }
    let (h, d) = (att.out.axes[r - 2].extent, att.out.axes[r - 1].extent);
    let d_ffn = g
        .nodes_of(KindTag::Linear)
        .find_map(|n| n.out.extent_of(AxisTag::FFN))
        .unwrap_or(4 * h * d);
    let vocab = g
        .nodes_of(KindTag::Embedding)
        .next()
        .map(|n| g.spec(n.inputs[1]).axes[0].extent)
        .unwrap_or(DEFAULT_VOCAB);
    Ok(ModelDims::new(b, s, h, d, d_ffn, g.count(KindTag::AttentionCore)).with_vocab(vocab))
}

/// Rewrites `g` for `cfg.world_size` ranks.
///
/// Buffers outside attention have their Sequence extent divided by `P`;
/// attention ops keep the full sequence and divide Heads instead. Position
/// indices become rank-relative; masks consumed only by attention stay full.
/// An all-to-all is inserted on every Heads-carrying edge into an attention op
/// and after every attention op whose value leaves the region. `P = 1` returns
/// the graph unchanged.
pub fn transform_sp(g: &Graph, cfg: &SpConfig) -> Result<SpGraph> {
    if g.count(KindTag::AllToAll) > 0 {
        return Err(Error::AlreadyTransformed);
    }
    let diags = crate::ir::validate(g);
    if !diags.is_empty() {
        return Err(Error::Validation(diags));
    }
    let dims = infer_dims(g)?;
    let p = cfg.world_size;
    if p == 0 {
        return Err(Error::InvalidDims("world size must be positive".into()));
    }
    dims.check_divisible(p)?;
    let is_attn = |n: &Node| cfg.attn_set.contains(&n.kind.tag());
    if !g.nodes.iter().any(is_attn) {
        return Err(Error::AttentionOpNotFound);
    }
    let dims = dims.with_world_size(p);
    if p == 1 {
        return Ok(SpGraph { graph: g.clone(), world_size: 1, dims, provenance: BTreeMap::new() });
    }

    let (s, h) = (dims.seq, dims.heads);
    let users = g.users();
    let only_attn_users = |id: NodeId| {
        users.get(&id).is_some_and(|us| !us.is_empty() && us.iter().all(|u| is_attn(g.node(*u))))
    };

    let mut out = Graph::new(Level::High);
    let mut provenance = BTreeMap::new();
    // old id -> new id as seen from outside / inside the attention region
    let mut outside: BTreeMap<NodeId, NodeId> = BTreeMap::new();
    let mut inside: BTreeMap<NodeId, NodeId> = BTreeMap::new();

    let a2a = |out: &mut Graph, dir: Direction, x: NodeId| -> NodeId {
        let xs = out.spec(x).clone();
        let (seq, heads) = (xs.extent_of(AxisTag::Sequence).unwrap(), xs.extent_of(AxisTag::Heads).unwrap());
        let spec = match dir {
            Direction::SeqToHead => xs.with_extent(AxisTag::Sequence, seq * p).with_extent(AxisTag::Heads, heads / p),
            Direction::HeadToSeq => xs.with_extent(AxisTag::Sequence, seq / p).with_extent(AxisTag::Heads, heads * p),
        };
        let node = Node::new(0, OpKind::AllToAll(dir), vec![x], spec).with_attr("world_size", Attr::Int(p as i64));
        out.push_node(node)
    };

    for n in &g.nodes {
        let mut node = n.clone();
        let attn = is_attn(n);
        let mut reason = None;
        if attn {
            let mut ins = Vec::with_capacity(n.inputs.len());
            for &i in &n.inputs {
                let src = g.node(i);
                let new = if let Some(&v) = inside.get(&i) {
                    v
                } else if src.out.find(AxisTag::Heads).is_some() {
                    let v = a2a(&mut out, Direction::SeqToHead, outside[&i]);
                    provenance.insert(v, SpReason::InsertedCollective);
                    inside.insert(i, v);
                    v
                } else {
                    outside[&i]
                };
                ins.push(new);
            }
            node.inputs = ins;
            if cfg.resize_set.contains(&n.kind.tag()) && n.out.extent_of(AxisTag::Heads) == Some(h) {
                node.out = node.out.with_extent(AxisTag::Heads, h / p);
                reason = Some(SpReason::ResizedBuffer);
            }
        } else {
            node.inputs = n.inputs.iter().map(|i| outside[i]).collect();
            let tag = n.kind.tag();
            if cfg.index_set.contains(&tag) {
                if !only_attn_users(n.id) {
                    node.out = shard_seq(&node.out, s, p);
                    if n.kind == OpKind::PositionIndex {
                        node.attrs.insert("shard_len".into(), Attr::Int((s / p) as i64));
                    }
                    reason = Some(SpReason::RecomputedIndex);
                }
            } else if cfg.resize_set.contains(&tag) && n.out.extent_of(AxisTag::Sequence) == Some(s) {
                node.out = shard_seq(&node.out, s, p);
                reason = Some(SpReason::ResizedBuffer);
            }
        }
        let id = out.push_node(node);
        if let Some(r) = reason {
            provenance.insert(id, r);
        }
        if attn {
            inside.insert(n.id, id);
            let leaves = users.get(&n.id).is_some_and(|us| us.iter().any(|u| !is_attn(g.node(*u))))
                || g.outputs.contains(&n.id);
            if leaves {
                let back = a2a(&mut out, Direction::HeadToSeq, id);
                provenance.insert(back, SpReason::InsertedCollective);
                outside.insert(n.id, back);
            }
        } else {
            outside.insert(n.id, id);
            if n.kind.is_generator() && only_attn_users(n.id) {
                inside.insert(n.id, id);
            }
        }
    }
    out.inputs = g.inputs.iter().map(|i| outside[i]).collect();
    out.outputs = g.outputs.iter().map(|i| outside[i]).collect();

    let diags = crate::ir::validate(&out);
    if !diags.is_empty() {
        return Err(Error::Validation(diags));
    }
    Ok(SpGraph { graph: out, world_size: p, dims, provenance })
}

fn shard_seq(spec: &TensorSpec, s: usize, p: usize) -> TensorSpec {
    match spec.extent_of(AxisTag::Sequence) {
        Some(e) if e == s => spec.with_extent(AxisTag::Sequence, s / p),
        _ => spec.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::build_transformer_graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn infers_full_size_dims() {
        let dims = ModelDims::new(4, 1024, 32, 128, 11008, 1);
        let got = infer_dims(&build_transformer_graph(&dims).unwrap()).unwrap();
        assert_eq!((got.batch, got.seq, got.heads, got.head_dim, got.d_model), (4, 1024, 32, 128, 4096));
    }

    #[test]
    fn infers_unit_dims() {
        let dims = ModelDims::new(1, 1, 1, 1, 1, 1).with_vocab(1);
        assert_eq!(infer_dims(&build_transformer_graph(&dims).unwrap()).unwrap(), dims);
    }

    #[test]
    fn infer_round_trips_random_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let dims = ModelDims::new(
                rng.gen_range(1..4),
                rng.gen_range(1..33),
                rng.gen_range(1..9),
                rng.gen_range(1..9),
                rng.gen_range(1..40),
                rng.gen_range(1..4),
            )
            .with_vocab(rng.gen_range(1..50));
            assert_eq!(infer_dims(&build_transformer_graph(&dims).unwrap()).unwrap(), dims);
        }
    }

    #[test]
    fn collective_shapes() {
        let g = build_transformer_graph(&ModelDims::new(2, 8, 4, 16, 32, 1)).unwrap();
        let sp = transform_sp(&g, &SpConfig::new(2)).unwrap();
        let a2a: Vec<&Node> = sp.graph.nodes_of(KindTag::AllToAll).collect();
        assert_eq!(a2a.len(), 2);
        assert_eq!(a2a[0].kind, OpKind::AllToAll(Direction::SeqToHead));
        // fused qkv keeps its stacking axis between sequence and heads
        assert_eq!(a2a[0].out.extents(), vec![2, 8, 3, 2, 16]);
        assert_eq!(a2a[0].out.extent_of(AxisTag::Heads), Some(2));
        assert_eq!(a2a[1].kind, OpKind::AllToAll(Direction::HeadToSeq));
        assert_eq!(a2a[1].out.extents(), vec![2, 4, 4, 16]);
    }

    #[test]
    fn region_invariants() {
        let g = build_transformer_graph(&ModelDims::new(1, 8, 4, 2, 8, 3)).unwrap();
        let sp = transform_sp(&g, &SpConfig::new(4)).unwrap();
        assert_eq!(sp.collective_count(), 6);
        for n in &sp.graph.nodes {
            match n.kind {
                OpKind::AttentionCore => assert_eq!(n.out.extent_of(AxisTag::Heads), Some(1)),
                OpKind::CausalMaskIndex => assert_eq!(n.out.extents(), vec![8, 8]),
                OpKind::AllToAll(_) => {}
                _ => assert!(n.out.extent_of(AxisTag::Sequence).is_none_or(|e| e == 2), "{}", n.id),
            }
        }
        let pos = sp.graph.nodes_of(KindTag::PositionIndex).next().unwrap();
        assert_eq!(pos.usize_attr("shard_len"), Some(2));
        assert_eq!(sp.provenance[&pos.id], SpReason::RecomputedIndex);
        let json = sp.to_json_string().unwrap();
        assert!(json.contains("InsertedCollective"));
    }

    #[test]
    fn identity_at_one_rank() {
        let g = build_transformer_graph(&ModelDims::new(1, 4, 2, 2, 4, 2)).unwrap();
        let sp = transform_sp(&g, &SpConfig::new(1)).unwrap();
        assert_eq!(sp.graph, g);
        assert!(sp.provenance.is_empty());
    }

    #[test]
    fn rejects_bad_inputs() {
        let g = build_transformer_graph(&ModelDims::new(1, 6, 2, 2, 4, 1)).unwrap();
        assert!(matches!(transform_sp(&g, &SpConfig::new(4)), Err(Error::Indivisible { .. })));
        let g = build_transformer_graph(&ModelDims::new(1, 8, 3, 2, 4, 1)).unwrap();
        assert!(matches!(transform_sp(&g, &SpConfig::new(2)), Err(Error::Indivisible { .. })));
        let g = build_transformer_graph(&ModelDims::new(1, 8, 2, 2, 4, 1)).unwrap();
        let sp = transform_sp(&g, &SpConfig::new(2)).unwrap();
        assert!(matches!(transform_sp(&sp.graph, &SpConfig::new(2)), Err(Error::AlreadyTransformed)));
        let mut cfg = SpConfig::new(2);
        cfg.attn_set = vec![KindTag::BatchMatMul];
        assert!(matches!(transform_sp(&g, &cfg), Err(Error::AttentionOpNotFound)));
    }
}
