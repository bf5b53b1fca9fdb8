//! Seeded generators for small executable graphs, used by property tests,
//! the acceptance suite and benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{build_joint_graph, JointGraph};
use crate::dims::ModelDims;
use crate::ir::{Attr, AxisTag::*, EwOp, Graph, KindTag, Level, Node, NodeId, OpKind, Origin, TensorSpec};

/// A random low graph with at most `max_forward` forward nodes, placeholders
/// and the final loss included.
///
/// Values are `[Sequence=2, Model=m]` with `m` varying across matmuls so that
/// capacities differ. Matmuls are randomly attributed to attention or to a
/// linear layer.
pub fn random_forward_graph(seed: u64, max_forward: usize) -> Graph {
    assert!(max_forward >= 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new(Level::Low);
    let spec = |m: usize| TensorSpec::of(&[(Sequence, 2), (Model, m)]);

    let x = g.push(OpKind::Input, vec![], spec(rng.gen_range(2..5)));
    g.inputs.push(x);
    let mut pool: Vec<NodeId> = vec![x];
    let budget = rng.gen_range(3..=max_forward);

    // leave room for the loss
    while g.nodes.len() + 1 < budget {
        let v = pool[rng.gen_range(0..pool.len())];
        let vs = g.spec(v).clone();
        let room = budget - 1 - g.nodes.len();
        let id = match rng.gen_range(0..6) {
            0 => g.push(OpKind::Elementwise(EwOp::Silu), vec![v], vs),
            1 => g.push_node(
                Node::new(0, OpKind::Elementwise(EwOp::Scale), vec![v], vs)
                    .with_attr("scale", Attr::Float(rng.gen_range(0.5..2.0))),
            ),
            2 => g.push(OpKind::Softmax, vec![v], vs),
            3 => {
                let same: Vec<NodeId> = pool.iter().copied().filter(|&u| *g.spec(u) == vs).collect();
                let u = same[rng.gen_range(0..same.len())];
                let op = if rng.gen_bool(0.5) { EwOp::Add } else { EwOp::Mul };
                g.push(OpKind::Elementwise(op), vec![v, u], vs)
            }
            _ if room >= 2 => {
                let m_in = vs.axes[1].extent;
                let m_out = rng.gen_range(1..6);
                let w = g.push(OpKind::Parameter, vec![], TensorSpec::of(&[(Free, m_in), (Model, m_out)]));
                g.inputs.push(w);
                let kind = if rng.gen_bool(0.5) { KindTag::AttentionCore } else { KindTag::Linear };
                let mut mm = Node::new(0, OpKind::MatMul, vec![v, w], spec(m_out));
                mm.origin = Some(Origin { id: w, kind });
                g.push_node(mm)
            }
            _ => g.push(OpKind::Elementwise(EwOp::Silu), vec![v], vs),
        };
        pool.push(id);
    }
    let last = *pool.last().unwrap();
    let loss = g.push(OpKind::ReduceSum, vec![last], TensorSpec::scalar(4));
    g.outputs = vec![loss];
    g
}

pub fn random_joint_graph(seed: u64, max_forward: usize) -> JointGraph {
    build_joint_graph(&random_forward_graph(seed, max_forward)).expect("generated graphs differentiate")
}

/// Small transformer dims with `s <= 64`, `h in {2, 4, 8}`, `layers <= 3`
/// and a world size from `{1, 2, 4}` that divides both.
pub fn random_sp_config(seed: u64) -> (ModelDims, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = [1, 2, 4][rng.gen_range(0..3)];
    let h = [2, 4, 8].into_iter().filter(|h| h % p == 0).collect::<Vec<_>>();
    let h = h[rng.gen_range(0..h.len())];
    let s = p * rng.gen_range(1..=64 / p);
    let dims = ModelDims::new(rng.gen_range(1..3), s, h, rng.gen_range(1..4), rng.gen_range(2..9), rng.gen_range(1..4))
        .with_vocab(rng.gen_range(2..12));
    (dims, p)
}
