//! Min-cut activation checkpointing over a joint graph.
//!
//! Every node `n` becomes `n_in -> n_out` with finite capacity; data edges
//! and source/sink wires are infinite. A minimum cut picks the cheapest set of
//! forward values to keep so that the backward pass never depends on anything
//! else from the forward pass; the rest is rematerialized.

mod flow;
mod oracle;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use flow::MaxFlow;
pub use oracle::brute_force_cut;

use crate::autodiff::{grad_reachable, JointGraph};
use crate::error::{Error, Result};
use crate::executor::{Action, ExecutionSchedule, Step};
use crate::ir::{KindTag, Node, NodeId, OpKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum AcMode {
    /// Matmuls may never be rematerialized.
    #[serde(rename = "conservative")]
    Conservative,
    /// Only matmuls inside attention are protected.
    #[default]
    #[serde(rename = "seq-aware")]
    SeqAwareNonAttention,
    /// Nothing is protected; only graph inputs hang off the source.
    #[serde(rename = "seq-aware-all")]
    SeqAwareAll,
}

impl AcMode {
    pub const ALL: [AcMode; 3] = [AcMode::Conservative, AcMode::SeqAwareNonAttention, AcMode::SeqAwareAll];

    pub fn name(self) -> &'static str {
        match self {
            AcMode::Conservative => "conservative",
            AcMode::SeqAwareNonAttention => "seq-aware",
            AcMode::SeqAwareAll => "seq-aware-all",
        }
    }

    /// Whether `n` gets an extra infinite edge from the source.
    pub fn guards(self, n: &Node) -> bool {
        let heavy = ComputeHeavySet::default().contains(n);
        match self {
            AcMode::Conservative => heavy,
            AcMode::SeqAwareNonAttention => {
                heavy && n.origin.is_some_and(|o| o.kind == KindTag::AttentionCore)
            }
            AcMode::SeqAwareAll => false,
        }
    }
}

impl fmt::Display for AcMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AcMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AcMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown checkpointing mode `{s}`")))
    }
}

/// Low kinds treated as too expensive to recompute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComputeHeavySet {
    pub kinds: BTreeSet<KindTag>,
}

impl Default for ComputeHeavySet {
    fn default() -> Self {
        ComputeHeavySet { kinds: [KindTag::MatMul, KindTag::BatchMatMul].into_iter().collect() }
    }
}

impl ComputeHeavySet {
    pub fn contains(&self, n: &Node) -> bool {
        self.kinds.contains(&n.kind.tag())
    }
}

/// Default capacity: bytes of the node's output.
pub fn capacity(n: &Node) -> u64 {
    n.out.bytes()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeOrigin {
    SplitCapacity,
    Structural,
    SourceWire,
    SinkWire,
    ComputeHeavyGuard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Vertex {
    Source,
    Sink,
    In(NodeId),
    Out(NodeId),
}

impl fmt::Display for Vertex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Vertex::Source => f.write_str("source"),
            Vertex::Sink => f.write_str("sink"),
            Vertex::In(n) => write!(f, "{n}_in"),
            Vertex::Out(n) => write!(f, "{n}_out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowEdge {
    pub from: Vertex,
    pub to: Vertex,
    /// `None` is infinite.
    pub capacity: Option<u64>,
    pub origin: EdgeOrigin,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowNetwork {
    pub mode: AcMode,
    pub nodes: Vec<NodeId>,
    pub edges: Vec<FlowEdge>,
    /// Forward ids (placeholders included) and their split capacities.
    forward: BTreeMap<NodeId, u64>,
    /// Inputs of computed forward nodes, in arena order.
    forward_inputs: Vec<(NodeId, Vec<NodeId>)>,
    candidates: BTreeSet<NodeId>,
}

#[derive(Serialize)]
struct EdgeJson {
    from: String,
    to: String,
    capacity: Option<u64>,
    origin: EdgeOrigin,
}

impl FlowNetwork {
    pub fn count(&self, origin: EdgeOrigin) -> usize {
        self.edges.iter().filter(|e| e.origin == origin).count()
    }

    /// Hangs `ids` off the source like graph inputs, so they are kept
    /// whenever anything after them is needed by backward.
    pub fn wire_boundaries(&mut self, ids: &BTreeSet<NodeId>) {
        for &n in ids {
            if !self.has_edge(Vertex::Source, Vertex::In(n)) {
                self.edges.push(FlowEdge { from: Vertex::Source, to: Vertex::In(n), capacity: None, origin: EdgeOrigin::SourceWire });
            }
        }
    }

    pub fn has_edge(&self, from: Vertex, to: Vertex) -> bool {
        self.edges.iter().any(|e| e.from == from && e.to == to)
    }

    /// Value used for infinite edges: one more than all finite capacities.
    pub fn infinity(&self) -> u64 {
        1 + self.edges.iter().filter_map(|e| e.capacity).sum::<u64>()
    }

    pub fn to_json_string(&self) -> Result<String> {
        let edges: Vec<EdgeJson> = self
            .edges
            .iter()
            .map(|e| EdgeJson { from: e.from.to_string(), to: e.to.to_string(), capacity: e.capacity, origin: e.origin })
            .collect();
        Ok(serde_json::to_string_pretty(&serde_json::json!({
            "mode": self.mode.name(),
            "infinity": self.infinity(),
            "edges": edges,
        }))?)
    }
}

/// Builds the split-node flow network of `j`.
///
/// Graph inputs hang off the source; every backward node feeds the sink at
/// its `_in` vertex, so a backward value can never be chosen for saving.
/// `mode` decides which compute-heavy forward nodes get an extra source edge.
pub fn build_flow_network(j: &JointGraph, mode: AcMode, cap: &dyn Fn(&Node) -> u64) -> FlowNetwork {
    let g = &j.graph;
    let mut edges = Vec::new();
    let reachable = grad_reachable(j);
    let mut forward = BTreeMap::new();
    for n in &g.nodes {
        let c = cap(n);
        edges.push(FlowEdge { from: Vertex::In(n.id), to: Vertex::Out(n.id), capacity: Some(c), origin: EdgeOrigin::SplitCapacity });
        for &i in &n.inputs {
            edges.push(FlowEdge { from: Vertex::Out(i), to: Vertex::In(n.id), capacity: None, origin: EdgeOrigin::Structural });
        }
        if j.is_forward(n.id) {
            forward.insert(n.id, c);
            if n.kind.is_placeholder() {
                edges.push(FlowEdge { from: Vertex::Source, to: Vertex::In(n.id), capacity: None, origin: EdgeOrigin::SourceWire });
            } else if mode.guards(n) {
                edges.push(FlowEdge {
                    from: Vertex::Source,
                    to: Vertex::In(n.id),
                    capacity: None,
                    origin: EdgeOrigin::ComputeHeavyGuard,
                });
            }
        } else if j.backward_ids.contains(&n.id) || reachable.contains(&n.id) {
            edges.push(FlowEdge { from: Vertex::In(n.id), to: Vertex::Sink, capacity: None, origin: EdgeOrigin::SinkWire });
        }
    }
    FlowNetwork {
        mode,
        nodes: g.nodes.iter().map(|n| n.id).collect(),
        edges,
        forward,
        forward_inputs: forward_inputs(j),
        candidates: j.saved_candidates.clone(),
    }
}

/// Computed forward values that every data path crosses: with arena order as
/// the schedule, no data edge jumps over them. In a transformer these are the
/// residual-stream values between sublayers. Values that do not depend on a
/// graph `Input` (weights, masks, positions) are ignored.
pub fn segment_boundaries(j: &JointGraph) -> BTreeSet<NodeId> {
    let g = &j.graph;
    let fwd: Vec<&Node> = g.nodes.iter().filter(|n| j.is_forward(n.id)).collect();
    let pos: BTreeMap<NodeId, usize> = fwd.iter().enumerate().map(|(k, n)| (n.id, k)).collect();
    let mut data = vec![false; fwd.len()];
    let mut reach = vec![0usize; fwd.len()];
    for (k, n) in fwd.iter().enumerate() {
        data[k] = matches!(n.kind, OpKind::Input) || n.inputs.iter().any(|i| data[pos[i]]);
        reach[k] = k;
        if data[k] {
            for i in &n.inputs {
                let p = pos[i];
                if data[p] {
                    reach[p] = reach[p].max(k);
                }
            }
        }
    }
    let mut out = BTreeSet::new();
    let mut crossing = 0;
    for (k, n) in fwd.iter().enumerate() {
        if data[k] && !n.kind.is_placeholder() && crossing <= k {
            out.insert(n.id);
        }
        if data[k] {
            crossing = crossing.max(reach[k]);
        }
    }
    out
}

/// Computed forward nodes that must be rebuilt when only `saved` survives the
/// forward pass, in arena order.
fn recompute_closure(
    forward_inputs: &[(NodeId, Vec<NodeId>)],
    candidates: &BTreeSet<NodeId>,
    saved: &BTreeSet<NodeId>,
) -> Vec<NodeId> {
    let inputs: BTreeMap<NodeId, &Vec<NodeId>> = forward_inputs.iter().map(|(n, i)| (*n, i)).collect();
    let mut need = BTreeSet::new();
    let mut stack: Vec<NodeId> = candidates.iter().copied().collect();
    while let Some(n) = stack.pop() {
        let Some(ins) = inputs.get(&n) else { continue };
        if saved.contains(&n) || !need.insert(n) {
            continue;
        }
        stack.extend(ins.iter().copied());
    }
    forward_inputs.iter().map(|(n, _)| *n).filter(|n| need.contains(n)).collect()
}

fn forward_inputs(j: &JointGraph) -> Vec<(NodeId, Vec<NodeId>)> {
    j.graph
        .nodes
        .iter()
        .filter(|n| j.forward_ids.contains(&n.id))
        .map(|n| (n.id, n.inputs.clone()))
        .collect()
}

/// Which forward values are kept from the forward pass into the backward.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointPlan {
    pub mode: Option<AcMode>,
    /// Forward nodes whose split edge is cut. Graph inputs may appear here.
    pub saved: BTreeSet<NodeId>,
    pub cut_value: u64,
    /// Forward nodes re-executed during backward, in topological order.
    pub recompute_schedule: Vec<NodeId>,
}

impl CheckpointPlan {
    /// Plan keeping exactly `saved`; everything else backward needs is
    /// recomputed from it.
    pub fn from_saved(j: &JointGraph, saved: BTreeSet<NodeId>) -> Result<Self> {
        for &s in &saved {
            if j.graph.index_of(s).is_none() || !j.is_forward(s) {
                return Err(Error::UnknownNode(s));
            }
        }
        let recompute_schedule = recompute_closure(&forward_inputs(j), &j.saved_candidates, &saved);
        let cut_value = saved.iter().map(|&s| capacity(j.graph.node(s))).sum();
        Ok(CheckpointPlan { mode: None, saved, cut_value, recompute_schedule })
    }

    /// Plan that keeps every forward value backward reads: no recomputation.
    pub fn save_all(j: &JointGraph) -> Self {
        Self::from_saved(j, j.saved_candidates.clone()).expect("saved candidates are forward nodes")
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Solves the minimum cut and reads off the canonical saved set: nodes whose
/// `_in` is reachable from the source in the residual network and whose
/// `_out` is not.
pub fn min_cut(net: &FlowNetwork) -> Result<CheckpointPlan> {
    let mut index: BTreeMap<Vertex, usize> = BTreeMap::new();
    index.insert(Vertex::Source, 0);
    index.insert(Vertex::Sink, 1);
    for &n in &net.nodes {
        let k = index.len();
        index.insert(Vertex::In(n), k);
        index.insert(Vertex::Out(n), k + 1);
    }
    let inf = net.infinity();
    let mut mf = MaxFlow::new(index.len());
    for e in &net.edges {
        mf.add_edge(index[&e.from], index[&e.to], e.capacity.unwrap_or(inf));
    }
    let value = mf.run(0, 1);
    if value >= inf {
        return Err(Error::Infeasible(format!("plan infeasible under mode {}", net.mode)));
    }
    let side = mf.source_side(0);
    let saved: BTreeSet<NodeId> = net
        .forward
        .keys()
        .copied()
        .filter(|&n| side[index[&Vertex::In(n)]] && !side[index[&Vertex::Out(n)]])
        .collect();
    let cut_value: u64 = saved.iter().map(|s| net.forward[s]).sum();
    debug_assert_eq!(cut_value, value);
    let recompute_schedule = recompute_closure(&net.forward_inputs, &net.candidates, &saved);
    Ok(CheckpointPlan { mode: Some(net.mode), saved, cut_value, recompute_schedule })
}

/// Turns a plan into an executable schedule.
///
/// The forward phase computes every forward node. The backward phase computes
/// backward nodes in order; before each one, any forward input that was not
/// kept is recomputed (inputs first) and stays live until its last use.
/// Every value is freed right after its last reader unless it is a graph
/// output. Parameter gradients are marked as living in static memory.
pub fn apply_plan(j: &JointGraph, plan: &CheckpointPlan) -> Result<ExecutionSchedule> {
    let g = &j.graph;
    for &s in plan.saved.iter().chain(&plan.recompute_schedule) {
        if g.index_of(s).is_none() {
            return Err(Error::UnknownNode(s));
        }
    }
    let outputs: BTreeSet<NodeId> = g.outputs.iter().copied().collect();
    let mut steps: Vec<Step> = Vec::new();
    for n in &g.nodes {
        if j.forward_ids.contains(&n.id) {
            steps.push(Step { node: n.id, action: Action::Compute });
        }
    }
    let mut available: BTreeSet<NodeId> = plan.saved.iter().chain(&outputs).copied().collect();

    fn ensure(j: &JointGraph, id: NodeId, available: &mut BTreeSet<NodeId>, steps: &mut Vec<Step>) {
        let node = j.graph.node(id);
        if node.kind.is_placeholder() || !j.is_forward(id) || available.contains(&id) {
            return;
        }
        for &i in &node.inputs {
            ensure(j, i, available, steps);
        }
        steps.push(Step { node: id, action: Action::Recompute });
        available.insert(id);
    }

    for n in &g.nodes {
        if j.backward_ids.contains(&n.id) {
            for &i in &n.inputs {
                ensure(j, i, &mut available, &mut steps);
            }
            steps.push(Step { node: n.id, action: Action::Compute });
        }
    }

    // Liveness: each (re)compute starts an instance; reads go to the most
    // recent instance of that node.
    let mut current: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut last_read: Vec<usize> = vec![usize::MAX; steps.len()];
    for (k, step) in steps.iter().enumerate() {
        for &i in &g.node(step.node).inputs {
            if let Some(&inst) = current.get(&i) {
                last_read[inst] = k;
            }
        }
        current.insert(step.node, k);
    }
    let mut frees: BTreeMap<usize, Vec<NodeId>> = BTreeMap::new();
    for (k, step) in steps.iter().enumerate() {
        if outputs.contains(&step.node) {
            continue;
        }
        let at = if last_read[k] == usize::MAX { k } else { last_read[k] };
        frees.entry(at).or_default().push(step.node);
    }
    let mut out = Vec::with_capacity(steps.len() * 2);
    for (k, step) in steps.into_iter().enumerate() {
        out.push(step);
        if let Some(ids) = frees.get_mut(&k) {
            ids.sort_unstable();
            out.extend(ids.iter().map(|&node| Step { node, action: Action::FreeAfterLastUse }));
        }
    }
    Ok(ExecutionSchedule {
        steps: out,
        retained: plan.saved.clone(),
        uncounted: j.leaf_grads.iter().map(|&(_, d)| d).collect(),
    })
}

/// Convenience: network, cut and schedule in one go with byte capacities.
pub fn plan_and_schedule(j: &JointGraph, mode: AcMode) -> Result<(CheckpointPlan, ExecutionSchedule)> {
    let plan = min_cut(&build_flow_network(j, mode, &capacity))?;
    let sched = apply_plan(j, &plan)?;
    Ok((plan, sched))
}
