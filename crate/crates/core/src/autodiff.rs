//! Reverse-mode differentiation of a low graph into one joint
//! forward+backward arena.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{Attr, AxisTag, EwOp, Graph, GraphJson, Level, Node, NodeId, OpKind, Origin, TensorSpec};

/// Forward graph plus appended gradient nodes, in one id space.
#[derive(Debug, Clone, PartialEq)]
pub struct JointGraph {
    pub graph: Graph,
    /// Computed forward nodes. Placeholders belong to neither set.
    pub forward_ids: BTreeSet<NodeId>,
    pub backward_ids: BTreeSet<NodeId>,
    /// Gradient seeds; one all-ones scalar for the loss.
    pub grad_inputs: Vec<NodeId>,
    /// Forward values (placeholders included) read by some backward node.
    pub saved_candidates: BTreeSet<NodeId>,
    /// `(placeholder, gradient)` pairs, in graph-input order. These follow the
    /// forward outputs in `graph.outputs`.
    pub leaf_grads: Vec<(NodeId, NodeId)>,
    pub loss: NodeId,
}

#[derive(Serialize, Deserialize)]
struct JointJson {
    #[serde(flatten)]
    graph: GraphJson,
    forward_ids: Vec<NodeId>,
    backward_ids: Vec<NodeId>,
    grad_inputs: Vec<NodeId>,
    saved_candidates: Vec<NodeId>,
    leaf_grads: Vec<(NodeId, NodeId)>,
    loss: NodeId,
}

impl JointGraph {
    pub fn num_forward_outputs(&self) -> usize {
        self.graph.outputs.len() - self.leaf_grads.len()
    }

    pub fn is_forward(&self, id: NodeId) -> bool {
        !self.backward_ids.contains(&id)
    }

    pub fn to_json_string(&self) -> Result<String> {
        let j = JointJson {
            graph: GraphJson::from_graph(&self.graph),
            forward_ids: self.forward_ids.iter().copied().collect(),
            backward_ids: self.backward_ids.iter().copied().collect(),
            grad_inputs: self.grad_inputs.clone(),
            saved_candidates: self.saved_candidates.iter().copied().collect(),
            leaf_grads: self.leaf_grads.clone(),
            loss: self.loss,
        };
        Ok(serde_json::to_string_pretty(&j)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let j: JointJson = serde_json::from_str(s)?;
        Ok(JointGraph {
            graph: j.graph.into_graph()?,
            forward_ids: j.forward_ids.into_iter().collect(),
            backward_ids: j.backward_ids.into_iter().collect(),
            grad_inputs: j.grad_inputs,
            saved_candidates: j.saved_candidates.into_iter().collect(),
            leaf_grads: j.leaf_grads,
            loss: j.loss,
        })
    }
}

/// Input positions through which gradient flows for each kind.
fn differentiable_inputs(n: &Node) -> Vec<usize> {
    match n.kind {
        OpKind::Embedding => vec![1],
        OpKind::CausalMaskIndex | OpKind::PositionIndex | OpKind::GradMarker => vec![],
        OpKind::Elementwise(EwOp::Sinusoid) => vec![],
        _ => (0..n.inputs.len()).collect(),
    }
}

struct Builder {
    g: Graph,
    origin: Option<Origin>,
}

impl Builder {
    fn emit(&mut self, kind: OpKind, inputs: Vec<NodeId>, out: TensorSpec, attrs: &[(&str, Attr)]) -> NodeId {
        let mut node = Node::new(0, kind, inputs, out);
        for (k, v) in attrs {
            node.attrs.insert((*k).to_string(), v.clone());
        }
        node.origin = self.origin;
        self.g.push_node(node)
    }

    fn spec(&self, id: NodeId) -> TensorSpec {
        self.g.spec(id).clone()
    }

    /// Reinterprets `x` with exactly `target`'s axes when the two differ only
    /// in tags.
    fn conform(&mut self, x: NodeId, target: &TensorSpec) -> NodeId {
        if self.g.spec(x) == target {
            x
        } else {
            self.emit(OpKind::Reshape, vec![x], target.clone(), &[])
        }
    }

    fn permute(&mut self, x: NodeId, perm: Vec<usize>) -> NodeId {
        let src = self.spec(x);
        let out = TensorSpec::new(perm.iter().map(|&p| src.axes[p]).collect(), src.elem_bytes);
        let perm = perm.into_iter().map(|p| p as i64).collect();
        self.emit(OpKind::Permute, vec![x], out, &[("perm", Attr::Ints(perm))])
    }

    fn matmul_like(&mut self, kind: OpKind, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.spec(a), self.spec(b));
        let mut axes = sa.axes[..sa.rank() - 1].to_vec();
        axes.push(*sb.axes.last().unwrap());
        let out = TensorSpec::new(axes, sa.elem_bytes).dedup_tags();
        self.emit(kind, vec![a, b], out, &[])
    }

    /// Collapses all but the last axis into one `Free` axis.
    fn flatten2(&mut self, x: NodeId) -> NodeId {
        let s = self.spec(x);
        if s.rank() == 2 {
            return x;
        }
        let last = *s.axes.last().unwrap();
        let rows = s.numel() / last.extent;
        let out = TensorSpec::of(&[(AxisTag::Free, rows), (last.tag, last.extent)]).with_elem_bytes(s.elem_bytes);
        self.emit(OpKind::Reshape, vec![x], out, &[])
    }

    fn reduce_to(&mut self, dy: NodeId, target: &TensorSpec) -> NodeId {
        if self.g.spec(dy).extents() == target.extents() {
            self.conform(dy, target)
        } else {
            self.emit(OpKind::ReduceSum, vec![dy], target.clone(), &[])
        }
    }

    /// Gradient contributions `(input position, node)` of forward node `n`
    /// given its output gradient `dy`.
    fn recipe(&mut self, n: &Node, dy: NodeId, want: &[usize]) -> Result<Vec<(usize, NodeId)>> {
        let spec_of = |b: &Builder, i: usize| b.spec(n.inputs[i]);
        let mut out = Vec::new();
        let no_grad = || Error::NoGradient { node: n.id, kind: n.kind.to_string() };
        match n.kind {
            OpKind::Embedding => {
                let g = self.emit(OpKind::ScatterAdd, vec![n.inputs[0], dy], spec_of(self, 1), &[]);
                out.push((1, g));
            }
            OpKind::Reshape => {
                let g = self.emit(OpKind::Reshape, vec![dy], spec_of(self, 0), &[]);
                out.push((0, g));
            }
            OpKind::Permute => {
                let perm = n.perm().ok_or_else(no_grad)?;
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let g = self.permute(dy, inv);
                let g = self.conform(g, &spec_of(self, 0));
                out.push((0, g));
            }
            OpKind::Softmax => {
                let g = self.emit(OpKind::Elementwise(EwOp::SoftmaxBackward), vec![n.id, dy], n.out.clone(), &[]);
                out.push((0, g));
            }
            OpKind::ReduceSum => {
                let g = self.emit(OpKind::Broadcast, vec![dy], spec_of(self, 0), &[]);
                out.push((0, g));
            }
            OpKind::Broadcast => {
                let g = self.emit(OpKind::ReduceSum, vec![dy], spec_of(self, 0), &[]);
                out.push((0, g));
            }
            OpKind::Slice => {
                let (axis, start, _) = crate::ir::shape::slice_attrs(n).map_err(|_| no_grad())?;
                let g = self.emit(
                    OpKind::Pad,
                    vec![dy],
                    spec_of(self, 0),
                    &[("axis", Attr::Int(axis as i64)), ("start", Attr::Int(start as i64))],
                );
                out.push((0, g));
            }
            OpKind::Pad => {
                let axis = n.usize_attr("axis").ok_or_else(no_grad)?;
                let start = n.usize_attr("start").ok_or_else(no_grad)?;
                let x = spec_of(self, 0);
                let len = x.axes[axis].extent;
                let g = self.emit(
                    OpKind::Slice,
                    vec![dy],
                    x,
                    &[
                        ("axis", Attr::Int(axis as i64)),
                        ("start", Attr::Int(start as i64)),
                        ("len", Attr::Int(len as i64)),
                    ],
                );
                out.push((0, g));
            }
            OpKind::AllToAll(dir) => {
                let p = n.attrs.get("world_size").cloned().ok_or_else(no_grad)?;
                let g = self.emit(OpKind::AllToAll(dir.inverse()), vec![dy], spec_of(self, 0), &[("world_size", p)]);
                out.push((0, g));
            }
            OpKind::MatMul => {
                let (a, b) = (n.inputs[0], n.inputs[1]);
                if want.contains(&0) {
                    let bt = self.permute(b, vec![1, 0]);
                    let g = self.matmul_like(OpKind::MatMul, dy, bt);
                    let g = self.conform(g, &spec_of(self, 0));
                    out.push((0, g));
                }
                if want.contains(&1) {
                    let af = self.flatten2(a);
                    let at = self.permute(af, vec![1, 0]);
                    let dyf = self.flatten2(dy);
                    let g = self.matmul_like(OpKind::MatMul, at, dyf);
                    let g = self.conform(g, &spec_of(self, 1));
                    out.push((1, g));
                }
            }
            OpKind::BatchMatMul => {
                let (a, b) = (n.inputs[0], n.inputs[1]);
                let r = n.out.rank();
                let mut swap: Vec<usize> = (0..r).collect();
                swap.swap(r - 2, r - 1);
                if want.contains(&0) {
                    let bt = self.permute(b, swap.clone());
                    let g = self.matmul_like(OpKind::BatchMatMul, dy, bt);
                    let g = self.conform(g, &spec_of(self, 0));
                    out.push((0, g));
                }
                if want.contains(&1) {
                    let at = self.permute(a, swap);
                    let g = self.matmul_like(OpKind::BatchMatMul, at, dy);
                    let g = self.conform(g, &spec_of(self, 1));
                    out.push((1, g));
                }
            }
            OpKind::Elementwise(op) => match op {
                EwOp::Add => {
                    for &i in want {
                        let g = self.reduce_to(dy, &spec_of(self, i));
                        out.push((i, g));
                    }
                }
                EwOp::Mul => {
                    for &i in want {
                        let other = n.inputs[1 - i];
                        let prod = self.emit(OpKind::Elementwise(EwOp::Mul), vec![dy, other], n.out.clone(), &[]);
                        let g = self.reduce_to(prod, &spec_of(self, i));
                        out.push((i, g));
                    }
                }
                EwOp::Silu => {
                    let g = self.emit(OpKind::Elementwise(EwOp::SiluBackward), vec![n.inputs[0], dy], n.out.clone(), &[]);
                    out.push((0, g));
                }
                EwOp::Scale => {
                    let s = n.attrs.get("scale").cloned().ok_or_else(no_grad)?;
                    let g = self.emit(OpKind::Elementwise(EwOp::Scale), vec![dy], n.out.clone(), &[("scale", s)]);
                    out.push((0, g));
                }
                EwOp::RmsNorm => {
                    let eps = n.attrs.get("eps").cloned().unwrap_or(Attr::Float(crate::ir::build::RMS_EPS));
                    let (x, gain) = (n.inputs[0], n.inputs[1]);
                    if want.contains(&0) {
                        let g = self.emit(
                            OpKind::Elementwise(EwOp::RmsNormBackward),
                            vec![x, gain, dy],
                            spec_of(self, 0),
                            &[("eps", eps.clone())],
                        );
                        out.push((0, g));
                    }
                    if want.contains(&1) {
                        let per = self.emit(
                            OpKind::Elementwise(EwOp::RmsNormGainGrad),
                            vec![x, dy],
                            spec_of(self, 0),
                            &[("eps", eps)],
                        );
                        let g = self.emit(OpKind::ReduceSum, vec![per], spec_of(self, 1), &[]);
                        out.push((1, g));
                    }
                }
                EwOp::Sinusoid => {}
                _ => return Err(no_grad()),
            },
            OpKind::CausalMaskIndex | OpKind::PositionIndex => {}
            _ => return Err(no_grad()),
        }
        out.retain(|(i, _)| want.contains(i));
        Ok(out)
    }
}

/// Appends the backward pass of `g` to a copy of it.
///
/// The loss is the unique scalar graph output. Gradient recipes are emitted
/// per forward node in reverse topological order; contributions to a value
/// with several consumers are summed with an `Add` chain. Index generators and
/// embedding ids carry no gradient.
pub fn build_joint_graph(g: &Graph) -> Result<JointGraph> {
    if g.level != Level::Low {
        return Err(Error::Parse("autodiff expects a low-level graph".into()));
    }
    let diags = crate::ir::validate(g);
    if !diags.is_empty() {
        return Err(Error::Validation(diags));
    }
    let scalars: Vec<NodeId> = g.outputs.iter().copied().filter(|&o| g.spec(o).rank() == 0).collect();
    if scalars.len() != 1 {
        return Err(Error::LossOutput(scalars.len()));
    }
    let loss = scalars[0];

    // Which forward values depend on something differentiable.
    let mut index_inputs = BTreeSet::new();
    for n in &g.nodes {
        if matches!(n.kind, OpKind::Embedding | OpKind::ScatterAdd) {
            index_inputs.insert(n.inputs[0]);
        }
    }
    let mut requires: HashMap<NodeId, bool> = HashMap::new();
    for n in &g.nodes {
        let r = match n.kind {
            OpKind::Parameter => true,
            OpKind::Input => !index_inputs.contains(&n.id),
            _ => differentiable_inputs(n).iter().any(|&i| requires[&n.inputs[i]]),
        };
        requires.insert(n.id, r);
    }

    let forward_ids: BTreeSet<NodeId> =
        g.nodes.iter().filter(|n| !n.kind.is_placeholder()).map(|n| n.id).collect();
    let mut b = Builder { g: g.clone(), origin: g.node(loss).origin };
    let seed = b.emit(OpKind::GradMarker, vec![], g.spec(loss).clone(), &[]);

    let mut pending: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    pending.insert(loss, vec![seed]);
    let mut leaf: BTreeMap<NodeId, NodeId> = BTreeMap::new();

    for n in g.nodes.iter().rev() {
        let Some(parts) = pending.remove(&n.id) else { continue };
        b.origin = n.origin;
        let mut dy = parts[0];
        for &p in &parts[1..] {
            dy = b.emit(OpKind::Elementwise(EwOp::Add), vec![dy, p], n.out.clone(), &[]);
        }
        if n.kind.is_placeholder() {
            leaf.insert(n.id, dy);
            continue;
        }
        let want: Vec<usize> =
            differentiable_inputs(n).into_iter().filter(|&i| requires[&n.inputs[i]]).collect();
        if want.is_empty() {
            continue;
        }
        for (i, grad) in b.recipe(n, dy, &want)? {
            pending.entry(n.inputs[i]).or_default().push(grad);
        }
    }

    let leaf_grads: Vec<(NodeId, NodeId)> =
        g.inputs.iter().filter_map(|i| leaf.get(i).map(|&d| (*i, d))).collect();
    let mut graph = b.g;
    graph.outputs.extend(leaf_grads.iter().map(|&(_, d)| d));

    let backward_ids: BTreeSet<NodeId> =
        graph.nodes.iter().map(|n| n.id).filter(|id| !forward_ids.contains(id) && !g.inputs.contains(id)).collect();
    let mut saved_candidates = BTreeSet::new();
    for &id in &backward_ids {
        for &i in &graph.node(id).inputs {
            if !backward_ids.contains(&i) {
                saved_candidates.insert(i);
            }
        }
    }

    let diags = crate::ir::validate(&graph);
    if !diags.is_empty() {
        return Err(Error::Validation(diags));
    }
    Ok(JointGraph { graph, forward_ids, backward_ids, grad_inputs: vec![seed], saved_candidates, leaf_grads, loss })
}

/// All nodes reachable from the gradient seeds along data edges.
pub fn grad_reachable(j: &JointGraph) -> BTreeSet<NodeId> {
    let users = j.graph.users();
    let mut seen: BTreeSet<NodeId> = j.grad_inputs.iter().copied().collect();
    let mut queue: VecDeque<NodeId> = seen.iter().copied().collect();
    while let Some(n) = queue.pop_front() {
        for &u in users.get(&n).map(Vec::as_slice).unwrap_or(&[]) {
            if seen.insert(u) {
                queue.push_back(u);
            }
        }
    }
    seen
}
