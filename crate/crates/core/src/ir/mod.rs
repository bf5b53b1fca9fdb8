//! Two-level tensor IR.
//!
//! The high level mirrors user-facing operators (linear layers, attention,
//! norms). The low level holds matmuls, permutes and pointwise ops, and is
//! also the level the joint forward/backward graph lives at. Every axis
//! carries a semantic tag, which survives lowering.

pub(crate) mod build;
mod json;
mod kind;
mod lower;
pub(crate) mod shape;
mod validate;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use build::build_transformer_graph;
pub use json::GraphJson;
pub use kind::{Direction, EwOp, KindTag, OpKind};
pub use lower::lower;
pub use shape::expected_out;
pub use validate::{validate, Diagnostic};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AxisTag {
    Batch,
    Sequence,
    Heads,
    HeadDim,
    Model,
    FFN,
    Vocab,
    Free,
}

impl AxisTag {
    pub fn name(self) -> &'static str {
        match self {
            AxisTag::Batch => "Batch",
            AxisTag::Sequence => "Sequence",
            AxisTag::Heads => "Heads",
            AxisTag::HeadDim => "HeadDim",
            AxisTag::Model => "Model",
            AxisTag::FFN => "FFN",
            AxisTag::Vocab => "Vocab",
            AxisTag::Free => "Free",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Axis {
    pub tag: AxisTag,
    pub extent: usize,
}

impl Axis {
    pub fn new(tag: AxisTag, extent: usize) -> Self {
        Axis { tag, extent }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TensorSpec {
    pub axes: Vec<Axis>,
    pub elem_bytes: usize,
}

pub const DEFAULT_ELEM_BYTES: usize = 4;

impl TensorSpec {
    pub fn new(axes: Vec<Axis>, elem_bytes: usize) -> Self {
        TensorSpec { axes, elem_bytes }
    }

    pub fn of(axes: &[(AxisTag, usize)]) -> Self {
        TensorSpec {
            axes: axes.iter().map(|&(t, e)| Axis::new(t, e)).collect(),
            elem_bytes: DEFAULT_ELEM_BYTES,
        }
    }

    pub fn scalar(elem_bytes: usize) -> Self {
        TensorSpec { axes: Vec::new(), elem_bytes }
    }

    pub fn with_elem_bytes(mut self, elem_bytes: usize) -> Self {
        self.elem_bytes = elem_bytes;
        self
    }

    pub fn rank(&self) -> usize {
        self.axes.len()
    }

    pub fn numel(&self) -> usize {
        self.axes.iter().map(|a| a.extent).product()
    }

    pub fn bytes(&self) -> u64 {
        self.elem_bytes as u64 * self.axes.iter().map(|a| a.extent as u64).product::<u64>()
    }

    pub fn extents(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.extent).collect()
    }

    pub fn find(&self, tag: AxisTag) -> Option<usize> {
        self.axes.iter().position(|a| a.tag == tag)
    }

    pub fn extent_of(&self, tag: AxisTag) -> Option<usize> {
        self.find(tag).map(|i| self.axes[i].extent)
    }

    pub fn with_extent(&self, tag: AxisTag, extent: usize) -> Self {
        let mut out = self.clone();
        if let Some(i) = out.find(tag) {
            out.axes[i].extent = extent;
        }
        out
    }

    /// Retags repeated non-Free tags as Free, keeping the first occurrence.
    pub fn dedup_tags(mut self) -> Self {
        let mut seen = Vec::new();
        for axis in &mut self.axes {
            if axis.tag == AxisTag::Free {
                continue;
            }
            if seen.contains(&axis.tag) {
                axis.tag = AxisTag::Free;
            } else {
                seen.push(axis.tag);
            }
        }
        self
    }

    pub fn has_unique_tags(&self) -> bool {
        let mut seen = Vec::new();
        for a in &self.axes {
            if a.tag != AxisTag::Free {
                if seen.contains(&a.tag) {
                    return false;
                }
                seen.push(a.tag);
            }
        }
        true
    }
}

impl fmt::Display for TensorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, a) in self.axes.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{}={}", a.tag.name(), a.extent)?;
        }
        write!(f, "]x{}B", self.elem_bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Attr {
    Int(i64),
    Float(f64),
    Ints(Vec<i64>),
}

/// Which high-level node a low-level node came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Origin {
    pub id: NodeId,
    pub kind: KindTag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub kind: OpKind,
    pub inputs: Vec<NodeId>,
    pub out: TensorSpec,
    pub attrs: BTreeMap<String, Attr>,
    pub origin: Option<Origin>,
}

impl Node {
    pub fn new(id: NodeId, kind: OpKind, inputs: Vec<NodeId>, out: TensorSpec) -> Self {
        Node { id, kind, inputs, out, attrs: BTreeMap::new(), origin: None }
    }

    pub fn with_attr(mut self, key: &str, value: Attr) -> Self {
        self.attrs.insert(key.to_string(), value);
        self
    }

    pub fn int_attr(&self, key: &str) -> Option<i64> {
        match self.attrs.get(key) {
            Some(Attr::Int(v)) => Some(*v),
            _ => None,
        }
    }

    pub fn float_attr(&self, key: &str) -> Option<f64> {
        match self.attrs.get(key) {
            Some(Attr::Float(v)) => Some(*v),
            Some(Attr::Int(v)) => Some(*v as f64),
            _ => None,
        }
    }

    pub fn ints_attr(&self, key: &str) -> Option<&[i64]> {
        match self.attrs.get(key) {
            Some(Attr::Ints(v)) => Some(v),
            _ => None,
        }
    }

    pub fn usize_attr(&self, key: &str) -> Option<usize> {
        self.int_attr(key).and_then(|v| usize::try_from(v).ok())
    }

    pub fn perm(&self) -> Option<Vec<usize>> {
        self.ints_attr("perm").map(|p| p.iter().map(|&x| x as usize).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    High,
    Low,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub level: Level,
    pub nodes: Vec<Node>,
    pub inputs: Vec<NodeId>,
    pub outputs: Vec<NodeId>,
}

impl Graph {
    pub fn new(level: Level) -> Self {
        Graph { level, nodes: Vec::new(), inputs: Vec::new(), outputs: Vec::new() }
    }

    /// Appends a node, assigning the next dense id.
    pub fn push(&mut self, kind: OpKind, inputs: Vec<NodeId>, out: TensorSpec) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node::new(id, kind, inputs, out));
        id
    }

    pub fn push_node(&mut self, mut node: Node) -> NodeId {
        let id = self.nodes.len();
        node.id = id;
        self.nodes.push(node);
        id
    }

    /// Position of a node id. Graphs built by this crate use dense ids, so this
    /// is usually the identity.
    pub fn index_of(&self, id: NodeId) -> Option<usize> {
        match self.nodes.get(id) {
            Some(n) if n.id == id => Some(id),
            _ => self.nodes.iter().position(|n| n.id == id),
        }
    }

    pub fn node(&self, id: NodeId) -> &Node {
        let idx = self.index_of(id).unwrap_or_else(|| panic!("unknown node id {id}"));
        &self.nodes[idx]
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut Node {
        let idx = self.index_of(id).unwrap_or_else(|| panic!("unknown node id {id}"));
        &mut self.nodes[idx]
    }

    pub fn spec(&self, id: NodeId) -> &TensorSpec {
        &self.node(id).out
    }

    pub fn nodes_of(&self, tag: KindTag) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(move |n| n.kind.tag() == tag)
    }

    pub fn count(&self, tag: KindTag) -> usize {
        self.nodes_of(tag).count()
    }

    /// Consumers of every node, in node order.
    pub fn users(&self) -> BTreeMap<NodeId, Vec<NodeId>> {
        let mut users: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for n in &self.nodes {
            users.entry(n.id).or_default();
            for &i in &n.inputs {
                let list = users.entry(i).or_default();
                if !list.contains(&n.id) {
                    list.push(n.id);
                }
            }
        }
        users
    }

    pub fn to_json(&self) -> GraphJson {
        GraphJson::from_graph(self)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("graph serializes")
    }

    pub fn from_json_str(s: &str) -> crate::Result<Self> {
        let json: GraphJson = serde_json::from_str(s)?;
        json.into_graph()
    }
}
