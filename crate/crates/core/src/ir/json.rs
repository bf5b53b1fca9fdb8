use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Attr, Axis, AxisTag, Graph, Level, Node, NodeId, Origin, TensorSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeJson {
    pub id: NodeId,
    pub kind: String,
    pub inputs: Vec<NodeId>,
    pub axes: Vec<(AxisTag, usize)>,
    pub elem_bytes: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: BTreeMap<String, Attr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<Origin>,
}

/// On-disk graph form: `{level, nodes: [{id, kind, inputs, axes, elem_bytes, attrs}], inputs, outputs}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphJson {
    pub level: Level,
    pub nodes: Vec<NodeJson>,
    pub inputs: Vec<NodeId>,
    pub outputs: Vec<NodeId>,
}

impl GraphJson {
    pub fn from_graph(g: &Graph) -> Self {
        let nodes = g
            .nodes
            .iter()
            .map(|n| NodeJson {
                id: n.id,
                kind: n.kind.to_string(),
                inputs: n.inputs.clone(),
                axes: n.out.axes.iter().map(|a| (a.tag, a.extent)).collect(),
                elem_bytes: n.out.elem_bytes,
                attrs: n.attrs.clone(),
                origin: n.origin,
            })
            .collect();
        GraphJson { level: g.level, nodes, inputs: g.inputs.clone(), outputs: g.outputs.clone() }
    }

    pub fn into_graph(self) -> crate::Result<Graph> {
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for n in self.nodes {
            nodes.push(Node {
                id: n.id,
                kind: n.kind.parse()?,
                inputs: n.inputs,
                out: TensorSpec::new(
                    n.axes.into_iter().map(|(t, e)| Axis::new(t, e)).collect(),
                    n.elem_bytes,
                ),
                attrs: n.attrs,
                origin: n.origin,
            });
        }
        Ok(Graph { level: self.level, nodes, inputs: self.inputs, outputs: self.outputs })
    }
}

#[cfg(test)]
mod tests {
    use crate::dims::ModelDims;
    use crate::ir::{build_transformer_graph, lower, Graph};

    #[test]
    fn round_trip_is_bit_exact() {
        let dims = ModelDims::new(2, 8, 2, 4, 16, 2).with_vocab(11);
        let high = build_transformer_graph(&dims).unwrap();
        let low = lower(&high).unwrap();
        for g in [&high, &low] {
            let text = g.to_json_string();
            let back = Graph::from_json_str(&text).unwrap();
            assert_eq!(&back, g);
            assert_eq!(back.to_json_string(), text);
        }
    }
}
