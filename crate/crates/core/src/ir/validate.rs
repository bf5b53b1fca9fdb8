use std::collections::HashMap;
use std::fmt;

use super::{expected_out, Graph, Level, NodeId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DiagnosticKind {
    DuplicateId,
    ForwardReference,
    DanglingReference,
    ShapeMismatch,
    WrongLevel,
    DuplicateAxisTag,
    ZeroExtent,
    UnlistedInput,
    BadGraphInput,
    MissingOutput,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub node: Option<NodeId>,
    pub kind: DiagnosticKind,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Some(id) => write!(f, "node {id}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

/// Returns every invariant violation; an empty list means the graph is valid.
pub fn validate(g: &Graph) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let mut push = |node: Option<NodeId>, kind: DiagnosticKind, message: String| {
        diags.push(Diagnostic { node, kind, message })
    };

    let mut position: HashMap<NodeId, usize> = HashMap::new();
    for (i, n) in g.nodes.iter().enumerate() {
        if position.insert(n.id, i).is_some() {
            push(Some(n.id), DiagnosticKind::DuplicateId, "duplicate node id".into());
        }
    }
    let all_positions: HashMap<NodeId, usize> = position.clone();

    for (i, n) in g.nodes.iter().enumerate() {
        let level_ok = match g.level {
            Level::High => n.kind.allowed_in_high(),
            Level::Low => n.kind.allowed_in_low(),
        };
        if !level_ok {
            push(Some(n.id), DiagnosticKind::WrongLevel, format!("{} not allowed at this level", n.kind));
        }
        if n.out.axes.iter().any(|a| a.extent == 0) || n.out.elem_bytes == 0 {
            push(Some(n.id), DiagnosticKind::ZeroExtent, "zero extent or element width".into());
        }
        if !n.out.has_unique_tags() {
            push(Some(n.id), DiagnosticKind::DuplicateAxisTag, format!("repeated axis tag in {}", n.out));
        }

        let mut ok_inputs = true;
        for &inp in &n.inputs {
            match all_positions.get(&inp) {
                None => {
                    ok_inputs = false;
                    push(Some(n.id), DiagnosticKind::DanglingReference, format!("dangling input id {inp}"));
                }
                Some(&p) if p >= i => {
                    ok_inputs = false;
                    push(Some(n.id), DiagnosticKind::ForwardReference, format!("forward reference to node {inp}"));
                }
                _ => {}
            }
        }
        if !ok_inputs {
            continue;
        }
        let specs: Vec<_> = n.inputs.iter().map(|id| &g.nodes[all_positions[id]].out).collect();
        match expected_out(n, &specs) {
            Err(msg) => push(Some(n.id), DiagnosticKind::ShapeMismatch, format!("shape mismatch: {msg}")),
            Ok(Some(exp)) if exp != n.out => push(
                Some(n.id),
                DiagnosticKind::ShapeMismatch,
                format!("shape mismatch: declared {} but rule gives {}", n.out, exp),
            ),
            Ok(_) => {}
        }
        if n.kind.is_placeholder() && !g.inputs.contains(&n.id) {
            push(Some(n.id), DiagnosticKind::UnlistedInput, "placeholder missing from graph inputs".into());
        }
    }

    for &id in &g.inputs {
        match all_positions.get(&id) {
            Some(&p) if g.nodes[p].kind.is_placeholder() => {}
            Some(_) => push(Some(id), DiagnosticKind::BadGraphInput, "graph input is not a placeholder".into()),
            None => push(None, DiagnosticKind::BadGraphInput, format!("graph input {id} does not exist")),
        }
    }
    for &id in &g.outputs {
        if !all_positions.contains_key(&id) {
            push(None, DiagnosticKind::MissingOutput, format!("output {id} does not exist"));
        }
    }
    diags
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{AxisTag::*, EwOp, OpKind, TensorSpec};

    fn tiny() -> Graph {
        let mut g = Graph::new(Level::High);
        let x = g.push(OpKind::Parameter, vec![], TensorSpec::of(&[(Sequence, 3), (Model, 4)]));
        let y = g.push(OpKind::Elementwise(EwOp::Silu), vec![x], TensorSpec::of(&[(Sequence, 3), (Model, 4)]));
        g.inputs = vec![x];
        g.outputs = vec![y];
        g
    }

    #[test]
    fn well_formed_is_ok() {
        assert!(validate(&tiny()).is_empty());
    }

    #[test]
    fn forward_reference_detected() {
        let mut g = tiny();
        g.nodes[1].inputs = vec![1];
        let d = validate(&g);
        assert!(d.iter().any(|d| d.kind == DiagnosticKind::ForwardReference));
        assert!(d[0].message.contains("forward reference"));
    }

    #[test]
    fn linear_width_mismatch_detected() {
        let mut g = Graph::new(Level::High);
        let x = g.push(OpKind::Input, vec![], TensorSpec::of(&[(Sequence, 3), (Model, 4)]));
        let w = g.push(OpKind::Parameter, vec![], TensorSpec::of(&[(FFN, 8), (Free, 5)]));
        let y = g.push(OpKind::Linear, vec![x, w], TensorSpec::of(&[(Sequence, 3), (FFN, 8)]));
        g.inputs = vec![x, w];
        g.outputs = vec![y];
        let d = validate(&g);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].kind, DiagnosticKind::ShapeMismatch);
        assert!(d[0].message.contains("shape mismatch"));
    }

    #[test]
    fn dangling_and_missing_output() {
        let mut g = tiny();
        g.nodes[1].inputs = vec![42];
        g.outputs.push(99);
        let kinds: Vec<_> = validate(&g).into_iter().map(|d| d.kind).collect();
        assert!(kinds.contains(&DiagnosticKind::DanglingReference));
        assert!(kinds.contains(&DiagnosticKind::MissingOutput));
    }

    #[test]
    fn low_ops_rejected_in_high() {
        let mut g = tiny();
        g.nodes[1].kind = OpKind::Broadcast;
        assert!(validate(&g).iter().any(|d| d.kind == DiagnosticKind::WrongLevel));
    }
}
