use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::ir::{Graph, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Compute,
    Recompute,
    FreeAfterLastUse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub node: NodeId,
    pub action: Action,
}

/// Ordered compute/recompute/free steps over one graph. Placeholders are bound
/// from outside and never appear here.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExecutionSchedule {
    pub steps: Vec<Step>,
    pub retained: BTreeSet<NodeId>,
    /// Values written straight into preallocated static buffers (parameter
    /// gradients). They are never freed and never count as live bytes.
    #[serde(default)]
    pub uncounted: BTreeSet<NodeId>,
}

impl ExecutionSchedule {
    /// Every computed node once, in order, nothing freed.
    pub fn eager(g: &Graph) -> Self {
        let steps = g
            .nodes
            .iter()
            .filter(|n| !n.kind.is_placeholder())
            .map(|n| Step { node: n.id, action: Action::Compute })
            .collect();
        ExecutionSchedule { steps, retained: g.nodes.iter().map(|n| n.id).collect(), uncounted: BTreeSet::new() }
    }

    pub fn count(&self, action: Action) -> usize {
        self.steps.iter().filter(|s| s.action == action).count()
    }

    /// Peak live activation bytes predicted from the schedule alone: a value is
    /// live from its (re)compute step until its free step.
    pub fn simulated_peak(&self, g: &Graph) -> u64 {
        let mut live = 0u64;
        let mut peak = 0u64;
        for step in &self.steps {
            if self.uncounted.contains(&step.node) {
                continue;
            }
            let bytes = g.spec(step.node).bytes();
            match step.action {
                Action::Compute | Action::Recompute => {
                    live += bytes;
                    peak = peak.max(live);
                }
                Action::FreeAfterLastUse => live -= bytes,
            }
        }
        peak
    }
}
