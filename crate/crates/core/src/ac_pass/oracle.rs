use std::collections::BTreeMap;

use super::AcMode;
use crate::autodiff::JointGraph;
use crate::ir::{Node, NodeId};
use crate::parallel::{map_range, Parallelism};

/// Minimum total capacity over all feasible saved sets, by enumeration.
///
/// A forward value is out of the backward pass's reach if it is saved, or if
/// it hangs off no source wire and all its inputs are out of reach. A set is
/// feasible when every forward value read by a backward node is out of reach.
/// Returns `None` when no subset is feasible. Only usable for small graphs.
pub fn brute_force_cut(
    j: &JointGraph,
    mode: AcMode,
    cap: &dyn Fn(&Node) -> u64,
    par: Parallelism,
) -> Option<u64> {
    let fwd: Vec<&Node> = j.graph.nodes.iter().filter(|n| j.is_forward(n.id)).collect();
    assert!(fwd.len() <= 24, "brute force over {} nodes", fwd.len());
    let pos: BTreeMap<NodeId, usize> = fwd.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
    let wired: Vec<bool> = fwd.iter().map(|n| n.kind.is_placeholder() || mode.guards(n)).collect();
    let preds: Vec<Vec<usize>> = fwd.iter().map(|n| n.inputs.iter().map(|i| pos[i]).collect()).collect();
    let caps: Vec<u64> = fwd.iter().map(|n| cap(n)).collect();
    let needed: Vec<usize> = j.saved_candidates.iter().map(|c| pos[c]).collect();

    let costs = map_range(1usize << fwd.len(), par, |mask| {
        let mut safe = vec![false; fwd.len()];
        for i in 0..fwd.len() {
            safe[i] = mask >> i & 1 == 1 || (!wired[i] && preds[i].iter().all(|&p| safe[p]));
        }
        needed.iter().all(|&c| safe[c]).then(|| (0..fwd.len()).filter(|i| mask >> i & 1 == 1).map(|i| caps[i]).sum())
    });
    costs.into_iter().flatten().min()
}
