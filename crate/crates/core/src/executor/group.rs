use std::io::Write;

use serde::{Deserialize, Serialize};

use super::ops::strides;
use super::{Bindings, Precision, RankState, Status, TensorValue};
use crate::error::{Error, Result};
use crate::ir::{AxisTag, Direction, Graph, NodeId, OpKind, TensorSpec};
use crate::parallel::{for_each_mut, Parallelism};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectiveRecord {
    pub step: usize,
    pub op: String,
    /// Per-rank traffic, `2 (P-1)/P * local bytes`.
    pub bytes: f64,
    pub ranks: usize,
}

/// A set of simulated ranks sharing one rendezvous point for collectives.
#[derive(Debug, Clone)]
pub struct DeviceGroup {
    pub world_size: usize,
    pub parallelism: Parallelism,
    pub collective_log: Vec<CollectiveRecord>,
}

/// Result of running one rank to completion.
#[derive(Debug, Clone)]
pub struct RankOutput {
    pub outputs: Vec<TensorValue>,
    pub peak_bytes: u64,
}

/// What one rank submits at a rendezvous; all ranks must agree.
#[derive(Debug, Clone, PartialEq)]
struct CollectiveCall {
    node: NodeId,
    direction: Direction,
    spec: TensorSpec,
}

impl DeviceGroup {
    pub fn new(world_size: usize) -> Self {
        DeviceGroup { world_size, parallelism: Parallelism::default(), collective_log: Vec::new() }
    }

    pub fn with_parallelism(mut self, p: Parallelism) -> Self {
        self.parallelism = p;
        self
    }

    /// Exchanges shards between ranks.
    ///
    /// `SeqToHead`: rank `r` receives head block `r` of every rank's sequence
    /// shard, concatenated in rank order along Sequence. `HeadToSeq` is the
    /// exact inverse.
    pub fn all_to_all(&mut self, direction: Direction, shards: Vec<TensorValue>) -> Result<Vec<TensorValue>> {
        let p = self.world_size;
        if shards.len() != p {
            return Err(Error::CollectiveMismatch(format!("expected {p} shards, got {}", shards.len())));
        }
        if let Some(r) = shards.iter().position(|s| s.spec != shards[0].spec) {
            return Err(Error::CollectiveMismatch(format!(
                "rank {r} submitted {} but rank 0 submitted {}",
                shards[r].spec, shards[0].spec
            )));
        }
        let out = all_to_all_shards(direction, &shards)?;
        let local = shards[0].spec.bytes() as f64;
        self.collective_log.push(CollectiveRecord {
            step: self.collective_log.len(),
            op: format!("all_to_all.{}", direction.name()),
            bytes: 2.0 * (p as f64 - 1.0) / p as f64 * local,
            ranks: p,
        });
        Ok(out)
    }

    /// Runs `graph` on every rank under that rank's schedule, stepping ranks
    /// independently between collectives and rendezvousing at each one.
    pub fn run(
        &mut self,
        graph: &Graph,
        schedules: &[super::ExecutionSchedule],
        bindings: &[Bindings],
        precision: Precision,
    ) -> Result<Vec<RankOutput>> {
        let p = self.world_size;
        if schedules.len() != p || bindings.len() != p {
            return Err(Error::CollectiveMismatch(format!(
                "group of {p} ranks given {} schedules and {} bindings",
                schedules.len(),
                bindings.len()
            )));
        }
        let mut ranks: Vec<RankState<'_>> = (0..p)
            .map(|r| RankState::new(r, graph, &schedules[r], &bindings[r], precision))
            .collect();

        loop {
            for_each_mut(&mut ranks, self.parallelism, |_, rank| rank.advance());
            for rank in &mut ranks {
                if let Status::Failed(_) = rank.status {
                    let Status::Failed(e) = std::mem::replace(&mut rank.status, Status::Done) else { unreachable!() };
                    return Err(e);
                }
            }
            let blocked: Vec<Option<NodeId>> = ranks
                .iter()
                .map(|r| match r.status {
                    Status::Blocked(node) => Some(node),
                    _ => None,
                })
                .collect();
            if blocked.iter().all(Option::is_none) {
                break;
            }
            if blocked.iter().any(Option::is_none) {
                let detail = blocked
                    .iter()
                    .enumerate()
                    .map(|(r, b)| match b {
                        Some(n) => format!("rank {r} waits at node {n}"),
                        None => format!("rank {r} finished"),
                    })
                    .collect::<Vec<_>>()
                    .join(", ");
                return Err(Error::Deadlock(detail));
            }

            let mut calls = Vec::with_capacity(p);
            let mut shards = Vec::with_capacity(p);
            for rank in &ranks {
                let (call, shard) = rank.collective_call()?;
                calls.push(call);
                shards.push(shard);
            }
            if calls.iter().any(|c| *c != calls[0]) {
                let detail = calls
                    .iter()
                    .enumerate()
                    .map(|(r, c)| format!("rank {r}: node {} {} {}", c.node, c.direction.name(), c.spec))
                    .collect::<Vec<_>>()
                    .join(", ");
                return Err(Error::CollectiveMismatch(detail));
            }
            let outs = self.all_to_all(calls[0].direction, shards)?;
            for (rank, value) in ranks.iter_mut().zip(outs) {
                rank.finish_collective(value)?;
            }
        }
        ranks.into_iter().map(RankState::finish).collect()
    }

    pub fn write_log_jsonl(&self, mut w: impl Write) -> Result<()> {
        for rec in &self.collective_log {
            serde_json::to_writer(&mut w, rec)?;
            writeln!(w)?;
        }
        Ok(())
    }
}

impl RankState<'_> {
    fn collective_call(&self) -> Result<(CollectiveCall, TensorValue)> {
        let Status::Blocked(node_id) = self.status else { unreachable!() };
        let node = self.graph.node(node_id);
        let OpKind::AllToAll(direction) = node.kind else { unreachable!() };
        let input = self.read(node_id, node.inputs[0])?.clone();
        Ok((CollectiveCall { node: node_id, direction, spec: input.spec.clone() }, input))
    }
}

fn all_to_all_shards(direction: Direction, shards: &[TensorValue]) -> Result<Vec<TensorValue>> {
    let p = shards.len();
    let spec = &shards[0].spec;
    let (Some(si), Some(hi)) = (spec.find(AxisTag::Sequence), spec.find(AxisTag::Heads)) else {
        return Err(Error::CollectiveMismatch(format!("all-to-all input {spec} lacks Sequence/Heads axes")));
    };
    let (s_in, h_in) = (spec.axes[si].extent, spec.axes[hi].extent);
    let out_spec = match direction {
        Direction::SeqToHead => {
            if h_in % p != 0 {
                return Err(Error::Indivisible { what: "head count", value: h_in, world: p });
            }
            spec.with_extent(AxisTag::Sequence, s_in * p).with_extent(AxisTag::Heads, h_in / p)
        }
        Direction::HeadToSeq => {
            if s_in % p != 0 {
                return Err(Error::Indivisible { what: "sequence length", value: s_in, world: p });
            }
            spec.with_extent(AxisTag::Sequence, s_in / p).with_extent(AxisTag::Heads, h_in * p)
        }
    };
    let out_ext = out_spec.extents();
    let in_strides = strides(&spec.extents());
    let numel = out_spec.numel();
    let rank = out_ext.len();

    let mut outs = Vec::with_capacity(p);
    for r in 0..p {
        let mut data = Vec::with_capacity(numel);
        let mut idx = vec![0usize; rank];
        for _ in 0..numel {
            // Map the output coordinate to (source rank, source coordinate).
            let (src, seq_i, head_i) = match direction {
                Direction::SeqToHead => {
                    let block = s_in;
                    (idx[si] / block, idx[si] % block, r * (h_in / p) + idx[hi])
                }
                Direction::HeadToSeq => {
                    let block = h_in;
                    (idx[hi] / block, r * (s_in / p) + idx[si], idx[hi] % block)
                }
            };
            let mut off = 0;
            for d in 0..rank {
                let i = if d == si {
                    seq_i
                } else if d == hi {
                    head_i
                } else {
                    idx[d]
                };
                off += i * in_strides[d];
            }
            data.push(shards[src].data[off]);
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out_ext[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        outs.push(TensorValue { spec: out_spec.clone(), data });
    }
    Ok(outs)
}
