//! FLOP formulas, byte-accurate memory accounting and the trainability
//! search (longest sequence that fits a per-rank budget).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ac_pass::{apply_plan, build_flow_network, capacity, min_cut, segment_boundaries, AcMode, CheckpointPlan};
use crate::autodiff::{build_joint_graph, JointGraph};
use crate::dims::ModelDims;
use crate::error::{Error, Result};
use crate::ir::{build_transformer_graph, lower, Graph, KindTag, Node, OpKind};
use crate::sp_pass::{transform_sp, SpConfig};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub attention: f64,
    pub linear_proj: f64,
    pub mlp: f64,
    pub recompute: f64,
    pub total: f64,
}

/// Per-layer `2bhs^2d` attention, `8bhsd^2` projection and `4bhs d_ffn d` MLP
/// FLOPs, times `layers`.
pub fn flops(d: &ModelDims) -> FlopsBreakdown {
    let (b, h, s, hd, ff, l) =
        (d.batch as f64, d.heads as f64, d.seq as f64, d.head_dim as f64, d.d_ffn as f64, d.layers as f64);
    let attention = 2.0 * b * h * s * s * hd * l;
    let linear_proj = 8.0 * b * h * s * hd * hd * l;
    let mlp = 4.0 * b * h * s * ff * hd * l;
    FlopsBreakdown { attention, linear_proj, mlp, recompute: 0.0, total: attention + linear_proj + mlp }
}

/// Share of FLOPs outside attention; falls off as `O(1/s)`.
pub fn fraction_non_attention(d: &ModelDims) -> f64 {
    let f = flops(d);
    (f.linear_proj + f.mlp) / f.total
}

/// Limit of `s * fraction_non_attention(s)` as `s` grows: `4d + 2 d_ffn`.
pub fn fraction_limit(d: &ModelDims) -> f64 {
    4.0 * d.head_dim as f64 + 2.0 * d.d_ffn as f64
}

/// Multiply-add FLOPs of one node; only matmuls are counted.
pub fn node_flops(g: &Graph, n: &Node) -> f64 {
    match n.kind {
        OpKind::MatMul | OpKind::BatchMatMul => {
            let k = g.spec(n.inputs[0]).axes.last().map_or(1, |a| a.extent);
            2.0 * n.out.numel() as f64 * k as f64
        }
        _ => 0.0,
    }
}

/// Recomputed matmul FLOPs over one training step's FLOPs, with backward
/// costed at twice the forward.
pub fn recompute_overhead(j: &JointGraph, plan: &CheckpointPlan) -> f64 {
    let g = &j.graph;
    let forward: f64 = j.forward_ids.iter().map(|&id| node_flops(g, g.node(id))).sum();
    if forward == 0.0 {
        return 0.0;
    }
    let recompute: f64 = plan.recompute_schedule.iter().map(|&id| node_flops(g, g.node(id))).sum();
    recompute / (3.0 * forward)
}

pub const DEFAULT_OPTIMIZER_MULTIPLIER: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub activations_peak: u64,
    #[serde(rename = "static")]
    pub static_bytes: u64,
    /// Bytes of all-to-all outputs; already part of the activation peak when
    /// live.
    pub comm_buffers: u64,
    pub total_peak: u64,
}

/// Weights, gradients and optimizer state at 4 bytes per element.
pub fn static_bytes(d: &ModelDims, optimizer_multiplier: u64) -> u64 {
    d.param_count() * (4 + 4 + optimizer_multiplier * 4)
}

/// Memory of one rank running `j` under `plan` (keep-everything if `None`).
/// The activation peak is the schedule's liveness peak, the same quantity the
/// executor measures.
pub fn memory(
    j: &JointGraph,
    plan: Option<&CheckpointPlan>,
    dims: &ModelDims,
    optimizer_multiplier: u64,
) -> Result<MemoryBreakdown> {
    let owned;
    let plan = match plan {
        Some(p) => p,
        None => {
            owned = CheckpointPlan::save_all(j);
            &owned
        }
    };
    let sched = apply_plan(j, plan)?;
    let activations_peak = sched.simulated_peak(&j.graph);
    let static_bytes = static_bytes(dims, optimizer_multiplier);
    let comm_buffers = j.graph.nodes_of(KindTag::AllToAll).map(|n| n.out.bytes()).sum();
    Ok(MemoryBreakdown { activations_peak, static_bytes, comm_buffers, total_peak: activations_peak + static_bytes })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// One device, matmuls never recomputed.
    NoSp,
    /// Sequence parallel, matmuls never recomputed.
    Sp,
    /// Sequence parallel with sequence-aware checkpointing.
    SpSac,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::NoSp, Strategy::Sp, Strategy::SpSac];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::NoSp => "no-sp",
            Strategy::Sp => "sp",
            Strategy::SpSac => "sp-sac",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainabilityQuery {
    /// `seq` is ignored.
    pub dims: ModelDims,
    /// Total bytes available per rank.
    pub budget_bytes: u64,
    pub strategy: Strategy,
    /// Ranks used by the SP strategies.
    pub world_size: usize,
    /// Checkpointing mode used by `SpSac`.
    pub sac_mode: AcMode,
    pub granularity: usize,
    pub optimizer_multiplier: u64,
    /// Keep residual-stream values between blocks, as when each block is
    /// planned on its own.
    pub segment: bool,
}

impl TrainabilityQuery {
    pub fn new(dims: ModelDims, budget_bytes: u64, strategy: Strategy) -> Self {
        TrainabilityQuery {
            dims,
            budget_bytes,
            strategy,
            world_size: 2,
            sac_mode: AcMode::default(),
            granularity: 256,
            optimizer_multiplier: DEFAULT_OPTIMIZER_MULTIPLIER,
            segment: true,
        }
    }

    pub fn ranks(&self) -> usize {
        match self.strategy {
            Strategy::NoSp => 1,
            _ => self.world_size,
        }
    }

    pub fn mode(&self) -> AcMode {
        match self.strategy {
            Strategy::SpSac => self.sac_mode,
            _ => AcMode::Conservative,
        }
    }
}

/// One strategy evaluated at one sequence length.
#[derive(Debug, Clone, Serialize)]
pub struct StrategyEval {
    pub seq: usize,
    pub world_size: usize,
    pub mode: AcMode,
    pub memory: MemoryBreakdown,
    pub cut_value: u64,
    pub recomputed_nodes: usize,
    pub overhead: f64,
}

/// Joint graph one rank executes for `dims` (with its `seq`) on `p` ranks.
pub fn rank_joint_graph(dims: &ModelDims, p: usize) -> Result<JointGraph> {
    let high = build_transformer_graph(dims)?;
    let sp = transform_sp(&high, &SpConfig::new(p))?;
    build_joint_graph(&lower(&sp.graph)?)
}

/// Min-cut plan for `j` under the query's mode, with block boundaries kept
/// when `q.segment` is set.
pub fn plan_for(q: &TrainabilityQuery, j: &JointGraph) -> Result<CheckpointPlan> {
    let mut net = build_flow_network(j, q.mode(), &capacity);
    if q.segment {
        net.wire_boundaries(&segment_boundaries(j));
    }
    min_cut(&net)
}

pub fn evaluate(q: &TrainabilityQuery, seq: usize) -> Result<StrategyEval> {
    let dims = q.dims.with_seq(seq);
    let p = q.ranks();
    let j = rank_joint_graph(&dims, p)?;
    let plan = plan_for(q, &j)?;
    let memory = memory(&j, Some(&plan), &dims, q.optimizer_multiplier)?;
    Ok(StrategyEval {
        seq,
        world_size: p,
        mode: q.mode(),
        memory,
        cut_value: plan.cut_value,
        recomputed_nodes: plan.recompute_schedule.len(),
        overhead: recompute_overhead(&j, &plan),
    })
}

const MAX_SEARCH_SEQ: usize = 1 << 24;

/// Largest multiple of `granularity * P` whose per-rank total peak fits the
/// budget, or 0 if none does. Doubles until the budget is exceeded, then
/// bisects.
pub fn max_trainable_seq(q: &TrainabilityQuery) -> Result<usize> {
    let static_b = static_bytes(&q.dims, q.optimizer_multiplier);
    if q.budget_bytes <= static_b {
        return Err(Error::Infeasible(format!(
            "budget {} bytes does not cover {} bytes of weights, gradients and optimizer state",
            q.budget_bytes, static_b
        )));
    }
    let step = q.granularity.max(1) * q.ranks();
    let fits = |k: usize| -> Result<bool> { Ok(evaluate(q, k * step)?.memory.total_peak <= q.budget_bytes) };
    if !fits(1)? {
        return Ok(0);
    }
    let mut lo = 1;
    while lo * 2 * step <= MAX_SEARCH_SEQ && fits(lo * 2)? {
        lo *= 2;
    }
    let mut hi = lo * 2;
    // invariant: fits(lo), !fits(hi) (or hi past the search cap)
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo * step)
}

#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub flops: FlopsBreakdown,
    pub memory: MemoryBreakdown,
    pub max_seq: usize,
    pub overhead: f64,
    pub cut_value: u64,
    pub strategy: Strategy,
    pub mode: AcMode,
    pub seq: usize,
    pub world_size: usize,
    pub fraction_non_attention: f64,
}

/// Report for `q` evaluated at `seq`, plus its maximum trainable length.
pub fn report(q: &TrainabilityQuery, seq: usize) -> Result<CostReport> {
    let eval = evaluate(q, seq)?;
    let dims = q.dims.with_seq(seq);
    let j = rank_joint_graph(&dims, q.ranks())?;
    let plan = plan_for(q, &j)?;
    let mut f = flops(&dims);
    // per-rank exact matmul FLOPs, summed over ranks like the closed forms
    let per_rank: f64 = plan.recompute_schedule.iter().map(|&id| node_flops(&j.graph, j.graph.node(id))).sum();
    f.recompute = per_rank * q.ranks() as f64;
    f.total += f.recompute;
    Ok(CostReport {
        flops: f,
        memory: eval.memory,
        max_seq: max_trainable_seq(q)?,
        overhead: eval.overhead,
        cut_value: plan.cut_value,
        strategy: q.strategy,
        mode: q.mode(),
        seq,
        world_size: q.ranks(),
        fraction_non_attention: fraction_non_attention(&dims),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub strategy: Strategy,
    pub mode: AcMode,
    pub world_size: usize,
    pub max_seq: usize,
    /// Recompute overhead of this strategy at the SP-only maximum length.
    pub overhead_at_sp_max: f64,
    /// `max_seq` relative to the SP-only row.
    pub ratio: f64,
}

/// Max-token comparison across strategies at one budget.
pub fn ablation(base: &TrainabilityQuery) -> Result<Vec<AblationRow>> {
    let sp_q = TrainabilityQuery { strategy: Strategy::Sp, ..*base };
    let sp_max = max_trainable_seq(&sp_q)?;
    Strategy::ALL
        .into_iter()
        .map(|strategy| {
            let q = TrainabilityQuery { strategy, ..*base };
            let max_seq = if strategy == Strategy::Sp { sp_max } else { max_trainable_seq(&q)? };
            let at = sp_max.max(q.granularity * q.ranks());
            let at = at - at % (q.granularity * q.ranks());
            Ok(AblationRow {
                strategy,
                mode: q.mode(),
                world_size: q.ranks(),
                max_seq,
                overhead_at_sp_max: evaluate(&q, at.max(q.granularity * q.ranks()))?.overhead,
                ratio: if sp_max == 0 { 0.0 } else { max_seq as f64 / sp_max as f64 },
            })
        })
        .collect()
}
