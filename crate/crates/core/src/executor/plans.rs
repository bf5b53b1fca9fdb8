use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{execute, remap_bindings, Bindings, DeviceGroup, ExecutionSchedule, Precision, RankOutput, TensorValue};
use crate::autodiff::{build_joint_graph, JointGraph};
use crate::dims::ModelDims;
use crate::error::{Error, Result};
use crate::ir::{build_transformer_graph, lower, AxisTag, Graph, Level, OpKind};
use crate::parallel::Parallelism;
use crate::sp_pass::{transform_sp, SpConfig};

/// Splits full-sequence bindings into per-rank bindings for a transformed
/// graph. Inputs whose Sequence extent is `P` times the graph's get block `r`;
/// everything else is replicated.
pub fn shard_bindings(g: &Graph, p: usize, full: &Bindings) -> Result<Vec<Bindings>> {
    let mut out = vec![Bindings::new(); p];
    for (&id, value) in full {
        let node = g.node(id);
        let want = node.out.extent_of(AxisTag::Sequence);
        let have = value.spec.extent_of(AxisTag::Sequence);
        match (node.kind, want, have) {
            (OpKind::Input, Some(w), Some(h)) if h == w * p && p > 1 => {
                for (r, part) in value.split(AxisTag::Sequence, p).into_iter().enumerate() {
                    out[r].insert(id, part);
                }
            }
            _ => {
                if value.spec.extents() != node.out.extents() {
                    return Err(Error::RuntimeShape {
                        node: id,
                        detail: format!("binding {} does not fit {}", value.spec, node.out),
                    });
                }
                for b in &mut out {
                    b.insert(id, value.clone());
                }
            }
        }
    }
    Ok(out)
}

/// Runs a transformed graph on `group.world_size` ranks. `schedule` defaults
/// to eager evaluation; the same schedule is used by every rank.
pub fn execute_sp(
    g: &Graph,
    group: &mut DeviceGroup,
    full: &Bindings,
    schedule: Option<&ExecutionSchedule>,
    precision: Precision,
) -> Result<Vec<RankOutput>> {
    let p = group.world_size;
    let bindings = shard_bindings(g, p, full)?;
    let sched = schedule.cloned().unwrap_or_else(|| ExecutionSchedule::eager(g));
    let schedules = vec![sched; p];
    group.run(g, &schedules, &bindings, precision)
}

/// Reassembles rank outputs: sequence-carrying values are concatenated in
/// rank order, everything else (loss, parameter gradients) is summed.
pub fn gather_outputs(ranks: &[RankOutput]) -> Vec<TensorValue> {
    let n = ranks[0].outputs.len();
    (0..n)
        .map(|i| {
            let parts: Vec<TensorValue> = ranks.iter().map(|r| r.outputs[i].clone()).collect();
            if ranks.len() > 1 && parts[0].spec.find(AxisTag::Sequence).is_some() {
                TensorValue::concat(&parts, AxisTag::Sequence)
            } else {
                let mut acc = parts[0].clone();
                for p in &parts[1..] {
                    for (a, b) in acc.data.iter_mut().zip(&p.data) {
                        *a += b;
                    }
                }
                acc
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct PlanRun {
    pub outputs: Vec<TensorValue>,
    /// Leaf gradients in `j.leaf_grads` order.
    pub grads: Vec<TensorValue>,
    pub peak_bytes: u64,
}

/// Executes a joint graph under `sched`, freeing values as the schedule says
/// and measuring peak live activation bytes.
pub fn execute_with_plan(
    j: &JointGraph,
    sched: &ExecutionSchedule,
    bindings: &Bindings,
    precision: Precision,
) -> Result<PlanRun> {
    let mut group = DeviceGroup::new(1);
    let mut out = group.run(&j.graph, std::slice::from_ref(sched), std::slice::from_ref(bindings), precision)?;
    let RankOutput { mut outputs, peak_bytes } = out.pop().unwrap();
    let grads = outputs.split_off(j.num_forward_outputs());
    Ok(PlanRun { outputs, grads, peak_bytes })
}

#[derive(Debug, Clone, Serialize)]
pub struct FiniteDiffReport {
    pub coordinates: usize,
    /// Normwise relative error of the analytic gradient over the sampled
    /// coordinates.
    pub max_rel_err: f64,
}

/// Compares analytic gradients with central differences on up to
/// `max_coords` parameter coordinates sampled with `seed`. A high graph is
/// lowered first.
pub fn finite_diff_check(
    g: &Graph,
    bindings: &Bindings,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<FiniteDiffReport> {
    let low = if g.level == Level::High { lower(g)? } else { g.clone() };
    let bindings = remap_bindings(g, &low, bindings);
    let j = build_joint_graph(&low)?;
    let analytic = execute(&j.graph, &bindings, Precision::F64)?;
    let loss_pos = low.outputs.iter().position(|&o| o == j.loss).unwrap();
    let nf = j.num_forward_outputs();

    let params: Vec<usize> =
        (0..j.leaf_grads.len()).filter(|&k| low.node(j.leaf_grads[k].0).kind == OpKind::Parameter).collect();
    let total: usize = params.iter().map(|&k| bindings[&j.leaf_grads[k].0].data.len()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, total, max_coords.min(total)).into_vec();
    picks.sort_unstable();

    let mut a = Vec::with_capacity(picks.len());
    let mut numeric = Vec::with_capacity(picks.len());
    for flat in picks {
        let (mut k, mut off) = (0, flat);
        while off >= bindings[&j.leaf_grads[params[k]].0].data.len() {
            off -= bindings[&j.leaf_grads[params[k]].0].data.len();
            k += 1;
        }
        let (leaf, _) = j.leaf_grads[params[k]];
        let loss_at = |delta: f64| -> Result<f64> {
            let mut b = bindings.clone();
            b.get_mut(&leaf).unwrap().data[off] += delta;
            Ok(execute(&low, &b, Precision::F64)?[loss_pos].data[0])
        };
        numeric.push((loss_at(eps)? - loss_at(-eps)?) / (2.0 * eps));
        a.push(analytic[nf + params[k]].data[off]);
    }
    Ok(FiniteDiffReport { coordinates: a.len(), max_rel_err: super::rel_err(&a, &numeric) })
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    pub world_size: usize,
    pub forward_rel_err: f64,
    pub grad_rel_err: f64,
    pub collectives: usize,
    pub peak_bytes_per_rank: u64,
}

impl EquivalenceReport {
    pub fn max_rel_err(&self) -> f64 {
        self.forward_rel_err.max(self.grad_rel_err)
    }
}

/// Runs forward and backward of the model once on a single device and once
/// sequence-parallel on `p` simulated ranks, and compares logits, loss and
/// every parameter gradient.
pub fn sp_equivalence(
    dims: &ModelDims,
    p: usize,
    seed: u64,
    precision: Precision,
    parallelism: Parallelism,
) -> Result<EquivalenceReport> {
    let high = build_transformer_graph(dims)?;
    let sp = transform_sp(&high, &SpConfig::new(p))?;
    check_equivalence(&high, &sp.graph, p, seed, precision, parallelism)
}

/// Equivalence of an original graph and its transformed form run on `p`
/// ranks, with random inputs drawn from `seed`. Graph inputs are matched by
/// position.
pub fn check_equivalence(
    original: &Graph,
    transformed: &Graph,
    p: usize,
    seed: u64,
    precision: Precision,
    parallelism: Parallelism,
) -> Result<EquivalenceReport> {
    let bindings = super::random_bindings(original, seed);
    let low = |g: &Graph| if g.level == Level::High { lower(g) } else { Ok(g.clone()) };

    let base = build_joint_graph(&low(original)?)?;
    let expect = execute(&base.graph, &remap_bindings(original, &base.graph, &bindings), precision)?;

    let joint = build_joint_graph(&low(transformed)?)?;
    let mut group = DeviceGroup::new(p).with_parallelism(parallelism);
    let full = remap_bindings(original, &joint.graph, &bindings);
    let ranks = execute_sp(&joint.graph, &mut group, &full, None, precision)?;
    let got = gather_outputs(&ranks);
    if got.len() != expect.len() {
        return Err(Error::Missing {
            node: joint.loss,
            detail: format!("transformed graph yields {} outputs, original {}", got.len(), expect.len()),
        });
    }

    let nf = joint.num_forward_outputs();
    let err = |range: std::ops::Range<usize>| {
        range.map(|i| got[i].rel_err(&expect[i])).fold(0.0, f64::max)
    };
    Ok(EquivalenceReport {
        world_size: p,
        forward_rel_err: err(0..nf),
        grad_rel_err: err(nf..got.len()),
        collectives: group.collective_log.len(),
        peak_bytes_per_rank: ranks.iter().map(|r| r.peak_bytes).max().unwrap_or(0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::random_bindings;
    use crate::ir::{AxisTag::*, TensorSpec};

    #[test]
    fn sp_matches_single_device() {
        for (p, dims) in [(2, ModelDims::new(2, 4, 2, 3, 5, 2)), (4, ModelDims::new(1, 8, 4, 2, 6, 1))] {
            let r = sp_equivalence(&dims.with_vocab(7), p, 5, Precision::F64, Parallelism::Sequential).unwrap();
            assert!(r.max_rel_err() <= 1e-12, "{r:?}");
            assert_eq!(r.collectives, 4 * dims.layers);
        }
    }

    #[test]
    fn one_rank_group_matches_execute() {
        let g = build_transformer_graph(&ModelDims::new(1, 3, 1, 2, 4, 1)).unwrap();
        let b = random_bindings(&g, 2);
        let mut group = DeviceGroup::new(1);
        let ranks = execute_sp(&g, &mut group, &b, None, Precision::F64).unwrap();
        assert_eq!(ranks[0].outputs, execute(&g, &b, Precision::F64).unwrap());
    }

    #[test]
    fn finite_differences_on_linear_model() {
        let mut g = Graph::new(Level::Low);
        let x = g.push(OpKind::Input, vec![], TensorSpec::of(&[(Sequence, 3), (Model, 4)]));
        let w = g.push(OpKind::Parameter, vec![], TensorSpec::of(&[(Model, 4), (FFN, 5)]));
        let y = g.push(OpKind::MatMul, vec![x, w], TensorSpec::of(&[(Sequence, 3), (FFN, 5)]));
        let sq = g.push(OpKind::Elementwise(crate::ir::EwOp::Mul), vec![y, y], TensorSpec::of(&[(Sequence, 3), (FFN, 5)]));
        let l = g.push(OpKind::ReduceSum, vec![sq], TensorSpec::scalar(4));
        g.inputs = vec![x, w];
        g.outputs = vec![l];
        let r = finite_diff_check(&g, &random_bindings(&g, 1), 1e-5, 64, 0).unwrap();
        assert_eq!(r.coordinates, 20);
        assert!(r.max_rel_err <= 1e-8, "{r:?}");
    }

    #[test]
    fn zero_parameters_zero_gradient() {
        let mut g = Graph::new(Level::Low);
        let w = g.push(OpKind::Parameter, vec![], TensorSpec::of(&[(Model, 4)]));
        let sq = g.push(OpKind::Elementwise(crate::ir::EwOp::Mul), vec![w, w], TensorSpec::of(&[(Model, 4)]));
        let l = g.push(OpKind::ReduceSum, vec![sq], TensorSpec::scalar(4));
        g.inputs = vec![w];
        g.outputs = vec![l];
        let mut b = Bindings::new();
        b.insert(w, TensorValue::zeros(g.spec(w).clone()));
        let r = finite_diff_check(&g, &b, 1e-5, 64, 0).unwrap();
        assert_eq!(r.max_rel_err, 0.0);
    }

    #[test]
    fn finite_differences_on_transformer() {
        let g = build_transformer_graph(&ModelDims::new(1, 4, 2, 3, 8, 1).with_vocab(6)).unwrap();
        let r = finite_diff_check(&g, &random_bindings(&g, 9), 1e-5, 64, 3).unwrap();
        assert!(r.max_rel_err <= 1e-6, "{r:?}");
    }
}
