//! Reference interpreter for high, low and joint graphs, on one device or on a
//! group of simulated ranks. This is the correctness oracle for every pass.

mod group;
pub mod ops;
mod schedule;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use group::{CollectiveRecord, DeviceGroup, RankOutput};
pub use schedule::{Action, ExecutionSchedule, Step};

use crate::error::{Error, Result};
use crate::ir::{AxisTag, Graph, KindTag, NodeId, OpKind, TensorSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    /// Every stored value is rounded to single precision.
    F32,
}

impl Precision {
    /// Equivalence tolerance used by the oracle checks.
    pub fn tolerance(self) -> f64 {
        match self {
            Precision::F64 => 1e-12,
            Precision::F32 => 1e-4,
        }
    }

    fn round(self, data: &mut [f64]) {
        if self == Precision::F32 {
            for v in data {
                *v = *v as f32 as f64;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorValue {
    pub spec: TensorSpec,
    /// Row-major over `spec.axes`.
    pub data: Vec<f64>,
}

impl TensorValue {
    pub fn zeros(spec: TensorSpec) -> Self {
        let n = spec.numel();
        TensorValue { spec, data: vec![0.0; n] }
    }

    pub fn from_fn(spec: TensorSpec, f: impl FnMut(usize) -> f64) -> Self {
        let data = (0..spec.numel()).map(f).collect();
        TensorValue { spec, data }
    }

    /// Normwise relative error `max|a - b| / max|b|` against `reference`.
    pub fn rel_err(&self, reference: &TensorValue) -> f64 {
        rel_err(&self.data, &reference.data)
    }

    /// Splits along the tagged axis into `parts` contiguous blocks.
    pub fn split(&self, tag: AxisTag, parts: usize) -> Vec<TensorValue> {
        let axis = self.spec.find(tag).expect("axis present");
        let e = self.spec.extents();
        let len = e[axis] / parts;
        let inner: usize = e[axis + 1..].iter().product();
        let outer: usize = e[..axis].iter().product();
        (0..parts)
            .map(|p| {
                let mut data = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = (o * e[axis] + p * len) * inner;
                    data.extend_from_slice(&self.data[base..base + len * inner]);
                }
                TensorValue { spec: self.spec.with_extent(tag, len), data }
            })
            .collect()
    }

    /// Concatenates blocks along the tagged axis.
    pub fn concat(parts: &[TensorValue], tag: AxisTag) -> TensorValue {
        let first = &parts[0];
        let axis = first.spec.find(tag).expect("axis present");
        let e = first.spec.extents();
        let inner: usize = e[axis + 1..].iter().product();
        let outer: usize = e[..axis].iter().product();
        let block = e[axis] * inner;
        let mut data = Vec::with_capacity(first.data.len() * parts.len());
        for o in 0..outer {
            for p in parts {
                data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        TensorValue { spec: first.spec.with_extent(tag, e[axis] * parts.len()), data }
    }

    /// Writes little-endian f64 data to `path` and the shape and dtype to `path.json`.
    pub fn dump(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for v in &self.data {
            f.write_all(&v.to_le_bytes())?;
        }
        let sidecar = serde_json::json!({
            "axes": self.spec.axes.iter().map(|a| (a.tag, a.extent)).collect::<Vec<_>>(),
            "elem_bytes": self.spec.elem_bytes,
        });
        let mut name = path.as_os_str().to_owned();
        name.push(".json");
        std::fs::write(name, serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut name = path.as_os_str().to_owned();
        name.push(".json");
        let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(name)?)?;
        let axes: Vec<(AxisTag, usize)> = serde_json::from_value(side["axes"].clone())?;
        let elem_bytes = side["elem_bytes"].as_u64().ok_or_else(|| Error::Parse("elem_bytes".into()))? as usize;
        let mut spec = TensorSpec::of(&axes);
        spec.elem_bytes = elem_bytes;
        let bytes = std::fs::read(path)?;
        if bytes.len() != spec.numel() * 8 {
            return Err(Error::Parse(format!("{} bytes for {}", bytes.len(), spec)));
        }
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(TensorValue { spec, data })
    }
}

pub fn rel_err(a: &[f64], reference: &[f64]) -> f64 {
    if a.len() != reference.len() {
        return f64::INFINITY;
    }
    let num = a.iter().zip(reference).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = reference.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if num == 0.0 {
        0.0
    } else if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

/// Values for a graph's placeholders, keyed by node id.
pub type Bindings = BTreeMap<NodeId, TensorValue>;

/// Random bindings for every placeholder: token ids uniform over the
/// embedding vocabulary, parameters uniform in `[-0.5, 0.5)`.
pub fn random_bindings(g: &Graph, seed: u64) -> Bindings {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let token_vocab: BTreeMap<NodeId, usize> = g
        .nodes_of(KindTag::Embedding)
        .map(|n| (n.inputs[0], g.spec(n.inputs[1]).axes[0].extent))
        .collect();
    let mut out = Bindings::new();
    for &id in &g.inputs {
        let n = g.node(id);
        let value = match token_vocab.get(&id) {
            Some(&vocab) => TensorValue::from_fn(n.out.clone(), |_| rng.gen_range(0..vocab) as f64),
            None => TensorValue::from_fn(n.out.clone(), |_| rng.gen_range(-0.5..0.5)),
        };
        out.insert(id, value);
    }
    out
}

/// Re-keys bindings made for `from` onto `to`, matching graph inputs by position.
/// Lowering and the passes preserve input order, so one set of random values
/// can drive every form of the same model.
pub fn remap_bindings(from: &Graph, to: &Graph, b: &Bindings) -> Bindings {
    from.inputs
        .iter()
        .zip(&to.inputs)
        .filter_map(|(f, t)| b.get(f).map(|v| (*t, v.clone())))
        .collect()
}

pub(crate) enum Status {
    Running,
    Blocked(NodeId),
    Done,
    Failed(Error),
}

/// One rank's private store and cursor.
pub(crate) struct RankState<'a> {
    rank: usize,
    graph: &'a Graph,
    schedule: &'a ExecutionSchedule,
    bindings: Bindings,
    store: Vec<Option<TensorValue>>,
    computed: Vec<bool>,
    live: u64,
    peak: u64,
    cursor: usize,
    precision: Precision,
    pub(crate) status: Status,
}

impl<'a> RankState<'a> {
    pub(crate) fn new(
        rank: usize,
        graph: &'a Graph,
        schedule: &'a ExecutionSchedule,
        bindings: &Bindings,
        precision: Precision,
    ) -> Self {
        let mut bindings = bindings.clone();
        for v in bindings.values_mut() {
            precision.round(&mut v.data);
        }
        RankState {
            rank,
            graph,
            schedule,
            bindings,
            store: vec![None; graph.nodes.len()],
            computed: vec![false; graph.nodes.len()],
            live: 0,
            peak: 0,
            cursor: 0,
            precision,
            status: Status::Running,
        }
    }

    fn pos(&self, id: NodeId) -> Result<usize> {
        self.graph.index_of(id).ok_or(Error::UnknownNode(id))
    }

    pub(crate) fn read(&self, consumer: NodeId, id: NodeId) -> Result<&TensorValue> {
        let pos = self.pos(id)?;
        if self.graph.nodes[pos].kind.is_placeholder() {
            return self.bindings.get(&id).ok_or_else(|| Error::Missing {
                node: id,
                detail: "no binding supplied for placeholder".into(),
            });
        }
        match &self.store[pos] {
            Some(v) => Ok(v),
            None if self.computed[pos] => Err(Error::UseAfterFree { consumer, value: id }),
            None => Err(Error::Missing { node: id, detail: format!("read by {consumer} before compute") }),
        }
    }

    fn insert(&mut self, id: NodeId, mut value: TensorValue) -> Result<()> {
        let pos = self.pos(id)?;
        self.precision.round(&mut value.data);
        let counted = !self.schedule.uncounted.contains(&id);
        if let Some(old) = self.store[pos].take() {
            if counted {
                self.live -= old.spec.bytes();
            }
        }
        if counted {
            self.live += value.spec.bytes();
        }
        self.peak = self.peak.max(self.live);
        self.store[pos] = Some(value);
        self.computed[pos] = true;
        Ok(())
    }

    fn step(&mut self) -> Result<bool> {
        let step = self.schedule.steps[self.cursor];
        let pos = self.pos(step.node)?;
        let node = &self.graph.nodes[pos];
        match step.action {
            Action::FreeAfterLastUse => {
                let old = self.store[pos].take().ok_or(Error::UseAfterFree { consumer: step.node, value: step.node })?;
                if !self.schedule.uncounted.contains(&step.node) {
                    self.live -= old.spec.bytes();
                }
            }
            Action::Compute | Action::Recompute => {
                if let OpKind::AllToAll(_) = node.kind {
                    self.status = Status::Blocked(step.node);
                    return Ok(false);
                }
                let ins = node.inputs.iter().map(|&i| self.read(node.id, i)).collect::<Result<Vec<_>>>()?;
                let value = ops::eval(node, &ins, self.rank)?;
                self.insert(step.node, value)?;
            }
        }
        self.cursor += 1;
        Ok(true)
    }

    /// Runs until the next collective or the end of the schedule.
    pub(crate) fn advance(&mut self) {
        if matches!(self.status, Status::Done | Status::Failed(_)) {
            return;
        }
        self.status = Status::Running;
        while self.cursor < self.schedule.steps.len() {
            match self.step() {
                Ok(true) => {}
                Ok(false) => return,
                Err(e) => {
                    self.status = Status::Failed(e);
                    return;
                }
            }
        }
        self.status = Status::Done;
    }

    pub(crate) fn finish_collective(&mut self, value: TensorValue) -> Result<()> {
        let Status::Blocked(node) = self.status else { unreachable!() };
        self.insert(node, value)?;
        self.cursor += 1;
        self.status = Status::Running;
        Ok(())
    }

    pub(crate) fn finish(self) -> Result<RankOutput> {
        let outputs = self
            .graph
            .outputs
            .iter()
            .map(|&o| self.read(o, o).cloned())
            .collect::<Result<Vec<_>>>()?;
        Ok(RankOutput { outputs, peak_bytes: self.peak })
    }
}

/// Evaluates every node in order on a single device and returns the outputs.
pub fn execute(g: &Graph, bindings: &Bindings, precision: Precision) -> Result<Vec<TensorValue>> {
    let schedule = ExecutionSchedule::eager(g);
    let mut group = DeviceGroup::new(1);
    let mut out = group.run(g, std::slice::from_ref(&schedule), std::slice::from_ref(bindings), precision)?;
    Ok(out.pop().unwrap().outputs)
}


mod plans;
pub use plans::{check_equivalence, 
    execute_sp, execute_with_plan, finite_diff_check, gather_outputs, shard_bindings, sp_equivalence,
    EquivalenceReport, FiniteDiffReport, PlanRun,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dims::ModelDims;
    use crate::ir::{build_transformer_graph, lower, AxisTag::*, EwOp, Level};

    #[test]
    fn reshape_is_identity() {
        let mut g = Graph::new(Level::High);
        let x = g.push(OpKind::Input, vec![], TensorSpec::of(&[(Sequence, 2), (Model, 3)]));
        let y = g.push(OpKind::Reshape, vec![x], TensorSpec::of(&[(Free, 6)]));
        g.inputs = vec![x];
        g.outputs = vec![y];
        let b = random_bindings(&g, 3);
        let out = execute(&g, &b, Precision::F64).unwrap();
        assert_eq!(out[0].data, b[&x].data);
    }

    #[test]
    fn single_token_attention_returns_v() {
        let mut g = Graph::new(Level::High);
        let qkv = g.push(
            OpKind::Input,
            vec![],
            TensorSpec::of(&[(Batch, 1), (Sequence, 1), (Free, 3), (Heads, 2), (HeadDim, 2)]),
        );
        let mask = g.push(OpKind::CausalMaskIndex, vec![], TensorSpec::of(&[(Sequence, 1), (Free, 1)]));
        let att = g.push(
            OpKind::AttentionCore,
            vec![qkv, mask],
            TensorSpec::of(&[(Batch, 1), (Sequence, 1), (Heads, 2), (HeadDim, 2)]),
        );
        g.inputs = vec![qkv];
        g.outputs = vec![att];
        let mut b = Bindings::new();
        b.insert(qkv, TensorValue::from_fn(g.spec(qkv).clone(), |i| i as f64 + 1.0));
        let out = execute(&g, &b, Precision::F64).unwrap();
        assert_eq!(out[0].data, vec![9.0, 10.0, 11.0, 12.0]);
    }

    #[test]
    fn high_and_low_agree() {
        for (seed, dims) in [
            (1, ModelDims::new(1, 5, 2, 3, 8, 1).with_vocab(9)),
            (2, ModelDims::new(2, 4, 4, 2, 6, 2).with_vocab(5)),
        ] {
            let high = build_transformer_graph(&dims).unwrap();
            let low = lower(&high).unwrap();
            let b = random_bindings(&high, seed);
            let oh = execute(&high, &b, Precision::F64).unwrap();
            let ol = execute(&low, &remap_bindings(&high, &low, &b), Precision::F64).unwrap();
            for (x, y) in ol.iter().zip(&oh) {
                assert!(x.rel_err(y) <= 1e-12, "rel err {}", x.rel_err(y));
            }
        }
    }

    #[test]
    fn split_concat_round_trip() {
        let t = TensorValue::from_fn(TensorSpec::of(&[(Batch, 2), (Sequence, 4), (Model, 3)]), |i| i as f64);
        let parts = t.split(Sequence, 2);
        assert_eq!(parts[1].data[0], 6.0);
        assert_eq!(TensorValue::concat(&parts, Sequence), t);
    }

    #[test]
    fn dump_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let t = TensorValue::from_fn(TensorSpec::of(&[(Sequence, 3), (Model, 2)]), |i| i as f64 * 0.1);
        let p = dir.path().join("t.bin");
        t.dump(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap().len(), 48);
        assert_eq!(TensorValue::load(&p).unwrap(), t);
    }

    #[test]
    fn freed_value_read_fails_loudly() {
        let mut g = Graph::new(Level::Low);
        let spec = TensorSpec::of(&[(Model, 2)]);
        let x = g.push(OpKind::Input, vec![], spec.clone());
        let a = g.push(OpKind::Elementwise(EwOp::Silu), vec![x], spec.clone());
        let b = g.push(OpKind::Elementwise(EwOp::Silu), vec![a], spec);
        g.inputs = vec![x];
        g.outputs = vec![b];
        let sched = ExecutionSchedule {
            steps: vec![
                Step { node: a, action: Action::Compute },
                Step { node: a, action: Action::FreeAfterLastUse },
                Step { node: b, action: Action::Compute },
            ],
            retained: Default::default(),
            uncounted: Default::default(),
        };
        let bind = random_bindings(&g, 0);
        let err = DeviceGroup::new(1)
            .run(&g, std::slice::from_ref(&sched), std::slice::from_ref(&bind), Precision::F64)
            .unwrap_err();
        assert!(matches!(err, Error::UseAfterFree { consumer: 2, value: 1 }));
    }
}
