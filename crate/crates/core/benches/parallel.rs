use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use seqcomp::ac_pass::{brute_force_cut, capacity, AcMode};
use seqcomp::executor::{sp_equivalence, Precision};
use seqcomp::parallel::Parallelism;
use seqcomp::testgen::random_joint_graph;
use seqcomp::ModelDims;

const MODES: [(&str, Parallelism); 2] = [("sequential", Parallelism::Sequential), ("parallel", Parallelism::Parallel)];

fn ranks(c: &mut Criterion) {
    let dims = ModelDims::new(1, 64, 8, 8, 64, 2).with_vocab(32);
    let mut g = c.benchmark_group("sp_equivalence");
    g.sample_size(10);
    for p in [2, 4, 8] {
        for (name, par) in MODES {
            g.bench_with_input(BenchmarkId::new(name, p), &p, |b, &p| {
                b.iter(|| sp_equivalence(&dims, p, 0, Precision::F64, par).unwrap())
            });
        }
    }
    g.finish();
}

fn oracle(c: &mut Criterion) {
    let j = random_joint_graph(7, 16);
    let mut g = c.benchmark_group("brute_force_cut");
    for (name, par) in MODES {
        g.bench_function(name, |b| b.iter(|| brute_force_cut(&j, AcMode::Conservative, &capacity, par)));
    }
    g.finish();
}

criterion_group!(benches, ranks, oracle);
criterion_main!(benches);
