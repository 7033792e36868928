use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use ndarray::Array2;
use rand::Rng as _;

use horde_core::data::{gen_efcir, uniform_probs, ClassPools, EfcirParams, ScenarioKind};
use horde_core::nn::{cross_entropy_loss, MlpNet, MlpSpec};
use horde_core::prototypes::{project_pseudo_feature, EstimationHeuristic, EstimationKind, PrototypeStore};
use horde_core::rng::stream;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = stream(seed, "bench-input");
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("mlp");
    for (name, spec) in [("full", MlpSpec::full(64)), ("slim", MlpSpec::slim(64))] {
        let mut net = MlpNet::new(&spec, &mut stream(1, "bench-net")).unwrap();
        let x = random_matrix(32, 64, 2);
        let labels: Vec<usize> = (0..32).map(|i| i % spec.embedding_dim).collect();
        group.bench_function(format!("forward_{name}_b32"), |b| b.iter(|| net.infer(&black_box(x.view())).unwrap()));
        group.bench_function(format!("forward_backward_{name}_b32"), |b| {
            b.iter(|| {
                net.zero_grad();
                let trace = net.forward(&x.view()).unwrap();
                let (_, grad) = cross_entropy_loss(&trace.output.view(), &labels).unwrap();
                net.backward(&trace, &grad)
            })
        });
    }
    group.finish();
}

fn projection(c: &mut Criterion) {
    let dims = [64, 20, 20, 20];
    let mut store = PrototypeStore::new();
    for &d in &dims {
        store.add_slot(d);
    }
    for class in 0..20 {
        for (slot, &d) in dims.iter().enumerate() {
            let emb = random_matrix(30, d, 100 + class as u64 * 7 + slot as u64);
            store.update(slot, class, &emb.view()).unwrap();
        }
    }
    let feature = random_matrix(1, store.total_dim(), 5).row(0).to_owned();
    let heuristic = EstimationHeuristic::new(EstimationKind::OriginalFeatures);
    c.bench_function("project_pseudo_feature_124d", |b| {
        let mut rng = stream(3, "bench-proj");
        b.iter(|| project_pseudo_feature(&feature.view(), 0, 7, &store, &heuristic, &mut rng).unwrap())
    });
}

fn scenario_gen(c: &mut Criterion) {
    let pools: ClassPools = (0..100).map(|c| (c, (c * 500..c * 500 + 500).collect())).collect();
    let probs = uniform_probs(&pools, 0.15);
    c.bench_function("gen_efcir_u_100c_30t", |b| {
        b.iter_batched(
            || EfcirParams::new(50, 30, 2000),
            |params| gen_efcir(&pools, params, &probs, ScenarioKind::EfcirUniform, 1).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, forward_backward, projection, scenario_gen);
criterion_main!(benches);
